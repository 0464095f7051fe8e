"""Tabular flow data model: feature schemas, raw flow tables and CSV ingestion."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from efc.errors import ConfigError, DataFileError, ValidationError

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
SYMBOLIC = "symbolic"
FEATURE_KINDS = (CONTINUOUS, SYMBOLIC)

# Open-set verdict. Never allowed as a training label.
SUSPICIOUS = "suspicious"


@dataclass(frozen=True)
class FeatureDescriptor:
    name: str
    kind: str
    position: int

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ConfigError(f"feature {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class DatasetSchema:
    """Which CSV columns are features, which is the label, which are ignored.

    ``label_aliases`` rewrites raw label text before use (CIDDS-001 marks
    normal traffic with ``---`` in its attack-type column).
    """

    features: tuple[FeatureDescriptor, ...]
    label_column: str
    dropped_columns: tuple[str, ...] = ()
    label_aliases: dict[str, str] = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        names = [f.name for f in self.features]
        dupes = [n for n, c in Counter(names).items() if c > 1]
        if dupes:
            raise ConfigError(f"duplicate feature names: {dupes}")
        if [f.position for f in self.features] != list(range(len(self.features))):
            raise ConfigError("feature positions must be 0..m-1 in order")
        if self.label_column in names:
            raise ConfigError(f"label column {self.label_column!r} is also a feature")
        overlap = set(self.dropped_columns) & set(names)
        if overlap:
            raise ConfigError(f"columns both dropped and used as features: {sorted(overlap)}")

    @classmethod
    def from_columns(cls, columns: Sequence[tuple[str, str]], label_column: str,
                     dropped_columns: Iterable[str] = (), label_aliases=None,
                     name: str = "custom") -> "DatasetSchema":
        features = tuple(FeatureDescriptor(n, k, p) for p, (n, k) in enumerate(columns))
        return cls(features, label_column, tuple(dropped_columns),
                   dict(label_aliases or {}), name)

    @property
    def m(self) -> int:
        return len(self.features)

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def kinds(self) -> list[str]:
        return [f.kind for f in self.features]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "label_column": self.label_column,
            "dropped_columns": list(self.dropped_columns),
            "label_aliases": dict(self.label_aliases),
            "features": [{"name": f.name, "kind": f.kind} for f in self.features],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        try:
            cols = [(f["name"], f.get("kind", CONTINUOUS)) for f in d["features"]]
            return cls.from_columns(cols, d["label_column"], d.get("dropped_columns", ()),
                                    d.get("label_aliases"), d.get("name", "custom"))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed schema description: missing {exc}") from exc


# NetFlow export of CIDDS-001 (OpenStack, weeks 1-4). Eleven NetFlow
# features; the three identifier-like ones are dropped along with the
# auxiliary annotation columns.
_CIDDS001_FEATURES = [
    ("Duration", CONTINUOUS),
    ("Proto", SYMBOLIC),
    ("Src Pt", CONTINUOUS),
    ("Dst Pt", CONTINUOUS),
    ("Packets", CONTINUOUS),
    ("Bytes", CONTINUOUS),
    ("Flows", CONTINUOUS),
    ("Flags", SYMBOLIC),
]
_CIDDS001_DROPPED = ["Date first seen", "Src IP Addr", "Dst IP Addr",
                     "Tos", "class", "attackID", "attackDescription"]

# CICFlowMeter columns of the CICIDS2017 labelled flow CSVs, in file order.
# The file repeats "Fwd Header Length"; the reader renames the second one.
_CICIDS2017_COLUMNS = [
    "Flow ID", "Source IP", "Source Port", "Destination IP", "Destination Port",
    "Protocol", "Timestamp", "Flow Duration", "Total Fwd Packets",
    "Total Backward Packets", "Total Length of Fwd Packets",
    "Total Length of Bwd Packets", "Fwd Packet Length Max", "Fwd Packet Length Min",
    "Fwd Packet Length Mean", "Fwd Packet Length Std", "Bwd Packet Length Max",
    "Bwd Packet Length Min", "Bwd Packet Length Mean", "Bwd Packet Length Std",
    "Flow Bytes/s", "Flow Packets/s", "Flow IAT Mean", "Flow IAT Std", "Flow IAT Max",
    "Flow IAT Min", "Fwd IAT Total", "Fwd IAT Mean", "Fwd IAT Std", "Fwd IAT Max",
    "Fwd IAT Min", "Bwd IAT Total", "Bwd IAT Mean", "Bwd IAT Std", "Bwd IAT Max",
    "Bwd IAT Min", "Fwd PSH Flags", "Bwd PSH Flags", "Fwd URG Flags", "Bwd URG Flags",
    "Fwd Header Length", "Bwd Header Length", "Fwd Packets/s", "Bwd Packets/s",
    "Min Packet Length", "Max Packet Length", "Packet Length Mean",
    "Packet Length Std", "Packet Length Variance", "FIN Flag Count", "SYN Flag Count",
    "RST Flag Count", "PSH Flag Count", "ACK Flag Count", "URG Flag Count",
    "CWE Flag Count", "ECE Flag Count", "Down/Up Ratio", "Average Packet Size",
    "Avg Fwd Segment Size", "Avg Bwd Segment Size", "Fwd Header Length.1",
    "Fwd Avg Bytes/Bulk", "Fwd Avg Packets/Bulk", "Fwd Avg Bulk Rate",
    "Bwd Avg Bytes/Bulk", "Bwd Avg Packets/Bulk", "Bwd Avg Bulk Rate",
    "Subflow Fwd Packets", "Subflow Fwd Bytes", "Subflow Bwd Packets",
    "Subflow Bwd Bytes", "Init_Win_bytes_forward", "Init_Win_bytes_backward",
    "act_data_pkt_fwd", "min_seg_size_forward", "Active Mean", "Active Std",
    "Active Max", "Active Min", "Idle Mean", "Idle Std", "Idle Max", "Idle Min",
]
_CICIDS2017_DROPPED = ["Flow ID", "Source IP", "Destination IP", "Timestamp"]

WEB_ATTACK_LABELS = ["Web Attack - Brute Force", "Web Attack - XSS",
                     "Web Attack - Sql Injection"]


def builtin_schema(dataset_id: str) -> DatasetSchema:
    """Return the column profile for a known public dataset.

    >>> builtin_schema("cidds001").m
    8
    """
    if dataset_id == "cidds001":
        return DatasetSchema.from_columns(_CIDDS001_FEATURES, "attackType", _CIDDS001_DROPPED,
                                          {"---": "normal"}, name="cidds001")
    if dataset_id == "cicids2017":
        cols = [(c, CONTINUOUS) for c in _CICIDS2017_COLUMNS if c not in _CICIDS2017_DROPPED]
        return DatasetSchema.from_columns(cols, "Label", _CICIDS2017_DROPPED, name="cicids2017")
    raise ConfigError(f"unknown dataset profile {dataset_id!r}; known profiles: "
                      f"{sorted(BUILTIN_PROFILES)}")


BUILTIN_PROFILES = ("cicids2017", "cidds001")


def load_schema(spec: str | Path) -> DatasetSchema:
    """Resolve ``--schema``: a builtin profile name or a JSON sidecar path."""
    spec = str(spec)
    if spec in BUILTIN_PROFILES:
        return builtin_schema(spec)
    path = Path(spec)
    if not path.exists():
        if path.suffix:
            raise DataFileError(f"schema file not found: {path}")
        return builtin_schema(spec)
    try:
        return DatasetSchema.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def save_schema(schema: DatasetSchema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True, eq=False)
class RawFlowTable:
    """Ingested flows.

    ``cells`` keeps the original text of every feature cell (n x m, object
    dtype) so a table can be written back unchanged. ``columns`` holds the
    parsed value arrays: float64 for continuous features, str for symbolic.
    """

    schema: DatasetSchema
    cells: np.ndarray
    columns: tuple[np.ndarray, ...]
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        if self.cells.shape != (n, self.schema.m):
            raise ValidationError(f"cell block has shape {self.cells.shape}, "
                                  f"expected ({n}, {self.schema.m})")
        if self.schema.m < 2:
            raise ValidationError("at least two features are required")
        if SUSPICIOUS in set(self.labels.tolist()):
            raise ValidationError(f"label {SUSPICIOUS!r} is reserved for the open-set verdict")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def m(self) -> int:
        return self.schema.m

    def class_counts(self) -> dict[str, int]:
        return dict(Counter(self.labels.tolist()))

    def take(self, index) -> "RawFlowTable":
        index = np.asarray(index)
        return RawFlowTable(self.schema, self.cells[index],
                            tuple(c[index] for c in self.columns), self.labels[index])

    def with_labels(self, labels) -> "RawFlowTable":
        return RawFlowTable(self.schema, self.cells, self.columns,
                            np.asarray(labels, dtype=object))

    @classmethod
    def from_values(cls, schema: DatasetSchema, values: Sequence[Sequence],
                    labels: Sequence[str]) -> "RawFlowTable":
        """Build a table from in-memory rows (numbers or text per cell)."""
        cells = np.empty((len(labels), schema.m), dtype=object)
        for r, row in enumerate(values):
            if len(row) != schema.m:
                raise ValidationError(f"row {r}: {len(row)} values, expected {schema.m}")
            cells[r] = [_cell_text(v) for v in row]
        labels = np.array([str(l).strip() for l in labels], dtype=object)
        return cls(schema, cells, _parse_columns(schema, cells, clip_nonfinite=False), labels)


def _cell_text(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


_SUFFIXES = {"K": 1e3, "M": 1e6, "G": 1e9}


def parse_number(text: str) -> float:
    """Parse a numeric cell. Accepts NetFlow-style magnitude suffixes ("1.2 M")."""
    s = text.strip()
    try:
        return float(s)
    except ValueError:
        if s and s[-1] in _SUFFIXES:
            return float(s[:-1].strip()) * _SUFFIXES[s[-1]]
        raise


def _parse_columns(schema: DatasetSchema, cells: np.ndarray, clip_nonfinite: bool,
                   first_line: int = 0) -> tuple[np.ndarray, ...]:
    columns = []
    for f in schema.features:
        raw = cells[:, f.position]
        if f.kind == SYMBOLIC:
            col = np.array([c.strip() for c in raw], dtype=object)
            empty = np.flatnonzero(col == "")
            if len(empty):
                raise ValidationError(f"empty cell at row {empty[0] + first_line}, "
                                      f"column {f.name!r}")
            columns.append(col)
            continue
        col = np.empty(len(raw))
        for r, c in enumerate(raw):
            try:
                col[r] = parse_number(c)
            except ValueError:
                raise ValidationError(f"unparseable value {c!r} at row {r + first_line}, "
                                      f"column {f.name!r}") from None
        bad = ~np.isfinite(col)
        if bad.any():
            if not clip_nonfinite:
                r = int(np.flatnonzero(bad)[0])
                raise ValidationError(f"non-finite value {raw[r]!r} at row {r + first_line}, "
                                      f"column {f.name!r} (see --clip-nonfinite)")
            finite = col[~bad]
            col[bad] = finite.max() if len(finite) else 0.0
        columns.append(col)
    return tuple(columns)


def _dedupe_header(header: list[str]) -> list[str]:
    seen: Counter = Counter()
    out = []
    for name in header:
        name = name.strip()
        out.append(f"{name}.{seen[name]}" if seen[name] else name)
        seen[name] += 1
    return out


def read_csv(path: str | Path, schema: DatasetSchema, clip_nonfinite: bool = False,
             require_labels: bool = True) -> RawFlowTable:
    """Read a flow CSV (header row, comma separated, UTF-8).

    Header names are trimmed; a repeated name gets a ``.1``, ``.2`` suffix.
    Columns the schema does not mention are ignored with a warning. When
    ``require_labels`` is false and the label column is absent, every row
    is labelled with the empty string.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataFileError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = _dedupe_header(next(reader))
        except StopIteration:
            raise ValidationError(f"{path}: empty file, no header row") from None
        pos = {name: k for k, name in enumerate(header)}
        missing = [f for f in schema.feature_names if f not in pos]
        if missing:
            raise ValidationError(f"{path}: missing feature columns {missing}")
        has_label = schema.label_column in pos
        if require_labels and not has_label:
            raise ValidationError(f"{path}: missing label column {schema.label_column!r}")
        known = set(schema.feature_names) | set(schema.dropped_columns) | {schema.label_column}
        extra = [h for h in header if h not in known]
        if extra:
            logger.warning("%s: ignoring columns not in schema: %s", path, extra)

        feat_idx = [pos[f] for f in schema.feature_names]
        label_idx = pos.get(schema.label_column)
        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ValidationError(f"{path}: row {lineno} has {len(rec)} cells, "
                                      f"header has {len(header)}")
            rows.append([rec[k] for k in feat_idx])
            labels.append(rec[label_idx].strip() if has_label else "")

    cells = np.empty((len(rows), schema.m), dtype=object)
    if rows:
        cells[:] = rows
    aliases = schema.label_aliases
    labels = np.array([aliases.get(l, l) for l in labels], dtype=object)
    columns = _parse_columns(schema, cells, clip_nonfinite, first_line=2)
    return RawFlowTable(schema, cells, columns, labels)


def write_csv(table: RawFlowTable, path: str | Path) -> None:
    """Write features (original cell text) and labels back out as CSV."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(table.schema.feature_names + [table.schema.label_column])
            for row, label in zip(table.cells, table.labels):
                w.writerow(list(row) + [label])
    except OSError as exc:
        raise DataFileError(f"cannot write {path}: {exc.strerror}") from exc


def merge_labels(table: RawFlowTable, source_labels: Sequence[str],
                 target_label: str) -> RawFlowTable:
    """Relabel every row carrying one of ``source_labels`` as ``target_label``."""
    present = set(table.labels.tolist())
    sources = [s.strip() for s in source_labels]
    for s in sources:
        if s not in present:
            raise ValidationError(f"label {s!r} not present in table")
    target = target_label.strip()
    if target == SUSPICIOUS:
        raise ValidationError(f"label {SUSPICIOUS!r} is reserved")
    mask = np.isin(table.labels, np.array(sources, dtype=object))
    labels = table.labels.copy()
    labels[mask] = target
    return table.with_labels(labels)


def parse_merge_rule(rule: str) -> tuple[list[str], str]:
    """Parse ``"A,B,C=Target"`` into (["A", "B", "C"], "Target")."""
    if "=" not in rule:
        raise ConfigError(f"merge rule {rule!r} must look like 'A,B=Target'")
    lhs, target = rule.rsplit("=", 1)
    sources = [s for s in (x.strip() for x in lhs.split(",")) if s]
    if not sources or not target.strip():
        raise ConfigError(f"merge rule {rule!r} must look like 'A,B=Target'")
    return sources, target.strip()


def sidecar_path(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.name + ".schema.json")


def concat_tables(tables: Sequence[RawFlowTable]) -> RawFlowTable:
    """Stack tables that share one schema (e.g. several capture days)."""
    if not tables:
        raise ValidationError("no tables to concatenate")
    if len(tables) == 1:
        return tables[0]
    schema = tables[0].schema
    for t in tables[1:]:
        if t.schema.feature_names != schema.feature_names or t.schema.kinds != schema.kinds:
            raise ValidationError("cannot concatenate tables with different schemas")
    return RawFlowTable(
        schema,
        np.concatenate([t.cells for t in tables]),
        tuple(np.concatenate(cols) for cols in zip(*(t.columns for t in tables))),
        np.concatenate([t.labels for t in tables]),
    )
