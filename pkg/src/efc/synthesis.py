"""Seeded synthetic flows with known per-class symbol distributions.

Used as ground truth for tests: classes are products of per-feature
categorical distributions over ``1..Q``, optionally with one copy rule
(feature ``j`` repeats feature ``i`` with probability ``rho``) to plant a
pairwise correlation.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from efc.errors import ConfigError, DataFileError, ValidationError
from efc.preprocess import DiscretizedTable
from efc.schema import CONTINUOUS, DatasetSchema, RawFlowTable


@dataclass(frozen=True)
class PairRule:
    source: int
    target: int
    rho: float


@dataclass(frozen=True, eq=False)
class ClassSpec:
    label: str
    distributions: np.ndarray  # (m, Q), rows sum to 1
    rows: int


@dataclass(frozen=True, eq=False)
class SyntheticSpec:
    classes: tuple[ClassSpec, ...]
    Q: int
    seed: int = 0
    pair_rule: PairRule | None = None

    def __post_init__(self):
        if not self.classes:
            raise ValidationError("synthetic spec has no classes")
        labels = [c.label for c in self.classes]
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate class labels in synthetic spec: {labels}")
        m = self.classes[0].distributions.shape[0]
        for c in self.classes:
            d = c.distributions
            if d.shape != (m, self.Q):
                raise ValidationError(f"class {c.label!r}: distributions shape {d.shape}, "
                                      f"expected {(m, self.Q)}")
            if np.any(d < 0) or np.any(np.abs(d.sum(axis=1) - 1) > 1e-9):
                raise ValidationError(f"class {c.label!r}: each feature distribution must be "
                                      "nonnegative and sum to 1")
            if c.rows < 0:
                raise ValidationError(f"class {c.label!r}: negative row count")
        r = self.pair_rule
        if r is not None:
            if not 0 <= r.rho <= 1:
                raise ValidationError(f"pair rule rho must be in [0, 1], got {r.rho}")
            if r.source == r.target or not (0 <= r.source < m and 0 <= r.target < m):
                raise ValidationError(f"pair rule features ({r.source}, {r.target}) invalid for m={m}")

    @property
    def m(self) -> int:
        return self.classes[0].distributions.shape[0]

    def to_dict(self) -> dict:
        d = {
            "Q": self.Q,
            "seed": self.seed,
            "classes": [{"label": c.label, "rows": c.rows,
                         "distributions": c.distributions.tolist()} for c in self.classes],
        }
        if self.pair_rule:
            r = self.pair_rule
            d["pair_rule"] = {"source": r.source, "target": r.target, "rho": r.rho}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        if "separable" in d:
            return separable_spec(**d["separable"])
        try:
            classes = tuple(ClassSpec(str(c["label"]), np.asarray(c["distributions"], dtype=float),
                                      int(c["rows"])) for c in d["classes"])
            rule = d.get("pair_rule")
            return cls(classes, int(d["Q"]), int(d.get("seed", 0)),
                       PairRule(int(rule["source"]), int(rule["target"]), float(rule["rho"]))
                       if rule else None)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed synthetic spec: {exc}") from exc


def load_spec(path: str | Path) -> SyntheticSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFileError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return SyntheticSpec.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def _class_rng(seed: int, label: str) -> np.random.Generator:
    # keyed by label so adding or removing a class leaves the others unchanged
    return np.random.default_rng([seed, zlib.crc32(label.encode("utf-8"))])


def _sample_class(c: ClassSpec, rule: PairRule | None, rng: np.random.Generator) -> np.ndarray:
    m, Q = c.distributions.shape
    X = np.empty((c.rows, m), dtype=np.int64)
    for i in range(m):
        cdf = np.cumsum(c.distributions[i])
        cdf[-1] = 1.0
        X[:, i] = 1 + np.searchsorted(cdf, rng.random(c.rows), side="right")
    if rule is not None:
        copy = rng.random(c.rows) < rule.rho
        X[copy, rule.target] = X[copy, rule.source]
    return np.clip(X, 1, Q)


def generate(spec: SyntheticSpec) -> DiscretizedTable:
    """Sample every class and stack them in spec order."""
    blocks, labels = [], []
    for c in spec.classes:
        blocks.append(_sample_class(c, spec.pair_rule, _class_rng(spec.seed, c.label)))
        labels.extend([c.label] * c.rows)
    symbols = np.vstack(blocks) if blocks else np.zeros((0, spec.m), dtype=np.int64)
    return DiscretizedTable(symbols, np.array(labels, dtype=object), spec.Q)


def to_continuous(table: DiscretizedTable, seed: int = 0) -> RawFlowTable:
    """Turn symbols into reals: symbol ``s`` becomes a uniform draw from ``[s-1, s)``.

    Feature columns are named ``f0..f{m-1}``, all continuous; the label
    column is ``label``.
    """
    rng = np.random.default_rng(seed)
    values = table.symbols - 1 + rng.random(table.symbols.shape)
    schema = synthetic_schema(table.m)
    return RawFlowTable.from_values(schema, values.tolist(), table.labels.tolist())


def synthetic_schema(m: int, kind: str = CONTINUOUS) -> DatasetSchema:
    return DatasetSchema.from_columns([(f"f{i}", kind) for i in range(m)], "label",
                                      name="synthetic")


def separable_spec(n_classes: int = 3, m: int = 10, Q: int = 10, rows: int = 5000,
                   support: int = 2, mass: float = 0.9, seed: int = 0,
                   labels: Sequence[str] | None = None) -> SyntheticSpec:
    """Classes whose high-probability symbols do not overlap.

    Class ``c`` puts ``mass`` uniformly on symbols ``c*support+1 ..
    (c+1)*support`` at every feature and spreads the rest uniformly over
    all ``Q`` symbols.
    """
    if n_classes * support > Q:
        raise ValidationError(f"{n_classes} classes x {support} symbols do not fit in Q={Q}")
    labels = list(labels) if labels is not None else [f"class{c}" for c in range(n_classes)]
    if len(labels) != n_classes:
        raise ValidationError("need one label per class")
    classes = []
    for c, label in enumerate(labels):
        p = np.full(Q, (1 - mass) / Q)
        p[c * support:(c + 1) * support] += mass / support
        classes.append(ClassSpec(label, np.tile(p, (m, 1)), rows))
    return SyntheticSpec(tuple(classes), Q, seed)


def with_class(spec: SyntheticSpec, label: str, distributions: np.ndarray,
               rows: int | None = None) -> SyntheticSpec:
    """Return ``spec`` with one more class appended."""
    rows = spec.classes[0].rows if rows is None else rows
    extra = ClassSpec(label, np.asarray(distributions, dtype=float), rows)
    return SyntheticSpec(spec.classes + (extra,), spec.Q, spec.seed, spec.pair_rule)
