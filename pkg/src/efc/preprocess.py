"""Ordinal encoding, max-abs scaling and quantile discretization of flows.

Every feature ends up as a symbol in ``1..Q``. Symbol ``Q`` doubles as the
reference state of the Potts model and as the bucket for symbolic values
never seen during fitting.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from efc.errors import ValidationError
from efc.schema import CONTINUOUS, SYMBOLIC, SUSPICIOUS, FeatureDescriptor, RawFlowTable


@dataclass(frozen=True, eq=False)
class ContinuousBins:
    scale: float
    edges: np.ndarray


@dataclass(frozen=True, eq=False)
class SymbolCodes:
    codes: dict[str, int]


@dataclass(frozen=True, eq=False)
class PreprocessorState:
    features: tuple[FeatureDescriptor, ...]
    encoders: tuple[ContinuousBins | SymbolCodes, ...]
    Q: int
    fitted_on: int

    @property
    def m(self) -> int:
        return len(self.features)

    def to_dict(self) -> dict:
        enc = []
        for f, e in zip(self.features, self.encoders):
            if isinstance(e, ContinuousBins):
                enc.append({"name": f.name, "kind": f.kind, "scale": e.scale,
                            "edges": [float(x) for x in e.edges]})
            else:
                enc.append({"name": f.name, "kind": f.kind, "codes": e.codes})
        return {"Q": self.Q, "fitted_on": self.fitted_on, "features": enc}

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessorState":
        features, encoders = [], []
        for pos, e in enumerate(d["features"]):
            features.append(FeatureDescriptor(e["name"], e["kind"], pos))
            if e["kind"] == CONTINUOUS:
                edges = np.asarray(e["edges"], dtype=float)
                if np.any(np.diff(edges) <= 0):
                    raise ValidationError(f"feature {e['name']!r}: bin edges not increasing")
                encoders.append(ContinuousBins(float(e["scale"]), edges))
            else:
                encoders.append(SymbolCodes({str(k): int(v) for k, v in e["codes"].items()}))
        return cls(tuple(features), tuple(encoders), int(d["Q"]), int(d["fitted_on"]))


@dataclass(frozen=True, eq=False)
class DiscretizedTable:
    """Symbol matrix (n x m, values in 1..Q) with one label per row."""

    symbols: np.ndarray
    labels: np.ndarray
    Q: int

    def __post_init__(self):
        s = self.symbols
        if s.ndim != 2 or s.shape[0] != len(self.labels):
            raise ValidationError(f"symbols shape {s.shape} does not match "
                                  f"{len(self.labels)} labels")
        if s.size and (s.min() < 1 or s.max() > self.Q):
            raise ValidationError(f"symbols outside 1..{self.Q}")

    @property
    def n(self) -> int:
        return self.symbols.shape[0]

    @property
    def m(self) -> int:
        return self.symbols.shape[1]

    def class_counts(self) -> dict[str, int]:
        return dict(Counter(self.labels.tolist()))

    def take(self, index) -> "DiscretizedTable":
        index = np.asarray(index, dtype=np.intp)
        return DiscretizedTable(self.symbols[index], self.labels[index], self.Q)

    def rows_of(self, label: str) -> np.ndarray:
        return self.symbols[self.labels == label]


def _nearest_rank_edges(values: np.ndarray, Q: int) -> np.ndarray:
    """Edge q is the sorted value at 1-based rank ceil(n*q/Q), q = 1..Q-1.

    Repeated edges collapse, and an edge equal to the column maximum is
    dropped because it separates nothing.
    """
    v = np.sort(values)
    n = len(v)
    q = np.arange(1, Q)
    ranks = -(-n * q // Q)  # exact integer ceil
    edges = np.unique(v[ranks - 1])
    return edges[edges < v[-1]]


def fit(table: RawFlowTable, Q: int) -> PreprocessorState:
    """Fit encoders on the pooled rows of ``table`` (all classes together)."""
    if Q < 2:
        raise ValidationError(f"alphabet size Q must be >= 2, got {Q}")
    if table.n == 0:
        raise ValidationError("cannot fit preprocessing on an empty table")
    encoders = []
    for f, col in zip(table.schema.features, table.columns):
        if f.kind == SYMBOLIC:
            codes: dict[str, int] = {}
            for v in col:
                if v not in codes:
                    codes[v] = len(codes) + 1
            encoders.append(SymbolCodes(codes))
        else:
            peak = float(np.max(np.abs(col)))
            scale = peak if peak > 0 else 1.0
            encoders.append(ContinuousBins(scale, _nearest_rank_edges(col / scale, Q)))
    return PreprocessorState(table.schema.features, tuple(encoders), Q, table.n)


def _check_compatible(features: Sequence[FeatureDescriptor], state: PreprocessorState):
    got = [(f.name, f.kind) for f in features]
    want = [(f.name, f.kind) for f in state.features]
    if got != want:
        if len(got) != len(want):
            raise ValidationError(f"schema mismatch: table has {len(got)} features, "
                                  f"preprocessor expects {len(want)}")
        bad = next(i for i, (g, w) in enumerate(zip(got, want)) if g != w)
        raise ValidationError(f"schema mismatch at feature {bad}: table has {got[bad]}, "
                              f"preprocessor expects {want[bad]}")


def transform_column(col: np.ndarray, encoder: ContinuousBins | SymbolCodes, Q: int) -> np.ndarray:
    if isinstance(encoder, ContinuousBins):
        # a tiny scale can overflow out-of-range values to +/-inf, which still clamp correctly
        with np.errstate(over="ignore"):
            scaled = col / encoder.scale
        # side="left" counts edges strictly below the value
        sym = 1 + np.searchsorted(encoder.edges, scaled, side="left")
    else:
        sym = np.fromiter((encoder.codes.get(v, Q) for v in col), dtype=np.int64, count=len(col))
    return np.clip(sym, 1, Q)


def transform(table: RawFlowTable, state: PreprocessorState) -> DiscretizedTable:
    _check_compatible(table.schema.features, state)
    symbols = np.empty((table.n, state.m), dtype=np.int64)
    for k, (col, enc) in enumerate(zip(table.columns, state.encoders)):
        symbols[:, k] = transform_column(col, enc, state.Q)
    return DiscretizedTable(symbols, table.labels.copy(), state.Q)


def fit_transform(table: RawFlowTable, Q: int) -> tuple[PreprocessorState, DiscretizedTable]:
    state = fit(table, Q)
    return state, transform(table, state)


def undersample(table: DiscretizedTable, cap: int, seed: int | Sequence[int]) -> DiscretizedTable:
    """Cut every class larger than ``cap`` down to ``cap`` random rows.

    Sampling is without replacement and seeded; surviving rows keep their
    original relative order.
    """
    if cap < 1:
        raise ValidationError(f"undersampling cap must be >= 1, got {cap}")
    rng = np.random.default_rng(seed)
    keep = []
    for label in sorted(table.class_counts()):
        idx = np.flatnonzero(table.labels == label)
        if len(idx) > cap:
            idx = rng.choice(idx, size=cap, replace=False)
        keep.append(idx)
    if not keep:
        return table
    return table.take(np.sort(np.concatenate(keep)))


def check_training_labels(labels: np.ndarray) -> None:
    if SUSPICIOUS in set(labels.tolist()):
        raise ValidationError(f"label {SUSPICIOUS!r} is reserved for the open-set verdict")
