"""Cross-validation, confusion matrices and the unknown-attack experiment.

Scoring convention for the open-set verdict: a ``suspicious`` prediction
is a false negative for the flow's true class and never a false positive
for any known class. Precision of class ``c`` is therefore
``TP_c / (flows predicted c)``.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from efc import preprocess
from efc.classifier import classify_batch, fit_multiclass
from efc.errors import ValidationError
from efc.preprocess import DiscretizedTable
from efc.schema import SUSPICIOUS, RawFlowTable

logger = logging.getLogger(__name__)

CI_Z = 1.96
SCORING_NOTE = ("suspicious predictions count as false negatives for the true class "
                "and never as false positives for a known class")
CI_NOTE = "95% interval = 1.96 x standard error across folds (normal approximation)"


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows: true known labels. Columns: the same labels, then ``suspicious``."""

    labels: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        k = len(self.labels)
        if self.counts.shape != (k, k + 1):
            raise ValidationError(f"confusion counts shape {self.counts.shape}, "
                                  f"expected {(k, k + 1)}")
        if SUSPICIOUS in self.labels:
            raise ValidationError(f"{SUSPICIOUS!r} cannot be a true label")

    @property
    def columns(self) -> tuple[str, ...]:
        return self.labels + (SUSPICIOUS,)

    @classmethod
    def from_predictions(cls, true: Sequence[str], predicted: Sequence[str],
                         labels: Sequence[str]) -> "ConfusionMatrix":
        labels = tuple(labels)
        row = {l: r for r, l in enumerate(labels)}
        col = dict(row, **{SUSPICIOUS: len(labels)})
        counts = np.zeros((len(labels), len(labels) + 1), dtype=np.int64)
        for t, p in zip(true, predicted):
            if t not in row:
                raise ValidationError(f"true label {t!r} not among {labels}")
            if p not in col:
                raise ValidationError(f"predicted label {p!r} not among {labels + (SUSPICIOUS,)}")
            counts[row[t], col[p]] += 1
        return cls(labels, counts)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.labels != other.labels:
            raise ValidationError("cannot add confusion matrices over different labels")
        return ConfusionMatrix(self.labels, self.counts + other.counts)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "columns": list(self.columns),
                "counts": self.counts.tolist()}


@dataclass(frozen=True, eq=False)
class FoldMetrics:
    labels: tuple[str, ...]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_f1: float
    weighted_f1: float
    flags: tuple[str, ...] = ()


def compute_metrics(cm: ConfusionMatrix) -> FoldMetrics:
    counts = cm.counts.astype(float)
    k = len(cm.labels)
    tp = np.diag(counts[:, :k])
    support = counts.sum(axis=1)
    predicted = counts[:, :k].sum(axis=0)
    flags = []
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    for c, label in enumerate(cm.labels):
        if predicted[c] == 0 and support[c] == 0:
            flags.append(f"{label}: no true and no predicted instances; P/R/F1 set to 0")
        elif predicted[c] == 0:
            flags.append(f"{label}: never predicted; precision set to 0")
    macro = float(f1.mean()) if k else 0.0
    weighted = float((f1 * support).sum() / support.sum()) if support.sum() > 0 else 0.0
    return FoldMetrics(cm.labels, precision, recall, f1, support.astype(np.int64),
                       macro, weighted, tuple(flags))


def stratified_folds(labels: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Fold id per row; -1 marks classes too small to split (< k rows).

    Each class is shuffled with a generator keyed by (seed, label) and dealt
    round-robin, so a class's assignment does not depend on the others.
    """
    if k < 2:
        raise ValidationError(f"need at least 2 folds, got {k}")
    folds = np.empty(len(labels), dtype=np.int64)
    for label in dict.fromkeys(labels.tolist()):
        idx = np.flatnonzero(labels == label)
        if len(idx) < k:
            folds[idx] = -1
            continue
        rng = np.random.default_rng([seed, zlib.crc32(str(label).encode("utf-8"))])
        folds[rng.permutation(idx)] = np.arange(len(idx)) % k
    return folds


def _split(folds: np.ndarray, fold: int) -> tuple[np.ndarray, np.ndarray]:
    test = np.flatnonzero((folds == fold) | (folds == -1))
    train = np.flatnonzero((folds != fold) & (folds != -1))
    return train, test


def _prepare(table, Q: int | None) -> tuple[bool, int]:
    if isinstance(table, DiscretizedTable):
        if Q is not None and Q != table.Q:
            raise ValidationError(f"table is discretized with Q={table.Q}, got Q={Q}")
        return False, table.Q
    if isinstance(table, RawFlowTable):
        return True, 30 if Q is None else Q
    raise TypeError(f"expected RawFlowTable or DiscretizedTable, got {type(table).__name__}")


@dataclass
class FoldResult:
    fold: int
    test_index: np.ndarray
    verdicts: np.ndarray
    train_counts: dict[str, int]


def run_folds(table, k: int = 5, Q: int | None = None, alpha: float = 0.5,
              cap: int | None = None, seed: int = 0,
              exclude_from_training: Sequence[str] = ()) -> Iterator[FoldResult]:
    """Train and test on each stratified fold.

    Per fold: fit the preprocessor on the training rows (raw tables only),
    undersample classes above ``cap``, fit every class model, classify the
    test rows.
    """
    raw, Q = _prepare(table, Q)
    if table.n == 0:
        raise ValidationError("cannot cross-validate an empty table")
    folds = stratified_folds(table.labels, k, seed)
    excluded = np.isin(table.labels, np.array(list(exclude_from_training), dtype=object))
    for fold in range(k):
        train, test = _split(folds, fold)
        train = train[~excluded[train]]
        if len(train) == 0:
            raise ValidationError(f"fold {fold}: no training rows left")
        tr, te = table.take(train), table.take(test)
        state = None
        if raw:
            state = preprocess.fit(tr, Q)
            tr, te = preprocess.transform(tr, state), preprocess.transform(te, state)
        if cap is not None:
            tr = preprocess.undersample(tr, cap, seed=[seed, fold])
        model = fit_multiclass(tr, alpha, state)
        verdicts = classify_batch(te, model).verdicts
        logger.info("fold %d/%d: train=%d test=%d", fold + 1, k, tr.n, te.n)
        yield FoldResult(fold, test, verdicts, tr.class_counts())


@dataclass(frozen=True, eq=False)
class MetricsReport:
    labels: tuple[str, ...]
    folds: tuple[FoldMetrics, ...]
    confusion: ConfusionMatrix
    flags: tuple[str, ...] = ()
    params: dict = field(default_factory=dict)

    def _stack(self, name: str) -> np.ndarray:
        return np.array([getattr(f, name) for f in self.folds], dtype=float)

    def mean(self, name: str):
        return self._stack(name).mean(axis=0)

    def ci95(self, name: str):
        """1.96 x standard error of the fold values."""
        x = self._stack(name)
        if len(x) < 2:
            return np.zeros_like(x[0]) if len(x) else 0.0
        return CI_Z * x.std(axis=0, ddof=1) / np.sqrt(len(x))

    @property
    def macro_f1(self) -> float:
        return float(self.mean("macro_f1"))

    @property
    def weighted_f1(self) -> float:
        return float(self.mean("weighted_f1"))

    def to_dict(self) -> dict:
        per_class = {}
        for c, label in enumerate(self.labels):
            per_class[label] = {
                name: {"mean": float(self.mean(name)[c]), "ci95": float(self.ci95(name)[c])}
                for name in ("precision", "recall", "f1")
            }
            per_class[label]["support"] = int(self.confusion.counts[c].sum())
        return {
            "scoring": SCORING_NOTE,
            "interval": CI_NOTE,
            "params": self.params,
            "labels": list(self.labels),
            "per_class": per_class,
            "macro_f1": {"mean": self.macro_f1, "ci95": float(self.ci95("macro_f1"))},
            "weighted_f1": {"mean": self.weighted_f1, "ci95": float(self.ci95("weighted_f1"))},
            "folds": [{"macro_f1": f.macro_f1, "weighted_f1": f.weighted_f1,
                       "f1": f.f1.tolist(), "flags": list(f.flags)} for f in self.folds],
            "confusion": self.confusion.to_dict(),
            "flags": list(self.flags),
        }


def _small_class_flags(table, k: int) -> list[str]:
    return [f"{label}: only {n} rows (< {k} folds); kept in every test fold, never trained"
            for label, n in table.class_counts().items() if n < k]


def cross_validate(table, k: int = 5, Q: int | None = None, alpha: float = 0.5,
                   cap: int | None = None, seed: int = 0) -> MetricsReport:
    """Stratified k-fold cross-validation of the multi-class classifier."""
    if table.n == 0:
        raise ValidationError("cannot cross-validate an empty table: no classes")
    labels = tuple(dict.fromkeys(table.labels.tolist()))
    fold_metrics, total = [], None
    for res in run_folds(table, k, Q, alpha, cap, seed):
        cm = ConfusionMatrix.from_predictions(table.labels[res.test_index], res.verdicts, labels)
        fold_metrics.append(compute_metrics(cm))
        total = cm if total is None else total + cm
    flags = _small_class_flags(table, k)
    params = {"k": k, "Q": _prepare(table, Q)[1], "alpha": alpha, "cap": cap, "seed": seed}
    return MetricsReport(labels, tuple(fold_metrics), total, tuple(flags), params)


@dataclass(frozen=True, eq=False)
class UnknownExperimentReport:
    """Where the withheld class's test flows ended up.

    ``counts`` and ``fractions`` are keyed ``benign``, ``other``,
    ``suspicious``. ``known`` scores the remaining classes exactly as a
    plain cross-validation without the withheld class would.
    """

    withheld: str
    benign: str
    counts: dict[str, int]
    by_class: dict[str, int]
    known: MetricsReport

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def fractions(self) -> dict[str, float]:
        n = self.total
        return {key: (v / n if n else 0.0) for key, v in self.counts.items()}

    def to_dict(self) -> dict:
        return {"withheld": self.withheld, "benign": self.benign, "test_rows": self.total,
                "counts": self.counts, "fractions": self.fractions,
                "predicted_as": self.by_class,
                "known_macro_f1": self.known.macro_f1,
                "known_weighted_f1": self.known.weighted_f1}


def unknown_attack_experiment(table, withheld: str, benign: str, k: int = 5,
                              Q: int | None = None, alpha: float = 0.5,
                              cap: int | None = None, seed: int = 0) -> UnknownExperimentReport:
    """Cross-validate with ``withheld`` removed from every training fold."""
    present = table.class_counts()
    if withheld not in present:
        raise ValidationError(f"withheld label {withheld!r} not present in table")
    if benign not in present:
        raise ValidationError(f"benign label {benign!r} not present in table")
    if withheld == benign:
        raise ValidationError("the withheld class must differ from the benign class")
    known_labels = tuple(l for l in dict.fromkeys(table.labels.tolist()) if l != withheld)
    counts = {"benign": 0, "other": 0, "suspicious": 0}
    by_class: dict[str, int] = {}
    fold_metrics, total = [], None
    for res in run_folds(table, k, Q, alpha, cap, seed, exclude_from_training=[withheld]):
        true = table.labels[res.test_index]
        is_withheld = true == withheld
        for v in res.verdicts[is_withheld]:
            key = "suspicious" if v == SUSPICIOUS else "benign" if v == benign else "other"
            counts[key] += 1
            by_class[v] = by_class.get(v, 0) + 1
        cm = ConfusionMatrix.from_predictions(true[~is_withheld], res.verdicts[~is_withheld],
                                              known_labels)
        fold_metrics.append(compute_metrics(cm))
        total = cm if total is None else total + cm
    params = {"k": k, "Q": _prepare(table, Q)[1], "alpha": alpha, "cap": cap, "seed": seed,
              "withheld": withheld}
    known = MetricsReport(known_labels, tuple(fold_metrics), total,
                          tuple(_small_class_flags(table, k)), params)
    return UnknownExperimentReport(withheld, benign, counts, by_class, known)
