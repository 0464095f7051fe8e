"""Multi-class energy-based classification with a suspicious (open-set) verdict."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from efc.errors import ValidationError
from efc.potts import ClassModel, fit_class
from efc.preprocess import DiscretizedTable, PreprocessorState, check_training_labels, transform
from efc.schema import SUSPICIOUS, RawFlowTable

logger = logging.getLogger(__name__)

NORMAL = "normal"
ABNORMAL = "abnormal"


@dataclass(frozen=True, eq=False)
class MultiClassModel:
    """Class models in training order, sharing one alphabet and preprocessor.

    ``preprocessor`` is ``None`` when the model was fitted on symbols that
    were already discretized.
    """

    classes: tuple[ClassModel, ...]
    preprocessor: PreprocessorState | None
    Q: int
    m: int
    alpha: float
    hyperparameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.classes:
            raise ValidationError("a multi-class model needs at least one class")
        labels = self.labels
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate class labels: {labels}")
        if SUSPICIOUS in labels:
            raise ValidationError(f"{SUSPICIOUS!r} cannot be a trained class")
        for c in self.classes:
            if (c.m, c.Q, c.alpha) != (self.m, self.Q, self.alpha):
                raise ValidationError(f"class {c.label!r} has (m, Q, alpha) = "
                                      f"{(c.m, c.Q, c.alpha)}, model has "
                                      f"{(self.m, self.Q, self.alpha)}")
        if self.preprocessor is not None and (self.preprocessor.m, self.preprocessor.Q) != (self.m, self.Q):
            raise ValidationError("preprocessor alphabet or width disagrees with the class models")

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.classes]

    @property
    def thresholds(self) -> np.ndarray:
        return np.array([c.threshold for c in self.classes])


def fit_multiclass(table: DiscretizedTable, alpha: float,
                   preprocessor: PreprocessorState | None = None,
                   hyperparameters: dict | None = None) -> MultiClassModel:
    """Fit one class model per label, classes ordered by first appearance."""
    if table.n == 0:
        raise ValidationError("cannot train on an empty table")
    check_training_labels(table.labels)
    order = list(dict.fromkeys(table.labels.tolist()))
    classes = []
    for label in order:
        rows = table.rows_of(label)
        model = fit_class(rows, table.Q, alpha, label=label)
        logger.info("class %r: n=%d threshold=%.6g", label, len(rows), model.threshold)
        classes.append(model)
    hp = {"Q": table.Q, "alpha": alpha}
    hp.update(hyperparameters or {})
    return MultiClassModel(tuple(classes), preprocessor, table.Q, table.m, alpha, hp)


@dataclass(frozen=True)
class EnergyVector:
    energies: np.ndarray
    argmin: int
    verdict: str

    @property
    def min_energy(self) -> float:
        return float(self.energies[self.argmin])


class Predictions(Sequence):
    """Batch classification result; indexing yields :class:`EnergyVector`.

    ``energies`` has shape (n, l) with columns in class order.
    """

    def __init__(self, energies: np.ndarray, argmin: np.ndarray, verdicts: np.ndarray,
                 labels: Sequence[str]):
        self.energies = energies
        self.argmin = argmin
        self.verdicts = verdicts
        self.labels = list(labels)

    def __len__(self) -> int:
        return len(self.verdicts)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[j] for j in range(*k.indices(len(self)))]
        return EnergyVector(self.energies[k], int(self.argmin[k]), str(self.verdicts[k]))

    def __iter__(self) -> Iterator[EnergyVector]:
        return (self[k] for k in range(len(self)))

    @property
    def min_energies(self) -> np.ndarray:
        return self.energies[np.arange(len(self)), self.argmin]


def _check_flows(flows: np.ndarray, model: MultiClassModel) -> np.ndarray:
    X = np.asarray(flows)
    if X.ndim != 2 or X.shape[1] != model.m:
        raise ValidationError(f"flows must have {model.m} features, got shape {X.shape}")
    if X.size and (X.min() < 1 or X.max() > model.Q):
        raise ValidationError(f"flow symbols must lie in 1..{model.Q}")
    return X


def classify_symbols(flows, model: MultiClassModel) -> Predictions:
    """Classify rows of symbols: lowest energy wins if under its class threshold."""
    X = _check_flows(flows, model)
    n = X.shape[0]
    energies = np.empty((n, len(model.classes)))
    for s, c in enumerate(model.classes):
        energies[:, s] = c.energies(X)
    # np.argmin returns the first minimum: ties go to the earliest class
    argmin = energies.argmin(axis=1) if n else np.zeros(0, dtype=np.int64)
    lowest = energies[np.arange(n), argmin]
    accepted = lowest <= model.thresholds[argmin]
    labels = np.array(model.labels, dtype=object)
    verdicts = np.where(accepted, labels[argmin], SUSPICIOUS).astype(object)
    return Predictions(energies, argmin, verdicts, model.labels)


def classify_batch(table: DiscretizedTable, model: MultiClassModel) -> Predictions:
    if table.Q != model.Q:
        raise ValidationError(f"table alphabet Q={table.Q} does not match model Q={model.Q}")
    return classify_symbols(table.symbols, model)


def classify(flow, model: MultiClassModel) -> EnergyVector:
    return classify_symbols(np.asarray(flow)[None, :], model)[0]


def classify_single(flow, benign: ClassModel) -> str:
    """Single-class rule: normal iff the energy does not exceed the threshold."""
    return NORMAL if benign.energy(flow) <= benign.threshold else ABNORMAL


def classify_table(table: RawFlowTable, model: MultiClassModel) -> Predictions:
    """Preprocess raw flows with the model's fitted encoders, then classify."""
    if model.preprocessor is None:
        raise ValidationError("model was trained on pre-discretized symbols and has no "
                              "preprocessor; pass a DiscretizedTable instead")
    return classify_batch(transform(table, model.preprocessor), model)
