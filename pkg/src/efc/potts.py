"""Mean-field inference of a Potts model for one traffic class.

Symbols are 1-based (``1..Q``); symbol ``Q`` is the reference state whose
fields and couplings are fixed at zero. Couplings live in a dense
``D x D`` matrix, ``D = m * (Q - 1)``, indexed by :func:`flat_index`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from efc.errors import SingularCovarianceError, ValidationError

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-6
RIDGE = 1e-6
THRESHOLD_PERCENTILE = 95


def flat_index(i, a, Q):
    """Row of feature ``i`` (0-based) and symbol ``a`` (1..Q-1) in the coupling matrix."""
    return i * (Q - 1) + (a - 1)


def _check_rows(rows, Q: int, alpha: float) -> np.ndarray:
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValidationError("need a nonempty 2-d array of flows")
    if not 0 <= alpha < 1:
        raise ValidationError(f"pseudocount weight must be in [0, 1), got {alpha}")
    if rows.min() < 1 or rows.max() > Q:
        raise ValidationError(f"symbols must lie in 1..{Q}")
    return rows.astype(np.int64, copy=False)


def site_freq(rows, Q: int, alpha: float) -> np.ndarray:
    """Pseudocount-blended single-site frequencies, shape (m, Q)."""
    rows = _check_rows(rows, Q, alpha)
    n, m = rows.shape
    counts = np.stack([np.bincount(rows[:, i] - 1, minlength=Q) for i in range(m)])
    return (1 - alpha) * counts / n + alpha / Q


def _pair_counts(rows: np.ndarray, Q: int) -> np.ndarray:
    n, m = rows.shape
    cols = ((rows - 1) + np.arange(m) * Q).ravel()
    onehot = sparse.csr_matrix((np.ones(n * m), cols, np.arange(0, n * m + 1, m)),
                               shape=(n, m * Q))
    counts = (onehot.T @ onehot).toarray()
    return counts.reshape(m, Q, m, Q).transpose(0, 2, 1, 3)


def pair_freq(rows, f_i: np.ndarray, Q: int, alpha: float) -> np.ndarray:
    """Pseudocount-blended joint frequencies, shape (m, m, Q, Q).

    Same-feature blocks are diagonal: ``f_ii(a, b) = f_i(a)`` if ``a == b``.
    """
    rows = _check_rows(rows, Q, alpha)
    n, m = rows.shape
    f_ij = (1 - alpha) * _pair_counts(rows, Q) / n + alpha / Q**2
    for i in range(m):
        f_ij[i, i] = np.diag(f_i[i])
    return f_ij


def covariance(f_i: np.ndarray, f_ij: np.ndarray, Q: int) -> np.ndarray:
    """Connected correlations over the non-reference symbols, shape (D, D)."""
    m = f_i.shape[0]
    q = Q - 1
    D = m * q
    joint = f_ij[:, :, :q, :q].transpose(0, 2, 1, 3).reshape(D, D)
    single = f_i[:, :q].reshape(D)
    return joint - np.outer(single, single)


def _inverse(C: np.ndarray) -> tuple[np.ndarray | None, float]:
    try:
        inv = np.linalg.inv(C)
    except np.linalg.LinAlgError:
        return None, np.inf
    resid = np.abs(C @ inv - np.eye(len(C))).max()
    return inv, float(resid) if np.isfinite(resid) else np.inf


def couplings(C: np.ndarray) -> np.ndarray:
    """Couplings ``e = -C^-1``.

    A failed residual check triggers one retry with ``1e-6`` added to the
    diagonal; a second failure raises :class:`SingularCovarianceError`.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] == 0:
        raise ValidationError(f"covariance must be a nonempty square matrix, got {C.shape}")
    inv, resid = _inverse(C)
    if resid >= RESIDUAL_TOL:
        logger.warning("covariance inversion residual %.3g; retrying with ridge %g", resid, RIDGE)
        inv, resid = _inverse(C + RIDGE * np.eye(len(C)))
        if resid >= RESIDUAL_TOL:
            raise SingularCovarianceError(
                f"covariance matrix is numerically singular (residual {resid:.3g} after ridge); "
                "increase the pseudocount weight alpha")
    e = -inv
    return (e + e.T) / 2


def local_fields(e: np.ndarray, f_i: np.ndarray, Q: int) -> np.ndarray:
    """Local fields, shape (m, Q), with ``h[:, Q-1] == 0``.

    The mean-field correction sums over the other features only (j != i).
    """
    m = f_i.shape[0]
    q = Q - 1
    if np.any(f_i <= 0):
        raise ValidationError("zero single-site frequency makes the local fields undefined; "
                              "use a pseudocount weight alpha > 0")
    E = e.reshape(m, q, m, q)
    fb = f_i[:, :q]
    total = np.einsum("iajb,jb->ia", E, fb)
    self_term = np.einsum("iaib,ib->ia", E, fb)
    h = np.zeros((m, Q))
    h[:, :q] = np.log(fb / f_i[:, q:]) - (total - self_term)
    return h


def nearest_rank(sorted_values: np.ndarray, percentile: int) -> float:
    """Value at 1-based rank ceil(n * p / 100) of an ascending array."""
    n = len(sorted_values)
    rank = max(1, -(-n * percentile // 100))
    return float(sorted_values[rank - 1])


@dataclass(frozen=True)
class EnergySummary:
    min: float
    median: float
    p95: float
    max: float

    @classmethod
    def of(cls, energies: np.ndarray) -> "EnergySummary":
        s = np.sort(energies)
        return cls(float(s[0]), float(np.median(s)),
                   nearest_rank(s, THRESHOLD_PERCENTILE), float(s[-1]))


@dataclass(frozen=True, eq=False)
class ClassModel:
    """Fitted Potts model and energy threshold for one class."""

    label: str
    couplings: np.ndarray
    fields: np.ndarray
    threshold: float
    m: int
    Q: int
    alpha: float
    summary: EnergySummary
    n_train: int = 0

    def __post_init__(self):
        D = self.m * (self.Q - 1)
        if self.couplings.shape != (D, D):
            raise ValidationError(f"couplings shape {self.couplings.shape}, expected {(D, D)}")
        if self.fields.shape != (self.m, self.Q):
            raise ValidationError(f"fields shape {self.fields.shape}, expected {(self.m, self.Q)}")
        if np.any(self.fields[:, -1] != 0):
            raise ValidationError("local fields of the reference symbol must be zero")

    @cached_property
    def _padded(self) -> tuple[np.ndarray, np.ndarray]:
        # (m*Q) x (m*Q) coupling lookup with zero rows/columns for symbol Q,
        # so the energy loop needs no symbol-Q branch.
        m, Q = self.m, self.Q
        E = np.zeros((m, Q, m, Q))
        E[:, :Q - 1, :, :Q - 1] = self.couplings.reshape(m, Q - 1, m, Q - 1)
        return E.reshape(m * Q, m * Q), self.fields.reshape(m * Q)

    def energies(self, flows) -> np.ndarray:
        """Energy of each row of ``flows`` (n x m symbols)."""
        X = np.asarray(flows)
        if X.ndim != 2 or X.shape[1] != self.m:
            raise ValidationError(f"flows must have shape (n, {self.m}), got {X.shape}")
        if X.size and (X.min() < 1 or X.max() > self.Q):
            raise ValidationError(f"flow symbols must lie in 1..{self.Q}")
        E, h = self._padded
        k = (X.astype(np.int64) - 1) + np.arange(self.m) * self.Q
        H = np.zeros(len(X))
        H -= h[k].sum(axis=1)
        for i in range(self.m - 1):
            H -= E[k[:, i:i + 1], k[:, i + 1:]].sum(axis=1)
        return H

    def energy(self, flow) -> float:
        return float(self.energies(np.asarray(flow)[None, :])[0])


def fit_class(rows, Q: int, alpha: float, label: str = "") -> ClassModel:
    """Infer couplings, fields and the 95th-percentile energy threshold."""
    rows = _check_rows(rows, Q, alpha)
    n, m = rows.shape
    if n < 2:
        raise ValidationError(f"class {label!r}: need at least 2 flows, got {n}")
    f_i = site_freq(rows, Q, alpha)
    f_ij = pair_freq(rows, f_i, Q, alpha)
    e = couplings(covariance(f_i, f_ij, Q))
    h = local_fields(e, f_i, Q)
    model = ClassModel(label, e, h, 0.0, m, Q, alpha,
                       EnergySummary(0.0, 0.0, 0.0, 0.0), n)
    summary = EnergySummary.of(model.energies(rows))
    return ClassModel(label, e, h, summary.p95, m, Q, alpha, summary, n)
