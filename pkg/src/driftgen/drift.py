"""Training-time drifting field.

Predictions are attracted toward expert samples and repelled from one
another through bidirectional softmax affinities, evaluated at several
temperatures and summed after per-temperature unit-variance normalization.

Everything here is plain numpy: the field is a stop-gradient target, so it
never enters the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_TEMPERATURES = (0.02, 0.05, 0.2)
LAMBDA_FLOOR = 1e-12
DEGENERATE_DISTANCE = 1e-12


class DegeneratePoolError(ValueError):
    """All pooled samples coincide, so no scale can be defined."""


@dataclass
class AffinityMatrix:
    values: np.ndarray
    temperature: float


@dataclass
class DriftField:
    V: np.ndarray
    raw: dict[float, np.ndarray] = field(default_factory=dict)
    lambdas: dict[float, float] = field(default_factory=dict)
    scale: float = 1.0

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.V, axis=1)


def _rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError(f"expected a non-empty (n, D) array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("samples must be finite")
    return a


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def normalize_scale(X, Y, D: int | None = None):
    """Rescale both sets so the pooled mean pairwise distance equals sqrt(D).

    Returns ``(X * s, Y * s, s)``; divide a field computed in the scaled space
    by ``s`` to map it back.
    """
    X, Y = _rows(X), _rows(Y)
    D = X.shape[1] if D is None else int(D)
    pool = np.concatenate([X, Y], axis=0)
    n = pool.shape[0]
    if n < 2:
        raise DegeneratePoolError("need at least two pooled samples")
    dist = pairwise_distances(pool, pool)
    mean_dist = dist[np.triu_indices(n, k=1)].mean()
    if mean_dist < DEGENERATE_DISTANCE:
        raise DegeneratePoolError(f"mean pairwise distance {mean_dist:.3g} is degenerate")
    s = np.sqrt(D) / mean_dist
    return X * s, Y * s, float(s)


def bidirectional_affinity(X, Y, tau: float) -> AffinityMatrix:
    """Geometric mean of row- and column-softmax of ``-||x_i - y_j|| / tau``."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    X, Y = _rows(X), _rows(Y)
    logits = -pairwise_distances(X, Y) / tau
    A = np.sqrt(_softmax(logits, axis=1) * _softmax(logits, axis=0))
    return AffinityMatrix(A, float(tau))


def drift_weights(X, Y, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Attraction weights (N x M) and repulsion weights (N x N).

    The repulsion affinity includes each prediction's self-pair. Each side is
    cross-scaled by the other side's affinity mass and both are divided by the
    joint mass, so for every prediction the two weight rows carry the same
    total ``S+ S- / (S+ + S-)``.
    """
    A_pos = bidirectional_affinity(X, Y, tau).values
    A_neg = bidirectional_affinity(X, X, tau).values
    s_pos = A_pos.sum(axis=1, keepdims=True)
    s_neg = A_neg.sum(axis=1, keepdims=True)
    z = s_pos + s_neg
    return A_pos * (s_neg / z), A_neg * (s_pos / z)


def drift_field_single_temp(X, Y, tau: float) -> np.ndarray:
    X, Y = _rows(X), _rows(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    W_pos, W_neg = drift_weights(X, Y, tau)
    return W_pos @ Y - W_neg @ X


def aggregate_multi_temp(X, Y, D: int | None = None, temps=DEFAULT_TEMPERATURES) -> DriftField:
    """Sum of unit-variance-normalized fields over ``temps``, in the input scale."""
    temps = tuple(float(t) for t in temps)
    if not temps or any(t <= 0 for t in temps):
        raise ValueError(f"temperatures must be a non-empty list of positives, got {temps}")
    X, Y = _rows(X), _rows(Y)
    D = X.shape[1] if D is None else int(D)
    Xs, Ys, s = normalize_scale(X, Y, D)
    total = np.zeros_like(Xs)
    raw, lambdas = {}, {}
    for tau in temps:
        v = drift_field_single_temp(Xs, Ys, tau)
        lam = max(float(np.sqrt(np.mean(np.sum(v * v, axis=1)) / D)), LAMBDA_FLOOR)
        total += v / lam
        raw[tau] = v
        lambdas[tau] = lam
    return DriftField(V=total / s, raw=raw, lambdas=lambdas, scale=s)
