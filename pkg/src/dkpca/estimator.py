"""Krasulina / Oja update kernel for top-eigenvector estimation.

Every covariance application is matrix-free: for a batch ``X`` of shape
``(m, d)`` the product ``A v`` with ``A = mean_k x_k x_k^T`` is formed from the
projections ``p = X @ v``, so a step costs O(m d) time and O(d) extra memory
beyond the batch itself.

Per-sample update directions are reduced with a correctly rounded sum
(:func:`exact_sum`).  The rounded result does not depend on how the samples
are grouped, which is what lets the distributed simulator reproduce the
centralized mini-batch iterates bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateIterateError,
    InvalidBatchError,
    InvalidDimensionError,
    NumericOverflowError,
)

__all__ = [
    "EigenEstimate",
    "as_batch",
    "exact_sum",
    "random_unit_init",
    "rayleigh_quotient",
    "gradient_f",
    "krasulina_direction",
    "oja_direction",
    "sample_directions",
    "krasulina_step",
    "oja_step",
    "apply_direction",
    "potential",
    "z_statistic",
]


@dataclass(frozen=True)
class EigenEstimate:
    """Current iterate of a stochastic eigenvector method.

    Attributes:
        v: Iterate vector of length d. Never the zero vector.
        iterations: Number of completed update steps.
        samples_processed: Total number of samples folded into ``v``.
        normalized: If True, ``v`` is rescaled to unit norm after every step.
    """

    v: np.ndarray
    iterations: int = 0
    samples_processed: int = 0
    normalized: bool = True

    @property
    def d(self) -> int:
        return self.v.shape[0]


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _check_vector(v) -> tuple[np.ndarray, float]:
    v = np.asarray(v, dtype=np.float64)
    vv = float(v @ v)
    if not vv > 0.0:
        raise DegenerateIterateError("iterate is the zero vector")
    return v, vv


def as_batch(samples) -> np.ndarray:
    """Validate ``samples`` and return them as a float64 array of shape (m, d).

    A single 1-D sample is promoted to a batch of size one.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] < 1:
        raise InvalidBatchError(f"batch must be non-empty 2-D, got shape {X.shape}")
    if X.shape[1] < 2:
        raise InvalidDimensionError(f"dimension must be >= 2, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise InvalidBatchError("batch contains non-finite entries")
    return X


def exact_sum(rows: np.ndarray) -> np.ndarray:
    """Correctly rounded column sums of a 2-D array.

    Uses ``math.fsum`` per column, so the result is the exact sum rounded once
    and is independent of the order or grouping of the rows.
    """
    if rows.shape[0] == 1:
        return rows[0].copy()
    return np.array([math.fsum(col) for col in rows.T])


def random_unit_init(d: int, rng=None, normalized: bool = True) -> EigenEstimate:
    """Draw an initial iterate uniformly (Haar measure) from the unit sphere."""
    if d < 2:
        raise InvalidDimensionError(f"dimension must be >= 2, got {d}")
    g = _as_rng(rng).standard_normal(d)
    return EigenEstimate(g / np.linalg.norm(g), normalized=normalized)


def rayleigh_quotient(v, batch) -> float:
    """Return ``v^T A v / ||v||^2`` for the batch-mean covariance ``A``."""
    v, vv = _check_vector(v)
    X = as_batch(batch)
    p = X @ v
    return float(p @ p) / X.shape[0] / vv


def gradient_f(v, batch) -> np.ndarray:
    """Scaled gradient of the negated Rayleigh quotient at ``v``.

    ``(1/||v||^2) (-A v + (v^T A v / ||v||^2) v)``, the form for which
    ``krasulina_direction = -||v||^2 gradient_f`` holds. This is half the
    calculus gradient of ``f(v) = -v^T A v / ||v||^2``. Computed directly from
    ``A v`` rather than through :func:`krasulina_direction`.
    """
    v, vv = _check_vector(v)
    X = as_batch(batch)
    p = X @ v
    Av = (X.T @ p) / X.shape[0]
    return (-Av + (float(v @ Av) / vv) * v) / vv


def sample_directions(v: np.ndarray, X: np.ndarray, rule: str = "krasulina") -> np.ndarray:
    """Per-sample update directions, one row per sample (no validation).

    Row k is ``(x_k^T v) x_k - w_k v`` with ``w_k = (x_k^T v)^2 / ||v||^2`` for
    Krasulina and ``w_k = (x_k^T v)^2`` for Oja.
    """
    # row-wise reduction: BLAS matvec rounding depends on the row count
    p = (X * v).sum(axis=1)
    w = p * p
    if rule == "krasulina":
        w = w / float(v @ v)
    elif rule != "oja":
        raise ValueError(f"unknown update rule {rule!r}")
    return p[:, None] * X - w[:, None] * v[None, :]


def krasulina_direction(v, batch) -> np.ndarray:
    """Krasulina direction ``A v - (v^T A v / ||v||^2) v`` for a batch.

    The result is orthogonal to ``v`` and homogeneous of degree one in ``v``.
    """
    v, _ = _check_vector(v)
    X = as_batch(batch)
    return exact_sum(sample_directions(v, X, "krasulina")) / X.shape[0]


def oja_direction(v, batch) -> np.ndarray:
    """Oja direction ``A v - (v^T A v) v``; equals Krasulina's when ``||v|| = 1``."""
    v, _ = _check_vector(v)
    X = as_batch(batch)
    return exact_sum(sample_directions(v, X, "oja")) / X.shape[0]


def apply_direction(est: EigenEstimate, xi: np.ndarray, gamma: float, m: int) -> EigenEstimate:
    """Move ``est`` along ``xi`` by ``gamma`` and advance its counters."""
    if gamma < 0:
        raise ValueError(f"step size must be >= 0, got {gamma}")
    v = est.v + gamma * xi
    sq = float(v @ v)
    # a non-finite entry always shows up in the squared norm
    if not math.isfinite(sq):
        raise NumericOverflowError("iterate became non-finite")
    if est.normalized:
        v = v / math.sqrt(sq)
    return EigenEstimate(v, est.iterations + 1, est.samples_processed + m, est.normalized)


def krasulina_step(est: EigenEstimate, batch, gamma: float) -> EigenEstimate:
    X = as_batch(batch)
    return apply_direction(est, krasulina_direction(est.v, X), gamma, X.shape[0])


def oja_step(est: EigenEstimate, batch, gamma: float) -> EigenEstimate:
    X = as_batch(batch)
    return apply_direction(est, oja_direction(est.v, X), gamma, X.shape[0])


def potential(v, q_star) -> float:
    """Squared sine of the angle between ``v`` and ``q_star``, in [0, 1].

    Invariant to the sign and scale of ``v``; ``q_star`` must be unit norm.
    """
    v, vv = _check_vector(v)
    q = np.asarray(q_star, dtype=np.float64)
    if abs(float(q @ q) - 1.0) > 2e-10:
        raise ValueError("q_star must have unit norm")
    c = float(v @ q)
    return min(1.0, max(0.0, 1.0 - c * c / vv))


def z_statistic(v_prev, xi, gamma: float, q_star) -> float:
    """``2 gamma (v^T q)(xi^T q) / ||v||^2`` for one step from ``v_prev``."""
    v, vv = _check_vector(v_prev)
    q = np.asarray(q_star, dtype=np.float64)
    return 2.0 * gamma * float(v @ q) * float(np.asarray(xi) @ q) / vv
