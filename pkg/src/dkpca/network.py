"""In-process simulation of the splitter, the processing network and the discard path.

The network is simulated deterministically: per-node directions are formed in
node order and combined by :func:`distributed_vector_sum`. That reduction is
correctly rounded, so distributed and centralized runs on the same samples
produce bitwise identical iterates whatever the node count or local batch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    EndOfStream,
    IndexRangeError,
    ModelInconsistencyError,
    SampleCountError,
)
from .estimator import EigenEstimate, apply_direction, exact_sum, sample_directions

__all__ = [
    "SystemModel",
    "NodeState",
    "StreamCursor",
    "Splitter",
    "classify_and_mu",
    "reindex_dk",
    "reindex_dmk",
    "distributed_vector_sum",
    "run_dk_iteration",
    "run_dmk_iteration",
]

RESOURCEFUL = "resourceful"
CONSTRAINED = "constrained"


@dataclass(frozen=True)
class SystemModel:
    """Node count, local batch and the static rate model.

    Rates are in samples/second (``R_s``, ``R_p``) and sum operations/second
    (``R_c``). ``mu_override`` fixes the per-iteration discard count directly.
    """

    N: int
    b: int = 1
    R_s: float | None = None
    R_p: float | None = None
    R_c: float | None = None
    mu_override: int | None = None

    def __post_init__(self):
        if self.N < 1 or self.b < 1:
            raise ValueError(f"need N >= 1 and b >= 1, got N={self.N}, b={self.b}")
        if self.mu_override is not None and self.mu_override < 0:
            raise ValueError("mu_override must be >= 0")

    @property
    def B(self) -> int:
        return self.b * self.N

    @property
    def has_rates(self) -> bool:
        return None not in (self.R_s, self.R_p, self.R_c)


def classify_and_mu(model: SystemModel) -> tuple[str, int]:
    """Classify the regime and return the per-iteration discard count.

    Resourceful iff ``N >= R_s/R_p + R_s/(b R_c)``; otherwise
    ``mu = ceil(b R_s/R_p + R_s/R_c - B)``. An override wins over the rates.
    """
    if model.has_rates:
        if min(model.R_s, model.R_p, model.R_c) <= 0:
            raise ValueError("rates must be positive")
        threshold = model.R_s / model.R_p + model.R_s / (model.b * model.R_c)
        if model.N >= threshold:
            scenario, mu = RESOURCEFUL, 0
        else:
            scenario = CONSTRAINED
            raw = model.b * model.R_s / model.R_p + model.R_s / model.R_c - model.B
            if raw < 0:
                raise ModelInconsistencyError(f"derived discard count is negative ({raw})")
            mu = math.ceil(raw - 1e-9)
    elif model.mu_override is None:
        raise ValueError("either rates or mu_override must be given")
    else:
        scenario, mu = None, 0

    if model.mu_override is not None:
        mu = int(model.mu_override)
        if scenario is None:
            scenario = CONSTRAINED if mu > 0 else RESOURCEFUL
    return scenario, mu


def reindex_dk(i: int, t: int, N: int) -> int:
    """Global arrival index of the sample seen by node ``i`` in iteration ``t``."""
    if not (1 <= i <= N) or t < 1:
        raise IndexRangeError(f"out of range: i={i}, t={t}, N={N}")
    return i + (t - 1) * N


def reindex_dmk(i: int, j: int, t: int, b: int, B: int) -> int:
    """Global arrival index of sample ``j`` of node ``i``'s local batch in iteration ``t``."""
    if b < 1 or B % b:
        raise IndexRangeError(f"B={B} is not a multiple of b={b}")
    if not (1 <= j <= b) or not (1 <= i <= B // b) or t < 1:
        raise IndexRangeError(f"out of range: i={i}, j={j}, t={t}, b={b}, B={B}")
    return j + (i - 1) * b + (t - 1) * B


@dataclass
class NodeState:
    """Local direction accumulator of one processing node.

    The accumulator keeps the unreduced per-sample contributions, so merging
    node states in the network sum rounds only once.
    """

    node_id: int
    d: int
    _rows: list = field(default_factory=list, repr=False)

    def reset(self) -> None:
        self._rows.clear()

    def accumulate(self, v: np.ndarray, x: np.ndarray, rule: str = "krasulina") -> None:
        """Add the directions of one sample, or of a local block of samples."""
        self._rows.append(sample_directions(v, np.atleast_2d(x), rule))

    @property
    def partials(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((1, self.d))
        return np.vstack(self._rows)

    @property
    def xi(self) -> np.ndarray:
        """Local direction sum, rounded."""
        return exact_sum(self.partials)


def distributed_vector_sum(parts) -> np.ndarray:
    """Sum of the nodes' vectors, combined in ascending node order.

    Each part is either a length-d vector or a 2-D stack of unreduced partial
    rows (as held by :class:`NodeState`). The sum is correctly rounded, so the
    result is reproducible bit for bit.
    """
    parts = [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in parts]
    if not parts:
        raise SampleCountError("need at least one part")
    d = parts[0].shape[1]
    for k, p in enumerate(parts):
        if p.ndim != 2 or p.shape[1] != d:
            raise DimensionMismatchError(f"part {k} has shape {p.shape}, expected (*, {d})")
    return exact_sum(np.vstack(parts))


def _network_step(est, X, n_nodes, b, gamma, rule):
    nodes = [NodeState(i + 1, est.d) for i in range(n_nodes)]
    for i, node in enumerate(nodes):
        node.reset()
        node.accumulate(est.v, X[i * b:(i + 1) * b], rule)
    xi = distributed_vector_sum([node.partials for node in nodes]) / (n_nodes * b)
    return apply_direction(est, xi, gamma, n_nodes * b)


def run_dk_iteration(est: EigenEstimate, samples, gamma: float, n_nodes: int | None = None,
                     rule: str = "krasulina") -> EigenEstimate:
    """One iteration of distributed Krasulina: one sample per node, then a network sum."""
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    N = X.shape[0] if n_nodes is None else n_nodes
    if X.shape[0] != N:
        raise SampleCountError(f"expected {N} samples (one per node), got {X.shape[0]}")
    if X.shape[1] != est.d:
        raise DimensionMismatchError(f"samples have d={X.shape[1]}, iterate has d={est.d}")
    return _network_step(est, X, N, 1, gamma, rule)


def run_dmk_iteration(est: EigenEstimate, batches, gamma: float, mu: int, n_nodes: int, b: int,
                      rule: str = "krasulina") -> tuple[EigenEstimate, int]:
    """One iteration of distributed mini-batch Krasulina.

    ``batches`` holds the ``B = n_nodes * b`` processed samples in arrival
    order; node ``i`` (1-based) gets rows ``(i-1)*b .. i*b - 1``. The ``mu``
    discarded samples never reach the nodes; their count is returned for
    accounting.
    """
    X = np.atleast_2d(np.asarray(batches, dtype=np.float64))
    B = n_nodes * b
    if X.shape[0] != B:
        raise SampleCountError(f"expected B={B} samples, got {X.shape[0]}")
    if X.shape[1] != est.d:
        raise DimensionMismatchError(f"samples have d={X.shape[1]}, iterate has d={est.d}")
    if mu < 0:
        raise ValueError("mu must be >= 0")
    return _network_step(est, X, n_nodes, b, gamma, rule), mu


@dataclass
class StreamCursor:
    """Position in the arrival stream and per-run sample accounting."""

    next_index: int = 1  # 1-based arrival index of the next sample
    iteration: int = 0
    processed: int = 0
    discarded: int = 0

    @property
    def received(self) -> int:
        return self.next_index - 1


class Splitter:
    """Cuts a sample stream into ``(B + mu)``-sample blocks.

    The first B samples of each block go to the network; the trailing ``mu``
    are dropped unread. ``source`` needs ``take(k) -> array`` (fewer rows once
    exhausted) and ``skip(k) -> int``. ``limit`` caps the number of samples
    that will ever arrive.
    """

    def __init__(self, source, B: int, mu: int = 0, limit: int | None = None):
        if B < 1 or mu < 0:
            raise ValueError("need B >= 1 and mu >= 0")
        self.source = source
        self.B = B
        self.mu = mu
        self.limit = limit
        self.cursor = StreamCursor()

    def _room(self, k: int) -> int:
        if self.limit is None:
            return k
        return max(0, min(k, self.limit - self.cursor.received))

    def next_block(self) -> np.ndarray:
        """Return the next B processed samples and drop the following mu.

        Raises:
            EndOfStream: fewer than B samples remain. Whatever did arrive is
                counted as discarded before raising.
        """
        cur = self.cursor
        want = self._room(self.B)
        X = self.source.take(want) if want else np.empty((0, 0))
        got = X.shape[0]
        cur.next_index += got
        if got < self.B:
            cur.discarded += got
            raise EndOfStream(cur.received, cur.processed, cur.discarded)
        cur.processed += got
        cur.iteration += 1
        drop = self._room(self.mu)
        if drop:
            skipped = self.source.skip(drop)
            cur.next_index += skipped
            cur.discarded += skipped
        return X
