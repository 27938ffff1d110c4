"""Step-size rules, L lower bounds, error-bound evaluators and epoch planning.

These functions evaluate the closed-form expressions of the convergence
analysis for Krasulina-type iterations with step ``gamma_t = c / (L + t)``.
They are plain arithmetic: nothing here certifies the probability statements
attached to the bounds.

Notation used throughout:

* ``c0 = 2 c (lambda1 - lambda2)``; speed-up results need ``c0 > 2``.
* ``sigma2_eff`` is whichever variance the caller is working with: the
  single-sample variance, the N-averaged one (``sigma2 / N``) or the
  B-averaged one (``sigma2 / B``).
"""

from __future__ import annotations

import decimal
import math
from dataclasses import dataclass

from .errors import UnsupportedRegimeError

__all__ = [
    "StepSchedule",
    "BoundParams",
    "EpochSchedule",
    "step_size",
    "l_lower_bound_main",
    "l_lower_bound_initial",
    "bound_constants",
    "theoretical_bound",
    "epoch_schedule",
    "t_final_closed_form",
    "max_minibatch",
    "finite_sample_terms",
    "finite_sample_bound",
    "minibatch_bound",
]

E = math.e


def _require_c0(c0: float) -> None:
    if not c0 > 2:
        raise UnsupportedRegimeError(f"requires c0 > 2, got c0={c0}")


@dataclass(frozen=True)
class StepSchedule:
    """``gamma_t = c / (L + t)``.

    ``eigengap`` is optional; when present, ``c0`` is derived from it.
    """

    c: float
    L: float = 0.0
    eigengap: float | None = None

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"c must be > 0, got {self.c}")
        if self.L < 0:
            raise ValueError(f"L must be >= 0, got {self.L}")
        if self.eigengap is not None and not self.eigengap > 0:
            raise ValueError(f"eigengap must be > 0, got {self.eigengap}")

    @classmethod
    def from_c0(cls, c0: float, eigengap: float, L: float = 0.0) -> "StepSchedule":
        """Build the schedule with ``c = c0 / (2 * eigengap)``."""
        _require_c0(c0)
        return cls(c=c0 / (2.0 * eigengap), L=L, eigengap=eigengap)

    @property
    def c0(self) -> float:
        if self.eigengap is None:
            raise ValueError("c0 is undefined without an eigengap")
        return 2.0 * self.c * self.eigengap


def step_size(t: int, sched: StepSchedule) -> float:
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    denom = sched.L + t
    if denom <= 0:
        raise ValueError("L + t must be positive")
    return sched.c / denom


@dataclass(frozen=True)
class BoundParams:
    d: int
    r: float
    sigma2_eff: float
    delta: float
    lambda1: float
    eigengap: float

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"d must be >= 2, got {self.d}")
        if self.r < 1:
            raise ValueError(f"norm bound r must be >= 1, got {self.r}")
        if self.sigma2_eff < 0:
            raise ValueError("sigma2_eff must be >= 0")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 < self.eigengap <= self.lambda1:
            raise ValueError("need 0 < eigengap <= lambda1")


def l_lower_bound_main(p: BoundParams, c: float) -> tuple[float, float, float]:
    """Return ``(L1, L2, L1 + L2)`` for the lower bound on L for the main convergence result."""
    m = max(1.0, c * c)
    log_term = math.log(4.0 / p.delta)
    L1 = 64.0 * E * p.d * p.r**4 * m / p.delta**2 * log_term
    L2 = 512.0 * E**2 * p.d**2 * p.sigma2_eff * m / p.delta**4 * log_term
    return L1, L2, L1 + L2


def l_lower_bound_initial(d, r, sigma2_eff, delta, c, mode: str = "initial") -> float:
    """Lower bound on L from the initial-epoch or intermediate-epoch analysis.

    ``mode="initial"`` uses ``eps = delta^2 / (8e)`` with the d and d^2
    factors; ``mode="intermediate"`` uses ``eps0 = delta^2 / (8 e d)`` and
    drops them.
    """
    m = max(1.0, c * c)
    log_term = math.log(4.0 / delta)
    if mode == "initial":
        eps = delta**2 / (8.0 * E)
        return 8.0 * d * r**4 * m / eps * log_term + 8.0 * d**2 * sigma2_eff * m / eps**2 * log_term
    if mode == "intermediate":
        eps0 = delta**2 / (8.0 * E * d)
        return 8.0 * r**4 * m / eps0 * log_term + 8.0 * sigma2_eff * m / eps0**2 * log_term
    raise ValueError(f"unknown mode {mode!r}")


def bound_constants(p: BoundParams, c: float, L: float) -> tuple[float, float]:
    """Constants ``(C1, C2)`` multiplying the transient and variance terms."""
    c0 = 2.0 * c * p.eigengap
    _require_c0(c0)
    if not L > 0:
        raise ValueError("the error bound needs L > 0")
    cl2 = c * c * p.lambda1**2
    C1 = 0.5 * (4.0 * E * p.d / p.delta**2) ** (5.0 / (2.0 * math.log(2.0))) * math.exp(2.0 * cl2 / L)
    C2 = 8.0 * c * c * math.exp((c0 + 2.0 * cl2) / L) / (c0 - 2.0)
    return C1, C2


def theoretical_bound(t: int, p: BoundParams, sched: StepSchedule) -> float:
    """Expected-potential bound after ``t`` iterations.

    ``C1 ((L+1)/(t+L+1))^(c0/2) + C2 sigma2_eff / (t+L+1)``, with c0 taken from
    ``p.eigengap`` and ``sched.c``.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    c, L = sched.c, sched.L
    C1, C2 = bound_constants(p, c, L)
    c0 = 2.0 * c * p.eigengap
    denom = t + L + 1.0
    return C1 * ((L + 1.0) / denom) ** (c0 / 2.0) + C2 * (p.sigma2_eff / denom)


@dataclass(frozen=True)
class EpochSchedule:
    """Sub-epoch ladder ``(t_j, eps_j)``, ``j = 0..J``, with ``t_0 = 0``."""

    pairs: tuple[tuple[int, float], ...]
    L: float
    c0: float

    @property
    def J(self) -> int:
        return len(self.pairs) - 1

    @property
    def times(self) -> list[int]:
        return [t for t, _ in self.pairs]

    @property
    def eps(self) -> list[float]:
        return [e for _, e in self.pairs]

    def satisfies_c1(self, delta: float, d: int) -> bool:
        eps = self.eps
        if not math.isclose(eps[0], delta**2 / (8.0 * E * d), rel_tol=1e-15):
            return False
        ratios_ok = all(1.5 * a <= b <= 2.0 * a for a, b in zip(eps, eps[1:]))
        return ratios_ok and eps[-1] >= 0.5 and eps[-2] <= 0.25

    def satisfies_c2(self) -> bool:
        with decimal.localcontext(_LADDER_CTX):
            g = _growth(self.c0)
            L1 = decimal.Decimal(self.L) + 1
            return all(b + L1 >= g * (a + L1) for a, b in zip(self.times, self.times[1:]))


# the time ladder is built in 40-digit decimal so that each integer time is the
# exact ceiling of its threshold; float rounding can land one below it
_LADDER_CTX = decimal.Context(prec=40)


def _growth(c0: float) -> decimal.Decimal:
    return (decimal.Decimal(5) / decimal.Decimal(c0)).exp()


def epoch_schedule(delta: float, d: int, c0: float, L: float, spacing: str = "doubling") -> EpochSchedule:
    """Build the epoch ladder with the smallest integer times meeting the growth rule.

    ``J = ceil(log2(1 / (2 eps0)))`` levels above ``eps0 = delta^2 / (8 e d)``.

    ``spacing="doubling"`` (default) uses ``eps_j = 2^j eps0`` exactly. Its
    next-to-last level is only <= 1/4 when ``1 / (4 eps0)`` is a power of two.
    ``spacing="geometric"`` uses a constant ratio in [1.5, 2] so that
    ``eps_{J-1} = 1/4`` and ``eps_J = 1/2`` always hold.
    """
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    _require_c0(c0)
    if L < 0:
        raise ValueError("L must be >= 0")

    eps0 = delta**2 / (8.0 * E * d)
    J = math.ceil(math.log2(1.0 / (2.0 * eps0)))
    if spacing == "doubling":
        eps = [eps0 * 2.0**j for j in range(J + 1)]
    elif spacing == "geometric":
        rho = (0.25 / eps0) ** (1.0 / (J - 1))
        eps = [eps0 * rho**j for j in range(J - 1)] + [0.25, 0.5]
    else:
        raise ValueError(f"unknown spacing {spacing!r}")

    times = [0]
    with decimal.localcontext(_LADDER_CTX):
        g = _growth(c0)
        L1 = decimal.Decimal(L) + 1
        for _ in range(J):
            prev = times[-1]
            need = (g * (prev + L1) - L1).to_integral_value(rounding=decimal.ROUND_CEILING)
            times.append(max(prev + 1, int(need)))
    return EpochSchedule(tuple(zip(times, eps)), L=L, c0=c0)


def t_final_closed_form(delta: float, d: int, c0: float, L: float) -> float:
    """Real-valued ``t_J`` from ``t_J + L + 1 = (L+1) (4ed/delta^2)^(5/(c0 ln 2))``."""
    return (L + 1.0) * (4.0 * E * d / delta**2) ** (5.0 / (c0 * math.log(2.0))) - L - 1.0


def max_minibatch(T: int, c0: float) -> int:
    """Largest network-wide mini-batch ``B <= T^(1 - 2/c0)``."""
    _require_c0(c0)
    if T < 1:
        raise ValueError("T must be >= 1")
    x = T ** (1.0 - 2.0 / c0)
    b = math.floor(x)
    # guard against x landing one ulp below an integer
    if b + 1 <= x * (1.0 + 4e-16):
        b += 1
    return int(b)


def _finite_setup(B, mu, p: BoundParams, L1p, L2p, c0):
    _require_c0(c0)
    c = c0 / (2.0 * p.eigengap)
    L = L1p + p.sigma2_eff / B * L2p
    return bound_constants(p, c, L)


def finite_sample_terms(T, B, mu, p: BoundParams, L1p, L2p, c0) -> tuple[float, float, float]:
    """Three terms of the finite-sample bound with ``mu`` discards per iteration.

    ``p.sigma2_eff`` is the single-sample variance. L is set to
    ``L1p + (sigma2 / B) L2p``.
    """
    if B < 1 or mu < 0 or T < B + mu:
        raise ValueError(f"need B >= 1, mu >= 0, T >= B + mu (T={T}, B={B}, mu={mu})")
    C1, C2 = _finite_setup(B, mu, p, L1p, L2p, c0)
    s2 = p.sigma2_eff
    h = c0 / 2.0
    k = B + mu
    ratio = k / B
    t1 = c0 * C1 * (k * L1p / T) ** h
    t2 = c0 * C1 * (ratio * s2 * L2p / T) ** h
    t3 = C2 * s2 * ratio / T
    return t1, t2, t3


def finite_sample_bound(T, B, mu, p: BoundParams, L1p, L2p, c0) -> float:
    t1, t2, t3 = finite_sample_terms(T, B, mu, p, L1p, L2p, c0)
    return t1 + t2 + t3


def minibatch_bound(T, B, p: BoundParams, L1p, L2p, c0, simplified: bool = False) -> float:
    """Loss-free finite-sample bound.

    With ``simplified=False`` this is the three-term bound before using
    ``B <= T^(1-2/c0)`` and equals ``finite_sample_bound(T, B, 0, ...)``
    exactly. ``simplified=True`` applies that condition to the first term.
    """
    if B < 1 or T < B:
        raise ValueError("need 1 <= B <= T")
    C1, C2 = _finite_setup(B, 0, p, L1p, L2p, c0)
    s2 = p.sigma2_eff
    h = c0 / 2.0
    if simplified:
        t1 = c0 * C1 * L1p**h / T
    else:
        t1 = c0 * C1 * (B * L1p / T) ** h
    t2 = c0 * C1 * (s2 * L2p / T) ** h
    t3 = C2 * s2 / T
    return t1 + t2 + t3
