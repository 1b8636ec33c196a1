"""Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.

The mechanism releases a sensitivity-1 statistic plus ``N(0, sigma^2)``
noise after including each record independently with probability ``q``.
For integer orders the Rényi divergence has an exact finite expansion;
other orders are bounded by interpolating the log-moment between the two
neighboring integers, which is valid because ``(alpha - 1) * rdp(alpha)`` is
convex in ``alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import EmptyCurveError, InvalidOrderError, UnsatisfiableError

DEFAULT_ORDERS: tuple[float, ...] = (
    1.25, 1.5, 1.75, 2, 2.5, 3, 4, 5, 6, 8, 10, 12, 16, 20, 24, 28, 32,
    48, 64, 128, 256,
)

SIGMA_BRACKET = (0.1, 1000.0)


@dataclass(frozen=True)
class MechanismParams:
    q: float
    sigma: float

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"sampling probability must lie in [0, 1], got {self.q}")
        if not self.sigma > 0:
            raise ValueError(f"noise multiplier must be positive, got {self.sigma}")


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise ValueError("orders and values differ in length")
        if any(v < 0 for v in self.values):
            raise ValueError("RDP values must be non-negative")

    def as_dict(self) -> dict[float, float]:
        return dict(zip(self.orders, self.values))


@dataclass(frozen=True)
class PrivacySpend:
    epsilon: float
    delta: float
    best_order: float


def _log_moment_int(q: float, sigma: float, alpha: int) -> float:
    """``log E_{mu0}[(mu/mu0)^alpha]`` for integer ``alpha``, exact."""
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return alpha * (alpha - 1) / (2 * sigma**2)
    k = np.arange(alpha + 1)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    terms = (
        log_binom
        + k * math.log(q)
        + (alpha - k) * math.log1p(-q)
        + (k * k - k) / (2 * sigma**2)
    )
    return max(float(logsumexp(terms)), 0.0)


def _log_moment(q: float, sigma: float, alpha: float) -> float:
    lo = math.floor(alpha)
    if lo == alpha:
        return _log_moment_int(q, sigma, int(alpha))
    hi = lo + 1
    frac = alpha - lo
    return (1 - frac) * _log_moment_int(q, sigma, lo) + frac * _log_moment_int(q, sigma, hi)


def rdp_sampled_gaussian(params: MechanismParams, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """Per-step RDP curve of the sampled Gaussian mechanism.

    Raises:
        InvalidOrderError: if any order is ``<= 1``.
    """
    orders = tuple(float(a) for a in orders)
    bad = [a for a in orders if not a > 1]
    if bad:
        raise InvalidOrderError(f"Rényi orders must exceed 1, got {bad}")
    values = []
    for a in orders:
        if params.q == 1.0:
            values.append(a / (2 * params.sigma**2))
        else:
            values.append(_log_moment(params.q, params.sigma, a) / (a - 1))
    return RdpCurve(orders, tuple(values))


def compose(curve: RdpCurve, steps: int) -> RdpCurve:
    """RDP of ``steps`` adaptive repetitions of the same mechanism."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return RdpCurve(curve.orders, tuple(v * steps for v in curve.values))


def to_eps_delta(curve: RdpCurve, delta: float) -> PrivacySpend:
    """Converts an RDP curve to ``(epsilon, delta)`` by the classic bound."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not curve.orders:
        raise EmptyCurveError("cannot convert an empty RDP curve")
    log_inv_delta = math.log(1 / delta)
    best = min(
        ((v + log_inv_delta / (a - 1), a) for a, v in zip(curve.orders, curve.values)),
        key=lambda t: t[0],
    )
    return PrivacySpend(epsilon=best[0], delta=delta, best_order=best[1])


def epsilon_for(q: float, sigma: float, steps: int, delta: float,
                orders: Sequence[float] = DEFAULT_ORDERS) -> PrivacySpend:
    curve = compose(rdp_sampled_gaussian(MechanismParams(q, sigma), orders), steps)
    return to_eps_delta(curve, delta)


def calibrate_sigma(
    q: float,
    steps: int,
    target_eps: float,
    delta: float,
    orders: Sequence[float] = DEFAULT_ORDERS,
    rel_tol: float = 1e-3,
) -> float:
    """Smallest noise multiplier whose composed spend stays within ``target_eps``.

    Bisection on ``[0.1, 1000]`` in log-space; the returned value is the
    upper end of the final bracket, so it always satisfies the target.

    Raises:
        UnsatisfiableError: if even ``sigma = 1000`` overshoots ``target_eps``.
    """
    if not target_eps > 0:
        raise ValueError("target_eps must be positive")
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    if steps < 1:
        raise ValueError("steps must be >= 1")

    def eps(sigma: float) -> float:
        return epsilon_for(q, sigma, steps, delta, orders).epsilon

    lo, hi = SIGMA_BRACKET
    if eps(hi) > target_eps:
        raise UnsatisfiableError(
            f"sigma={hi} still spends eps={eps(hi):.4g} > {target_eps}"
        )
    if eps(lo) <= target_eps:
        return lo
    while hi / lo > 1 + rel_tol:
        mid = math.sqrt(lo * hi)
        if eps(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    assert eps(hi) <= target_eps
    return hi


@dataclass
class Accountant:
    """Running per-agent ledger of sampled-Gaussian releases.

    ``step`` is called by the training loop (single writer); ``spend`` can be
    read at any time.
    """

    sigma: float
    delta: float
    sample_rates: Sequence[float]
    orders: Sequence[float] = DEFAULT_ORDERS
    steps: int = 0
    _unit: list[RdpCurve] = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        self._unit = [
            rdp_sampled_gaussian(MechanismParams(q, self.sigma), self.orders)
            for q in self.sample_rates
        ]

    def step(self, count: int = 1) -> None:
        self.steps += count

    def spend(self, agent: int) -> PrivacySpend:
        if self.steps == 0:
            return PrivacySpend(0.0, self.delta, float("nan"))
        return to_eps_delta(compose(self._unit[agent], self.steps), self.delta)

    def spends(self) -> list[PrivacySpend]:
        return [self.spend(i) for i in range(len(self._unit))]

    def max_epsilon(self) -> float:
        return max(s.epsilon for s in self.spends())
