"""Importance-weighted (IPS) and self-normalized (SNIPS) robust value estimates.

With weights ``w_i`` the empirical dual is

    phi_hat(alpha) = -alpha * log((1/N) sum_i w_i exp(-r_i / alpha)) - alpha * delta.

Its maximizer can sit at ``alpha = 0`` or run off to ``alpha = infinity``
depending on how ``delta`` compares with two thresholds computed from the
weights; :func:`degeneracy_classify` decides which.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .core import EPS_ALPHA, Dataset
from .dual import RewardCurve, maximize_curve
from .errors import DegenerateWeightsError, DomainError, OverlapError, ShapeError
from .policy import Policy

#: Search cap used when the weight-mean threshold ties with delta exactly.
ALPHA_CAP = 1e8


class Regime(str, Enum):
    FINITE = "Finite"
    ALPHA_INFINITE = "AlphaInfinite"
    ALPHA_ZERO = "AlphaZero"

    def __str__(self) -> str:
        return self.value


class DegeneracyBoundaryWarning(UserWarning):
    """``delta`` equals a degeneracy threshold exactly; resolved as Finite."""


@dataclass(frozen=True, eq=False)
class WeightedSample:
    weights: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        r = np.asarray(self.rewards, dtype=float).ravel()
        if w.shape != r.shape or w.size == 0:
            raise ShapeError("weights and rewards must be nonempty and equal length")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DomainError("weights must be finite and nonnegative")
        if np.any(r < 0) or np.any(r > 1):
            raise DomainError("rewards must lie in [0, 1]")
        if not np.any(w > 0):
            raise DegenerateWeightsError("all weights are zero")
        w.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "rewards", r)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def curve(self) -> RewardCurve:
        return RewardCurve(self.weights / self.n, self.rewards)


@dataclass(frozen=True)
class DegeneracyStats:
    s_w: float
    s_w_min: float
    min_reward: float
    infinite_threshold: float
    zero_threshold: float


def propensity_ratios(data: Dataset, target: Policy, behavior=None) -> np.ndarray:
    """``w_i = pi(a_i | s_i) / pi0(a_i | s_i)``.

    ``behavior`` may be a :class:`Policy`, an array of behavior propensities
    at the logged actions, or ``None`` to use the logged propensity column.
    """
    num = target.prob_of(data.states, data.actions)
    if behavior is None:
        if data.propensities is None:
            raise OverlapError("dataset has no logged propensities and no behavior policy was given")
        den = data.propensities
    elif isinstance(behavior, Policy):
        den = behavior.prob_of(data.states, data.actions)
    elif hasattr(behavior, "prob_of"):
        den = behavior.prob_of(data.states, data.actions)
    else:
        den = np.asarray(behavior, dtype=float)
        if den.shape != num.shape:
            raise ShapeError("behavior propensities have the wrong length")
    if np.any(den <= 0):
        raise OverlapError("behavior propensity is zero at a logged action")
    return num / den


def snips_normalize(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0:
        raise DegenerateWeightsError("weights sum to zero")
    return (w / total) * w.size


def weighted_W(ws: WeightedSample, alpha: float) -> float:
    """``(1/N) sum_i w_i exp(-r_i / alpha)``."""
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    return float(ws.curve.moment(alpha, 0))


def degeneracy_stats(ws: WeightedSample) -> DegeneracyStats:
    """Weight sums and thresholds.

    ``infinite_threshold = -log S_w``: below it the maximizer escapes to
    infinity. ``zero_threshold = -log S_w^m``: above it the maximizer collapses
    to zero. Both are taken from log sums, so subnormal weights stay finite.
    """
    pos = ws.weights > 0
    m = float(ws.rewards[pos].min())
    total = float(ws.weights.sum())
    total_min = float(ws.weights[pos & (ws.rewards == m)].sum())
    log_n = math.log(ws.n)
    return DegeneracyStats(total / ws.n, total_min / ws.n, m, log_n - math.log(total), log_n - math.log(total_min))


def degeneracy_classify(ws: WeightedSample, delta: float):
    """Regime of the empirical dual maximizer.

    ``AlphaInfinite`` iff ``delta < -log S_w``; ``AlphaZero`` iff
    ``delta > -log S_w^m``; otherwise ``Finite``. The two conditions are
    mutually exclusive because ``S_w^m <= S_w``. Exact ties resolve to
    ``Finite`` with a :class:`DegeneracyBoundaryWarning`.
    """
    if not delta > 0:
        raise DomainError("delta must be positive")
    st = degeneracy_stats(ws)
    t_inf, t_zero = st.infinite_threshold, st.zero_threshold
    if delta == t_inf or delta == t_zero:
        warnings.warn("delta equals a degeneracy threshold; treating as Finite",
                      DegeneracyBoundaryWarning, stacklevel=2)
        return st, Regime.FINITE
    if delta < t_inf:
        return st, Regime.ALPHA_INFINITE
    if delta > t_zero:
        return st, Regime.ALPHA_ZERO
    return st, Regime.FINITE


@dataclass(frozen=True)
class WeightedDroResult:
    """Unpacks as ``(alpha, value, status)``.

    ``AlphaInfinite`` carries ``alpha = value = inf``; ``AlphaZero`` carries
    ``alpha = 0`` and the minimum reward as value.
    """

    alpha: float
    value: float
    status: Regime
    stats: DegeneracyStats
    flags: tuple = field(default_factory=tuple)

    def __iter__(self):
        return iter((self.alpha, self.value, self.status))

    @property
    def finite(self) -> bool:
        return self.status is Regime.FINITE


def weighted_dro_value(ws: WeightedSample, delta: float) -> WeightedDroResult:
    """``sup_{alpha > 0} phi_hat(alpha)`` with the degenerate regimes reported as a status.

    In the Finite regime with ``delta + log S_w > 0`` the maximizer lies in
    ``(0, 1 / (delta + log S_w)]``, which bounds the search.
    """
    st, status = degeneracy_classify(ws, delta)
    if status is Regime.ALPHA_INFINITE:
        return WeightedDroResult(math.inf, math.inf, status, st)
    if status is Regime.ALPHA_ZERO:
        return WeightedDroResult(0.0, st.min_reward, status, st)
    gap = delta - st.infinite_threshold
    hi = 1.0 / gap if gap > 0 else ALPHA_CAP
    hi = min(max(hi, 2 * EPS_ALPHA), ALPHA_CAP)
    res = maximize_curve(ws.curve, delta, EPS_ALPHA, hi)
    return WeightedDroResult(res.alpha, res.value, status, st, res.flags)


def ips_weighted_sample(data: Dataset, target: Policy, behavior=None, *,
                        self_normalize: bool = False, clip_floor: Optional[float] = None) -> WeightedSample:
    """Weighted sample for the IPS (or SNIPS) estimator of the robust value."""
    if behavior is not None and hasattr(behavior, "prob_of") and not isinstance(behavior, Policy):
        den = behavior.prob_of(data.states, data.actions)
    elif behavior is None and data.propensities is not None:
        den = data.propensities
    elif behavior is None:
        raise OverlapError("no behavior propensities available")
    elif isinstance(behavior, Policy):
        den = behavior.prob_of(data.states, data.actions)
    else:
        den = np.asarray(behavior, dtype=float)
    if clip_floor is not None:
        den = np.maximum(den, clip_floor)
    w = propensity_ratios(data, target, den)
    if self_normalize:
        w = snips_normalize(w)
    return WeightedSample(w, data.rewards)


def ips_value(data: Dataset, target: Policy, delta: float, behavior=None, **kw) -> WeightedDroResult:
    return weighted_dro_value(ips_weighted_sample(data, target, behavior, **kw), delta)


def snips_value(data: Dataset, target: Policy, delta: float, behavior=None, **kw) -> WeightedDroResult:
    return weighted_dro_value(ips_weighted_sample(data, target, behavior, self_normalize=True, **kw), delta)
