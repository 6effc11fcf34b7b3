"""Localized doubly robust estimation of the worst-case policy value.

Cross-fitted nuisances give the doubly robust moments

    W_j(alpha) = mean_i [ sum_a pi(a|s_i) f_j(s_i, a)
                          + w_i (r_i^j exp(-r_i/alpha) - f_j(s_i, a_i)) ],

with ``f_j`` fitted once at an initial ``alpha`` estimate and
``w_i = pi(a_i|s_i) / pi0_hat(a_i|s_i)``. The estimate solves

    M(alpha) = -log W_0(alpha) - W_1(alpha) / (alpha W_0(alpha)) - delta = 0

and reports ``value = -alpha log W_0(alpha) - alpha delta``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import EPS_ALPHA, Dataset, EvalTheta, FoldAssignment, crossfit_split, split_half
from .errors import ConfigurationError, DomainError
from .nuisance import (NuisanceSpec, OutcomeModel, PropensityModel, SmootherOutcome, build_propensity,
                       fit_outcome_localized)
from .policy import Policy
from .weighted import Regime, WeightedSample, snips_normalize, weighted_dro_value


class DegenerateEstimateWarning(UserWarning):
    """An intermediate estimate sat on the boundary of the alpha range."""


@dataclass(frozen=True)
class LdropeConfig:
    """Settings for :func:`ldr2ope`.

    ``newton`` is ``"scalar"`` (root of ``M``) or ``"multidim"`` (joint
    Newton on ``(alpha, W0, W1, value)``). ``recursions`` reruns the
    localization at the previous estimate that many times.
    """

    delta: float
    folds: int = 5
    recursions: int = 0
    newton: str = "scalar"
    newton_tol: float = 1e-10
    newton_max_iter: int = 100
    self_normalize_dr: bool = True
    seed: int = 0
    nuisance: NuisanceSpec = field(default_factory=NuisanceSpec)

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigurationError("delta must be positive")
        if self.folds < 2:
            raise ConfigurationError("need at least two folds")
        if self.recursions < 0:
            raise ConfigurationError("recursions must be nonnegative")
        if self.newton not in ("scalar", "multidim"):
            raise ConfigurationError(f"unknown Newton variant {self.newton!r}")

    @property
    def alpha_max(self) -> float:
        return 1.0 / self.delta


# ---------------------------------------------------------------------------
# Moment system
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """``W_j(alpha) = c_j + mean(w * r^j * exp(-r / alpha))``.

    ``c_j`` collects the alpha-free plug-in and residual-offset terms.
    """

    c0: float
    c1: float
    w: np.ndarray
    r: np.ndarray

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def _e(self, alpha):
        if not alpha > 0:
            raise DomainError("alpha must be positive")
        return self.w * np.exp(-self.r / alpha)

    def W(self, alpha: float, j: int) -> float:
        c = self.c0 if j == 0 else self.c1 if j == 1 else 0.0
        return float(c + np.mean(self._e(alpha) * self.r**j))

    def dW(self, alpha: float, j: int) -> float:
        """``d W_j / d alpha = mean(w r^{j+1} exp(-r/alpha)) / alpha^2``."""
        return float(np.mean(self._e(alpha) * self.r ** (j + 1)) / alpha**2)

    def M(self, alpha: float, delta: float) -> float:
        """Moment function; ``nan`` where ``W_0 <= 0``."""
        w0, w1 = self.W(alpha, 0), self.W(alpha, 1)
        if not w0 > 0:
            return math.nan
        return -math.log(w0) - (w1 / w0) / alpha - delta

    def dM(self, alpha: float) -> float:
        w0, w1 = self.W(alpha, 0), self.W(alpha, 1)
        if not w0 > 0:
            return math.nan
        # ratios first so a subnormal W_0 cannot overflow the products
        q1, q_d0, q_d1 = w1 / w0, self.dW(alpha, 0) / w0, self.dW(alpha, 1) / w0
        return -q_d0 - (q_d1 - q1 * q_d0) / alpha + q1 / alpha**2

    def value(self, alpha: float, delta: float) -> float:
        w0 = self.W(alpha, 0)
        if not w0 > 0:
            return math.nan
        return -alpha * math.log(w0) - alpha * delta

    def theta(self, alpha: float, delta: float) -> EvalTheta:
        return EvalTheta(alpha, self.W(alpha, 0), self.W(alpha, 1), self.value(alpha, delta))


@dataclass
class NewtonResult:
    alpha: float
    iterations: int
    converged: bool
    flags: list = field(default_factory=list)


def _bracket_root(ms: MomentSystem, delta: float, lo: float, hi: float):
    """Sign-change bracket of ``M`` on a log grid, or a boundary with a flag."""
    grid = np.geomspace(lo, hi, 200)
    vals = np.array([ms.M(a, delta) for a in grid])
    ok = np.isfinite(vals)
    if not ok.any():
        return None, "moment_undefined"
    g, v = grid[ok], vals[ok]
    pos = v > 0
    for i in range(len(g) - 1):
        if pos[i] and not pos[i + 1]:
            return (g[i], g[i + 1]), None
    if np.all(pos):
        return hi, "no_root_upper_boundary"
    return lo, "no_root_lower_boundary"


def _bisect(ms, delta, a, b, tol, max_iter=200):
    fa = ms.M(a, delta)
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        fm = ms.M(mid, delta)
        if not np.isfinite(fm):
            a = mid
            continue
        if (fm > 0) == (fa > 0):
            a, fa = mid, fm
        else:
            b = mid
        if b - a < tol:
            break
    return 0.5 * (a + b)


def newton_scalar(ms: MomentSystem, delta: float, alpha_start: float, *, tol: float = 1e-10,
                  max_iter: int = 100, lo: float = EPS_ALPHA, hi: Optional[float] = None) -> NewtonResult:
    """Projected Newton iteration ``alpha <- alpha - M / M'`` on ``[lo, 1/delta]``.

    Falls back to bisection on a sign-change bracket if Newton does not
    converge; with no sign change the nearer boundary is returned and
    flagged.
    """
    hi = 1.0 / delta if hi is None else hi
    a = min(max(float(alpha_start), lo), hi)
    for it in range(1, max_iter + 1):
        m = ms.M(a, delta)
        dm = ms.dM(a)
        if not (np.isfinite(m) and np.isfinite(dm)) or dm == 0:
            break
        a_new = min(max(a - m / dm, lo), hi)
        if abs(a_new - a) < tol:
            return NewtonResult(a_new, it, True)
        a = a_new
    br, flag = _bracket_root(ms, delta, lo, hi)
    if flag is not None:
        return NewtonResult(float(br) if br is not None else a, max_iter, False, ["degenerate", flag])
    root = _bisect(ms, delta, br[0], br[1], tol)
    # polish the bisection root with Newton steps that stay inside the bracket
    for _ in range(5):
        m, dm = ms.M(root, delta), ms.dM(root)
        if not (np.isfinite(m) and np.isfinite(dm)) or dm == 0:
            break
        nxt = root - m / dm
        if not br[0] <= nxt <= br[1] or abs(nxt - root) < 1e-16:
            break
        root = nxt
    return NewtonResult(root, max_iter, True, ["newton_fallback_bisection"])


def newton_multidim(ms: MomentSystem, delta: float, theta_start: EvalTheta, *, tol: float = 1e-10,
                    max_iter: int = 100, lo: float = EPS_ALPHA, hi: Optional[float] = None):
    """Joint Newton on ``theta = (alpha, W0, W1, value)``.

    Returns ``(EvalTheta, flags)``. A singular Jacobian or divergence falls
    back to :func:`newton_scalar` and is flagged.
    """
    hi = 1.0 / delta if hi is None else hi
    th = theta_start.as_array().astype(float)
    flags: list = []
    for it in range(1, max_iter + 1):
        a, w0, w1, v = th
        if not (a > 0 and w0 > 0):
            break
        F = np.array([
            ms.W(a, 0) - w0,
            ms.W(a, 1) - w1,
            -math.log(w0) - w1 / (a * w0) - delta,
            -a * math.log(w0) - a * delta - v,
        ])
        J = np.array([
            [ms.dW(a, 0), -1.0, 0.0, 0.0],
            [ms.dW(a, 1), 0.0, -1.0, 0.0],
            [w1 / (a * a * w0), -1.0 / w0 + w1 / (a * w0 * w0), -1.0 / (a * w0), 0.0],
            [-math.log(w0) - delta, -a / w0, 0.0, -1.0],
        ])
        try:
            if np.linalg.cond(J) > 1e14:
                raise np.linalg.LinAlgError("ill-conditioned")
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            flags.append("singular_jacobian")
            break
        new = th - step
        new[0] = min(max(new[0], lo), hi)
        if new[1] <= 0:
            new[1] = 0.5 * th[1]
        if np.linalg.norm(new - th) < tol:
            return EvalTheta(*new), flags
        th = new
    flags.append("multidim_fallback_scalar")
    res = newton_scalar(ms, delta, min(max(theta_start.alpha, lo), hi), tol=tol, max_iter=max_iter, lo=lo, hi=hi)
    return ms.theta(res.alpha, delta), flags + res.flags


# ---------------------------------------------------------------------------
# Algorithm
# ---------------------------------------------------------------------------


@dataclass
class FoldNuisance:
    fold: int
    propensity: PropensityModel
    f0: OutcomeModel
    f1: OutcomeModel
    alpha_init: float
    flags: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"alpha_init": self.alpha_init,
                "nuisance_kinds": {"propensity": self.propensity.kind, "f0": self.f0.kind, "f1": self.f1.kind},
                "flags": list(self.flags)}


@dataclass(frozen=True, eq=False)
class CrossFitPlan:
    """Fold assignment plus, per fold, the two halves of its complement."""

    folds: FoldAssignment
    halves: tuple

    def permuted(self, perm) -> "CrossFitPlan":
        """The same plan expressed for data reordered as ``data[perm]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.shape[0])
        fa = FoldAssignment(self.folds.fold_of[perm], self.folds.k)
        halves = tuple((np.sort(inv[h1]), np.sort(inv[h2])) for h1, h2 in self.halves)
        return CrossFitPlan(fa, halves)


def make_crossfit_plan(n: int, k: int, seed, round_: int = 0) -> CrossFitPlan:
    folds = crossfit_split(n, k, seed)
    return CrossFitPlan(folds, _halves(folds, seed, round_))


def _halves(folds: FoldAssignment, seed, round_: int) -> tuple:
    return tuple(split_half(folds.complement(f), (int(seed) * 1009 + 7919 * round_ + f) % (2**32))
                 for f in range(folds.k))


def initial_estimate(data: Dataset, policy: Policy, delta: float, propensities: np.ndarray):
    """SNIPS robust estimate of ``alpha`` on a slice.

    ``propensities`` are the behavior probabilities at the slice's logged
    actions. Returns ``(alpha, flags)``; degenerate regimes return the
    corresponding end of ``[EPS_ALPHA, 1 / delta]`` with a warning.
    """
    w = policy.prob_of(data.states, data.actions) / propensities
    if not np.any(w > 0):
        warnings.warn("target policy puts no mass on the slice's actions", DegenerateEstimateWarning, stacklevel=2)
        return 1.0 / delta, ["degenerate_initial_estimate", "zero_weights"]
    res = weighted_dro_value(WeightedSample(snips_normalize(w), data.rewards), delta)
    if res.status is Regime.ALPHA_ZERO:
        warnings.warn("initial estimate collapsed to alpha = 0", DegenerateEstimateWarning, stacklevel=2)
        return EPS_ALPHA, ["degenerate_initial_estimate", str(res.status)]
    if res.status is Regime.ALPHA_INFINITE:
        warnings.warn("initial estimate escaped to alpha = infinity", DegenerateEstimateWarning, stacklevel=2)
        return 1.0 / delta, ["degenerate_initial_estimate", str(res.status)]
    alpha = min(res.alpha, 1.0 / delta)
    flags = []
    if "degenerate_constant" in res.flags or alpha <= EPS_ALPHA * (1 + 1e-9):
        warnings.warn("initial estimate sits on the lower alpha boundary", DegenerateEstimateWarning, stacklevel=2)
        flags = ["degenerate_initial_estimate"]
    return alpha, flags


def _fit_outcome(spec: NuisanceSpec, train: Dataset, alpha: float, j: int, seed) -> OutcomeModel:
    if callable(spec.outcome):
        return spec.outcome(train, alpha, j)
    return fit_outcome_localized(train, alpha, j, spec.outcome, seed, k=spec.k, bandwidth=spec.bandwidth,
                                 env=spec.env)


def _fit_propensity(spec: NuisanceSpec, train: Dataset, seed) -> PropensityModel:
    if callable(spec.propensity):
        return spec.propensity(train)
    return build_propensity(train, spec, seed)


def fit_fold_nuisances(data: Dataset, policy: Policy, plan: CrossFitPlan, config: LdropeConfig,
                       alpha_inits: Optional[Sequence[float]] = None) -> List[FoldNuisance]:
    """Fit every fold's nuisances on its complement (outcomes on the second half only)."""
    out = []
    spec = config.nuisance
    for f in range(plan.folds.k):
        train_rows = plan.folds.complement(f)
        j1, j2 = plan.halves[f]
        prop = _fit_propensity(spec, data.subset(train_rows), (config.seed, f))
        flags: list = []
        if alpha_inits is None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateEstimateWarning)
                a_init, flags = initial_estimate(data.subset(j1), policy, config.delta, prop.prob_rows(data, j1))
            if flags:
                # boundary estimates are useless for localization; use the midpoint instead
                a_init = 0.5 / config.delta
                flags = flags + ["alpha_init_midpoint"]
        else:
            a_init = float(alpha_inits[f])
        train2 = data.subset(j2)
        f0 = _fit_outcome(spec, train2, a_init, 0, (config.seed, f, 0))
        f1 = _fit_outcome(spec, train2, a_init, 1, (config.seed, f, 1))
        if isinstance(f0, SmootherOutcome) and isinstance(f1, SmootherOutcome):
            # same training slice and hyperparameters: share neighbor queries
            f1.smoother = f0.smoother
        out.append(FoldNuisance(f, prop, f0, f1, a_init, flags))
    return out


def build_moment_system(data: Dataset, folds: FoldAssignment, policy: Policy, nuisances: Sequence[FoldNuisance],
                        self_normalize: bool = True) -> MomentSystem:
    """Assemble the cross-fitted moments from per-fold nuisances."""
    if folds.n != len(data):
        raise ConfigurationError("fold assignment does not match the dataset size")
    if len(nuisances) != folds.k or sorted(nz.fold for nz in nuisances) != list(range(folds.k)):
        raise ConfigurationError("need exactly one fitted nuisance set per fold")
    n = len(data)
    w = np.empty(n)
    plug = np.empty((2, n))
    obs = np.empty((2, n))
    for nz in nuisances:
        rows = folds.indices(nz.fold)
        if rows.size == 0:
            continue
        s = data.states[rows]
        a = data.actions[rows]
        pi = policy.probs(s)
        w[rows] = pi[np.arange(rows.size), a] / nz.propensity.prob_rows(data, rows)
        for j, model in enumerate((nz.f0, nz.f1)):
            fa = model.predict_all(s)
            plug[j, rows] = np.sum(pi * fa, axis=1)
            obs[j, rows] = fa[np.arange(rows.size), a]
    if self_normalize:
        mw = w.mean()
        if mw > 0:
            w = w / mw
    c = np.mean(plug - w * obs, axis=1)
    wr = w.copy()
    wr.setflags(write=False)
    return MomentSystem(float(c[0]), float(c[1]), wr, np.asarray(data.rewards))


@dataclass
class LdropeResult:
    theta: EvalTheta
    flags: list
    per_fold: list
    moment_system: Optional[MomentSystem] = None
    rounds: int = 1

    @property
    def value(self) -> float:
        return self.theta.value

    @property
    def alpha(self) -> float:
        return self.theta.alpha

    def to_json(self) -> dict:
        return {"alpha": self.theta.alpha, "w0": self.theta.w0, "w1": self.theta.w1, "value": self.theta.value,
                "flags": list(self.flags), "per_fold": [p.to_json() for p in self.per_fold]}


def _solve(ms: MomentSystem, config: LdropeConfig, alpha0: float):
    flags: list = []
    if config.newton == "scalar":
        res = newton_scalar(ms, config.delta, alpha0, tol=config.newton_tol, max_iter=config.newton_max_iter)
        return ms.theta(res.alpha, config.delta), res.flags
    a0 = min(max(alpha0, EPS_ALPHA), config.alpha_max)
    w0 = ms.W(a0, 0)
    if not w0 > 0:
        flags.append("multidim_infeasible_start")
        res = newton_scalar(ms, config.delta, alpha0, tol=config.newton_tol, max_iter=config.newton_max_iter)
        return ms.theta(res.alpha, config.delta), flags + res.flags
    start = ms.theta(a0, config.delta)
    th, fl = newton_multidim(ms, config.delta, start, tol=config.newton_tol, max_iter=config.newton_max_iter)
    return th, flags + fl


def ldr2ope(data: Dataset, policy: Policy, config: LdropeConfig, plan: Optional[CrossFitPlan] = None) -> LdropeResult:
    """Localized doubly robust worst-case value of ``policy``.

    ``plan`` overrides the folds and half-splits drawn from ``config.seed``.
    """
    r = data.rewards
    if np.all(r == r[0]):
        c = float(r[0])
        a = EPS_ALPHA
        return LdropeResult(EvalTheta(a, math.exp(-c / a), c * math.exp(-c / a), c), ["degenerate_constant"], [])
    if plan is None:
        plan = make_crossfit_plan(len(data), config.folds, config.seed)
    elif plan.folds.n != len(data) or plan.folds.k != len(plan.halves):
        raise ConfigurationError("cross-fitting plan does not match the dataset")
    alpha_inits = None
    theta = None
    flags: list = []
    nuis: list = []
    ms = None
    for round_ in range(config.recursions + 1):
        if round_ > 0:
            plan = CrossFitPlan(plan.folds, _halves(plan.folds, config.seed, round_))
            alpha_inits = [theta.alpha] * plan.folds.k
        nuis = fit_fold_nuisances(data, policy, plan, config, alpha_inits)
        ms = build_moment_system(data, plan.folds, policy, nuis, config.self_normalize_dr)
        alpha0 = float(np.mean([nz.alpha_init for nz in nuis]))
        theta, flags = _solve(ms, config, alpha0)
    for nz in nuis:
        for fl in nz.flags:
            if fl not in flags:
                flags.append(fl)
    return LdropeResult(theta, flags, nuis, ms, config.recursions + 1)
