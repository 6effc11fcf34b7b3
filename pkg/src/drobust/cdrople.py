"""Continuum doubly robust policy learning for the worst-case value.

For a policy ``pi`` the cross-fitted doubly robust estimate of
``W(pi, alpha)`` is

    W_dr(pi, alpha) = (1/N) sum_i [ w_i (exp(-r_i/alpha) - f0_i(s_i, a_i; alpha))
                                   + sum_a pi(a|s_i) f0_i(s_i, a; alpha) ],

where ``w_i = pi(a_i|s_i) / pi0_hat(a_i|s_i)`` and ``f0_i`` is the continuum
regression ``sum_j omega_j(s, a) exp(-r_j/alpha)`` fitted without sample
``i``'s fold. It is linear in the policy probabilities and, for a fixed
policy, a signed combination ``sum_j c_j exp(-r_j/alpha)`` of the observed
rewards. Learning alternates maximization over ``alpha`` with first-order
steps that decrease ``W_dr`` at the current ``alpha``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from scipy import sparse

from .core import EPS_ALPHA, Dataset, FoldAssignment, crossfit_split, make_rng
from .dual import DualResult, RewardCurve, maximize_curve
from .errors import ConfigurationError, DrNegativeWError, OptimizationFailure
from .nuisance import NuisanceSpec, build_propensity, fit_continuum_weights
from .policy import ParametricPolicy, Policy, make_policy


@dataclass(frozen=True)
class LearnConfig:
    """Settings for :func:`cdr2opl`.

    ``objective`` is ``"cdr2opl"`` (doubly robust) or ``"snips-max"``
    (self-normalized importance weighting baseline).
    """

    delta: float
    folds: int = 5
    policy_kind: str = "linear-softmax"
    hidden: int = 32
    restarts: int = 10
    learning_rate: float = 0.01
    inner_steps: int = 10
    max_outer_iters: int = 100
    convergence_tol: float = 1e-6
    init_scale: float = 0.5
    alpha_min: float = EPS_ALPHA
    alpha_max: Optional[float] = None
    objective: str = "cdr2opl"
    seed: int = 0
    nuisance: NuisanceSpec = field(default_factory=NuisanceSpec)

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigurationError("delta must be positive")
        if self.restarts < 1:
            raise ConfigurationError("need at least one restart")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.folds < 2:
            raise ConfigurationError("need at least two folds")
        if self.policy_kind not in ("linear-softmax", "mlp-softmax"):
            raise ConfigurationError(f"unknown policy kind {self.policy_kind!r}")
        if self.objective not in ("cdr2opl", "snips-max"):
            raise ConfigurationError(f"unknown objective {self.objective!r}")

    @property
    def alpha_upper(self) -> float:
        return 1.0 / self.delta if self.alpha_max is None else self.alpha_max

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "nuisance"}
        d["nuisance"] = self.nuisance.to_json()
        return d


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


class _Objective:
    """Shared interface: a reward curve per policy plus the gradient of ``W``."""

    data: Dataset

    def coef(self, policy: Policy) -> np.ndarray:
        raise NotImplementedError

    def curve(self, policy: Policy) -> RewardCurve:
        return RewardCurve(self.coef(policy), self.data.rewards)

    def W(self, policy: Policy, alpha: float) -> float:
        return float(self.coef(policy) @ np.exp(-self.data.rewards / alpha))

    def grad_W(self, policy: ParametricPolicy, alpha: float) -> np.ndarray:
        raise NotImplementedError

    def value(self, policy: Policy, delta: float, lo: float = EPS_ALPHA, hi: Optional[float] = None,
              warm_start: Optional[float] = None) -> DualResult:
        return maximize_curve(self.curve(policy), delta, lo, hi, warm_start=warm_start)


class DrObjective(_Objective):
    """Cross-fitted doubly robust ``W_dr(pi, alpha)``.

    ``omega_obs`` and ``omega[a]`` are ``(N, N)`` sparse matrices whose row
    ``i`` holds sample ``i``'s out-of-fold continuum weights at its logged
    action and at action ``a``; ``prop`` holds the clipped behavior
    propensities at the logged actions.
    """

    def __init__(self, data: Dataset, folds: FoldAssignment, prop: np.ndarray, omega_obs, omega: list):
        self.data = data
        self.folds = folds
        self.prop = np.asarray(prop, dtype=float)
        self.omega_obs = omega_obs.tocsr()
        self.omega = [o.tocsr() for o in omega]
        self.n = len(data)
        self._omega_obs_t = self.omega_obs.T.tocsr()
        self._omega_t = [o.T.tocsr() for o in self.omega]
        self._cache_alpha = None

    def _pi(self, policy: Policy) -> np.ndarray:
        return policy.probs(self.data.states)

    def coef(self, policy: Policy) -> np.ndarray:
        pi = self._pi(policy)
        rows = np.arange(self.n)
        w = pi[rows, self.data.actions] / self.prop
        c = w - self._omega_obs_t @ w
        for a, ot in enumerate(self._omega_t):
            c = c + ot @ pi[:, a]
        return c / self.n

    def weight_matrix(self, alpha: float) -> np.ndarray:
        """``G`` with ``W_dr = sum_{i,a} G[i, a] pi(a | s_i)`` (cached for the last ``alpha``)."""
        if self._cache_alpha is not None and self._cache_alpha[0] == alpha:
            return self._cache_alpha[1]
        e = np.exp(-self.data.rewards / alpha)
        G = np.stack([o @ e for o in self.omega], axis=1)
        rows = np.arange(self.n)
        G[rows, self.data.actions] += (e - self.omega_obs @ e) / self.prop
        G /= self.n
        G.setflags(write=False)
        self._cache_alpha = (alpha, G)
        return G

    def W(self, policy: Policy, alpha: float) -> float:
        return float(np.sum(self.weight_matrix(alpha) * self._pi(policy)))

    def grad_W(self, policy: ParametricPolicy, alpha: float) -> np.ndarray:
        return policy.vjp(self.data.states, self.weight_matrix(alpha))


class SnipsObjective(_Objective):
    """Self-normalized importance-weighted ``W`` (no outcome model)."""

    def __init__(self, data: Dataset, prop: np.ndarray):
        self.data = data
        self.prop = np.asarray(prop, dtype=float)
        self.n = len(data)

    def _w(self, policy):
        return policy.prob_of(self.data.states, self.data.actions) / self.prop

    def coef(self, policy: Policy) -> np.ndarray:
        w = self._w(policy)
        return w / w.sum()

    def grad_W(self, policy: ParametricPolicy, alpha: float) -> np.ndarray:
        w = self._w(policy)
        sw = w.sum()
        e = np.exp(-self.data.rewards / alpha)
        Wv = float(w @ e) / sw
        G = np.zeros((self.n, self.data.action_count))
        G[np.arange(self.n), self.data.actions] = (e - Wv) / (self.prop * sw)
        return policy.vjp(self.data.states, G)


def _scatter(block: sparse.csr_matrix, rows: np.ndarray, cols: np.ndarray, n: int) -> sparse.csr_matrix:
    """Embed a ``(len(rows), len(cols))`` block into an ``(n, n)`` matrix."""
    coo = block.tocoo()
    return sparse.csr_matrix((coo.data, (rows[coo.row], cols[coo.col])), shape=(n, n))


def build_dr_objective(data: Dataset, config: LearnConfig, folds: Optional[FoldAssignment] = None) -> DrObjective:
    """Fit each fold's propensity and continuum weights on its complement."""
    folds = crossfit_split(len(data), config.folds, config.seed) if folds is None else folds
    if folds.n != len(data):
        raise ConfigurationError("fold assignment does not match the dataset size")
    n, A = len(data), data.action_count
    spec = config.nuisance
    prop = np.empty(n)
    obs_parts, all_parts = [], [[] for _ in range(A)]
    for f in range(folds.k):
        rows = folds.indices(f)
        train = folds.complement(f)
        tdata = data.subset(train)
        if callable(spec.propensity):
            pmodel = spec.propensity(tdata)
        else:
            pmodel = build_propensity(tdata, spec, (config.seed, f))
        prop[rows] = pmodel.prob_rows(data, rows)
        if callable(spec.continuum):
            cw = spec.continuum(tdata)
        else:
            cw = fit_continuum_weights(tdata, spec.continuum, (config.seed, f), k=spec.k, bandwidth=spec.bandwidth)
        s = data.states[rows]
        obs_parts.append(_scatter(cw.weights_at(s, data.actions[rows]), rows, train, n))
        for a in range(A):
            all_parts[a].append(_scatter(cw.weights(s, a), rows, train, n))
    omega_obs = sum(obs_parts[1:], obs_parts[0])
    omega = [sum(p[1:], p[0]) for p in all_parts]
    return DrObjective(data, folds, prop, omega_obs, omega)


def build_snips_objective(data: Dataset, config: LearnConfig) -> SnipsObjective:
    spec = config.nuisance
    rows = np.arange(len(data))
    if callable(spec.propensity):
        pmodel = spec.propensity(data)
    else:
        pmodel = build_propensity(data, spec, (config.seed, 0))
    return SnipsObjective(data, pmodel.prob_rows(data, rows))


def dr_objective(dr: _Objective, policy: Policy, alpha: float) -> float:
    """``W_dr(pi, alpha)``."""
    if not alpha > 0:
        raise ConfigurationError("alpha must be positive")
    return dr.W(policy, alpha)


def dr_value(dr: _Objective, policy: Policy, delta: float, **kw) -> DualResult:
    """``max_alpha -alpha log W_dr(pi, alpha) - alpha delta`` over ``[EPS_ALPHA, 1/delta]``.

    Values of ``alpha`` with ``W_dr <= 0`` are excluded and flagged; if none
    remain :class:`DrNegativeWError` is raised.
    """
    return dr.value(policy, delta, **kw)


def policy_gradient_W(dr: _Objective, policy: ParametricPolicy, alpha: float) -> np.ndarray:
    """Exact gradient of ``W_dr(pi_theta, alpha)`` in the policy parameters."""
    return dr.grad_W(policy, alpha)


# ---------------------------------------------------------------------------
# Learner
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected first/second moment step rule (descent direction)."""

    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps

    def step(self, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return -self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class RestartTrace:
    restart: int
    objective: float
    alpha: float
    outer_iters: int
    flags: list = field(default_factory=list)
    history: list = field(default_factory=list)


@dataclass
class LearnResult:
    policy: ParametricPolicy
    objective: float
    alpha: float
    config: LearnConfig
    traces: List[RestartTrace]
    best_restart: int

    def to_json(self) -> dict:
        doc = self.policy.to_json()
        doc["training_config"] = self.config.to_json()
        doc["final_objective"] = self.objective
        doc["final_alpha"] = self.alpha
        return doc


def _run_restart(obj: _Objective, policy: ParametricPolicy, config: LearnConfig, r: int) -> RestartTrace:
    delta, lo, hi = config.delta, config.alpha_min, config.alpha_upper
    theta = policy.params
    opt = Adam(theta.shape[0], config.learning_rate)
    flags: list = []
    history = []
    res = obj.value(policy, delta, lo, hi)
    alpha = res.alpha
    prev_obj = res.value
    it = 0
    for it in range(1, config.max_outer_iters + 1):
        start = theta.copy()
        w_cur = obj.W(policy, alpha)
        for _ in range(config.inner_steps):
            g = obj.grad_W(policy, alpha)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
            step = opt.step(g)
            for _halving in range(21):
                cand = policy.with_params(theta + step)
                w_new = obj.W(cand, alpha)
                if w_new <= w_cur:
                    break
                step = 0.5 * step
            else:
                if "accepted_uphill_step" not in flags:
                    flags.append("accepted_uphill_step")
            theta = theta + step
            policy = cand
            w_cur = w_new
        res = obj.value(policy, delta, lo, hi, warm_start=alpha)
        if not np.isfinite(res.value):
            raise FloatingPointError("objective is not finite")
        alpha = res.alpha
        for fl in res.flags:
            if fl not in flags:
                flags.append(fl)
        history.append(res.value)
        prev_obj = res.value
        if np.linalg.norm(theta - start) < config.convergence_tol:
            break
    trace = RestartTrace(r, prev_obj, alpha, it, flags, history)
    trace.policy = policy  # type: ignore[attr-defined]
    return trace


def cdr2opl(data: Dataset, config: LearnConfig, objective: Optional[_Objective] = None) -> LearnResult:
    """Learn a softmax policy maximizing the estimated worst-case value.

    Each of ``config.restarts`` runs starts from Gaussian parameters of
    scale ``config.init_scale`` and alternates an exact ``alpha``
    maximization with ``config.inner_steps`` first-order steps on ``W`` at
    that ``alpha``. The restart with the highest final objective wins.
    """
    if objective is None:
        objective = build_dr_objective(data, config) if config.objective == "cdr2opl" else \
            build_snips_objective(data, config)
    base = make_policy(config.policy_kind, data.action_count, data.state_dim, config.hidden)
    traces: List[RestartTrace] = []
    for r in range(config.restarts):
        rng = make_rng(config.seed, 51, r)
        pol = base.with_params(config.init_scale * rng.standard_normal(base.n_params))
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                traces.append(_run_restart(objective, pol, config, r))
        except (FloatingPointError, DrNegativeWError) as exc:
            traces.append(RestartTrace(r, math.nan, math.nan, 0, [f"failed: {exc}"]))
    ok = [t for t in traces if np.isfinite(t.objective)]
    if not ok:
        raise OptimizationFailure("all restarts diverged", [asdict_trace(t) for t in traces])
    best = max(ok, key=lambda t: t.objective)
    return LearnResult(best.policy, best.objective, best.alpha, config, traces, best.restart)  # type: ignore


def asdict_trace(t: RestartTrace) -> dict:
    return {"restart": t.restart, "objective": t.objective, "alpha": t.alpha, "outer_iters": t.outer_iters,
            "flags": list(t.flags), "history": list(t.history)}
