"""Simulation environments and ground-truth oracles.

``Softmax5Env`` draws states uniformly on ``[-1, 1]^2``, logs actions with a
softmax behavior policy over the five fifth roots of unity, and emits a
Gaussian reward mapped into ``[0, 1]`` by ``r = clip((raw + 2) / 4, 0, 1)``.
Conditional moments ``E[R^j exp(-R/alpha) | s, a]`` are available in
closed form, so oracle values only need Monte Carlo over states.

``DiscreteEnv`` is a finite state/action/reward table with exact oracles.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.optimize import minimize
from scipy.special import erfcx, ndtr
from scipy.stats import qmc

from .core import EPS_ALPHA, Dataset, make_rng
from .dual import DiscreteRewardDist, _golden, maximize_kl_dual
from .errors import ConfigurationError, DomainError
from .policy import LinearSoftmaxPolicy, ParametricPolicy, Policy, TabularPolicy, make_policy

_SQRT2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _mills_gap(a: np.ndarray, terms: int = 60) -> np.ndarray:
    """``phi(a) / Q(a) - a`` for large ``a`` by its continued fraction."""
    t = a.copy()
    for k in range(terms, 1, -1):
        t = a + k / t
    return 1.0 / t


def clipped_normal_moments(mean, sd, alpha, j: int):
    """``E[R^j exp(-R/alpha)]`` for ``R = clip(U, 0, 1)``, ``U ~ N(mean, sd^2)``.

    Vectorized over ``mean`` and ``sd``; stable for ``alpha`` down to the
    search cutoff by working with scaled complementary error functions in
    the far tail.
    """
    if j not in (0, 1):
        raise DomainError("only j in {0, 1} is available in closed form")
    m = np.asarray(mean, dtype=float)
    s = np.asarray(sd, dtype=float)
    m, s = np.broadcast_arrays(m, s)
    p_top = ndtr((m - 1.0) / s)
    top = p_top * math.exp(-1.0 / alpha)
    mp = m - s * s / alpha
    a = -mp / s
    b = (1.0 - mp) / s

    cont = np.empty(m.shape)
    eu = np.empty(m.shape)
    lo = a < 0
    if lo.any():
        al, bl, ml, sl = a[lo], b[lo], m[lo], s[lo]
        z = ndtr(bl) - ndtr(al)
        cont[lo] = np.exp(-ml / alpha + sl * sl / (2 * alpha * alpha)) * z
        phi_a = np.exp(-0.5 * al * al) / math.sqrt(2 * math.pi)
        phi_b = np.exp(-0.5 * bl * bl) / math.sqrt(2 * math.pi)
        eu[lo] = mp[lo] + sl * (phi_a - phi_b) / z
    hi = ~lo
    if hi.any():
        ah, bh, mh, sh = a[hi], b[hi], m[hi], s[hi]
        rho = np.exp(-0.5 * (bh - ah) * (bh + ah))
        bracket = erfcx(ah / _SQRT2) - rho * erfcx(bh / _SQRT2)
        cont[hi] = np.exp(-mh * mh / (2 * sh * sh)) * 0.5 * bracket
        mid = ah <= 8.0
        g = np.empty(ah.shape)
        if mid.any():
            g[mid] = (1 - rho[mid]) * _SQRT_2_OVER_PI / bracket[mid] - ah[mid]
        if (~mid).any():
            g[~mid] = _mills_gap(ah[~mid])
        eu[hi] = sh * g
    if j == 0:
        return ndtr(-m / s) + top + cont
    return top + cont * eu


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------


def _roots_of_unity(k: int) -> np.ndarray:
    ang = 2 * np.pi * np.arange(k) / k
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


@dataclass(frozen=True, eq=False)
class Softmax5Env:
    """Five-action softmax environment on ``[-1, 1]^2``.

    ``mean_mode="linear"`` uses raw reward mean ``s @ beta_a``;
    ``"symmetric"`` gives every action raw mean 0 so that actions differ
    only in their noise level.
    """

    sigma: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)
    behavior_temperature: float = 2.0
    mean_mode: str = "linear"
    name: str = "softmax5"

    def __post_init__(self):
        if len(self.sigma) != 5 or min(self.sigma) <= 0:
            raise ConfigurationError("sigma must hold five positive entries")
        if self.mean_mode not in ("linear", "symmetric"):
            raise ConfigurationError(f"unknown mean mode {self.mean_mode!r}")

    action_count = 5
    state_dim = 2

    @property
    def beta(self) -> np.ndarray:
        return _roots_of_unity(5)

    def raw_mean(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        if self.mean_mode == "symmetric":
            return np.zeros((s.shape[0], 5))
        return s @ self.beta.T

    def behavior_policy(self) -> LinearSoftmaxPolicy:
        return LinearSoftmaxPolicy(self.behavior_temperature * self.beta)

    def target_policy(self, temperature: float = 1.0) -> LinearSoftmaxPolicy:
        return target_policy(self, temperature)

    def sample_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(n, 2))

    def reward_params(self, states):
        """Mean and sd of the pre-clip reward ``(raw + 2) / 4`` per action, shape ``(n, 5)``."""
        m = (self.raw_mean(states) + 2.0) / 4.0
        s = np.broadcast_to(np.asarray(self.sigma) / 4.0, m.shape)
        return m, s

    def sample_rewards(self, rng, states, actions) -> np.ndarray:
        m, s = self.reward_params(states)
        idx = np.arange(len(actions))
        u = m[idx, actions] + s[idx, actions] * rng.standard_normal(len(actions))
        return np.clip(u, 0.0, 1.0)

    def outcome_moments(self, states, alpha: float, j: int) -> np.ndarray:
        """Exact ``f_j(s, a; alpha)`` for every action, shape ``(n, 5)``."""
        m, s = self.reward_params(states)
        return clipped_normal_moments(m, s, alpha, j)

    @property
    def density_floor(self) -> float:
        """Infimum over states, actions and ``r in (0, 1)`` of the reward density."""
        if self.mean_mode == "symmetric":
            m_lo = m_hi = 0.5
        else:
            m_lo, m_hi = (2 - math.sqrt(2)) / 4, (2 + math.sqrt(2)) / 4
        far = max(1.0 - m_lo, m_hi)
        dens = [math.exp(-0.5 * (far / (sd / 4)) ** 2) / ((sd / 4) * math.sqrt(2 * math.pi)) for sd in self.sigma]
        return min(dens)

    def to_json(self) -> dict:
        return {"name": self.name, "sigma": list(self.sigma),
                "behavior_temperature": self.behavior_temperature, "mean_mode": self.mean_mode}


_DEFAULT_REWARD_PROBS = (
    ((0.2, 0.5, 0.3), (0.1, 0.3, 0.6)),
    ((0.5, 0.2, 0.3), (0.3, 0.4, 0.3)),
)


@dataclass(frozen=True, eq=False)
class DiscreteEnv:
    """Finite environment; the state vector holds the state index."""

    state_probs: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    behavior: np.ndarray = field(default_factory=lambda: np.array([[0.6, 0.4], [0.3, 0.7]]))
    reward_support: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.5, 1.0]))
    reward_probs: np.ndarray = field(default_factory=lambda: np.array(_DEFAULT_REWARD_PROBS))
    name: str = "discrete"

    def __post_init__(self):
        sp = np.asarray(self.state_probs, dtype=float)
        bh = np.asarray(self.behavior, dtype=float)
        rs = np.asarray(self.reward_support, dtype=float)
        rp = np.asarray(self.reward_probs, dtype=float)
        S, A = bh.shape
        if sp.shape != (S,) or rp.shape != (S, A, rs.shape[0]):
            raise ConfigurationError("inconsistent discrete environment tables")
        for t in (sp, bh, rp):
            if np.any(t < 0) or np.any(np.abs(t.sum(axis=-1) - 1) > 1e-12):
                raise ConfigurationError("discrete environment tables must be normalized")
        if np.any(rs < 0) or np.any(rs > 1):
            raise ConfigurationError("reward support must lie in [0, 1]")
        for k, v in (("state_probs", sp), ("behavior", bh), ("reward_support", rs), ("reward_probs", rp)):
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @property
    def action_count(self) -> int:
        return self.behavior.shape[1]

    @property
    def state_count(self) -> int:
        return self.behavior.shape[0]

    state_dim = 1

    def behavior_policy(self) -> TabularPolicy:
        return TabularPolicy(self.behavior)

    def target_policy(self, temperature: float = 1.0) -> TabularPolicy:
        return target_policy(self, temperature)

    def sample_states(self, rng, n: int) -> np.ndarray:
        return rng.choice(self.state_count, size=n, p=self.state_probs).astype(float)[:, None]

    def sample_rewards(self, rng, states, actions) -> np.ndarray:
        s = states[:, 0].astype(int)
        cdf = np.cumsum(self.reward_probs[s, actions], axis=1)
        u = rng.uniform(size=len(actions))
        k = np.minimum((u[:, None] > cdf).sum(axis=1), self.reward_support.shape[0] - 1)
        return self.reward_support[k]

    def outcome_moments(self, states, alpha: float, j: int) -> np.ndarray:
        s = np.asarray(states)[:, 0].astype(int)
        r = self.reward_support
        vals = self.reward_probs @ (r**j * np.exp(-r / alpha))
        return vals[s]

    def reward_distribution(self, policy: Policy) -> DiscreteRewardDist:
        """Exact law of ``R(pi(S))``."""
        pi = policy.probs(np.arange(self.state_count, dtype=float)[:, None])
        mix = np.einsum("s,sa,sak->k", self.state_probs, pi, self.reward_probs)
        keep = mix > 0
        return DiscreteRewardDist(self.reward_support[keep], mix[keep] / mix[keep].sum())

    def to_json(self) -> dict:
        return {"name": self.name, "state_probs": self.state_probs.tolist(), "behavior": self.behavior.tolist(),
                "reward_support": self.reward_support.tolist(), "reward_probs": self.reward_probs.tolist()}


Env = Union[Softmax5Env, DiscreteEnv]


def env_from_json(doc: dict) -> Env:
    name = doc.get("name")
    if name == "softmax5":
        return Softmax5Env(tuple(doc.get("sigma", (0.1, 0.2, 0.3, 0.4, 0.5))),
                           float(doc.get("behavior_temperature", 2.0)), doc.get("mean_mode", "linear"))
    if name == "discrete":
        return DiscreteEnv(np.array(doc["state_probs"]), np.array(doc["behavior"]),
                           np.array(doc["reward_support"]), np.array(doc["reward_probs"]))
    raise ConfigurationError(f"unknown environment {name!r}")


def make_env(name: str) -> Env:
    if name == "softmax5":
        return Softmax5Env()
    if name in ("softmax5-symmetric", "softmax5-sym"):
        return Softmax5Env(mean_mode="symmetric")
    if name in ("discrete-default", "discrete"):
        return DiscreteEnv()
    raise ConfigurationError(f"unknown environment {name!r}")


def env_hash(env: Env) -> str:
    return hashlib.sha256(json.dumps(env.to_json(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Sampling and policies
# ---------------------------------------------------------------------------


def sample_dataset(env: Env, n: int, seed, log_propensity: bool = True) -> Dataset:
    if n < 1:
        raise ConfigurationError("n must be positive")
    rng = make_rng(seed, 11)
    states = env.sample_states(rng, n)
    pi0 = env.behavior_policy().probs(states)
    cdf = np.cumsum(pi0, axis=1)
    u = rng.uniform(size=n)
    actions = np.minimum((u[:, None] > cdf).sum(axis=1), env.action_count - 1)
    rewards = env.sample_rewards(rng, states, actions)
    prop = pi0[np.arange(n), actions] if log_propensity else None
    return Dataset(states, actions, rewards, env.action_count, prop)


def target_policy(env: Env, temperature: float = 1.0) -> Policy:
    """Softmax policy scaled by ``temperature`` (behavior uses 2).

    For :class:`DiscreteEnv` the rows are proportional to
    ``behavior ** (temperature / 2)``, which has the same two limits.
    """
    if not temperature > 0:
        raise DomainError("temperature must be positive")
    if isinstance(env, DiscreteEnv):
        logits = (temperature / 2.0) * np.log(env.behavior)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return TabularPolicy(z / z.sum(axis=1, keepdims=True))
    return LinearSoftmaxPolicy(temperature * env.beta)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def oracle_states(env: Softmax5Env, m: int, seed) -> np.ndarray:
    """Scrambled Sobol points on ``[-1, 1]^2`` (common random numbers across alpha)."""
    sob = qmc.Sobol(d=2, scramble=True, seed=make_rng(seed, 21))
    k = int(math.ceil(math.log2(max(m, 2))))
    pts = sob.random_base2(k)[:m]
    return 2.0 * pts - 1.0


def maximize_w_function(w_of_alpha, delta: float, lo: float = EPS_ALPHA, hi: Optional[float] = None,
                        n_grid: int = 48, near: Optional[float] = None, rtol: float = 1e-10):
    """Maximize ``-alpha log W(alpha) - alpha delta`` for a callable ``W``.

    ``near`` narrows the initial grid to ``[near / 3, 3 near]`` when the
    maximizer is known to be close; the full range is used if the narrow
    grid peaks at its edge.
    """
    hi = 1.0 / delta if hi is None else hi
    if near is not None:
        a0, b0 = max(lo, near / 3), min(hi, near * 3)
        res = maximize_w_function(w_of_alpha, delta, a0, b0, 8, rtol=rtol)
        if (a0 == lo or res[0] > a0 * 1.2) and (b0 == hi or res[0] < b0 / 1.2):
            return res

    def phi(a):
        w = w_of_alpha(a)
        return -a * math.log(w) - a * delta if w > 0 else -np.inf

    grid = np.geomspace(lo, hi, n_grid)
    vals = np.array([phi(a) for a in grid])
    i = int(np.argmax(vals))
    x, fx = _golden(phi, grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)], rtol=rtol)
    return float(x), float(fx)


@dataclass(frozen=True)
class OracleValue:
    """Unpacks as ``(value, standard_error)``."""

    value: float
    standard_error: float
    alpha: float

    def __iter__(self):
        return iter((self.value, self.standard_error))


def _policy_w(env, policy, states, alpha):
    return float(np.mean(np.sum(policy.probs(states) * env.outcome_moments(states, alpha, 0), axis=1)))


def oracle_value(env: Env, policy: Policy, delta: float, mc_samples: int = 2**14, seed=0,
                 batches: int = 10) -> OracleValue:
    """Ground-truth worst-case value of ``policy``.

    Exact for :class:`DiscreteEnv`. For :class:`Softmax5Env` the reward
    expectation is exact given the state and states are integrated by
    ``mc_samples`` scrambled Sobol points; the standard error comes from
    ``batches`` batch means.
    """
    if not delta > 0:
        raise DomainError("delta must be positive")
    if isinstance(env, DiscreteEnv):
        res = maximize_kl_dual(env.reward_distribution(policy), delta)
        return OracleValue(res.value, 0.0, res.alpha)
    if mc_samples < 10**4:
        raise ConfigurationError("oracle needs at least 10^4 Monte Carlo samples")
    states = oracle_states(env, mc_samples, seed)
    alpha, value = maximize_w_function(lambda a: _policy_w(env, policy, states, a), delta)
    parts = np.array_split(np.arange(states.shape[0]), batches)
    bvals = [maximize_w_function(lambda a, p=p: _policy_w(env, policy, states[p], a), delta, near=alpha)[1]
             for p in parts]
    se = float(np.std(bvals, ddof=1) / math.sqrt(batches))
    return OracleValue(value, se, alpha)


def plain_value(env: Env, policy: Policy, mc_samples: int = 2**14, seed=0) -> float:
    """Non-robust ``E[R(pi(S))]``."""
    if isinstance(env, DiscreteEnv):
        return env.reward_distribution(policy).mean()
    states = oracle_states(env, mc_samples, seed)
    m, s = env.reward_params(states)
    # E[clip(U,0,1)] via moments at alpha -> infinity
    big = 1e12
    f1 = clipped_normal_moments(m, s, big, 1)
    return float(np.mean(np.sum(policy.probs(states) * f1, axis=1)))


_REFERENCE_CACHE: dict = {}


def _oracle_objective(env, base: ParametricPolicy, states, delta):
    """Negative worst-case value and its envelope gradient in the parameters."""

    last = {"alpha": None}

    def fun(theta):
        pol = base.with_params(theta)
        alpha, val = maximize_w_function(lambda a: _policy_w(env, pol, states, a), delta, near=last["alpha"])
        last["alpha"] = alpha
        f0 = env.outcome_moments(states, alpha, 0)
        w = float(np.mean(np.sum(pol.probs(states) * f0, axis=1)))
        grad_w = pol.vjp(states, f0 / states.shape[0])
        return -val, (alpha / w) * grad_w

    return fun


def best_in_class(env: Softmax5Env, delta: float, kind: str = "linear-softmax", *, starts: int = 3,
                  mc_samples: int = 2048, seed=0, bound: float = 25.0, hidden: int = 32) -> ParametricPolicy:
    """Multi-start search for the best robust policy in a parametric class (cached)."""
    key = (env_hash(env), float(delta), kind, hidden, starts, mc_samples, int(seed), bound)
    if key in _REFERENCE_CACHE:
        return _REFERENCE_CACHE[key]
    base = make_policy(kind, env.action_count, env.state_dim, hidden)
    states = oracle_states(env, mc_samples, seed)
    fun = _oracle_objective(env, base, states, delta)
    rng = make_rng(seed, 31)
    best = None
    inits = [np.zeros(base.n_params)] if kind == "linear-softmax" else []
    inits.append(np.concatenate([env.beta.ravel() * 2, np.zeros(5)]) if kind == "linear-softmax" else None)
    inits = [x for x in inits if x is not None]
    while len(inits) < starts:
        inits.append(rng.normal(scale=1.0, size=base.n_params))
    for x0 in inits[:starts]:
        res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=[(-bound, bound)] * base.n_params,
                       options={"maxiter": 300})
        if best is None or res.fun < best.fun:
            best = res
    pol = base.with_params(best.x)
    _REFERENCE_CACHE[key] = pol
    return pol


def oracle_regret(env: Env, policy: Policy, delta: float, reference: Optional[Policy] = None,
                  mc_samples: int = 2**14, seed=0, kind: str = "linear-softmax") -> OracleValue:
    """``V(reference) - V(policy)`` with both values from :func:`oracle_value`.

    Both evaluations share the same oracle states, so the reported standard
    error is that of the paired difference over batches.
    """
    if reference is None:
        if isinstance(env, DiscreteEnv):
            raise ConfigurationError("pass an explicit reference policy for discrete environments")
        reference = best_in_class(env, delta, kind, seed=seed)
    if isinstance(env, DiscreteEnv):
        return OracleValue(oracle_value(env, reference, delta).value - oracle_value(env, policy, delta).value,
                           0.0, math.nan)
    states = oracle_states(env, mc_samples, seed)
    parts = np.array_split(np.arange(states.shape[0]), 10)

    def val(pol, idx, near=None):
        return maximize_w_function(lambda a: _policy_w(env, pol, states[idx], a), delta, near=near)

    full = np.arange(states.shape[0])
    ref_a, ref_v = val(reference, full)
    pol_a, pol_v = val(policy, full)
    bd = [val(reference, p, ref_a)[1] - val(policy, p, pol_a)[1] for p in parts]
    diff = ref_v - pol_v
    return OracleValue(float(diff), float(np.std(bd, ddof=1) / math.sqrt(10)), math.nan)
