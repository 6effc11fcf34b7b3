"""Nuisance models: behavior propensities, localized outcome regressions and
continuum weights.

Outcome regressions target ``y = r^j exp(-r / alpha)`` at one fixed
``alpha``. Continuum weights ``omega_i(s, a)`` are fitted once and give
``f0(s, a; alpha) = sum_i omega_i(s, a) exp(-r_i / alpha)`` for every
``alpha`` simultaneously.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .core import Dataset, make_rng
from .errors import ConfigurationError, DegenerateFitError, DomainError
from .policy import Policy, softmax

#: Minimum per-action sample count for a separate per-action regression.
PER_ACTION_MIN = 30


class PoolingWarning(UserWarning):
    """An action cell was too small for its own regression and was pooled."""


def _one_hot(actions, A):
    out = np.zeros((len(actions), A))
    out[np.arange(len(actions)), actions] = 1.0
    return out


# ---------------------------------------------------------------------------
# Propensity models
# ---------------------------------------------------------------------------


class PropensityModel:
    """Behavior policy estimate. Probabilities are clipped to ``[clip_floor, 1]``."""

    kind = "abstract"

    def __init__(self, action_count: int, clip_floor: float = 0.01):
        if not 0 < clip_floor < 0.5:
            raise ConfigurationError("clip floor must lie in (0, 0.5)")
        self.action_count = action_count
        self.clip_floor = clip_floor

    def raw_probs(self, states) -> np.ndarray:
        raise NotImplementedError

    def probs(self, states) -> np.ndarray:
        return np.clip(self.raw_probs(states), self.clip_floor, 1.0)

    def prob_of(self, states, actions) -> np.ndarray:
        p = self.probs(states)
        return p[np.arange(p.shape[0]), np.asarray(actions, dtype=np.int64)]

    def prob_rows(self, data: Dataset, rows) -> np.ndarray:
        """Clipped propensities of the logged actions at ``data`` rows ``rows``."""
        rows = np.asarray(rows)
        return self.prob_of(data.states[rows], data.actions[rows])

    def to_json(self) -> dict:
        return {"kind": self.kind, "clip_floor": self.clip_floor}


class LogisticPropensity(PropensityModel):
    """Multinomial logistic regression on ``[state, 1]``."""

    kind = "logistic"

    def __init__(self, coef: np.ndarray, clip_floor: float = 0.01, iterations: int = 0, grad_norm: float = 0.0):
        super().__init__(coef.shape[0], clip_floor)
        self.coef = coef
        self.iterations = iterations
        self.grad_norm = grad_norm

    def raw_probs(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        return softmax(s @ self.coef[:, :-1].T + self.coef[:, -1])

    def to_json(self) -> dict:
        return {**super().to_json(), "coef": self.coef.tolist(), "iterations": self.iterations}


class KnnPropensity(PropensityModel):
    """Action frequencies among the ``k`` nearest training states."""

    kind = "knn"

    def __init__(self, states, actions, action_count, k: int, clip_floor: float = 0.01):
        super().__init__(action_count, clip_floor)
        self.states = np.asarray(states, dtype=float)
        self.actions = np.asarray(actions, dtype=np.int64)
        self.k = min(int(k), self.states.shape[0])
        self.tree = cKDTree(self.states)

    def raw_probs(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        _, idx = self.tree.query(s, k=self.k)
        idx = idx.reshape(s.shape[0], self.k)
        acts = self.actions[idx]
        out = np.zeros((s.shape[0], self.action_count))
        for a in range(self.action_count):
            out[:, a] = (acts == a).mean(axis=1)
        return out

    def to_json(self) -> dict:
        return {**super().to_json(), "k": self.k, "states": self.states.tolist(), "actions": self.actions.tolist()}


class OraclePropensity(PropensityModel):
    """Known behavior policy."""

    kind = "oracle"

    def __init__(self, policy: Policy, clip_floor: float = 0.01):
        super().__init__(policy.action_count, clip_floor)
        self.policy = policy

    def raw_probs(self, states) -> np.ndarray:
        return self.policy.probs(states)

    def to_json(self) -> dict:
        doc = super().to_json()
        if hasattr(self.policy, "to_json"):
            doc["policy"] = self.policy.to_json()
        return doc


def _fit_logistic(X, actions, A, *, max_iter=5000, tol=1e-6, ridge=1e-6):
    """Full-batch accelerated gradient descent on the mean multinomial log-loss."""
    n, p = X.shape
    Y = _one_hot(actions, A)
    L = 0.5 * np.linalg.eigvalsh(X.T @ X / n).max() + ridge
    step = 1.0 / L
    W = np.zeros((A, p))
    V = W.copy()
    t = 1.0

    def grad(M):
        P = softmax(X @ M.T)
        return (P - Y).T @ X / n + ridge * M

    g = grad(W)
    it = 0
    for it in range(1, max_iter + 1):
        gV = grad(V)
        W_new = V - step * gV
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        V = W_new + ((t - 1) / t_new) * (W_new - W)
        if np.sum((W_new - W) * gV) > 0:
            # momentum points uphill; restart
            V, t_new = W_new.copy(), 1.0
        W, t = W_new, t_new
        g = grad(W)
        if np.linalg.norm(g) < tol:
            break
    return W, it, float(np.linalg.norm(g))


def fit_propensity(data: Dataset, kind: str = "logistic", seed=0, *, clip_floor: float = 0.01,
                   k: Optional[int] = None, policy: Optional[Policy] = None) -> PropensityModel:
    """Fit ``pi0`` on a data slice.

    ``kind`` is ``"logistic"``, ``"knn"`` or ``"oracle"`` (the latter needs
    ``policy``). Logistic fits stop at gradient norm ``1e-6`` or 5000
    iterations.
    """
    if kind == "oracle":
        if policy is None:
            raise ConfigurationError("oracle propensity needs the behavior policy")
        return OraclePropensity(policy, clip_floor)
    if len(np.unique(data.actions)) < 2:
        raise DegenerateFitError("propensity fit needs at least two distinct actions")
    if kind == "logistic":
        X = np.hstack([data.states, np.ones((len(data), 1))])
        W, it, gn = _fit_logistic(X, data.actions, data.action_count)
        return LogisticPropensity(W, clip_floor, it, gn)
    if kind == "knn":
        k = k if k is not None else max(10, int(round(math.sqrt(len(data)))))
        return KnnPropensity(data.states, data.actions, data.action_count, k, clip_floor)
    raise ConfigurationError(f"unknown propensity kind {kind!r}")


# ---------------------------------------------------------------------------
# Localized outcome models
# ---------------------------------------------------------------------------


def localized_target(rewards, alpha: float, j: int) -> np.ndarray:
    """``r^j exp(-r / alpha)``, always in ``[0, 1]`` for ``r in [0, 1]``."""
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    if j not in (0, 1, 2):
        raise DomainError("moment order must be 0, 1 or 2")
    r = np.asarray(rewards, dtype=float)
    return r**j * np.exp(-r / alpha)


class OutcomeModel:
    """Regression of the localized target on ``(s, a)``; predictions in ``[0, 1]``."""

    kind = "abstract"
    localized_alpha: float = math.nan
    order: int = 0

    def predict_all(self, states) -> np.ndarray:
        raise NotImplementedError

    def predict(self, states, actions) -> np.ndarray:
        p = self.predict_all(states)
        return p[np.arange(p.shape[0]), np.asarray(actions, dtype=np.int64)]

    def to_json(self) -> dict:
        return {"kind": self.kind, "localized_alpha": self.localized_alpha, "order": self.order}


class ZeroOutcome(OutcomeModel):
    kind = "zero"

    def __init__(self, action_count: int, alpha: float = math.nan, j: int = 0):
        self.action_count = action_count
        self.localized_alpha = alpha
        self.order = j

    def predict_all(self, states) -> np.ndarray:
        return np.zeros((np.asarray(states).shape[0], self.action_count))


class OracleOutcome(OutcomeModel):
    """Exact conditional moment from a simulator environment."""

    kind = "oracle"

    def __init__(self, env, alpha: float, j: int):
        self.env = env
        self.localized_alpha = alpha
        self.order = j

    def predict_all(self, states) -> np.ndarray:
        return self.env.outcome_moments(np.asarray(states, dtype=float), self.localized_alpha, self.order)

    def to_json(self) -> dict:
        return {**super().to_json(), "env": self.env.to_json()}


class _Smoother:
    """Local averaging of training targets, per action or pooled with one-hot features."""

    def __init__(self, states, actions, A, kind: str, k: int, bandwidth: Optional[float]):
        self.states = np.asarray(states, dtype=float)
        self.actions = np.asarray(actions, dtype=np.int64)
        self.A = A
        self.kind = kind
        counts = np.bincount(self.actions, minlength=A)
        self.per_action = bool(np.all(counts >= PER_ACTION_MIN))
        if not self.per_action:
            warnings.warn("an action has fewer than %d samples; pooling actions with one-hot features"
                          % PER_ACTION_MIN, PoolingWarning, stacklevel=3)
        sd = self.states.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        n = self.states.shape[0]
        d = self.states.shape[1]
        # Scott-type rule on standardized states
        self.bandwidth = float(bandwidth) if bandwidth is not None else float(np.mean(sd) * n ** (-1.0 / (d + 4)))
        self.k = int(k)
        if self.per_action:
            self.groups = [np.flatnonzero(self.actions == a) for a in range(A)]
            self.trees = [cKDTree(self.states[g]) for g in self.groups]
        else:
            self.features = np.hstack([self.states, _one_hot(self.actions, A)])
            self.groups = [np.arange(n)]
            self.trees = [cKDTree(self.features)]
        self._cache = None

    def _query_features(self, states, a):
        if self.per_action:
            return states
        oh = np.zeros((states.shape[0], self.A))
        oh[:, a] = 1.0
        return np.hstack([states, oh])

    def neighbors(self, states, a: int):
        """Training columns ``(n, k)`` and row-normalized weights ``(n, k)`` for queries at action ``a``."""
        states = np.asarray(states, dtype=float)
        key = (a, states.shape, hash(states.tobytes()))
        if self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        g = self.groups[a] if self.per_action else self.groups[0]
        tree = self.trees[a] if self.per_action else self.trees[0]
        q = self._query_features(states, a)
        k = min(self.k, g.shape[0])
        dist, idx = tree.query(q, k=k)
        dist = dist.reshape(q.shape[0], k)
        idx = idx.reshape(q.shape[0], k)
        if self.kind == "knn":
            w = np.full(dist.shape, 1.0 / k)
        else:
            logw = -0.5 * (dist / self.bandwidth) ** 2
            logw -= logw.max(axis=1, keepdims=True)
            w = np.exp(logw)
            w /= w.sum(axis=1, keepdims=True)
        out = (g[idx], w)
        self._cache = (key, out)
        return out

    def weights(self, states, a: int) -> sparse.csr_matrix:
        """Row-normalized sparse weights over training points for queries at action ``a``."""
        cols, w = self.neighbors(states, a)
        n, k = cols.shape
        indptr = np.arange(0, n * k + 1, k)
        return sparse.csr_matrix((w.ravel(), cols.ravel(), indptr), shape=(n, self.states.shape[0]))


class SmootherOutcome(OutcomeModel):
    """k-NN or (truncated) Gaussian-kernel regression of the localized target."""

    def __init__(self, smoother: _Smoother, targets: np.ndarray, alpha: float, j: int):
        self.smoother = smoother
        self.targets = targets
        self.localized_alpha = alpha
        self.order = j
        self.kind = smoother.kind

    def predict_all(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        out = np.empty((states.shape[0], self.smoother.A))
        for a in range(self.smoother.A):
            cols, w = self.smoother.neighbors(states, a)
            out[:, a] = np.sum(w * self.targets[cols], axis=1)
        return np.clip(out, 0.0, 1.0)

    def to_json(self) -> dict:
        return {**super().to_json(), "k": self.smoother.k, "bandwidth": self.smoother.bandwidth,
                "per_action": self.smoother.per_action, "n_train": int(self.targets.shape[0])}


def _default_k(n: int, kind: str, action_count: int) -> int:
    """Neighbor count: ``sqrt(n / |A|)`` for k-NN, a wider truncation cap for kernels."""
    if kind == "knn":
        return max(5, int(round(math.sqrt(n / action_count))))
    return max(5, min(200, int(round(2 * math.sqrt(n)))))


def fit_outcome_localized(data: Dataset, alpha_init: float, j: int, kind: str = "kernel", seed=0, *,
                          k: Optional[int] = None, bandwidth: Optional[float] = None, env=None) -> OutcomeModel:
    """Regress ``r^j exp(-r / alpha_init)`` on ``(s, a)``.

    ``kind`` is ``"knn"``, ``"kernel"`` (Gaussian weights over the nearest
    ``k`` points of the same action), ``"zero"`` or ``"oracle"`` (needs
    ``env``).
    """
    if not alpha_init > 0:
        raise DomainError("alpha_init must be positive")
    if kind == "zero":
        return ZeroOutcome(data.action_count, alpha_init, j)
    if kind == "oracle":
        if env is None:
            raise ConfigurationError("oracle outcome model needs the environment")
        return OracleOutcome(env, alpha_init, j)
    if kind not in ("knn", "kernel"):
        raise ConfigurationError(f"unknown outcome kind {kind!r}")
    k = _default_k(len(data), kind, data.action_count) if k is None else k
    sm = _Smoother(data.states, data.actions, data.action_count, kind, k, bandwidth)
    return SmootherOutcome(sm, localized_target(data.rewards, alpha_init, j), alpha_init, j)


# ---------------------------------------------------------------------------
# Continuum weights
# ---------------------------------------------------------------------------


class ContinuumWeights:
    """Weight functions ``omega_i(s, a)`` over stored training rewards ``r_i``."""

    kind = "abstract"

    def __init__(self, rewards):
        self.rewards = np.asarray(rewards, dtype=float)

    @property
    def n_train(self) -> int:
        return self.rewards.shape[0]

    def weights(self, states, a) -> sparse.csr_matrix:
        """Sparse ``(n_query, n_train)`` weights at action ``a`` (scalar or per-row array)."""
        raise NotImplementedError

    def weights_at(self, states, actions) -> sparse.csr_matrix:
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=np.int64)
        blocks = []
        order = []
        for a in np.unique(actions):
            rows = np.flatnonzero(actions == a)
            blocks.append(self.weights(states[rows], int(a)))
            order.append(rows)
        stacked = sparse.vstack(blocks).tocsr()
        perm = np.empty(states.shape[0], dtype=np.int64)
        perm[np.concatenate(order)] = np.arange(states.shape[0])
        return stacked[perm]

    def to_json(self) -> dict:
        return {"kind": self.kind, "n_train": self.n_train}


class SmootherContinuum(ContinuumWeights):
    def __init__(self, smoother: _Smoother, rewards):
        super().__init__(rewards)
        self.smoother = smoother
        self.kind = smoother.kind

    def weights(self, states, a) -> sparse.csr_matrix:
        return self.smoother.weights(states, int(a))

    def to_json(self) -> dict:
        return {**super().to_json(), "k": self.smoother.k, "bandwidth": self.smoother.bandwidth,
                "per_action": self.smoother.per_action}


class TreeEnsembleContinuum(ContinuumWeights):
    """Random-forest co-leaf weights: average over trees of ``1[same leaf] / leaf size``."""

    kind = "tree-ensemble"

    def __init__(self, forest, train_features, rewards, action_count: int):
        super().__init__(rewards)
        self.forest = forest
        self.action_count = action_count
        train_leaves = forest.apply(train_features)
        self._leaf_maps = []
        n = train_features.shape[0]
        for t in range(train_leaves.shape[1]):
            leaves, inv = np.unique(train_leaves[:, t], return_inverse=True)
            counts = np.bincount(inv)
            M = sparse.csr_matrix((1.0 / counts[inv], (inv, np.arange(n))), shape=(leaves.shape[0], n))
            self._leaf_maps.append((leaves, M))

    def weights(self, states, a) -> sparse.csr_matrix:
        states = np.asarray(states, dtype=float)
        acts = np.broadcast_to(np.asarray(a, dtype=np.int64), (states.shape[0],))
        X = np.hstack([states, _one_hot(acts, self.action_count)])
        q = self.forest.apply(X)
        T = len(self._leaf_maps)
        total = None
        for t, (leaves, M) in enumerate(self._leaf_maps):
            pos = np.searchsorted(leaves, q[:, t])
            part = M[pos]
            total = part if total is None else total + part
        return (total / T).tocsr()

    def to_json(self) -> dict:
        return {**super().to_json(), "trees": len(self._leaf_maps),
                "min_samples_leaf": self.forest.min_samples_leaf}


def fit_continuum_weights(data: Dataset, kind: str = "kernel", seed=0, *, k: Optional[int] = None,
                          bandwidth: Optional[float] = None, trees: int = 25,
                          min_samples_leaf: int = 5) -> ContinuumWeights:
    """Fit weight functions on a data slice.

    ``"knn"`` and ``"kernel"`` smooth within the query's action (pooling
    with one-hot features when a cell is small); ``"tree-ensemble"`` fits a
    random forest of reward on ``(s, one-hot a)`` and uses co-leaf
    frequencies.
    """
    if kind in ("knn", "kernel"):
        k = _default_k(len(data), kind, data.action_count) if k is None else k
        sm = _Smoother(data.states, data.actions, data.action_count, kind, k, bandwidth)
        return SmootherContinuum(sm, data.rewards)
    if kind == "tree-ensemble":
        from sklearn.ensemble import RandomForestRegressor

        X = np.hstack([data.states, _one_hot(data.actions, data.action_count)])
        rs = int(make_rng(seed, 41).integers(2**31 - 1))
        forest = RandomForestRegressor(n_estimators=trees, min_samples_leaf=min_samples_leaf,
                                       max_features=0.6, random_state=rs, n_jobs=1)
        forest.fit(X, data.rewards)
        return TreeEnsembleContinuum(forest, X, data.rewards, data.action_count)
    raise ConfigurationError(f"unknown continuum kind {kind!r}")


def continuum_f0(weights: ContinuumWeights, states, actions, alpha: float) -> np.ndarray:
    """``f0(s, a; alpha) = sum_i omega_i(s, a) exp(-r_i / alpha)``."""
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
    return weights.weights_at(states, actions) @ np.exp(-weights.rewards / alpha)


@dataclass
class NuisanceSpec:
    """Which nuisance learners to use and how.

    ``propensity`` is ``"logged"`` (use the data's propensity column),
    ``"oracle"``, ``"logistic"`` or ``"knn"``. ``outcome`` and
    ``continuum`` name the regression kinds above.
    """

    propensity: str = "logged"
    outcome: str = "kernel"
    continuum: str = "kernel"
    clip_floor: float = 0.01
    k: Optional[int] = None
    bandwidth: Optional[float] = None
    env: object = None
    behavior: Optional[Policy] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"propensity": self.propensity, "outcome": self.outcome, "continuum": self.continuum,
                "clip_floor": self.clip_floor, "k": self.k, "bandwidth": self.bandwidth}


class LoggedPropensity(PropensityModel):
    """Propensities read from the dataset's logged column."""

    kind = "logged"

    def __init__(self, action_count: int, clip_floor: float = 0.01):
        super().__init__(action_count, clip_floor)

    def prob_rows(self, data: Dataset, rows) -> np.ndarray:
        if data.propensities is None:
            raise ConfigurationError("dataset has no logged propensity column")
        return np.clip(data.propensities[np.asarray(rows)], self.clip_floor, 1.0)

    def raw_probs(self, states):
        raise ConfigurationError("logged propensities exist only at logged rows")


def build_propensity(data_train: Dataset, spec: NuisanceSpec, seed) -> PropensityModel:
    if spec.propensity == "logged":
        if data_train.propensities is None:
            raise ConfigurationError("dataset has no logged propensity column")
        return LoggedPropensity(data_train.action_count, spec.clip_floor)
    if spec.propensity == "oracle":
        pol = spec.behavior if spec.behavior is not None else getattr(spec.env, "behavior_policy", lambda: None)()
        return fit_propensity(data_train, "oracle", seed, clip_floor=spec.clip_floor, policy=pol)
    return fit_propensity(data_train, spec.propensity, seed, clip_floor=spec.clip_floor, k=spec.k)
