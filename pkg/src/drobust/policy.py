"""Stochastic policies mapping states to distributions over actions.

Parametric policies expose a flat parameter vector and a vector-Jacobian
product ``vjp(states, G)`` returning the gradient of
``sum_{i,a} G[i, a] * pi(a | s_i)`` with respect to that vector. Every
objective in this package that is linear in the policy probabilities gets
its exact gradient through this single primitive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, ShapeError


def _row_max(z: np.ndarray) -> np.ndarray:
    # column sweep; numpy's reduction over a short last axis is far slower
    m = z[..., 0].copy()
    for a in range(1, z.shape[-1]):
        np.maximum(m, z[..., a], out=m)
    return m[..., None]


def _row_sum(z: np.ndarray) -> np.ndarray:
    return (z @ np.ones(z.shape[-1]))[..., None]


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - _row_max(logits))
    return e / _row_sum(e)


def _softmax_backward(p: np.ndarray, G: np.ndarray) -> np.ndarray:
    # gradient of sum(G * softmax(z)) with respect to z
    return p * (G - _row_sum(G * p))


def _as_states(states, state_dim: int) -> np.ndarray:
    s = np.asarray(states, dtype=float)
    if s.ndim == 1:
        s = s[None, :] if state_dim != 1 or s.shape[0] == 1 else s[:, None]
    if s.ndim != 2 or s.shape[1] != state_dim:
        raise ShapeError(f"expected states with {state_dim} columns, got shape {np.shape(states)}")
    return s


class Policy:
    """Base class. Subclasses implement ``probs(states) -> (n, A)``."""

    action_count: int
    state_dim: int
    kind: str = "abstract"
    parametric: bool = False

    def probs(self, states) -> np.ndarray:
        raise NotImplementedError

    def prob_of(self, states, actions) -> np.ndarray:
        p = self.probs(states)
        return p[np.arange(p.shape[0]), np.asarray(actions, dtype=np.int64)]


def policy_probs(policy: Policy, state) -> np.ndarray:
    """Action distribution at a single state vector."""
    s = np.atleast_1d(np.asarray(state, dtype=float))
    if s.ndim != 1 or s.shape[0] != policy.state_dim:
        raise ShapeError(f"state has dimension {s.shape}, policy expects {policy.state_dim}")
    return policy.probs(s[None, :])[0]


class TabularPolicy(Policy):
    """Finite-state policy; the state vector holds the state index in column 0."""

    kind = "tabular"

    def __init__(self, table):
        table = np.array(table, dtype=float)
        if table.ndim != 2 or np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1) > 1e-12):
            raise ConfigurationError("tabular policy rows must be probability vectors")
        table.setflags(write=False)
        self.table = table
        self.action_count = table.shape[1]
        self.state_dim = 1

    def probs(self, states) -> np.ndarray:
        s = _as_states(states, 1)
        idx = s[:, 0].astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= self.table.shape[0]) or np.any(idx != s[:, 0]):
            raise ShapeError("tabular policy queried at an unknown state")
        return self.table[idx]

    def to_json(self) -> dict:
        return {"kind": self.kind, "dims": {"states": self.table.shape[0], "actions": self.action_count},
                "parameters": self.table.tolist()}


class CallablePolicy(Policy):
    """Wraps ``fn(states) -> (n, A)`` probabilities."""

    kind = "callable"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], action_count: int, state_dim: int):
        self.fn = fn
        self.action_count = int(action_count)
        self.state_dim = int(state_dim)

    def probs(self, states) -> np.ndarray:
        return np.asarray(self.fn(_as_states(states, self.state_dim)), dtype=float)


class ParametricPolicy(Policy):
    parametric = True

    @property
    def params(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    def with_params(self, theta) -> "ParametricPolicy":
        raise NotImplementedError

    def vjp(self, states, G) -> np.ndarray:
        raise NotImplementedError

    def log_prob_grad(self, states, actions) -> np.ndarray:
        """Per-sample gradients of ``log pi(a_i | s_i)``, shape ``(n, n_params)``."""
        raise NotImplementedError

    def to_json(self) -> dict:
        return {"kind": self.kind, "dims": self.dims(), "parameters": self.params.tolist()}

    def dims(self) -> dict:
        raise NotImplementedError


class LinearSoftmaxPolicy(ParametricPolicy):
    """``pi(a|s) ∝ exp(s @ weights[a] + bias[a])``.

    Parameters are flattened as ``[weights.ravel(), bias]``.
    """

    kind = "linear-softmax"

    def __init__(self, weights, bias=None):
        weights = np.array(weights, dtype=float)
        if weights.ndim != 2:
            raise ShapeError("weights must have shape (actions, state_dim)")
        self.action_count, self.state_dim = weights.shape
        bias = np.zeros(self.action_count) if bias is None else np.array(bias, dtype=float)
        if bias.shape != (self.action_count,):
            raise ShapeError("bias must have one entry per action")
        weights.setflags(write=False)
        bias.setflags(write=False)
        self.weights = weights
        self.bias = bias

    @classmethod
    def zeros(cls, action_count: int, state_dim: int) -> "LinearSoftmaxPolicy":
        return cls(np.zeros((action_count, state_dim)))

    def dims(self) -> dict:
        return {"state_dim": self.state_dim, "actions": self.action_count}

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    def with_params(self, theta) -> "LinearSoftmaxPolicy":
        theta = np.asarray(theta, dtype=float)
        k = self.action_count * self.state_dim
        if theta.shape != (k + self.action_count,):
            raise ShapeError("parameter vector has the wrong length")
        return LinearSoftmaxPolicy(theta[:k].reshape(self.action_count, self.state_dim), theta[k:])

    def logits(self, states) -> np.ndarray:
        s = _as_states(states, self.state_dim)
        return s @ self.weights.T + self.bias

    def probs(self, states) -> np.ndarray:
        return softmax(self.logits(states))

    def vjp(self, states, G) -> np.ndarray:
        s = _as_states(states, self.state_dim)
        dz = _softmax_backward(softmax(s @ self.weights.T + self.bias), np.asarray(G, dtype=float))
        return np.concatenate([(dz.T @ s).ravel(), dz.sum(axis=0)])

    def log_prob_grad(self, states, actions) -> np.ndarray:
        s = _as_states(states, self.state_dim)
        p = softmax(s @ self.weights.T + self.bias)
        dz = -p
        dz[np.arange(s.shape[0]), np.asarray(actions, dtype=np.int64)] += 1.0
        gw = np.einsum("na,nd->nad", dz, s).reshape(s.shape[0], -1)
        return np.concatenate([gw, dz], axis=1)


class MLPSoftmaxPolicy(ParametricPolicy):
    """One hidden ReLU layer of width ``hidden`` followed by a softmax.

    Parameters are flattened as ``[W1, b1, W2, b2]`` with ``W1`` of shape
    ``(hidden, state_dim)`` and ``W2`` of shape ``(actions, hidden)``.
    """

    kind = "mlp-softmax"

    def __init__(self, W1, b1, W2, b2):
        self.W1, self.b1, self.W2, self.b2 = (np.array(x, dtype=float) for x in (W1, b1, W2, b2))
        self.hidden, self.state_dim = self.W1.shape
        self.action_count = self.W2.shape[0]
        if (self.b1.shape != (self.hidden,) or self.W2.shape != (self.action_count, self.hidden)
                or self.b2.shape != (self.action_count,)):
            raise ShapeError("inconsistent MLP parameter shapes")
        for x in (self.W1, self.b1, self.W2, self.b2):
            x.setflags(write=False)

    @classmethod
    def zeros(cls, action_count: int, state_dim: int, hidden: int = 32) -> "MLPSoftmaxPolicy":
        return cls(np.zeros((hidden, state_dim)), np.zeros(hidden),
                   np.zeros((action_count, hidden)), np.zeros(action_count))

    def dims(self) -> dict:
        return {"state_dim": self.state_dim, "actions": self.action_count, "hidden": self.hidden}

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def with_params(self, theta) -> "MLPSoftmaxPolicy":
        theta = np.asarray(theta, dtype=float)
        H, d, A = self.hidden, self.state_dim, self.action_count
        sizes = [H * d, H, A * H, A]
        if theta.shape != (sum(sizes),):
            raise ShapeError("parameter vector has the wrong length")
        a, b, c, _ = np.cumsum(sizes)
        return MLPSoftmaxPolicy(theta[:a].reshape(H, d), theta[a:b], theta[b:c].reshape(A, H), theta[c:])

    def _forward(self, s):
        pre = s @ self.W1.T + self.b1
        h = np.maximum(pre, 0.0)
        return pre, h, softmax(h @ self.W2.T + self.b2)

    def probs(self, states) -> np.ndarray:
        return self._forward(_as_states(states, self.state_dim))[2]

    def vjp(self, states, G) -> np.ndarray:
        s = _as_states(states, self.state_dim)
        pre, h, p = self._forward(s)
        dz = _softmax_backward(p, np.asarray(G, dtype=float))
        dh = (dz @ self.W2) * (pre > 0)
        return np.concatenate([(dh.T @ s).ravel(), dh.sum(axis=0), (dz.T @ h).ravel(), dz.sum(axis=0)])

    def log_prob_grad(self, states, actions) -> np.ndarray:
        s = _as_states(states, self.state_dim)
        n = s.shape[0]
        pre, h, p = self._forward(s)
        dz = -p
        dz[np.arange(n), np.asarray(actions, dtype=np.int64)] += 1.0
        dh = (dz @ self.W2) * (pre > 0)
        return np.concatenate([
            np.einsum("nh,nd->nhd", dh, s).reshape(n, -1), dh,
            np.einsum("na,nh->nah", dz, h).reshape(n, -1), dz,
        ], axis=1)


def make_policy(kind: str, action_count: int, state_dim: int, hidden: int = 32) -> ParametricPolicy:
    if kind == "linear-softmax":
        return LinearSoftmaxPolicy.zeros(action_count, state_dim)
    if kind == "mlp-softmax":
        return MLPSoftmaxPolicy.zeros(action_count, state_dim, hidden)
    raise ConfigurationError(f"unknown policy kind {kind!r}")


def policy_from_json(doc: dict) -> Policy:
    kind = doc.get("kind")
    dims = doc.get("dims", {})
    params = np.asarray(doc.get("parameters"), dtype=float)
    if kind == "tabular":
        return TabularPolicy(params)
    if kind in ("linear-softmax", "mlp-softmax"):
        base = make_policy(kind, int(dims["actions"]), int(dims["state_dim"]), int(dims.get("hidden", 32)))
        return base.with_params(params)
    raise ConfigurationError(f"cannot rebuild policy of kind {kind!r}")


@dataclass(frozen=True)
class MixturePolicy(Policy):
    """Pointwise mixture ``t * first + (1 - t) * second``."""

    first: Policy
    second: Policy
    t: float
    kind: str = "mixture"

    @property
    def action_count(self) -> int:  # type: ignore[override]
        return self.first.action_count

    @property
    def state_dim(self) -> int:  # type: ignore[override]
        return self.first.state_dim

    def probs(self, states) -> np.ndarray:
        return self.t * self.first.probs(states) + (1 - self.t) * self.second.probs(states)


def uniform_policy(action_count: int, state_dim: int) -> LinearSoftmaxPolicy:
    return LinearSoftmaxPolicy.zeros(action_count, state_dim)


def as_policy(obj, action_count: Optional[int] = None, state_dim: Optional[int] = None) -> Policy:
    if isinstance(obj, Policy):
        return obj
    if callable(obj) and action_count is not None and state_dim is not None:
        return CallablePolicy(obj, action_count, state_dim)
    raise ConfigurationError("expected a Policy")
