"""Shared domain model: logged data, divergence sets, fold assignments."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DataError, DomainError, ShapeError

#: Lower cutoff standing in for the alpha -> 0+ boundary of every dual search.
EPS_ALPHA = 1e-8


def make_rng(seed, *keys: int) -> np.random.Generator:
    """Counter-based generator for ``seed``, optionally split by integer keys.

    Distinct key tuples give statistically independent streams, so every
    randomized step of an experiment can own its stream and be replayed.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class LoggedSample:
    state: np.ndarray
    action: int
    reward: float
    logged_propensity: Optional[float] = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Logged bandit data stored column-wise.

    Rewards outside ``[0, 1]`` are rejected rather than clipped.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    action_count: int
    propensities: Optional[np.ndarray] = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        actions = np.asarray(self.actions)
        rewards = np.asarray(self.rewards, dtype=float)
        n = states.shape[0]
        if n == 0:
            raise DataError("dataset is empty")
        if actions.shape != (n,) or rewards.shape != (n,):
            raise ShapeError("states, actions and rewards must have the same length")
        if not np.all(np.isfinite(rewards)) or rewards.min() < 0.0 or rewards.max() > 1.0:
            raise DataError("rewards must lie in [0, 1]")
        if not np.all(np.equal(np.mod(actions, 1), 0)):
            raise DataError("actions must be integers")
        actions = actions.astype(np.int64)
        if self.action_count < 1 or actions.min() < 0 or actions.max() >= self.action_count:
            raise DataError("actions must lie in [0, action_count)")
        object.__setattr__(self, "states", _readonly(states))
        object.__setattr__(self, "actions", _readonly(actions))
        object.__setattr__(self, "rewards", _readonly(rewards))
        object.__setattr__(self, "action_count", int(self.action_count))
        if self.propensities is not None:
            p = np.asarray(self.propensities, dtype=float)
            if p.shape != (n,):
                raise ShapeError("propensity column has the wrong length")
            if not np.all((p > 0) & (p <= 1)):
                raise DataError("logged propensities must lie in (0, 1]")
            object.__setattr__(self, "propensities", _readonly(p))

    @classmethod
    def from_samples(cls, samples: Sequence[LoggedSample], action_count: int) -> "Dataset":
        if not samples:
            raise DataError("dataset is empty")
        dims = {np.atleast_1d(s.state).shape for s in samples}
        if len(dims) != 1:
            raise ShapeError("samples have inconsistent state dimensions")
        logged = [s.logged_propensity for s in samples]
        has_p = [p is not None for p in logged]
        if any(has_p) and not all(has_p):
            raise DataError("logged propensity must be present on all rows or none")
        return cls(
            states=np.stack([np.atleast_1d(s.state) for s in samples]).astype(float),
            actions=np.array([s.action for s in samples]),
            rewards=np.array([s.reward for s in samples], dtype=float),
            action_count=action_count,
            propensities=np.array(logged, dtype=float) if all(has_p) else None,
        )

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def samples(self) -> Iterator[LoggedSample]:
        for i in range(len(self)):
            p = None if self.propensities is None else float(self.propensities[i])
            yield LoggedSample(self.states[i], int(self.actions[i]), float(self.rewards[i]), p)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            action_count=self.action_count,
            propensities=None if self.propensities is None else self.propensities[idx],
        )

    def permuted(self, perm) -> "Dataset":
        return self.subset(np.asarray(perm))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_dataset_csv(data: Dataset, path: Union[str, Path]) -> None:
    header = [f"s{j}" for j in range(data.state_dim)] + ["action", "reward"]
    if data.propensities is not None:
        header.append("propensity")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(data)):
            row = [repr(float(x)) for x in data.states[i]]
            row += [str(int(data.actions[i])), repr(float(data.rewards[i]))]
            if data.propensities is not None:
                row.append(repr(float(data.propensities[i])))
            w.writerow(row)


def read_dataset_csv(path: Union[str, Path], action_count: Optional[int] = None) -> Dataset:
    """Read the ``s0,...,s{d-1},action,reward[,propensity]`` format.

    When ``action_count`` is omitted it is inferred as ``max(action) + 1``.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    header = rows[0]
    state_cols = [c for c in header if c.startswith("s") and c[1:].isdigit()]
    d = len(state_cols)
    if state_cols != [f"s{j}" for j in range(d)] or d == 0:
        raise DataError(f"{path}: header must start with s0..s{{d-1}}")
    rest = header[d:]
    if rest not in (["action", "reward"], ["action", "reward", "propensity"]):
        raise DataError(f"{path}: unexpected columns {rest}")
    try:
        body = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from exc
    if body.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows")
    actions = body[:, d]
    if action_count is None:
        action_count = int(actions.max()) + 1
    return Dataset(
        states=body[:, :d],
        actions=actions,
        rewards=body[:, d + 1],
        action_count=action_count,
        propensities=body[:, d + 2] if len(rest) == 3 else None,
    )


# ---------------------------------------------------------------------------
# Divergence sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KL:
    name = "kl"

    @staticmethod
    def f(t):
        t = np.asarray(t, dtype=float)
        return np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)

    @staticmethod
    def f_conj(x):
        return np.exp(np.asarray(x, dtype=float) - 1.0)

    @staticmethod
    def f_conj_prime(x):
        return np.exp(np.asarray(x, dtype=float) - 1.0)


@dataclass(frozen=True)
class CressieRead:
    """``f_k(t) = (t^k - k t + k - 1) / (k (k - 1))`` for ``k > 1``."""

    k: float = 2.0
    name = "cressie-read"

    def __post_init__(self):
        if not self.k > 1:
            raise DomainError("Cressie-Read order k must exceed 1")

    @property
    def k_star(self) -> float:
        return self.k / (self.k - 1.0)

    def f(self, t):
        k = self.k
        t = np.asarray(t, dtype=float)
        return (t**k - k * t + k - 1.0) / (k * (k - 1.0))

    def f_conj(self, x):
        # conjugate over t >= 0
        k = self.k
        base = np.maximum((k - 1.0) * np.asarray(x, dtype=float) + 1.0, 0.0)
        return (base**self.k_star - 1.0) / k

    def f_conj_prime(self, x):
        k = self.k
        base = np.maximum((k - 1.0) * np.asarray(x, dtype=float) + 1.0, 0.0)
        return base ** (self.k_star - 1.0)

    def radius_constant(self, delta: float) -> float:
        return (1.0 + self.k * (self.k - 1.0) * delta) ** (1.0 / self.k)


@dataclass(frozen=True)
class FDivergence:
    """A generic f-divergence given by ``f``, its conjugate and the conjugate's derivative."""

    f: Callable
    f_conj: Callable
    f_conj_prime: Callable
    name: str = "f"


Family = Union[KL, CressieRead, FDivergence]


@dataclass(frozen=True)
class DivergenceSpec:
    delta: float
    family: Family = field(default_factory=KL)

    def __post_init__(self):
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise DomainError("uncertainty radius delta must be positive and finite")

    @property
    def alpha_max(self) -> float:
        """Upper end of the KL dual search interval, ``1 / delta``."""
        return 1.0 / self.delta


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_of: np.ndarray
    k: int

    def __post_init__(self):
        object.__setattr__(self, "fold_of", _readonly(np.asarray(self.fold_of, dtype=np.int64)))

    @property
    def n(self) -> int:
        return self.fold_of.shape[0]

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def complement(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k)


def crossfit_split(n: int, k: int, seed) -> FoldAssignment:
    if k < 2 or k > n:
        raise ConfigurationError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = make_rng(seed, 101).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % k
    return FoldAssignment(fold_of, k)


def split_half(indices, seed) -> tuple[np.ndarray, np.ndarray]:
    indices = np.asarray(indices)
    if indices.shape[0] < 2:
        raise ConfigurationError("split_half needs at least two indices")
    perm = make_rng(seed, 102).permutation(indices.shape[0])
    cut = (indices.shape[0] + 1) // 2
    return np.sort(indices[perm[:cut]]), np.sort(indices[perm[cut:]])


@dataclass(frozen=True)
class EvalTheta:
    """Joint solution ``(alpha, W0, W1, value)`` of the evaluation moment system."""

    alpha: float
    w0: float
    w1: float
    value: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.w0, self.w1, self.value])
