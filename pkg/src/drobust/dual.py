"""Dual objectives for KL, f-divergence and Cressie-Read uncertainty sets.

The KL dual of the worst-case value is

    phi(alpha) = -alpha * log W(alpha) - alpha * delta,
    W(alpha)   = E[exp(-R / alpha)],

maximized over ``alpha > 0``. Every ``W`` in this package (population
distributions, importance-weighted samples, doubly robust corrections) has
the form ``sum_j c_j exp(-r_j / alpha)`` for coefficients ``c_j`` and rewards
``r_j``; :class:`RewardCurve` evaluates ``phi`` and its first two
derivatives for that form without underflow by factoring out the smallest
reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .core import EPS_ALPHA, CressieRead, DivergenceSpec
from .errors import DegenerateWeightsError, DomainError, DrNegativeWError

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# Reward distributions and curves
# ---------------------------------------------------------------------------


class RewardCurve:
    """``W(alpha) = sum_j c_j exp(-r_j / alpha)`` with possibly signed ``c_j``.

    Internally ``W(alpha) = exp(-m / alpha) * S(alpha)`` where ``m`` is the
    smallest reward carrying a nonzero coefficient, so that ``S`` stays of
    order one even as ``alpha -> 0``.
    """

    def __init__(self, coef, rewards):
        coef = np.asarray(coef, dtype=float).ravel()
        rewards = np.asarray(rewards, dtype=float).ravel()
        if coef.shape != rewards.shape:
            raise DomainError("coefficients and rewards must have the same length")
        keep = coef != 0
        if not keep.any():
            raise DegenerateWeightsError("all coefficients are zero")
        self.c = coef[keep]
        self.r = rewards[keep]
        self.m = float(self.r.min())
        self.d = self.r - self.m
        self.total = float(self.c.sum())
        self.constant = bool(np.all(self.d == 0))

    def _sums(self, alpha):
        a = np.asarray(alpha, dtype=float)
        if np.any(a <= 0):
            raise DomainError("alpha must be positive")
        ce = self.c * np.exp(-np.multiply.outer(1.0 / a, self.d))
        S = ce.sum(axis=-1)
        T1 = (ce * self.d).sum(axis=-1)
        T2 = (ce * self.d**2).sum(axis=-1)
        return a, S, T1, T2

    def moment(self, alpha, j: int = 0):
        """``W_j(alpha) = sum c r^j exp(-r / alpha)``."""
        a = np.asarray(alpha, dtype=float)
        if np.any(a <= 0):
            raise DomainError("alpha must be positive")
        ce = self.c * self.r**j * np.exp(-np.multiply.outer(1.0 / a, self.d))
        return np.exp(-self.m / a) * ce.sum(axis=-1)

    def log_w(self, alpha):
        a, S, _, _ = self._sums(alpha)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(S > 0, -self.m / a + np.log(np.where(S > 0, S, 1.0)), np.nan)

    def phi(self, alpha, delta: float):
        """Dual objective; ``nan`` where ``W(alpha) <= 0``."""
        a, S, _, _ = self._sums(alpha)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = self.m - a * np.log(np.where(S > 0, S, np.nan)) - a * delta
        return out

    def dphi(self, alpha, delta: float):
        a, S, T1, _ = self._sums(alpha)
        with np.errstate(invalid="ignore", divide="ignore"):
            S = np.where(S > 0, S, np.nan)
            return -np.log(S) - T1 / (a * S) - delta

    def d2phi(self, alpha):
        a, S, T1, T2 = self._sums(alpha)
        with np.errstate(invalid="ignore", divide="ignore"):
            S = np.where(S > 0, S, np.nan)
            return (T1 * T1 / S - T2) / (a**3 * S)

    def tilted_weights(self, alpha: float) -> np.ndarray:
        e = self.c * np.exp(-self.d / alpha)
        return e / e.sum()


@dataclass(frozen=True, eq=False)
class DiscreteRewardDist:
    """Finite-support reward distribution with atoms sorted by reward."""

    rewards: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rewards, dtype=float).ravel()
        p = np.asarray(self.probs, dtype=float).ravel()
        if r.shape != p.shape or r.size == 0:
            raise DomainError("rewards and probabilities must be nonempty and equal length")
        if np.any(r < 0) or np.any(r > 1):
            raise DomainError("rewards must lie in [0, 1]")
        if np.any(p <= 0):
            raise DomainError("atom probabilities must be positive")
        if abs(p.sum() - 1.0) > 1e-9:
            raise DomainError("probabilities must sum to 1")
        u, inv = np.unique(r, return_inverse=True)
        merged = np.zeros(u.shape[0])
        np.add.at(merged, inv, p)
        merged = merged / merged.sum()
        u.setflags(write=False)
        merged.setflags(write=False)
        object.__setattr__(self, "rewards", u)
        object.__setattr__(self, "probs", merged)

    @classmethod
    def from_atoms(cls, atoms) -> "DiscreteRewardDist":
        atoms = list(atoms)
        return cls(np.array([a[0] for a in atoms]), np.array([a[1] for a in atoms]))

    @classmethod
    def point_mass(cls, c: float) -> "DiscreteRewardDist":
        return cls(np.array([c]), np.array([1.0]))

    @property
    def atoms(self) -> list:
        return list(zip(self.rewards.tolist(), self.probs.tolist()))

    @property
    def curve(self) -> RewardCurve:
        return RewardCurve(self.probs, self.rewards)

    def mean(self) -> float:
        return float(self.probs @ self.rewards)


def kl_divergence(q: DiscreteRewardDist, p: DiscreteRewardDist) -> float:
    """``KL(q || p)``; every atom of ``q`` must be an atom of ``p``."""
    idx = np.searchsorted(p.rewards, q.rewards)
    if np.any(idx >= p.rewards.size) or np.any(p.rewards[np.minimum(idx, p.rewards.size - 1)] != q.rewards):
        raise DomainError("q puts mass outside the support of p")
    return float(np.sum(q.probs * (np.log(q.probs) - np.log(p.probs[idx]))))


def _as_curve(source) -> RewardCurve:
    if isinstance(source, RewardCurve):
        return source
    curve = getattr(source, "curve", None)
    if isinstance(curve, RewardCurve):
        return curve
    raise DomainError(f"cannot build a reward curve from {type(source).__name__}")


# ---------------------------------------------------------------------------
# KL dual
# ---------------------------------------------------------------------------


def w_moment(source, alpha: float, j: int = 0) -> float:
    """``W_j(alpha) = E[R^j exp(-R / alpha)]`` for a distribution or weighted sample."""
    if j not in (0, 1, 2):
        raise DomainError("moment order must be 0, 1 or 2")
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    return float(_as_curve(source).moment(alpha, j))


def phi_kl(alpha: float, w0: float, delta: float) -> float:
    if not (alpha > 0 and w0 > 0 and delta > 0):
        raise DomainError("phi_kl needs positive alpha, w0 and delta")
    return -alpha * math.log(w0) - alpha * delta


def phi_kl_derivative(source, alpha: float, delta: float) -> float:
    """``d phi / d alpha = -log W0 - W1 / (alpha W0) - delta``."""
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    return float(_as_curve(source).dphi(alpha, delta))


def phi_kl_second_derivative(source, alpha: float) -> float:
    """``(W1^2 / W0 - W2) / (alpha^3 W0)``."""
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    return float(_as_curve(source).d2phi(alpha))


@dataclass(frozen=True)
class DualResult:
    """Maximizer of a one-dimensional dual. Unpacks as ``(alpha, value)``."""

    alpha: float
    value: float
    flags: tuple = field(default_factory=tuple)

    def __iter__(self):
        return iter((self.alpha, self.value))


def _golden(f, a: float, b: float, iters: int = 200, rtol: float = 4e-16):
    """Maximize a unimodal ``f`` on ``[a, b]``; returns ``(x, f(x))``."""
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if b - a <= rtol * max(abs(a), abs(b)):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    cands = [(fc, c), (fd, d), (f(a), a), (f(b), b)]
    fx, x = max(cands, key=lambda t: -np.inf if np.isnan(t[0]) else t[0])
    return x, fx


def _skip_edge_spike(vals: np.ndarray, i: int, flags: list) -> int:
    """Replace a grid argmax that borders an excluded point by the best proper local maximum."""
    fin = np.isfinite(vals)
    n = vals.size

    def borders_excluded(j):
        return (j > 0 and not fin[j - 1]) or (j < n - 1 and not fin[j + 1])

    if not borders_excluded(i):
        return i
    cand = [j for j in range(n) if fin[j] and not borders_excluded(j)
            and (j == 0 or vals[j] >= vals[j - 1]) and (j == n - 1 or vals[j] >= vals[j + 1])]
    if not cand:
        flags.append("max_at_excluded_edge")
        return i
    flags.append("skipped_excluded_edge")
    return max(cand, key=lambda j: vals[j])


def maximize_curve(
    curve: RewardCurve,
    delta: float,
    lo: float = EPS_ALPHA,
    hi: Optional[float] = None,
    *,
    warm_start: Optional[float] = None,
    n_grid: int = 256,
    newton_steps: int = 20,
) -> DualResult:
    """Maximize ``phi`` over ``[lo, hi]`` for a reward curve.

    A coarse log grid brackets the maximizer, golden-section search refines
    it and Newton steps on ``phi'`` polish the result (each accepted only if
    it does not lower ``phi``). Points where ``W <= 0`` are excluded from
    the search; if every grid point is excluded :class:`DrNegativeWError`
    is raised. Since ``phi`` diverges as ``W`` approaches zero from above,
    a grid maximum next to an excluded point is an artifact of the sign
    change; the best genuine local maximum is used instead (flag
    ``skipped_excluded_edge``), or, if there is none, the edge is kept at
    grid resolution (flag ``max_at_excluded_edge``).
    """
    if not delta > 0:
        raise DomainError("delta must be positive")
    hi = 1.0 / delta if hi is None else float(hi)
    if not 0 < lo < hi:
        raise DomainError("need 0 < lo < hi")
    flags = []

    def phi(a):
        v = float(curve.phi(a, delta))
        return -np.inf if np.isnan(v) else v

    if curve.constant:
        if curve.total <= 0:
            raise DrNegativeWError("W is nonpositive for every alpha")
        slope = -math.log(curve.total) - delta
        alpha = lo if slope <= 0 else hi
        return DualResult(alpha, curve.m + alpha * slope, ("degenerate_constant",))

    grid = None
    if warm_start is not None and lo <= warm_start <= hi:
        grid = np.geomspace(max(lo, warm_start / 4), min(hi, warm_start * 4), 17)
        vals = curve.phi(grid, delta)
        i = int(np.nanargmax(vals)) if np.isfinite(vals).any() else -1
        interior = 0 < i < grid.size - 1
        at_edge_ok = (i == 0 and grid[0] == lo) or (i == grid.size - 1 and grid[-1] == hi)
        if not (np.isfinite(vals).all() and (interior or at_edge_ok)):
            grid = None
    if grid is None:
        grid = np.geomspace(lo, hi, n_grid)
        vals = curve.phi(grid, delta)
        ok = np.isfinite(vals)
        if not ok.any():
            raise DrNegativeWError("W is nonpositive on the whole alpha range")
        if not ok.all():
            flags.append("excluded_nonpositive_W")
        i = int(np.nanargmax(vals))
        if not ok.all():
            i = _skip_edge_spike(vals, i, flags)
    a = grid[i - 1] if i > 0 and np.isfinite(vals[i - 1]) else grid[i]
    b = grid[i + 1] if i < grid.size - 1 and np.isfinite(vals[i + 1]) else grid[i]

    if i == grid.size - 1 and grid[i] == hi and curve.dphi(hi, delta) >= 0:
        x, fx = hi, phi(hi)
    elif i == 0 and grid[0] == lo and curve.dphi(lo, delta) <= 0:
        x, fx = lo, phi(lo)
    else:
        x, fx = _golden(phi, a, b) if b > a else (grid[i], float(vals[i]))
        for _ in range(newton_steps):
            g = float(curve.dphi(x, delta))
            h = float(curve.d2phi(x))
            if not (np.isfinite(g) and np.isfinite(h)) or h >= 0:
                break
            x_new = min(max(x - g / h, a), b)
            f_new = phi(x_new)
            if f_new < fx - 1e-15 * max(1.0, abs(fx)):
                break
            step = abs(x_new - x)
            x, fx = x_new, f_new
            if step <= 1e-15 * x:
                break
    if x <= lo * (1 + 1e-12):
        flags.append("alpha_lower_boundary")
    elif x >= hi * (1 - 1e-12):
        flags.append("alpha_upper_boundary")
    return DualResult(float(x), float(fx), tuple(flags))


def maximize_kl_dual(source, delta: float, *, alpha_min: float = EPS_ALPHA,
                     alpha_max: Optional[float] = None) -> DualResult:
    """Worst-case value over the KL ball of radius ``delta``.

    ``source`` is a :class:`DiscreteRewardDist`, a :class:`RewardCurve` or
    any object exposing a ``curve`` attribute. The search runs over
    ``[alpha_min, 1 / delta]`` unless ``alpha_max`` is given. A constant
    reward returns ``(alpha_min, c)`` flagged ``degenerate_constant``.
    """
    if not delta > 0:
        raise DomainError("delta must be positive")
    curve = _as_curve(source)
    if curve.constant and abs(curve.total - 1.0) <= 1e-12:
        return DualResult(alpha_min, curve.m, ("degenerate_constant",))
    return maximize_curve(curve, delta, alpha_min, alpha_max)


def tilted_worst_case(dist: DiscreteRewardDist, alpha_star: float) -> DiscreteRewardDist:
    """Exponentially tilted distribution ``q_i ∝ p_i exp(-r_i / alpha_star)``."""
    if not alpha_star > 0:
        raise DomainError("alpha must be positive")
    e = dist.probs * np.exp(-(dist.rewards - dist.rewards[0]) / alpha_star)
    q = e / e.sum()
    keep = q > 0
    if not keep.all():
        # atoms whose tilted mass underflows are dropped
        q = q[keep] / q[keep].sum()
        return DiscreteRewardDist(dist.rewards[keep], q)
    return DiscreteRewardDist(dist.rewards, q)


# ---------------------------------------------------------------------------
# f-divergence duals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FDualPoint:
    alpha: float
    lam: float

    def __post_init__(self):
        if self.alpha < 0:
            raise DomainError("alpha must be nonnegative")


def _dist_arrays(dist):
    if isinstance(dist, DiscreteRewardDist):
        return dist.rewards, dist.probs
    r = np.asarray(dist, dtype=float)
    return r, np.full(r.shape, 1.0 / r.size)


def phi_f(dist, point: FDualPoint, spec: DivergenceSpec) -> float:
    """``-alpha E[f*((-R - lambda) / alpha)] - alpha delta - lambda``."""
    if not point.alpha > 0:
        raise DomainError("phi_f needs alpha > 0; take the limit at the boundary")
    r, p = _dist_arrays(dist)
    with np.errstate(all="ignore"):
        vals = np.asarray(spec.family.f_conj((-r - point.lam) / point.alpha), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise DomainError("conjugate f* undefined at the requested point")
    return float(-point.alpha * (p @ vals) - point.alpha * spec.delta - point.lam)


def kl_lambda_star(alpha: float, w0: float) -> float:
    """Inner maximizer in lambda for the KL conjugate ``f*(x) = exp(x - 1)``."""
    if not (alpha > 0 and w0 > 0):
        raise DomainError("alpha and w0 must be positive")
    return alpha * math.log(w0) - alpha


def _conj_unit_point(family) -> float:
    """The ``s0`` with ``(f*)'(s0) = 1``."""
    g = lambda s: float(family.f_conj_prime(s)) - 1.0
    lo, hi = -1.0, 1.0
    for _ in range(60):
        if g(lo) < 0 < g(hi) or g(lo) == 0 or g(hi) == 0:
            break
        lo, hi = 2 * lo, 2 * hi
    if g(lo) == 0:
        return lo
    if g(hi) == 0:
        return hi
    return brentq(g, lo, hi, xtol=1e-15, rtol=1e-15)


def f_lambda_star(dist, alpha: float, family, s0: Optional[float] = None) -> float:
    """Inner maximizer: solves ``E[(f*)'((-R - lambda) / alpha)] = 1``."""
    r, p = _dist_arrays(dist)
    s0 = _conj_unit_point(family) if s0 is None else s0

    def g(lam):
        with np.errstate(over="ignore"):
            return float(p @ np.asarray(family.f_conj_prime((-r - lam) / alpha))) - 1.0

    lo, hi = -1.0 - alpha * s0, -alpha * s0
    glo, ghi = g(lo), g(hi)
    if glo == 0:
        return lo
    if ghi == 0:
        return hi
    return brentq(g, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500)


@dataclass(frozen=True)
class FDualResult:
    alpha: float
    lam: float
    value: float


def maximize_f_dual(dist, spec: DivergenceSpec, *, alpha_min: float = EPS_ALPHA,
                    alpha_cap: float = 1e8) -> FDualResult:
    """Jointly maximize ``phi_f`` over ``alpha > 0`` and ``lambda``.

    ``lambda`` is profiled out by its first-order condition; the profile
    is concave in ``alpha`` and maximized by a log grid plus golden search.
    """
    fam = spec.family
    s0 = _conj_unit_point(fam)
    r, _ = _dist_arrays(dist)
    if np.all(r == r.flat[0]):
        return FDualResult(alpha_min, -float(r.flat[0]) - alpha_min * s0, float(r.flat[0]))

    def prof(a):
        lam = f_lambda_star(dist, a, fam, s0)
        try:
            return phi_f(dist, FDualPoint(a, lam), spec)
        except DomainError:
            return -np.inf

    hi = max(1.0 / spec.delta, 1.0)
    while hi < alpha_cap and prof(hi) > prof(hi / 2):
        hi *= 4
    hi = min(hi, alpha_cap)
    grid = np.geomspace(alpha_min, hi, 128)
    vals = np.array([prof(a) for a in grid])
    i = int(np.argmax(vals))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, grid.size - 1)]
    x, fx = _golden(prof, a, b)
    return FDualResult(float(x), f_lambda_star(dist, x, fam, s0), float(fx))


def phi_cressie_read(dist, lam: float, family: CressieRead, delta: float) -> float:
    """``-c_k(delta) E[(-R - lambda)_+^{k*}]^{1/k*} - lambda``."""
    if not isinstance(family, CressieRead):
        raise DomainError("phi_cressie_read needs a CressieRead family")
    r, p = _dist_arrays(dist)
    ks = family.k_star
    x = np.maximum(-r - lam, 0.0)
    return float(-family.radius_constant(delta) * (p @ x**ks) ** (1.0 / ks) - lam)


def maximize_cressie_read(dist, family: CressieRead, delta: float):
    """``(lambda*, sup_lambda phi_k)`` via the monotone first-order condition."""
    r, p = _dist_arrays(dist)
    ks = family.k_star
    ck = family.radius_constant(delta)
    rmin = float(r.min())
    if np.all(r == rmin):
        return -rmin, rmin

    def grad(lam):
        x = np.maximum(-r - lam, 0.0)
        top = p @ x**ks
        if top <= 0:
            return -1.0
        return ck * (p @ x ** (ks - 1.0)) / top ** (1.0 - 1.0 / ks) - 1.0

    hi = -rmin
    lo = hi - 1.0
    while grad(lo) <= 0:
        lo = hi - 2 * (hi - lo)
        if hi - lo > 1e15:
            raise DomainError("failed to bracket the Cressie-Read maximizer")
    lam = brentq(grad, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500)
    val = phi_cressie_read(dist, lam, family, delta)
    return float(lam), float(val)


def dual_value(source, spec: DivergenceSpec) -> float:
    """Worst-case value for any supported divergence family."""
    fam = spec.family
    if getattr(fam, "name", "") == "kl":
        return maximize_kl_dual(source, spec.delta).value
    if isinstance(fam, CressieRead):
        return maximize_cressie_read(source, fam, spec.delta)[1]
    return maximize_f_dual(source, spec).value


def lipschitz_exp_bound(alpha_lo: float) -> float:
    """Lipschitz constant ``1 / alpha_lo^2`` of ``alpha -> exp(-r/alpha)`` on ``[alpha_lo, inf)``."""
    if not alpha_lo > 0:
        raise DomainError("alpha_lo must be positive")
    return 1.0 / alpha_lo**2


def w_lower_bound(density_floor: float, alpha: float) -> float:
    """Lower bound ``omega * min(alpha, 1) / 2`` on ``W`` for rewards with density >= omega."""
    return density_floor * min(alpha, 1.0) / 2.0

