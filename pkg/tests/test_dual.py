"""Dual objectives. Reference numbers were produced by 50-digit mpmath root finding
and golden search (kept outside the package) and are frozen here."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drobust.core import KL, CressieRead, DivergenceSpec, FDivergence
from drobust.dual import (DiscreteRewardDist, FDualPoint, RewardCurve, f_lambda_star, kl_divergence,
                          kl_lambda_star, lipschitz_exp_bound, maximize_cressie_read, maximize_curve,
                          maximize_f_dual, maximize_kl_dual, phi_cressie_read, phi_f, phi_kl,
                          phi_kl_derivative, phi_kl_second_derivative, tilted_worst_case, w_moment)
from drobust.errors import DomainError, DrNegativeWError

BERNOULLI = DiscreteRewardDist.from_atoms([(0.0, 0.5), (1.0, 0.5)])
THREE = DiscreteRewardDist.from_atoms([(0.1, 0.2), (0.4, 0.5), (0.9, 0.3)])

# mpmath references
BERNOULLI_D01 = (1.0599473157081878, 0.28020537383859026)
THREE_D03 = (0.30831852670485301, 0.28137208592500274)
CR2_D01 = (-1.6180339887498948, 0.27639320225002102)
CR2_D1E8_VALUE = 0.49992928932188135
CR3_D02_VALUE = 0.18377223398316206


def _dists():
    return st.integers(1, 10).flatmap(lambda k: st.tuples(
        st.lists(st.floats(0, 1), min_size=k, max_size=k),
        st.lists(st.floats(0.01, 1), min_size=k, max_size=k)))


def _make(pair):
    r, w = pair
    w = np.asarray(w)
    return DiscreteRewardDist(np.asarray(r), w / w.sum())


class TestDistribution:
    def test_merges_and_sorts(self):
        d = DiscreteRewardDist.from_atoms([(0.7, 0.25), (0.2, 0.5), (0.7, 0.25)])
        assert d.atoms == [(0.2, 0.5), (0.7, 0.5)]

    def test_validation(self):
        with pytest.raises(DomainError):
            DiscreteRewardDist.from_atoms([(0.5, 0.4)])
        with pytest.raises(DomainError):
            DiscreteRewardDist.from_atoms([(1.5, 1.0)])


class TestMoments:
    def test_point_mass_at_zero(self):
        assert w_moment(DiscreteRewardDist.point_mass(0.0), 0.37, 0) == 1.0

    def test_bernoulli_moments(self):
        assert w_moment(BERNOULLI, 1.0, 0) == pytest.approx(0.68393972058572116, abs=1e-15)
        assert w_moment(BERNOULLI, 1.0, 1) == pytest.approx(0.18393972058572116, abs=1e-15)

    def test_nonpositive_alpha(self):
        with pytest.raises(DomainError):
            w_moment(BERNOULLI, 0.0)

    @settings(max_examples=50, deadline=None)
    @given(_dists(), st.floats(1e-3, 1e3))
    def test_ordering(self, pair, alpha):
        d = _make(pair)
        w0, w1, w2 = (w_moment(d, alpha, j) for j in (0, 1, 2))
        assert 0 < w0 <= 1 + 1e-15
        assert w2 <= w1 * (1 + 1e-12) and w1 <= w0 * (1 + 1e-12)

    def test_curve_is_stable_for_tiny_alpha(self):
        d = DiscreteRewardDist.from_atoms([(0.6, 0.5), (0.9, 0.5)])
        # W underflows, but phi is still finite and close to the minimum reward
        assert np.isfinite(d.curve.phi(1e-6, 0.1))
        assert d.curve.phi(1e-6, 0.1) == pytest.approx(0.6, abs=1e-5)


class TestPhiKL:
    def test_examples(self):
        assert phi_kl(1.0, 1.0, 0.3) == pytest.approx(-0.3, abs=1e-15)
        assert phi_kl(2.0, math.exp(-1), 0.1) == pytest.approx(1.8, abs=1e-14)
        assert phi_kl(0.5, 0.683939, 0.1) == pytest.approx(0.13994327331151184, abs=1e-14)

    def test_domain(self):
        with pytest.raises(DomainError):
            phi_kl(0.0, 0.5, 0.1)
        with pytest.raises(DomainError):
            phi_kl(1.0, 0.0, 0.1)

    def test_derivative_of_point_mass_is_minus_delta(self):
        pm = DiscreteRewardDist.point_mass(0.4)
        for a in (0.01, 0.3, 5.0):
            assert phi_kl_derivative(pm, a, 0.2) == pytest.approx(-0.2, abs=1e-12)

    def test_derivatives_match_finite_differences(self):
        h = 1e-5
        for a in (0.2, 0.9, 3.0):
            phi = lambda x: -x * math.log(w_moment(THREE, x)) - 0.3 * x
            fd1 = (phi(a + h) - phi(a - h)) / (2 * h)
            h2 = 1e-3
            fd2 = (phi(a + h2) - 2 * phi(a) + phi(a - h2)) / h2**2
            assert phi_kl_derivative(THREE, a, 0.3) == pytest.approx(fd1, abs=1e-9)
            assert phi_kl_second_derivative(THREE, a) == pytest.approx(fd2, rel=1e-4, abs=1e-7)

    def test_derivative_vanishes_at_grid_argmax(self):
        grid = np.linspace(0.5, 2.0, 1_000_001)
        vals = BERNOULLI.curve.phi(grid, 0.1)
        a_grid = grid[np.argmax(vals)]
        assert abs(phi_kl_derivative(BERNOULLI, a_grid, 0.1)) < 1e-6
        assert phi_kl_derivative(BERNOULLI, 0.5, 0.1) > 0 > phi_kl_derivative(BERNOULLI, 2.0, 0.1)


class TestMaximizeKL:
    def test_point_mass(self):
        res = maximize_kl_dual(DiscreteRewardDist.point_mass(0.7), 0.3)
        assert res.value == 0.7
        assert "degenerate_constant" in res.flags

    @pytest.mark.parametrize("dist,delta,ref", [(BERNOULLI, 0.1, BERNOULLI_D01), (THREE, 0.3, THREE_D03)])
    def test_frozen_references(self, dist, delta, ref):
        alpha, value = maximize_kl_dual(dist, delta)
        assert alpha == pytest.approx(ref[0], abs=1e-8)
        assert value == pytest.approx(ref[1], abs=1e-13)

    def test_large_radius_goes_to_minimum(self):
        assert maximize_kl_dual(BERNOULLI, 100.0).value <= 0.01

    def test_alpha_in_range(self):
        for d in (0.01, 0.1, 1.0, 10.0):
            a, _ = maximize_kl_dual(THREE, d)
            assert 0 < a <= 1 / d

    @settings(max_examples=40, deadline=None)
    @given(_dists(), st.lists(st.floats(0.01, 2.0), min_size=2, max_size=4, unique=True))
    def test_value_nonincreasing_in_delta(self, pair, deltas):
        d = _make(pair)
        vals = [maximize_kl_dual(d, x).value for x in sorted(deltas)]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
        # the search stops at alpha = 1e-8, so the reward floor is met up to alpha * (log(1/p_min) + delta)
        assert vals[0] <= d.mean() + 1e-12 and vals[-1] >= d.rewards.min() - 1e-6

    def test_signed_curve_skips_spike_at_excluded_edge(self):
        # W(alpha) = exp(-0.2/a) - 0.6 exp(-0.1/a) + 0.5 exp(-0.9/a) is negative below alpha ~ 0.191,
        # and phi diverges as alpha approaches that root from above
        curve = RewardCurve([1.0, -0.6, 0.5], [0.2, 0.1, 0.9])
        res = maximize_curve(curve, 0.1)
        assert {"excluded_nonpositive_W", "skipped_excluded_edge"} <= set(res.flags)
        assert res.alpha == 10.0
        assert res.value == pytest.approx(float(curve.phi(10.0, 0.1)), abs=1e-15)
        near_root = np.geomspace(0.1911, 0.2, 50)
        assert np.nanmax(curve.phi(near_root, 0.1)) > res.value

    def test_edge_kept_when_no_local_maximum(self):
        # with delta = 1 phi decreases all the way from the root to 1/delta
        curve = RewardCurve([1.0, -0.6, 0.5], [0.2, 0.1, 0.9])
        res = maximize_curve(curve, 1.0)
        assert "max_at_excluded_edge" in res.flags
        assert curve.moment(res.alpha) > 0

    def test_all_negative_raises(self):
        with pytest.raises(DrNegativeWError):
            maximize_curve(RewardCurve([-1.0, 0.2], [0.3, 0.5]), 0.1)

    def test_warm_start_matches_cold(self):
        cold = maximize_curve(THREE.curve, 0.3)
        warm = maximize_curve(THREE.curve, 0.3, warm_start=0.5)
        assert warm.value == pytest.approx(cold.value, abs=1e-14)


class TestTilted:
    def test_point_mass_identity(self):
        q = tilted_worst_case(DiscreteRewardDist.point_mass(0.3), 0.2)
        assert q.atoms == [(0.3, 1.0)]

    def test_primal_dual_consistency(self):
        for dist, delta in ((BERNOULLI, 0.1), (THREE, 0.3)):
            a, v = maximize_kl_dual(dist, delta)
            q = tilted_worst_case(dist, a)
            assert kl_divergence(q, dist) == pytest.approx(delta, abs=1e-10)
            assert q.mean() == pytest.approx(v, abs=1e-12)

    def test_large_alpha_recovers_p(self):
        q = tilted_worst_case(THREE, 1e12)
        np.testing.assert_allclose(q.probs, THREE.probs, atol=1e-11)


class TestFDual:
    def test_kl_lambda_star_examples(self):
        assert kl_lambda_star(1.0, 1.0) == -1.0
        assert kl_lambda_star(2.0, math.e) == pytest.approx(0.0, abs=1e-15)
        assert kl_lambda_star(1.0, 0.683939) == pytest.approx(-1.3798865466230237, abs=1e-14)

    def test_kl_recovered_from_f_form(self):
        spec = DivergenceSpec(0.2, KL())
        for a in (0.1, 0.7, 3.0):
            lam = kl_lambda_star(a, w_moment(THREE, a))
            got = phi_f(THREE, FDualPoint(a, lam), spec)
            assert got == pytest.approx(phi_kl(a, w_moment(THREE, a), 0.2), abs=1e-13)
            assert f_lambda_star(THREE, a, KL()) == pytest.approx(lam, abs=1e-12)

    def test_generic_family_matches_builtin_kl(self):
        fam = FDivergence(KL.f, KL.f_conj, KL.f_conj_prime, name="kl-as-f")
        res = maximize_f_dual(THREE, DivergenceSpec(0.3, fam))
        assert res.value == pytest.approx(THREE_D03[1], abs=1e-9)

    def test_cressie_read_through_f_form(self):
        res = maximize_f_dual(BERNOULLI, DivergenceSpec(0.1, CressieRead(2.0)))
        assert res.value == pytest.approx(CR2_D01[1], abs=1e-8)

    def test_constant_reward(self):
        res = maximize_f_dual(DiscreteRewardDist.point_mass(0.35), DivergenceSpec(0.5, CressieRead(2.0)))
        assert res.value == pytest.approx(0.35, abs=1e-12)

    def test_alpha_must_be_nonnegative(self):
        with pytest.raises(DomainError):
            FDualPoint(-1.0, 0.0)


class TestCressieRead:
    def test_point_mass(self):
        lam, v = maximize_cressie_read(DiscreteRewardDist.point_mass(0.6), CressieRead(2.0), 0.4)
        assert v == pytest.approx(0.6, abs=1e-15)

    def test_frozen_references(self):
        lam, v = maximize_cressie_read(BERNOULLI, CressieRead(2.0), 0.1)
        assert lam == pytest.approx(CR2_D01[0], abs=1e-10)
        assert v == pytest.approx(CR2_D01[1], abs=1e-13)
        assert maximize_cressie_read(BERNOULLI, CressieRead(3.0), 0.2)[1] == pytest.approx(CR3_D02_VALUE, abs=1e-13)

    def test_small_radius_approaches_mean(self):
        _, v = maximize_cressie_read(BERNOULLI, CressieRead(2.0), 1e-8)
        assert v == pytest.approx(CR2_D1E8_VALUE, abs=1e-10)
        assert abs(v - BERNOULLI.mean()) < 1e-4

    def test_matches_lambda_grid(self):
        lam, v = maximize_cressie_read(THREE, CressieRead(2.5), 0.3)
        grid = np.linspace(lam - 0.5, lam + 0.5, 200001)
        brute = max(phi_cressie_read(THREE, x, CressieRead(2.5), 0.3) for x in grid[::100])
        assert v >= brute - 1e-12
        fine = grid[np.abs(grid - lam) < 1e-3]
        assert v == pytest.approx(max(phi_cressie_read(THREE, x, CressieRead(2.5), 0.3) for x in fine), abs=1e-9)

    def test_rejects_non_cressie_family(self):
        with pytest.raises(DomainError):
            phi_cressie_read(BERNOULLI, -1.0, KL(), 0.1)


def test_lipschitz_constant():
    assert lipschitz_exp_bound(0.5) == 4.0
    with pytest.raises(DomainError):
        lipschitz_exp_bound(0.0)
