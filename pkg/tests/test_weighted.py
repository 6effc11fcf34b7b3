from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drobust.core import Dataset
from drobust.dual import DiscreteRewardDist, maximize_kl_dual
from drobust.errors import DegenerateWeightsError, DomainError, OverlapError
from drobust.policy import LinearSoftmaxPolicy, TabularPolicy
from drobust.weighted import (DegeneracyBoundaryWarning, Regime, WeightedSample, degeneracy_classify,
                              degeneracy_stats, ips_value, ips_weighted_sample, propensity_ratios, snips_normalize,
                              snips_value, weighted_dro_value, weighted_W)


def _grid_regime(w, r, delta):
    """Regime read off phi_hat by brute force at very small and very large alpha."""
    w, r = np.asarray(w), np.asarray(r)
    m = r.min()

    def phi(a):
        # shift by the minimum reward so exp does not underflow at tiny alpha
        inner = np.mean(w * np.exp(-(r - m) / a))
        return m - a * math.log(inner) - a * delta

    big = [phi(a) for a in (1e5, 1e6)]
    if big[1] > big[0]:
        return Regime.ALPHA_INFINITE
    small = [phi(a) for a in (1e-4, 1e-3)]
    if small[0] > small[1]:
        return Regime.ALPHA_ZERO
    return Regime.FINITE


class TestWeightedSample:
    def test_validation(self):
        with pytest.raises(DomainError):
            WeightedSample([-1.0, 1.0], [0.2, 0.3])
        with pytest.raises(DomainError):
            WeightedSample([1.0], [1.5])
        with pytest.raises(DegenerateWeightsError):
            WeightedSample([0.0, 0.0], [0.2, 0.3])

    def test_weighted_W_limits(self):
        ws = WeightedSample([1.0, 1.0], [0.0, 1.0])
        assert weighted_W(ws, 1e12) == pytest.approx(1.0, abs=1e-11)
        assert weighted_W(ws, 1.0) == pytest.approx((1 + math.exp(-1)) / 2, abs=1e-15)
        with pytest.raises(DomainError):
            weighted_W(ws, 0.0)

    def test_snips_normalize_has_unit_mean(self):
        w = snips_normalize([0.2, 3.0, 0.7, 0.0])
        assert w.mean() == pytest.approx(1.0, abs=1e-12)
        with pytest.raises(DegenerateWeightsError):
            snips_normalize([0.0, 0.0])


class TestClassify:
    def test_unit_weight_mean_is_finite(self):
        _, reg = degeneracy_classify(WeightedSample([1.0, 1.0, 1.0], [0.1, 0.5, 0.9]), 0.3)
        assert reg is Regime.FINITE

    def test_small_weight_mean_blows_up(self):
        st_, reg = degeneracy_classify(WeightedSample([0.5, 0.5], [0.2, 0.8]), 0.6)
        assert st_.s_w == 0.5 and reg is Regime.ALPHA_INFINITE

    def test_light_min_reward_collapses(self):
        ws = WeightedSample([0.2, 1.8], [0.0, 1.0])
        st_, reg = degeneracy_classify(ws, 3.0)
        assert st_.s_w_min == pytest.approx(0.1) and reg is Regime.ALPHA_ZERO

    def test_exact_tie_warns_and_is_finite(self):
        ws = WeightedSample([0.5, 0.5], [0.2, 0.8])
        with pytest.warns(DegeneracyBoundaryWarning):
            _, reg = degeneracy_classify(ws, -math.log(0.5))
        assert reg is Regime.FINITE

    def test_stats_use_positive_weights_only(self):
        st_ = degeneracy_stats(WeightedSample([0.0, 1.0, 1.0], [0.0, 0.3, 0.3]))
        assert st_.min_reward == 0.3 and st_.s_w_min == pytest.approx(2 / 3)

    def test_agrees_with_brute_force(self):
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(300):
            n = int(rng.integers(2, 8))
            w = rng.exponential(size=n) * rng.uniform(0.05, 1.5)
            r = rng.choice([0.0, 0.25, 0.5, 1.0], size=n)
            delta = float(rng.uniform(0.01, 5))
            st_ = degeneracy_stats(WeightedSample(w, r))
            if min(abs(delta - st_.infinite_threshold), abs(delta - st_.zero_threshold)) < 0.05:
                continue
            _, reg = degeneracy_classify(WeightedSample(w, r), delta)
            assert reg is _grid_regime(w, r, delta)
            checked += 1
        assert checked > 200

    def test_subnormal_weights_keep_finite_thresholds(self):
        assert np.all(np.isfinite(snips_normalize([2.0, 5e-324])))
        st_ = degeneracy_stats(WeightedSample([1.0, 5e-324], [1.0, 0.0]))
        assert st_.s_w_min == 0.0
        assert math.isfinite(st_.zero_threshold) and st_.zero_threshold > 700
        np.testing.assert_array_equal(snips_normalize([5e-324]), [1.0])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 1)), min_size=1, max_size=30), st.floats(1e-4, 20))
    def test_snips_never_infinite(self, pairs, delta):
        w = np.array([p[0] for p in pairs])
        if not w.sum() > 0:
            return
        ws = WeightedSample(snips_normalize(w), [p[1] for p in pairs])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegeneracyBoundaryWarning)
            res = weighted_dro_value(ws, delta)
        assert res.status is not Regime.ALPHA_INFINITE
        assert res.value <= 1.0 + 1e-12


class TestWeightedValue:
    def test_blow_up_sentinel(self):
        res = weighted_dro_value(WeightedSample([0.5, 0.5], [0.0, 1.0]), 0.5)
        assert res.status is Regime.ALPHA_INFINITE and res.value == math.inf
        # phi_hat is still climbing at alpha = 1e6
        phi = lambda a: -a * math.log(0.5 * (0.5 + 0.5 * math.exp(-1 / a))) - 0.5 * a
        assert phi(2e6) > phi(1e6)

    def test_collapse_returns_min_reward(self):
        alpha, value, status = weighted_dro_value(WeightedSample([0.1, 1.9], [0.0, 1.0]), 4.0)
        assert (alpha, value, status) == (0.0, 0.0, Regime.ALPHA_ZERO)
        assert _grid_regime([0.1, 1.9], [0.0, 1.0], 4.0) is Regime.ALPHA_ZERO

    def test_finite_matches_grid(self):
        rng = np.random.default_rng(3)
        w = snips_normalize(rng.exponential(size=40))
        r = rng.uniform(size=40)
        ws = WeightedSample(w, r)
        res = weighted_dro_value(ws, 0.2)
        assert res.finite
        grid = np.geomspace(1e-3, 1 / (0.2 + math.log(w.mean())), 400001)
        vals = ws.curve.phi(grid, 0.2)
        j = int(np.argmax(vals))
        assert res.value == pytest.approx(vals[j], abs=1e-6)
        assert res.alpha == pytest.approx(grid[j], rel=1e-3)

    def test_uniform_weights_reproduce_population_dual(self):
        dist = DiscreteRewardDist.from_atoms([(0.1, 0.2), (0.4, 0.5), (0.9, 0.3)])
        rng = np.random.default_rng(0)
        r = rng.choice(dist.rewards, size=100_000, p=dist.probs)
        res = weighted_dro_value(WeightedSample(np.ones(r.size), r), 0.3)
        alpha, truth = maximize_kl_dual(dist, 0.3)
        e = np.exp(-r / alpha)
        se = alpha * e.std() / e.mean() / math.sqrt(r.size)
        assert abs(res.value - truth) < 3 * se


class TestIps:
    def _data(self):
        rng = np.random.default_rng(5)
        s = rng.uniform(-1, 1, (200, 2))
        beh = LinearSoftmaxPolicy(np.array([[0.5, 0.0], [0.0, 0.5], [0.0, 0.0]]), np.zeros(3))
        p = beh.probs(s)
        a = np.array([rng.choice(3, p=row) for row in p])
        return Dataset(s, a, rng.uniform(size=200), 3, p[np.arange(200), a]), beh

    def test_target_equals_behavior_gives_unit_ratios(self):
        data, beh = self._data()
        np.testing.assert_allclose(propensity_ratios(data, beh), 1.0, atol=1e-12)
        ws = ips_weighted_sample(data, beh)
        assert degeneracy_stats(ws).s_w == pytest.approx(1.0, abs=1e-12)

    def test_behavior_sources_agree(self):
        data, beh = self._data()
        tgt = LinearSoftmaxPolicy(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]), np.zeros(3))
        a = propensity_ratios(data, tgt)
        b = propensity_ratios(data, tgt, beh)
        c = propensity_ratios(data, tgt, beh.prob_of(data.states, data.actions))
        np.testing.assert_allclose(a, b, rtol=1e-12)
        np.testing.assert_allclose(a, c, rtol=1e-12)

    def test_snips_value_is_finite_and_bounded(self):
        data, beh = self._data()
        tgt = LinearSoftmaxPolicy(np.array([[3.0, 0.0], [0.0, 3.0], [-3.0, 0.0]]), np.zeros(3))
        res = snips_value(data, tgt, 0.1)
        assert res.status is not Regime.ALPHA_INFINITE
        assert 0.0 <= res.value <= 1.0
        assert ips_value(data, beh, 0.1).value == pytest.approx(snips_value(data, beh, 0.1).value, abs=1e-9)

    def test_clip_floor_bounds_ratios(self):
        data = Dataset(np.zeros((2, 1)), [0, 1], [0.3, 0.6], 2, [1e-6, 0.5])
        ws = ips_weighted_sample(data, TabularPolicy([[0.5, 0.5]]), clip_floor=0.01)
        assert ws.weights.max() == pytest.approx(50.0)

    def test_missing_propensities(self):
        data = Dataset(np.zeros((2, 1)), [0, 1], [0.3, 0.6], 2)
        with pytest.raises(OverlapError):
            ips_value(data, TabularPolicy([[0.5, 0.5]]), 0.1)
