import csv
import io

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from grpomed.nn_core import AdamState, gradient_check, mlp_parameters
from grpomed.value_advantage import (
    AdvantageBatch,
    build_advantages,
    discounted_returns,
    fit_value,
    group_mean_advantage,
    group_relative_advantage,
    individual_advantage,
    init_value,
    predict_value,
    standardize,
    value_inputs,
    value_loss,
)

from oracles import returns_double_loop

finite = st.floats(-50, 50, allow_nan=False)


class TestReturns:
    def test_hand_geometric(self):
        np.testing.assert_allclose(discounted_returns([1.0, 1.0, 1.0], 0.5), [1.75, 1.5, 1.0])

    def test_myopic(self):
        r = np.array([3.0, -1.0, 2.0])
        np.testing.assert_array_equal(discounted_returns(r, 0.0), r)

    @pytest.mark.parametrize("seed", range(20))
    def test_double_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        r = rng.normal(0, 5, 20)
        gamma = rng.uniform(0, 0.999)
        np.testing.assert_allclose(discounted_returns(r, gamma), returns_double_loop(r, gamma), atol=1e-12, rtol=0)

    def test_batched_rows(self):
        r = np.random.default_rng(0).standard_normal((4, 7))
        out = discounted_returns(r, 0.9)
        for i in range(4):
            np.testing.assert_allclose(out[i], discounted_returns(r[i], 0.9), atol=0)


class TestValue:
    def test_constant_target_converges(self):
        rng = np.random.default_rng(0)
        layers = init_value(rng, 5, 2, hidden=16)
        x = value_inputs(rng.standard_normal((40, 5)), rng.integers(0, 2, 40), 2)
        fit_value(layers, x, np.full(40, 3.0), epochs=1500, step_size=0.01, adam=AdamState())
        assert np.max(np.abs(predict_value(layers, x) - 3.0)) < 0.01

    def test_zero_epochs(self):
        rng = np.random.default_rng(0)
        layers = init_value(rng, 3, 2)
        before = {k: v.copy() for k, v in mlp_parameters(layers).items()}
        x = value_inputs(rng.standard_normal((5, 3)), np.zeros(5, dtype=int), 2)
        fit_value(layers, x, np.ones(5), epochs=0, step_size=0.1)
        for k, v in mlp_parameters(layers).items():
            np.testing.assert_array_equal(v, before[k])

    def test_mse_non_increasing_small_step(self):
        rng = np.random.default_rng(1)
        layers = init_value(rng, 4, 3)
        x = value_inputs(rng.standard_normal((30, 4)), rng.integers(0, 3, 30), 3)
        res = fit_value(layers, x, rng.standard_normal(30), epochs=100, step_size=1e-3)
        assert all(b <= a + 1e-9 for a, b in zip(res.history, res.history[1:]))

    def test_target_scale(self):
        rng = np.random.default_rng(2)
        layers = init_value(rng, 2, 1)
        x = value_inputs(rng.standard_normal((10, 2)), np.zeros(10, dtype=int), 1)
        fit_value(layers, x, np.full(10, -50.0), epochs=500, step_size=0.01, adam=AdamState(), target_scale=50.0)
        np.testing.assert_allclose(predict_value(layers, x) * 50.0, -50.0, atol=0.5)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_check(self, seed):
        rng = np.random.default_rng(seed)
        layers = init_value(rng, 4, 3, hidden=8)
        x = value_inputs(rng.standard_normal((12, 4)), rng.integers(0, 3, 12), 3)
        y = rng.standard_normal(12)
        report = gradient_check(lambda: value_loss(layers, x, y), mlp_parameters(layers))
        assert report.passed(1e-4), report.per_param

    def test_one_hot_inputs(self):
        x = value_inputs(np.zeros((3, 2)), [2, 0, 1], 3)
        np.testing.assert_array_equal(x[:, 2:], np.eye(3)[[2, 0, 1]])


class TestAdvantages:
    def test_individual(self):
        assert individual_advantage(2.0, 0.5) == 1.5
        assert individual_advantage(1.25, 1.25) == 0.0
        g, v = np.array([1.0, 2.0, 3.0]), np.array([0.5, 2.5, 3.0])
        np.testing.assert_array_equal(individual_advantage(g, v), g - v)

    def test_group_means(self):
        assert group_mean_advantage([1.0, 3.0, -2.0], [0, 0, 1]) == {0: 2.0, 1: -2.0}
        assert group_mean_advantage([4.0, 6.0], [0, 0]) == {0: 5.0}
        assert group_mean_advantage([7.0, 1.0], [0, 1])[1] == 1.0

    def test_relative_examples(self):
        assert group_relative_advantage(2.0, 1.0, 1.0, 0.0, 0.0, 2.0) == 2.0
        assert group_relative_advantage(0.7, 0.7, 0.3, 0.6, 5.0, 2.0) == pytest.approx(0.9 * 0.7, abs=1e-15)
        assert group_relative_advantage(2.0, 1.0, 0.5, 0.5, 1.0, 2.0) == 0.5

    @given(finite, finite, st.floats(0, 5), st.floats(0, 5), st.floats(0.1, 4))
    @settings(max_examples=300, deadline=None)
    def test_penalty_monotone_in_alpha3(self, ai, ag, a1, a2, beta):
        assume(abs(ai - ag) > 1e-3)
        lo = group_relative_advantage(ai, ag, a1, a2, 0.1, beta)
        hi = group_relative_advantage(ai, ag, a1, a2, 0.6, beta)
        assert hi < lo

    @given(finite, finite, finite, finite, st.floats(0, 3), st.floats(0, 3))
    @settings(max_examples=200, deadline=None)
    def test_linear_without_penalty(self, x1, y1, x2, y2, a1, a2):
        f = lambda a, b: group_relative_advantage(a, b, a1, a2, 0.0, 2.0)  # noqa: E731
        assert f(x1 + x2, y1 + y2) == pytest.approx(f(x1, y1) + f(x2, y2), abs=1e-9)

    @given(finite, finite)
    def test_beta_two_is_square(self, ai, ag):
        got = group_relative_advantage(ai, ag, 0.0, 0.0, 1.0, 2.0)
        assert got == pytest.approx(-((ai - ag) * (ai - ag)), rel=1e-12, abs=1e-12)

    @given(st.lists(st.tuples(finite, st.integers(0, 3)), min_size=1, max_size=40))
    @settings(max_examples=200, deadline=None)
    def test_mean_centering(self, rows):
        adv = np.array([r[0] for r in rows])
        groups = np.array([r[1] for r in rows])
        means = group_mean_advantage(adv, groups)
        for g, m in means.items():
            assert abs(np.sum(adv[groups == g] - m)) <= 1e-12 * max(1.0, np.abs(adv).sum())

    def test_standardize(self):
        z = standardize(np.array([1.0, 2.0, 3.0, 4.0]))
        assert z.mean() == pytest.approx(0.0, abs=1e-15)
        assert z.std() == pytest.approx(1.0)
        np.testing.assert_array_equal(standardize(np.full(3, 2.0)), 0.0)


class TestBuild:
    def make(self, units="std", normalize=True):
        rng = np.random.default_rng(0)
        n = 24
        return build_advantages(
            np.repeat(np.arange(6), 4), np.tile(np.arange(4), 6), rng.integers(0, 3, n),
            rng.normal(-20, 5, n), rng.normal(-20, 1, n), normalize=normalize, units=units,
        )

    @pytest.mark.parametrize("units", ["std", "raw"])
    def test_scale_identity(self, units):
        b = self.make(units)
        np.testing.assert_allclose(b.adv_individual * b.scale, b.returns - b.baseline, atol=1e-12)

    def test_raw_unnormalized_is_literal(self):
        b = self.make("raw", normalize=False)
        assert b.scale == 1.0
        np.testing.assert_array_equal(b.adv_individual, b.returns - b.baseline)
        np.testing.assert_array_equal(b.adv_used, b.adv_relative)

    def test_group_column_is_group_mean(self):
        b = self.make()
        for g in np.unique(b.group):
            np.testing.assert_allclose(b.adv_group[b.group == g], b.adv_individual[b.group == g].mean())

    def test_csv(self):
        b = self.make()
        rows = list(csv.reader(io.StringIO(b.to_csv())))
        assert tuple(rows[0]) == AdvantageBatch.COLUMNS
        assert len(rows) == len(b) + 1
        assert all(len(r) == len(rows[0]) for r in rows)
        assert float(rows[1][3]) == b.returns[0]

    def test_unknown_units(self):
        with pytest.raises(ValueError):
            build_advantages([0], [0], [0], [1.0], [0.0], units="percent")
