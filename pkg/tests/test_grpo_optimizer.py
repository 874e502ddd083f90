import copy
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grpomed.cohort_env import CohortConfig, generate_cohort
from grpomed.config import ExperimentConfig
from grpomed.embedding_cluster import kmeans
from grpomed.errors import ConfigError, DivergenceError
from grpomed.experiment import build_setup
from grpomed.fusion_encoder import init_fusion
from grpomed.grpo_optimizer import (
    GrpoConfig,
    PolicyParams,
    action_distribution,
    clipped_surrogate,
    freeze,
    group_kl,
    grpo_objective,
    init_policy,
    kl_rows,
    log_probs,
    metrics_header,
    ppo_objective,
    probability_ratio,
    train,
)
from grpomed.nn_core import DenseLayer, gradient_check

from oracles import kl_two_term


def fixed_policy(probs_by_group, state_dim=2):
    """Policy whose trunk outputs zero and whose group biases are log-probabilities."""
    probs = np.asarray(probs_by_group, dtype=np.float64)
    n_actions = probs.shape[1]
    trunk = [DenseLayer(np.zeros((n_actions, state_dim)), np.zeros(n_actions), "identity")]
    return PolicyParams(trunk, np.log(probs))


def random_pair(seed, state_dim=5, n_actions=4, K=3, n=24, drift=0.3):
    rng = np.random.default_rng(seed)
    frozen = init_policy(rng, state_dim, n_actions, K, hidden=8)
    frozen.group_bias[...] = 0.2 * rng.standard_normal(frozen.group_bias.shape)
    policy = freeze(frozen)
    for p in policy.parameters().values():
        p += drift * rng.standard_normal(p.shape)
    states = rng.standard_normal((n, state_dim))
    groups = rng.integers(0, K, n)
    actions = rng.integers(0, n_actions, n)
    adv = rng.standard_normal(n)
    return policy, frozen, states, groups, actions, adv


class TestPolicy:
    def test_zero_logits_uniform(self):
        p = fixed_policy([[1.0, 1.0, 1.0, 1.0]])
        np.testing.assert_allclose(action_distribution(p, np.zeros(2), 0), 0.25, atol=1e-15)

    def test_dominant_bias(self):
        p = init_policy(np.random.default_rng(0), 3, 4, 2)
        p.group_bias[1, 2] = 10.0
        assert action_distribution(p, np.zeros(3), 1)[2] > 0.99

    def test_groups_differ(self):
        p = init_policy(np.random.default_rng(0), 3, 4, 2)
        p.group_bias[0] = [1.0, 0.0, 0.0, 0.0]
        p.group_bias[1] = [0.0, 0.0, 0.0, 1.0]
        s = np.ones(3)
        assert not np.allclose(action_distribution(p, s, 0), action_distribution(p, s, 1))

    def test_round_trip(self):
        p = init_policy(np.random.default_rng(3), 4, 3, 2)
        q = PolicyParams.from_dict(p.to_dict())
        assert q.to_dict() == p.to_dict()


class TestRatioClip:
    def test_identity(self):
        p = init_policy(np.random.default_rng(0), 3, 4, 2)
        assert probability_ratio(p, freeze(p), np.ones(3), 1, 2) == 1.0

    def test_hand_ratio(self):
        new = fixed_policy([[0.6, 0.4]])
        old = fixed_policy([[0.3, 0.7]])
        assert probability_ratio(new, old, np.zeros(2), 0, 0) == pytest.approx(2.0, rel=1e-14)

    @pytest.mark.parametrize("seed", range(10))
    def test_log_space_matches_division(self, seed):
        policy, frozen, states, groups, actions, _ = random_pair(seed)
        rho = probability_ratio(policy, frozen, states, groups, actions)
        rows = np.arange(len(states))
        direct = action_distribution(policy, states, groups)[rows, actions] / action_distribution(frozen, states, groups)[rows, actions]
        np.testing.assert_allclose(rho, direct, rtol=1e-12)

    def test_clip_examples(self):
        assert clipped_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
        assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)
        for rho in (0.8, 0.95, 1.0, 1.1, 1.2):
            assert clipped_surrogate(rho, 0.7, 0.2) == rho * 0.7

    @given(st.floats(0.01, 5.0), st.floats(-5, 5), st.floats(0.05, 0.95))
    @settings(max_examples=200, deadline=None)
    def test_pessimistic_bound(self, rho, adv, eps):
        assert clipped_surrogate(rho, adv, eps) <= rho * adv + 1e-15


class TestKL:
    def test_hand_value(self):
        p_old, p_new = np.array([0.5, 0.5]), np.array([0.9, 0.1])
        got = kl_rows(p_old, np.log(p_old), np.log(p_new))
        assert got == pytest.approx(kl_two_term(p_old, p_new), abs=1e-15)
        assert got == pytest.approx(0.5108, abs=5e-5)

    def test_identity_is_zero(self):
        policy, _, states, groups, _, _ = random_pair(0)
        np.testing.assert_array_equal(group_kl(policy, freeze(policy), states, groups), 0.0)

    def test_empty_group_contributes_zero(self):
        policy, frozen, states, _, _, _ = random_pair(1)
        kl = group_kl(policy, frozen, states, np.zeros(len(states), dtype=int), 3)
        assert kl[0] > 0 and kl[1] == 0.0 and kl[2] == 0.0

    @given(st.integers(0, 2**31))
    @settings(max_examples=60, deadline=None)
    def test_non_negative(self, seed):
        policy, frozen, states, groups, _, _ = random_pair(seed, drift=1.0)
        assert np.all(group_kl(policy, frozen, states, groups) >= 0)


class TestObjective:
    def test_identity_point(self):
        policy, _, states, groups, actions, adv = random_pair(2)
        res = grpo_objective(policy, freeze(policy), states, groups, actions, adv, 0.2, 0.5)
        assert res.value == pytest.approx(adv.mean(), abs=1e-15)
        np.testing.assert_array_equal(res.kl, 0.0)
        np.testing.assert_allclose(res.rho, 1.0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_ppo_reduction(self, seed):
        policy, frozen, states, groups, actions, adv = random_pair(seed, drift=0.5)
        g = grpo_objective(policy, frozen, states, groups, actions, adv, 0.2, 0.0).value
        p = ppo_objective(policy, frozen, states, groups, actions, adv, adv, 0.2)
        assert abs(g - p) < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("kl_weight", [0.0, 0.3])
    def test_gradient_check(self, seed, kl_weight):
        policy, frozen, states, groups, actions, adv = random_pair(seed)

        def closure():
            r = grpo_objective(policy, frozen, states, groups, actions, adv, 0.2, kl_weight)
            return r.value, r.grads

        report = gradient_check(closure, policy.parameters())
        assert report.passed(1e-4), report.per_param

    def test_log_prob_gradient(self):
        """d/dtheta of sum log pi(a|s,g), via the objective at the identity point with kl off."""
        policy, _, states, groups, actions, _ = random_pair(5)
        frozen = freeze(policy)
        w = np.ones(len(states))
        # at theta = theta_old, grad of mean(rho * A) equals grad of mean(log pi * A)
        res = grpo_objective(policy, frozen, states, groups, actions, w, 0.2, 0.0)
        rows = np.arange(len(states))

        def lp_mean():
            return float(log_probs(policy, states, groups)[rows, actions].mean())

        for name, arr in policy.parameters().items():
            j = next(np.ndindex(arr.shape))
            orig = arr[j]
            arr[j] = orig + 1e-6
            hi = lp_mean()
            arr[j] = orig - 1e-6
            lo = lp_mean()
            arr[j] = orig
            assert res.grads[name][j] == pytest.approx((hi - lo) / 2e-6, rel=1e-5, abs=1e-9)


def small_setup(seed=0, **cohort):
    cfg = ExperimentConfig().with_seed(seed)
    cfg = replace(cfg, cohort=replace(cfg.cohort, n_patients=12, horizon=8, **cohort))
    return cfg, build_setup(cfg)


class TestTrain:
    def test_zero_iterations(self):
        cfg, s = small_setup()
        policy = init_policy(np.random.default_rng(0), s.fusion.output_dim, 4, 3)
        before = copy.deepcopy(policy.to_dict())
        res = train(s.cohort, s.assignment, s.fusion, replace(cfg.grpo, iterations=0), 0, policy=policy)
        assert res.log == []
        assert res.policy.to_dict() == before

    def test_deterministic(self):
        cfg, s = small_setup()
        g = replace(cfg.grpo, iterations=3)
        a = train(s.cohort, s.assignment, s.fusion, g, 7)
        b = train(s.cohort, s.assignment, s.fusion, g, 7)
        assert [r.as_list() for r in a.log] == [r.as_list() for r in b.log]

    def test_log_rows(self):
        cfg, s = small_setup()
        res = train(s.cohort, s.assignment, s.fusion, replace(cfg.grpo, iterations=2), 0)
        header = metrics_header(3)
        for row in res.log:
            assert len(row.as_list()) == len(header)
            assert row.fairness_gap >= 0
            assert row.fairness_gap == pytest.approx(max(row.group_returns) - min(row.group_returns))

    def test_divergence_names_iteration(self):
        cfg, s = small_setup()
        with np.errstate(all="ignore"), pytest.raises(DivergenceError, match="iteration 0"):
            train(s.cohort, s.assignment, s.fusion, replace(cfg.grpo, iterations=2, step_size=1e308), 0)

    def test_fixed_labels_array(self):
        c = generate_cohort(CohortConfig(n_patients=6, horizon=4, seed=1))
        f = init_fusion(np.random.default_rng(0), c.config.modality_dims, 4, 2)
        labels = kmeans(c.features, 2).labels
        res = train(c, labels, f, GrpoConfig(iterations=1), 0)
        assert len(metrics_header(2)) == len(res.log[0].as_list())

    @pytest.mark.parametrize("kwargs", [{"clip_eps": 0.0}, {"kl_weight": -1.0}, {"beta": 0.0}, {"advantage_units": "x"}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            GrpoConfig(**kwargs)

    @pytest.mark.parametrize("seed", range(3))
    def test_kl_penalty_restrains_drift(self, seed):
        """Paired updates: each iteration both settings start from the same policy and batch."""
        cfg = ExperimentConfig().with_seed(seed)
        cfg = replace(cfg, cohort=replace(cfg.cohort, n_patients=16))
        s = build_setup(cfg)
        one = replace(cfg.grpo, iterations=1)
        policy = value = None
        with_pen, without = [], []
        for it in range(20):
            a = train(s.cohort, s.assignment, s.fusion, replace(one, kl_weight=0.1), seed * 1000 + it,
                      policy=copy.deepcopy(policy), value=copy.deepcopy(value))
            b = train(s.cohort, s.assignment, s.fusion, replace(one, kl_weight=0.0), seed * 1000 + it,
                      policy=copy.deepcopy(policy), value=copy.deepcopy(value))
            with_pen.append(a.log[0].group_kl)
            without.append(b.log[0].group_kl)
            policy, value = a.policy, a.value
        assert np.all(np.median(with_pen, axis=0) <= np.median(without, axis=0))


def test_kl_formula_matches_math():
    assert kl_two_term([0.5, 0.5], [0.9, 0.1]) == pytest.approx(
        0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    )
