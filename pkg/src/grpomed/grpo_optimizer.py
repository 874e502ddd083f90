"""Group-conditioned policy, clipped surrogate, per-group KL, and the training loop.

The policy for group ``g`` is ``softmax(trunk(s) + group_bias[g])``. The
objective maximized on a batch is

    mean_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i) - kl_weight * sum_g KL_g

where ``A_i`` is the group-relative advantage, ``rho_i`` the probability
ratio against the frozen pre-update policy, and ``KL_g`` the mean over group
``g``'s batch states of ``KL(pi_old(.|s, g) || pi_new(.|s, g))``. The
advantage enters both arguments of the min; with ``alpha = (1, 0, 0)``,
``kl_weight = 0`` and no normalization this is exactly the PPO objective.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from .cohort_env import simulate_batch
from .errors import ConfigError, DivergenceError
from .fusion_encoder import fuse, pool_state
from .nn_core import (
    AdamState,
    DenseLayer,
    adam_step,
    backward_mlp,
    forward_mlp,
    init_mlp,
    log_softmax_rows,
    mlp_parameters,
    softmax_rows,
)
from .value_advantage import (
    build_advantages,
    discounted_returns,
    fit_value,
    init_value,
    predict_value,
    value_inputs,
)


@dataclass
class PolicyParams:
    trunk: list
    group_bias: np.ndarray  # (K, n_actions)

    @property
    def n_groups(self):
        return self.group_bias.shape[0]

    @property
    def n_actions(self):
        return self.group_bias.shape[1]

    @property
    def input_dim(self):
        return self.trunk[0].n_in

    def parameters(self):
        params = mlp_parameters(self.trunk, prefix="trunk.")
        params["group_bias"] = self.group_bias
        return params

    def to_dict(self):
        return {
            "trunk": [layer_to_dict(l) for l in self.trunk],
            "group_bias": self.group_bias.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls([layer_from_dict(l) for l in d["trunk"]], np.asarray(d["group_bias"], dtype=np.float64))


def layer_to_dict(layer):
    return {"weight": layer.weight.tolist(), "bias": layer.bias.tolist(), "activation": layer.activation}


def layer_from_dict(d):
    return DenseLayer(np.asarray(d["weight"], dtype=np.float64), np.asarray(d["bias"], dtype=np.float64), d["activation"])


def init_policy(rng, state_dim, n_actions, n_groups, hidden=32):
    return PolicyParams(init_mlp(rng, [state_dim, hidden, n_actions]), np.zeros((n_groups, n_actions)))


def freeze(policy):
    """Snapshot of the policy used as the reference for one update round."""
    return copy.deepcopy(policy)


@dataclass
class GrpoConfig:
    clip_eps: float = 0.2
    kl_weight: float = 0.01
    alpha1: float = 1.0
    alpha2: float = 0.5
    alpha3: float = 0.1
    beta: float = 2.0
    step_size: float = 3e-3
    epochs: int = 4
    minibatch: int = 64
    iterations: int = 150
    rollouts_per_patient: int = 1
    normalize_advantages: bool = True
    advantage_units: str = "std"
    trunk_hidden: int = 32
    value_hidden: int = 32
    value_epochs: int = 20
    value_step: float = 1e-2

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must be in (0, 1)")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ConfigError("alpha1, alpha2, alpha3 must be >= 0")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.epochs < 1 or self.minibatch < 1 or self.rollouts_per_patient < 1:
            raise ConfigError("epochs, minibatch and rollouts_per_patient must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.step_size <= 0 or self.value_step <= 0:
            raise ConfigError("step sizes must be > 0")
        if self.advantage_units not in ("std", "raw"):
            raise ConfigError("advantage_units must be 'std' or 'raw'")


def policy_logits(policy, states, groups):
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    groups = np.broadcast_to(np.asarray(groups, dtype=np.int64), (states.shape[0],))
    out, cache = forward_mlp(policy.trunk, states)
    return out + policy.group_bias[groups], cache


def action_distribution(policy, state, group):
    """Action probabilities; a single state gives a 1-D vector."""
    single = np.ndim(state) == 1
    logits, _ = policy_logits(policy, state, group)
    p = softmax_rows(logits)
    return p[0] if single else p


def log_probs(policy, states, groups):
    logits, _ = policy_logits(policy, states, groups)
    return log_softmax_rows(logits)


def probability_ratio(policy, frozen, state, group, action):
    """``pi_new(a|s,g) / pi_old(a|s,g)``, computed in log space."""
    states = np.atleast_2d(state)
    actions = np.broadcast_to(np.asarray(action, dtype=np.int64), (states.shape[0],))
    rows = np.arange(states.shape[0])
    diff = log_probs(policy, states, group)[rows, actions] - log_probs(frozen, states, group)[rows, actions]
    rho = np.exp(diff)
    return float(rho[0]) if np.ndim(state) == 1 else rho


def clipped_surrogate(rho, adv, eps):
    rho = np.asarray(rho, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(rho * adv, np.clip(rho, 1.0 - eps, 1.0 + eps) * adv)


def kl_rows(p_old, logp_old, logp_new):
    return (p_old * (logp_old - logp_new)).sum(axis=-1)


def group_kl(policy, frozen, states, groups, n_groups=None):
    """Per-group mean of KL(old || new); groups without states get 0."""
    groups = np.asarray(groups, dtype=np.int64)
    n_groups = policy.n_groups if n_groups is None else n_groups
    lp_new = log_probs(policy, states, groups)
    lp_old = log_probs(frozen, states, groups)
    per_row = kl_rows(np.exp(lp_old), lp_old, lp_new)
    out = np.zeros(n_groups)
    for g in range(n_groups):
        mask = groups == g
        if mask.any():
            out[g] = per_row[mask].mean()
    return out


@dataclass
class ObjectiveResult:
    value: float
    grads: dict
    surrogate: float
    kl: np.ndarray
    rho: np.ndarray


def grpo_objective(policy, frozen, states, groups, actions, adv, clip_eps, kl_weight, old_log_probs=None):
    """Batch objective and its gradient w.r.t. ``policy.parameters()``.

    ``old_log_probs`` may be passed to skip re-evaluating the frozen policy.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    groups = np.asarray(groups, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    adv = np.asarray(adv, dtype=np.float64)
    n = states.shape[0]
    rows = np.arange(n)

    logits, cache = policy_logits(policy, states, groups)
    lp = log_softmax_rows(logits)
    p = np.exp(lp)
    lp_old = log_probs(frozen, states, groups) if old_log_probs is None else old_log_probs
    p_old = np.exp(lp_old)

    rho = np.exp(lp[rows, actions] - lp_old[rows, actions])
    unclipped = rho * adv
    clipped = np.clip(rho, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    surrogate = float(np.minimum(unclipped, clipped).mean())
    active = unclipped <= clipped

    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    d_logits = ((adv * active * rho) / n)[:, None] * (onehot - p)

    K = policy.n_groups
    counts = np.bincount(groups, minlength=K)
    per_row_kl = kl_rows(p_old, lp_old, lp)
    kl = np.zeros(K)
    for g in np.flatnonzero(counts):
        kl[g] = per_row_kl[groups == g].mean()
    value = surrogate - kl_weight * float(kl.sum())
    if kl_weight:
        d_logits -= kl_weight * (p - p_old) / counts[groups][:, None]

    grads, _ = backward_mlp(policy.trunk, cache, d_logits, prefix="trunk.")
    d_bias = np.zeros_like(policy.group_bias)
    np.add.at(d_bias, groups, d_logits)
    grads["group_bias"] = d_bias
    return ObjectiveResult(value, grads, surrogate, kl, rho)


def ppo_objective(policy, frozen, states, groups, actions, adv_individual, adv_relative, clip_eps):
    """Row-by-row PPO surrogate computed from plain probabilities (no log space).

    Kept deliberately independent of :func:`grpo_objective` so the two can be
    compared.
    """
    total = 0.0
    states = np.atleast_2d(states)
    for s, g, a, ai, ar in zip(states, groups, actions, adv_individual, adv_relative):
        new = action_distribution(policy, s, int(g))[int(a)]
        old = action_distribution(frozen, s, int(g))[int(a)]
        rho = new / old
        clipped = min(max(rho, 1.0 - clip_eps), 1.0 + clip_eps)
        total += min(rho * ai, clipped * ar)
    return total / len(states)


# ---------------------------------------------------------------------------
# training loop


def metrics_header(n_groups):
    return (
        ["iteration", "mean_return"]
        + [f"ret_g{g + 1}" for g in range(n_groups)]
        + [f"kl_g{g + 1}" for g in range(n_groups)]
        + ["objective", "fairness_gap", "wall_ms"]
    )


@dataclass
class MetricsRow:
    iteration: int
    mean_return: float
    group_returns: list
    group_kl: list
    objective: float
    fairness_gap: float
    wall_ms: float = 0.0

    def as_list(self):
        return [self.iteration, self.mean_return, *self.group_returns, *self.group_kl,
                self.objective, self.fairness_gap, self.wall_ms]


@dataclass
class Collected:
    states: np.ndarray  # (n_rows, state_dim) pooled fused features
    groups: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    patient_id: np.ndarray
    time: np.ndarray
    episode_returns: np.ndarray  # (n_episodes,) return from t = 0
    episode_groups: np.ndarray


def collect(cohort, labels, fusion, policy, rng, episode, rollouts=1):
    """Roll out every patient ``rollouts`` times under ``policy``."""
    cfg = cohort.config
    ids = np.arange(cohort.n_patients)
    labels = np.asarray(labels, dtype=np.int64)
    parts = []
    for r in range(rollouts):
        pooled = np.empty((len(ids), cfg.horizon, fusion.output_dim))

        def act(t, obs):
            s = pool_state(fuse(fusion, obs).F)
            pooled[:, t] = s
            p = action_distribution(policy, s, labels)
            u = rng.random(len(ids))
            a = (np.cumsum(p, axis=1) < u[:, None]).sum(axis=1)
            return np.minimum(a, cfg.n_actions - 1)

        br = simulate_batch(cohort, ids, act, rng, episode=episode * rollouts + r)
        G = discounted_returns(br.rewards, cfg.discount)
        parts.append((pooled, br.actions, G))
    T = cfg.horizon
    states = np.concatenate([p[0].reshape(-1, fusion.output_dim) for p in parts])
    actions = np.concatenate([p[1].reshape(-1) for p in parts])
    returns = np.concatenate([p[2].reshape(-1) for p in parts])
    pid = np.tile(np.repeat(ids, T), rollouts)
    tt = np.tile(np.arange(T), len(ids) * rollouts)
    ep_returns = np.concatenate([p[2][:, 0] for p in parts])
    ep_groups = np.tile(labels, rollouts)
    return Collected(states, labels[pid], actions, returns, pid, tt, ep_returns, ep_groups)


@dataclass
class TrainResult:
    log: list
    policy: PolicyParams
    value: list
    value_scale: float
    last_batch: object = None
    extra: dict = field(default_factory=dict)


def _check_finite(params, iteration, what):
    for name, p in params.items():
        if not np.all(np.isfinite(p)):
            raise DivergenceError(iteration, f"{what} parameter {name}")


def train(cohort, assignment, fusion, config: GrpoConfig, seed, policy=None, value=None, record_time=False, on_minibatch=None):
    """Run GRPO. Deterministic given ``seed`` unless ``record_time`` is set.

    ``on_minibatch(policy, frozen, states, groups, actions, batch_rows, adv)``
    is called before each update, for instrumentation.
    """
    labels = np.asarray(getattr(assignment, "labels", assignment), dtype=np.int64)
    K = int(getattr(assignment, "n_groups", labels.max() + 1))
    cfg = cohort.config
    rng = np.random.default_rng(seed)
    init_rng = np.random.default_rng([seed, 1])
    if policy is None:
        policy = init_policy(init_rng, fusion.output_dim, cfg.n_actions, K, config.trunk_hidden)
    if value is None:
        value = init_value(init_rng, fusion.output_dim, K, config.value_hidden)
    params = policy.parameters()
    value_params = mlp_parameters(value)
    opt = AdamState()
    value_opt = AdamState()
    value_scale = None
    log = []
    last = None
    for it in range(config.iterations):
        t0 = time.perf_counter()
        frozen = freeze(policy)
        data = collect(cohort, labels, fusion, frozen, rng, it, config.rollouts_per_patient)
        if value_scale is None:
            value_scale = max(1.0, float(np.abs(data.returns).mean()))
        vin = value_inputs(data.states, data.groups, K)
        baseline = predict_value(value, vin) * value_scale
        batch = build_advantages(
            data.patient_id, data.time, data.groups, data.returns, baseline,
            config.alpha1, config.alpha2, config.alpha3, config.beta,
            config.normalize_advantages, config.advantage_units,
        )
        old_lp = log_probs(frozen, data.states, data.groups)
        n = len(batch)
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.minibatch):
                idx = order[start : start + config.minibatch]
                if on_minibatch is not None:
                    on_minibatch(policy, frozen, data.states[idx], data.groups[idx], data.actions[idx], batch, idx)
                res = grpo_objective(
                    policy, frozen, data.states[idx], data.groups[idx], data.actions[idx],
                    batch.adv_used[idx], config.clip_eps, config.kl_weight, old_lp[idx],
                )
                adam_step(params, {k: -g for k, g in res.grads.items()}, opt, config.step_size)
        _check_finite(params, it, "policy")
        full = grpo_objective(
            policy, frozen, data.states, data.groups, data.actions, batch.adv_used,
            config.clip_eps, config.kl_weight, old_lp,
        )
        fit_value(value, vin, data.returns, config.value_epochs, config.value_step, value_opt, value_scale)
        _check_finite(value_params, it, "value")
        group_ret = [
            float(data.episode_returns[data.episode_groups == g].mean()) if np.any(data.episode_groups == g) else 0.0
            for g in range(K)
        ]
        present = [r for g, r in enumerate(group_ret) if np.any(data.episode_groups == g)]
        log.append(MetricsRow(
            iteration=it,
            mean_return=float(data.episode_returns.mean()),
            group_returns=group_ret,
            group_kl=[float(k) for k in full.kl],
            objective=full.value,
            fairness_gap=float(max(present) - min(present)),
            wall_ms=round((time.perf_counter() - t0) * 1000.0, 3) if record_time else 0.0,
        ))
        last = batch
    return TrainResult(log, policy, value, value_scale or 1.0, last)


def evaluate_policy(cohort, labels, fusion, policy, seed, episode=10_000, rollouts=1):
    """Mean and per-group return of ``policy`` without updating it."""
    rng = np.random.default_rng(seed)
    data = collect(cohort, labels, fusion, policy, rng, episode, rollouts)
    return data
