"""Synthetic patient cohort: a group-structured linear-Gaussian MDP.

Each latent generator group ``g`` has its own dynamics

    s' = A_g s + B_g onehot(a) + noise_std * eps
    r  = -||s' - target_g||^2 - action_cost * [a > 0]

with action 0 a no-op (``B_g[:, 0] == 0``). Patients carry static features
drawn around well-separated group means; those features are what the
embedding and clustering stage sees. Observations are noisy linear
projections of the state history, one series per modality.

The quadratic reward is a stand-in for a clinical outcome; it is chosen so
that the optimal plan is easy to enumerate on small instances.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, UsageError

_RESET_TAG = 0x5E5E7
_OBS_TAG = 0x0B5


@dataclass
class CohortConfig:
    n_patients: int = 32
    n_latent_groups: int = 3
    n_modalities: int = 3
    modality_dims: tuple = (3, 3, 3)
    horizon: int = 20
    n_actions: int = 4
    discount: float = 0.95
    state_dim: int = 6
    noise_std: float = 0.05
    seed: int = 0
    feature_dim: int = 4
    feature_std: float = 1.0
    feature_separation: float = 6.0
    feature_clip: float = 2.5
    obs_noise_std: float = 0.05
    action_cost: float = 0.1
    max_spectral_radius: float = 0.95
    target_norm: float = 2.0
    init_spread: float = 1.0

    def __post_init__(self):
        self.modality_dims = tuple(int(d) for d in self.modality_dims)
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if self.n_latent_groups < 1 or self.n_latent_groups > self.n_patients:
            raise ConfigError("n_latent_groups must be in [1, n_patients]")
        if self.n_actions < 2:
            raise ConfigError("n_actions must be >= 2")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not 0.0 <= self.discount < 1.0:
            raise ConfigError("discount must be in [0, 1)")
        if len(self.modality_dims) != self.n_modalities:
            raise ConfigError(
                f"modality_dims has {len(self.modality_dims)} entries, expected n_modalities={self.n_modalities}"
            )
        if any(d < 1 for d in self.modality_dims):
            raise ConfigError("every modality dim must be >= 1")
        if self.state_dim < 1 or self.feature_dim < 1:
            raise ConfigError("state_dim and feature_dim must be >= 1")
        if self.noise_std < 0 or self.obs_noise_std < 0 or self.feature_std < 0:
            raise ConfigError("noise levels must be >= 0")
        if not 0.0 < self.max_spectral_radius < 1.0:
            raise ConfigError("max_spectral_radius must be in (0, 1)")


@dataclass
class Cohort:
    config: CohortConfig
    features: np.ndarray  # (N, feature_dim), the static x_i
    latent_groups: np.ndarray  # (N,) generator group of each patient
    feature_means: np.ndarray  # (K, feature_dim)
    transition: np.ndarray  # (K, state_dim, state_dim)
    action_effect: np.ndarray  # (K, state_dim, n_actions)
    targets: np.ndarray  # (K, state_dim)
    init_means: np.ndarray  # (K, state_dim)
    projections: list = field(default_factory=list)  # per modality (d_m, state_dim)

    @property
    def n_patients(self):
        return self.features.shape[0]

    def group_of(self, patient_id):
        if not 0 <= patient_id < self.n_patients:
            raise UsageError(f"unknown patient {patient_id} (cohort has {self.n_patients})")
        return int(self.latent_groups[patient_id])

    def to_dict(self):
        return {
            "config": asdict(self.config) | {"modality_dims": list(self.config.modality_dims)},
            "features": self.features.tolist(),
            "latent_groups": self.latent_groups.tolist(),
            "feature_means": self.feature_means.tolist(),
            "transition": self.transition.tolist(),
            "action_effect": self.action_effect.tolist(),
            "targets": self.targets.tolist(),
            "init_means": self.init_means.tolist(),
            "projections": [p.tolist() for p in self.projections],
        }

    @classmethod
    def from_dict(cls, d):
        arr = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(
            config=CohortConfig(**d["config"]),
            features=arr("features"),
            latent_groups=np.asarray(d["latent_groups"], dtype=np.int64),
            feature_means=arr("feature_means"),
            transition=arr("transition"),
            action_effect=arr("action_effect"),
            targets=arr("targets"),
            init_means=arr("init_means"),
            projections=[np.asarray(p, dtype=np.float64) for p in d["projections"]],
        )

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class PatientState:
    physiological: np.ndarray
    static_features: np.ndarray
    time_index: int = 0
    episode: int = 0


@dataclass
class StepRecord:
    patient_id: int
    time: int
    state: PatientState
    action: int
    reward: float
    next_state: PatientState
    done: bool


@dataclass
class Trajectory:
    patient_id: int
    steps: list

    @property
    def rewards(self):
        return np.array([s.reward for s in self.steps])

    @property
    def actions(self):
        return np.array([s.action for s in self.steps], dtype=np.int64)


@dataclass
class ModalitySeries:
    modality_id: int
    data: np.ndarray  # (T', d_m)


def _feature_means(rng, k, dim, distance):
    if k == 1:
        return np.zeros((1, dim))
    if k <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        # orthonormal columns are sqrt(2) apart
        return (distance / np.sqrt(2.0)) * q[:, :k].T
    means = rng.standard_normal((k, dim))
    d = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    d_min = d[~np.eye(k, dtype=bool)].min()
    return means * (distance / d_min)


def _clipped_normal(rng, n, dim, radius):
    """Standard normal rows, redrawn until their norm is within ``radius``."""
    out = rng.standard_normal((n, dim))
    if radius <= 0:
        return out
    bad = np.linalg.norm(out, axis=1) > radius
    while bad.any():
        out[bad] = rng.standard_normal((int(bad.sum()), dim))
        bad = np.linalg.norm(out, axis=1) > radius
    return out


def _preferred_actions(rng, k, n_actions):
    active = rng.permutation(np.arange(1, n_actions))
    return np.array([active[g % len(active)] for g in range(k)])


def generate_cohort(config: CohortConfig) -> Cohort:
    """Draw a cohort deterministically from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    n, k = config.n_patients, config.n_latent_groups
    sd, na = config.state_dim, config.n_actions

    latent = rng.permutation(np.arange(n) % k)
    means = _feature_means(rng, k, config.feature_dim, config.feature_separation * config.feature_std)
    features = means[latent] + config.feature_std * _clipped_normal(rng, n, config.feature_dim, config.feature_clip)

    transition = np.empty((k, sd, sd))
    action_effect = np.zeros((k, sd, na))
    targets = np.empty((k, sd))
    init_means = np.empty((k, sd))
    preferred = _preferred_actions(rng, k, na)
    for g in range(k):
        m = rng.standard_normal((sd, sd))
        radius = np.max(np.abs(np.linalg.eigvals(m)))
        a = m * (rng.uniform(0.5, 0.9) * config.max_spectral_radius / radius)
        b = np.zeros((sd, na))
        b[:, 1:] = rng.standard_normal((sd, na - 1))
        steady = np.linalg.solve(np.eye(sd) - a, b)
        scale = config.target_norm / max(np.linalg.norm(steady[:, preferred[g]]), 1e-12)
        transition[g] = a
        action_effect[g] = b * scale
        targets[g] = steady[:, preferred[g]] * scale
        init_means[g] = config.init_spread * rng.standard_normal(sd)

    projections = [
        rng.standard_normal((d, sd)) / np.sqrt(sd) for d in config.modality_dims
    ]
    return Cohort(
        config=config,
        features=features,
        latent_groups=latent.astype(np.int64),
        feature_means=means,
        transition=transition,
        action_effect=action_effect,
        targets=targets,
        init_means=init_means,
        projections=projections,
    )


def reset(cohort: Cohort, patient_id: int, episode: int = 0) -> PatientState:
    g = cohort.group_of(patient_id)
    cfg = cohort.config
    s = cohort.init_means[g].copy()
    if cfg.noise_std > 0:
        rng = np.random.default_rng([cfg.seed, _RESET_TAG, patient_id, episode])
        s = s + cfg.noise_std * rng.standard_normal(cfg.state_dim)
    return PatientState(s, cohort.features[patient_id].copy(), 0, episode)


def reward_of(cohort, group, next_phys, action):
    cfg = cohort.config
    diff = next_phys - cohort.targets[group]
    cost = cfg.action_cost if action > 0 else 0.0
    return -float(diff @ diff) - cost


def step(cohort: Cohort, patient_id: int, state: PatientState, action: int, rng=None) -> StepRecord:
    cfg = cohort.config
    if state.time_index >= cfg.horizon:
        raise UsageError(f"patient {patient_id} is already at the horizon ({cfg.horizon})")
    if not 0 <= action < cfg.n_actions:
        raise UsageError(f"action {action} outside [0, {cfg.n_actions})")
    g = cohort.group_of(patient_id)
    nxt = cohort.transition[g] @ state.physiological + cohort.action_effect[g][:, action]
    if cfg.noise_std > 0:
        if rng is None:
            raise UsageError("a noisy cohort needs an rng stream to step")
        nxt = nxt + cfg.noise_std * rng.standard_normal(cfg.state_dim)
    t = state.time_index
    next_state = PatientState(nxt, state.static_features, t + 1, state.episode)
    return StepRecord(
        patient_id=patient_id,
        time=t,
        state=state,
        action=int(action),
        reward=reward_of(cohort, g, nxt, action),
        next_state=next_state,
        done=(t + 1 == cfg.horizon),
    )


def observation_noise(cohort, patient_id, episode):
    """Per-modality noise rows for one episode, indexed by time (horizon + 1 rows)."""
    cfg = cohort.config
    rows = cfg.horizon + 1
    if cfg.obs_noise_std == 0:
        return [np.zeros((rows, d)) for d in cfg.modality_dims]
    rng = np.random.default_rng([cfg.seed, _OBS_TAG, patient_id, episode])
    return [cfg.obs_noise_std * rng.standard_normal((rows, d)) for d in cfg.modality_dims]


def observe_modalities(cohort: Cohort, patient_id: int, history) -> list:
    """Project a state history (PatientStates or StepRecords) into modality series."""
    if len(history) == 0:
        raise UsageError("observation needs a non-empty prefix")
    states = [h.state if isinstance(h, StepRecord) else h for h in history]
    phys = np.stack([s.physiological for s in states])
    times = np.array([s.time_index for s in states])
    noise = observation_noise(cohort, patient_id, states[0].episode)
    return [
        ModalitySeries(m, phys @ p.T + noise[m][times])
        for m, p in enumerate(cohort.projections)
    ]


def sample_action(probs, rng, n_actions):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (n_actions,) or not np.all(np.isfinite(probs)):
        raise ContractViolation(f"policy returned {probs!r}, expected {n_actions} probabilities")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
        raise ContractViolation(f"policy returned an invalid distribution {probs!r}")
    a = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
    return min(a, n_actions - 1)


def rollout(cohort: Cohort, patient_id: int, policy, rng, group: int = 0, episode: int = 0) -> Trajectory:
    """Run one full episode. ``policy(observations, group)`` returns action probabilities."""
    cfg = cohort.config
    state = reset(cohort, patient_id, episode)
    history = [state]
    steps = []
    for _ in range(cfg.horizon):
        obs = observe_modalities(cohort, patient_id, history)
        a = sample_action(policy(obs, group), rng, cfg.n_actions)
        rec = step(cohort, patient_id, state, a, rng)
        steps.append(rec)
        state = rec.next_state
        history.append(state)
    return Trajectory(patient_id, steps)


@dataclass
class BatchRollout:
    """Arrays for a cohort-wide episode; leading axis is the patient."""

    patient_ids: np.ndarray
    states: np.ndarray  # (n, T + 1, state_dim)
    actions: np.ndarray  # (n, T)
    rewards: np.ndarray  # (n, T)
    observations: list  # per modality (n, T + 1, d_m)


def simulate_batch(cohort: Cohort, patient_ids, act, rng, episode: int = 0) -> BatchRollout:
    """Step many patients in lockstep.

    ``act(t, obs)`` receives per-modality arrays of shape ``(n, t + 1, d_m)``
    and returns ``n`` action indices.
    """
    cfg = cohort.config
    ids = np.asarray(patient_ids, dtype=np.int64)
    n, T = len(ids), cfg.horizon
    groups = cohort.latent_groups[ids]
    states = np.empty((n, T + 1, cfg.state_dim))
    states[:, 0] = np.stack([reset(cohort, int(i), episode).physiological for i in ids])
    noise = [observation_noise(cohort, int(i), episode) for i in ids]
    observations = [np.empty((n, T + 1, d)) for d in cfg.modality_dims]
    actions = np.empty((n, T), dtype=np.int64)
    rewards = np.empty((n, T))
    a_mats = cohort.transition[groups]
    b_mats = cohort.action_effect[groups]
    targets = cohort.targets[groups]
    for t in range(T + 1):
        for m, p in enumerate(cohort.projections):
            observations[m][:, t] = states[:, t] @ p.T + np.stack([nz[m][t] for nz in noise])
        if t == T:
            break
        a = np.asarray(act(t, [o[:, : t + 1] for o in observations]), dtype=np.int64)
        if a.shape != (n,) or np.any(a < 0) or np.any(a >= cfg.n_actions):
            raise ContractViolation(f"act returned invalid actions {a!r}")
        nxt = np.einsum("nij,nj->ni", a_mats, states[:, t]) + b_mats[np.arange(n), :, a]
        if cfg.noise_std > 0:
            nxt = nxt + cfg.noise_std * rng.standard_normal((n, cfg.state_dim))
        diff = nxt - targets
        rewards[:, t] = -np.einsum("ni,ni->n", diff, diff) - cfg.action_cost * (a > 0)
        actions[:, t] = a
        states[:, t + 1] = nxt
    return BatchRollout(ids, states, actions, rewards, observations)
