"""Experiment pipelines behind the CLI: train, search, ablate, gradcheck.

Files written by ``run_train`` (all under the output directory):

``metrics.csv``
    ``iteration,mean_return,ret_g1..gK,kl_g1..gK,objective,fairness_gap,wall_ms``;
    one row per iteration. ``wall_ms`` is 0 unless timing was requested, so
    reruns are byte-identical.
``checkpoint.json``
    ``format``, ``config`` (fully resolved, minus output_dir/workers), ``seed``, ``phi`` (embedding MLP
    layers), ``assignment`` (labels, centroids, n_groups, inertia), ``fusion``,
    ``policy`` (trunk layers, group_bias), ``value`` (layers), ``value_scale``.
``cohort.json``
    The generated cohort (config, features, latent groups, dynamics).
``assignment.json``
    The k-means assignment alone.
``advantages.csv``
    The advantage batch of the last iteration, one row per transition.

``run_search`` writes ``search_report.json`` with keys ``patient_id``,
``candidates`` (actions, ga_fitness, mcts_estimate, refined_actions),
``selected`` (index, actions, mcts_estimate), ``generations`` and
``checkpoint_policy``.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .cohort_env import Cohort, generate_cohort, observation_noise
from .config import ExperimentConfig, dumps_json, from_dict
from .embedding_cluster import GroupAssignment, embed, init_phi, kmeans
from .errors import ConfigError, UsageError
from .fusion_encoder import FusionParams, fuse, fuse_backward, init_fusion, pool_state
from .grpo_optimizer import (
    PolicyParams,
    action_distribution,
    grpo_objective,
    init_policy,
    layer_from_dict,
    layer_to_dict,
    metrics_header,
    ppo_objective,
    train,
)
from .nn_core import gradient_check, init_mlp, mlp_parameters
from .strategy_search import hybrid_search
from .value_advantage import AdvantageBatch, value_loss

CHECKPOINT_FORMAT = "grpomed-checkpoint/1"
ABLATION_MODES = ("ppo_reduction", "fairness_sweep")


# ---------------------------------------------------------------------------
# setup shared by every command


@dataclass
class Setup:
    config: ExperimentConfig
    cohort: Cohort
    phi: list
    assignment: GroupAssignment
    fusion: FusionParams


def build_setup(cfg: ExperimentConfig):
    """Cohort -> static embedding -> k-means -> fresh fusion encoder."""
    cohort = generate_cohort(cfg.cohort)
    cl = cfg.clustering
    if cl.n_groups > cfg.cohort.n_patients:
        raise ConfigError(f"clustering.n_groups={cl.n_groups} exceeds cohort.n_patients={cfg.cohort.n_patients}")
    phi = init_phi(np.random.default_rng(cfg.module_seed("embedding")), cfg.cohort.feature_dim, cl.embed_dim, cl.phi_hidden)
    assignment = kmeans(embed(phi, cohort.features), cl.n_groups, cfg.module_seed("clustering"), cl.max_iters, cl.n_init)
    fz = cfg.fusion
    fusion = init_fusion(
        np.random.default_rng(cfg.module_seed("fusion")), cfg.cohort.modality_dims, fz.hidden, fz.n_heads, fz.kernel_width
    )
    return Setup(cfg, cohort, phi, assignment, fusion)


def _fmt(x):
    return repr(float(x))


def metrics_csv(log, n_groups):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header(n_groups))
    for row in log:
        w.writerow([row.iteration] + [_fmt(v) for v in row.as_list()[1:]])
    return buf.getvalue()


def _empty_advantages_csv():
    return ",".join(AdvantageBatch.COLUMNS) + "\n"


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(cfg, phi, assignment, fusion, policy, value, value_scale):
    # where the files went and how many workers ran are not part of the experiment
    config = {k: v for k, v in cfg.to_dict().items() if k not in ("output_dir", "workers")}
    return {
        "format": CHECKPOINT_FORMAT,
        "config": config,
        "seed": cfg.seed,
        "phi": [layer_to_dict(l) for l in phi],
        "assignment": assignment.to_dict(),
        "fusion": fusion.to_dict(),
        "policy": policy.to_dict(),
        "value": [layer_to_dict(l) for l in value],
        "value_scale": float(value_scale),
    }


@dataclass
class Checkpoint:
    config: ExperimentConfig
    phi: list
    assignment: GroupAssignment
    fusion: FusionParams
    policy: PolicyParams
    value: list
    value_scale: float

    def to_dict(self):
        return checkpoint_dict(self.config, self.phi, self.assignment, self.fusion, self.policy, self.value, self.value_scale)

    def dumps(self):
        return dumps_json(self.to_dict())


def load_checkpoint(path):
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: checkpoint not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid checkpoint JSON: {e.msg}") from None
    return checkpoint_from_dict(d, str(path))


def checkpoint_from_dict(d, where="<checkpoint>"):
    if not isinstance(d, dict) or d.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{where}: not a {CHECKPOINT_FORMAT} document")
    try:
        return Checkpoint(
            config=from_dict(d["config"]),
            phi=[layer_from_dict(l) for l in d["phi"]],
            assignment=GroupAssignment.from_dict(d["assignment"]),
            fusion=FusionParams.from_dict(d["fusion"]),
            policy=PolicyParams.from_dict(d["policy"]),
            value=[layer_from_dict(l) for l in d["value"]],
            value_scale=float(d["value_scale"]),
        )
    except KeyError as e:
        raise ConfigError(f"{where}: checkpoint is missing {e.args[0]!r}") from None


def dims_mismatch(cfg: ExperimentConfig, ckpt: Checkpoint):
    """Human-readable list of dimension disagreements between a config and a checkpoint."""
    problems = []
    c = cfg.cohort
    if list(ckpt.fusion.modality_dims) != list(c.modality_dims):
        problems.append(f"modality dims: config {list(c.modality_dims)}, checkpoint {ckpt.fusion.modality_dims}")
    if ckpt.fusion.hidden != cfg.fusion.hidden:
        problems.append(f"fusion hidden: config {cfg.fusion.hidden}, checkpoint {ckpt.fusion.hidden}")
    if ckpt.fusion.n_heads != cfg.fusion.n_heads:
        problems.append(f"fusion heads: config {cfg.fusion.n_heads}, checkpoint {ckpt.fusion.n_heads}")
    if ckpt.policy.n_actions != c.n_actions:
        problems.append(f"n_actions: config {c.n_actions}, checkpoint {ckpt.policy.n_actions}")
    if ckpt.policy.n_groups != cfg.clustering.n_groups:
        problems.append(f"n_groups: config {cfg.clustering.n_groups}, checkpoint {ckpt.policy.n_groups}")
    if len(ckpt.assignment.labels) != c.n_patients:
        problems.append(f"n_patients: config {c.n_patients}, checkpoint {len(ckpt.assignment.labels)}")
    if ckpt.policy.input_dim != ckpt.fusion.output_dim:
        problems.append(f"policy input {ckpt.policy.input_dim} != fusion output {ckpt.fusion.output_dim}")
    return problems


# ---------------------------------------------------------------------------
# train


@dataclass
class TrainOutcome:
    setup: Setup
    result: object
    files: dict

    @property
    def final_mean_return(self):
        log = self.result.log
        return log[-1].mean_return if log else float("nan")


def train_setup(setup: Setup, record_time=False):
    cfg = setup.config
    return train(setup.cohort, setup.assignment, setup.fusion, cfg.grpo, cfg.module_seed("train"), record_time=record_time)


def run_train(cfg: ExperimentConfig, out_dir=None, record_time=False):
    setup = build_setup(cfg)
    result = train_setup(setup, record_time)
    K = setup.assignment.n_groups
    files = {
        "metrics.csv": metrics_csv(result.log, K),
        "checkpoint.json": dumps_json(
            checkpoint_dict(cfg, setup.phi, setup.assignment, setup.fusion, result.policy, result.value, result.value_scale)
        ),
        "cohort.json": setup.cohort.dumps() + "\n",
        "assignment.json": dumps_json(setup.assignment.to_dict()),
        "advantages.csv": result.last_batch.to_csv() if result.last_batch is not None else _empty_advantages_csv(),
    }
    _write(out_dir or cfg.output_dir, files)
    return TrainOutcome(setup, result, files)


def _write(out_dir, files):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# search


def policy_fallback(cohort, patient_id, group, fusion, policy):
    """``fallback(states, t)`` that acts greedily with a trained policy."""
    noise = observation_noise(cohort, patient_id, 0)

    def fallback(states, t):
        phys = np.asarray(states)
        times = np.arange(len(phys))
        obs = [phys @ P.T + noise[m][times] for m, P in enumerate(cohort.projections)]
        s = pool_state(fuse(fusion, obs).F)
        return int(np.argmax(action_distribution(policy, s, group)))

    return fallback


def run_search(cfg: ExperimentConfig, ckpt: Checkpoint, patient_id, out_dir=None, workers=1):
    problems = dims_mismatch(cfg, ckpt)
    if problems:
        raise ConfigError("checkpoint does not match config: " + "; ".join(problems))
    cohort = generate_cohort(cfg.cohort)
    if not 0 <= patient_id < cohort.n_patients:
        raise UsageError(f"patient {patient_id} does not exist (cohort has {cohort.n_patients} patients)")
    group = int(ckpt.assignment.labels[patient_id])
    fallback = policy_fallback(cohort, patient_id, group, ckpt.fusion, ckpt.policy)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            report, _ = hybrid_search(cohort, patient_id, cfg.ga, cfg.mcts, fallback, ex)
    else:
        report, _ = hybrid_search(cohort, patient_id, cfg.ga, cfg.mcts, fallback)
    doc = report.to_dict()
    doc["checkpoint_policy"] = {"group": group, "label": cfg.label}
    text = dumps_json(doc)
    _write(out_dir or cfg.output_dir, {"search_report.json": text})
    return report, text


# ---------------------------------------------------------------------------
# ablations


def ppo_reduction_config(grpo):
    return replace(grpo, alpha1=1.0, alpha2=0.0, alpha3=0.0, kl_weight=0.0, normalize_advantages=False, advantage_units="raw")


def run_ppo_reduction(cfg: ExperimentConfig, out_dir=None):
    """Train with the degenerate configuration and compare both objectives on every minibatch."""
    setup = build_setup(cfg)
    grpo = replace(ppo_reduction_config(cfg.grpo), iterations=cfg.ablation.ppo_iterations)
    rows = []

    def hook(policy, frozen, states, groups, actions, batch, idx):
        g = grpo_objective(policy, frozen, states, groups, actions, batch.adv_used[idx], grpo.clip_eps, grpo.kl_weight).value
        p = ppo_objective(
            policy, frozen, states, groups, actions, batch.adv_individual[idx], batch.adv_relative[idx], grpo.clip_eps
        )
        rows.append((len(rows), g, p, abs(g - p)))

    train(setup.cohort, setup.assignment, setup.fusion, grpo, cfg.module_seed("train"), on_minibatch=hook)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["update", "grpo_objective", "ppo_objective", "abs_diff"])
    for u, g, p, d in rows:
        w.writerow([u, _fmt(g), _fmt(p), _fmt(d)])
    text = buf.getvalue()
    _write(out_dir or cfg.output_dir, {"ablation_ppo_reduction.csv": text})
    return max((r[3] for r in rows), default=0.0), rows, text


@dataclass
class SweepRun:
    alpha3: float
    seed: int
    final_gap: float
    final_return: float
    initial_return: float


def _sweep_one(args):
    raw, alpha3 = args
    cfg = from_dict(raw)
    cfg = replace(cfg, grpo=replace(cfg.grpo, alpha3=alpha3))
    setup = build_setup(cfg)
    result = train_setup(setup)
    last = result.log[-1] if result.log else None
    return SweepRun(
        alpha3=alpha3,
        seed=cfg.seed,
        final_gap=last.fairness_gap if last else float("nan"),
        final_return=last.mean_return if last else float("nan"),
        initial_return=result.log[0].mean_return if result.log else float("nan"),
    )


def sweep_runs(cfg: ExperimentConfig, alpha3_values=None, n_seeds=None, workers=1):
    """Matched-seed runs: seed ``s`` uses master seed ``cfg.seed + s`` for every alpha3."""
    alpha3_values = cfg.ablation.alpha3_values if alpha3_values is None else tuple(alpha3_values)
    n_seeds = cfg.ablation.n_seeds if n_seeds is None else n_seeds
    jobs = [(cfg.with_seed(cfg.seed + s).to_dict(), float(a)) for a in alpha3_values for s in range(n_seeds)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(_sweep_one, jobs))
    return [_sweep_one(j) for j in jobs]


def fairness_table(runs):
    alphas = sorted({r.alpha3 for r in runs})
    table = []
    for a in alphas:
        rs = sorted((r for r in runs if r.alpha3 == a), key=lambda r: r.seed)
        table.append({
            "alpha3": a,
            "fairness_gap": float(np.mean([r.final_gap for r in rs])),
            "final_mean_return": float(np.mean([r.final_return for r in rs])),
            "initial_mean_return": float(np.mean([r.initial_return for r in rs])),
            "per_seed_gap": [r.final_gap for r in rs],
            "seeds": [r.seed for r in rs],
        })
    return table


def run_fairness_sweep(cfg: ExperimentConfig, out_dir=None, workers=1):
    table = fairness_table(sweep_runs(cfg, workers=workers))
    n = max(len(r["seeds"]) for r in table)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha3", "fairness_gap", "final_mean_return", "initial_mean_return"] + [f"gap_s{i}" for i in range(n)])
    for r in table:
        gaps = [_fmt(g) for g in r["per_seed_gap"]] + [""] * (n - len(r["per_seed_gap"]))
        w.writerow(
            [_fmt(r["alpha3"]), _fmt(r["fairness_gap"]), _fmt(r["final_mean_return"]), _fmt(r["initial_mean_return"])] + gaps
        )
    text = buf.getvalue()
    _write(out_dir or cfg.output_dir, {"ablation_fairness_sweep.csv": text})
    return table, text


# ---------------------------------------------------------------------------
# gradient checks


MODULES = ("fusion_encoder", "policy_objective", "value_regression")


def _fusion_loss(params, series, weight):
    return lambda: float(np.sum(weight * fuse(params, series).F))


def _fusion_closure(params, series, weight):
    def closure():
        fused, cache = fuse(params, series, return_cache=True)
        loss = float(np.sum(weight * fused.F))
        grads, _ = fuse_backward(params, cache, weight)
        return loss, grads

    return closure


def _policy_closure(policy, frozen, states, groups, actions, adv, eps, kl):
    def closure():
        res = grpo_objective(policy, frozen, states, groups, actions, adv, eps, kl)
        return res.value, res.grads

    return closure


def _value_closure(layers, inputs, targets):
    return lambda: value_loss(layers, inputs, targets)


def gradcheck_point(cfg: ExperimentConfig, point, corrupt=None):
    """Max relative error per module at one seeded random point."""
    rng = np.random.default_rng([cfg.module_seed("gradcheck"), point])
    gc = cfg.gradcheck
    dims = cfg.cohort.modality_dims
    fusion = init_fusion(rng, dims, cfg.fusion.hidden, cfg.fusion.n_heads, cfg.fusion.kernel_width)
    for p in fusion.parameters().values():
        p += 0.1 * rng.standard_normal(p.shape)
    series = [rng.standard_normal((gc.series_length, d)) for d in dims]
    weight = rng.standard_normal((gc.series_length, fusion.output_dim))

    K, nA, n = cfg.clustering.n_groups, cfg.cohort.n_actions, gc.batch
    policy = init_policy(rng, fusion.output_dim, nA, K, cfg.grpo.trunk_hidden)
    policy.group_bias[...] = 0.1 * rng.standard_normal(policy.group_bias.shape)
    frozen = init_policy(rng, fusion.output_dim, nA, K, cfg.grpo.trunk_hidden)
    for name, p in policy.parameters().items():
        frozen.parameters()[name][...] = p + 0.05 * rng.standard_normal(p.shape)
    states = rng.standard_normal((n, fusion.output_dim))
    groups = rng.integers(0, K, n)
    actions = rng.integers(0, nA, n)
    adv = rng.standard_normal(n)
    kl = max(cfg.grpo.kl_weight, 0.1)

    value = init_mlp(rng, [fusion.output_dim + K, cfg.grpo.value_hidden, 1])
    inputs = rng.standard_normal((n, fusion.output_dim + K))
    targets = rng.standard_normal(n)

    checks = {
        "fusion_encoder": (
            _fusion_closure(fusion, series, weight),
            fusion.parameters(),
            _fusion_loss(fusion, series, weight),
        ),
        "policy_objective": (
            _policy_closure(policy, frozen, states, groups, actions, adv, cfg.grpo.clip_eps, kl),
            policy.parameters(),
            None,
        ),
        "value_regression": (_value_closure(value, inputs, targets), mlp_parameters(value), None),
    }
    errors = {}
    for module, (closure, params, loss_fn) in checks.items():
        if module == corrupt:
            closure = _corrupted(closure)
        errors[module] = gradient_check(closure, params, loss_fn=loss_fn).max_rel_error
    return errors


def _corrupted(closure):
    """Test hook: perturb the analytic gradient of the first parameter."""

    def wrapped():
        loss, grads = closure()
        grads = dict(grads)
        first = next(iter(grads))
        grads[first] = grads[first] + 1e-3 * (1.0 + np.abs(grads[first]))
        return loss, grads

    return wrapped


def run_gradcheck(cfg: ExperimentConfig, corrupt=None):
    worst = dict.fromkeys(MODULES, 0.0)
    for point in range(cfg.gradcheck.points):
        for module, err in gradcheck_point(cfg, point, corrupt).items():
            worst[module] = max(worst[module], err)
    failing = [m for m in MODULES if not worst[m] < cfg.gradcheck.tolerance]
    return worst, failing
