"""Returns, the learned value baseline, and group-relative advantages.

The action value of a visited (state, action) pair is estimated by the Monte
Carlo return-to-go. The group term is the batch mean of individual
advantages over the rows carrying that group label, so within every group
the deviations ``A_i - A_g`` sum to zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .nn_core import AdamState, adam_step, backward_mlp, forward_mlp, init_mlp, mlp_parameters


def discounted_returns(rewards, gamma):
    """Return-to-go by backward recursion ``G_t = r_t + gamma * G_{t+1}``.

    Works on the last axis, so ``(n, T)`` reward arrays give ``(n, T)`` returns.
    """
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    running = np.zeros(r.shape[:-1])
    for t in range(r.shape[-1] - 1, -1, -1):
        running = r[..., t] + gamma * running
        out[..., t] = running
    return out


def value_inputs(pooled, groups, n_groups):
    pooled = np.atleast_2d(np.asarray(pooled, dtype=np.float64))
    onehot = np.zeros((pooled.shape[0], n_groups))
    onehot[np.arange(pooled.shape[0]), np.asarray(groups, dtype=np.int64).reshape(-1)] = 1.0
    return np.concatenate([pooled, onehot], axis=1)


def init_value(rng, state_dim, n_groups, hidden=32):
    return init_mlp(rng, [state_dim + n_groups, hidden, 1])


def predict_value(layers, inputs):
    out, _ = forward_mlp(layers, inputs)
    return out[:, 0]


def value_loss(layers, inputs, targets):
    """Mean squared error and its gradient w.r.t. the value parameters."""
    pred, cache = forward_mlp(layers, inputs)
    err = pred[:, 0] - targets
    loss = float(np.mean(err**2))
    upstream = (2.0 / len(err)) * err[:, None]
    grads, _ = backward_mlp(layers, cache, upstream)
    return loss, grads


@dataclass
class FitResult:
    mse: float
    history: list


def fit_value(layers, inputs, targets, epochs, step_size, adam: AdamState | None = None, target_scale=1.0):
    """Regress the value net toward ``targets`` with full-batch descent.

    Plain gradient descent unless an ``AdamState`` is supplied. ``target_scale``
    divides the targets before fitting (the caller rescales predictions).
    Returns the MSE after the last step and the per-epoch history, both in
    scaled units.
    """
    targets = np.asarray(targets, dtype=np.float64) / target_scale
    params = mlp_parameters(layers)
    history = [value_loss(layers, inputs, targets)[0]]
    for _ in range(epochs):
        _, grads = value_loss(layers, inputs, targets)
        if adam is None:
            for k, g in grads.items():
                params[k] -= step_size * g
        else:
            adam_step(params, grads, adam, step_size)
        history.append(value_loss(layers, inputs, targets)[0])
    return FitResult(history[-1], history)


def individual_advantage(returns, baseline):
    return np.asarray(returns, dtype=np.float64) - np.asarray(baseline, dtype=np.float64)


def group_mean_advantage(adv, groups):
    """Mean individual advantage per group label present in the batch."""
    adv = np.asarray(adv, dtype=np.float64)
    groups = np.asarray(groups, dtype=np.int64)
    return {int(g): float(adv[groups == g].mean()) for g in np.unique(groups)}


def group_relative_advantage(a_ind, a_grp, alpha1, alpha2, alpha3, beta):
    a_ind = np.asarray(a_ind, dtype=np.float64)
    a_grp = np.asarray(a_grp, dtype=np.float64)
    return alpha1 * a_ind + alpha2 * a_grp - alpha3 * np.abs(a_ind - a_grp) ** beta


def standardize(x):
    x = np.asarray(x, dtype=np.float64)
    std = x.std()
    return (x - x.mean()) / (std if std > 1e-12 else 1.0)


@dataclass
class AdvantageBatch:
    patient_id: np.ndarray
    time: np.ndarray
    group: np.ndarray
    returns: np.ndarray
    baseline: np.ndarray
    adv_individual: np.ndarray
    adv_group: np.ndarray
    adv_relative: np.ndarray
    adv_used: np.ndarray  # what enters the policy loss (standardized or raw)
    alpha1: float
    alpha2: float
    alpha3: float
    beta: float
    scale: float = 1.0

    COLUMNS = (
        "patient_id", "time", "group", "return", "baseline",
        "adv_individual", "adv_group", "adv_relative", "adv_used", "scale",
    )

    def __len__(self):
        return len(self.returns)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for i in range(len(self)):
            w.writerow([
                int(self.patient_id[i]), int(self.time[i]), int(self.group[i]),
                repr(float(self.returns[i])), repr(float(self.baseline[i])),
                repr(float(self.adv_individual[i])), repr(float(self.adv_group[i])),
                repr(float(self.adv_relative[i])), repr(float(self.adv_used[i])),
                repr(self.scale),
            ])
        return buf.getvalue()


def build_advantages(
    patient_id, time, group, returns, baseline,
    alpha1=1.0, alpha2=0.5, alpha3=0.1, beta=2.0, normalize=True, units="std",
):
    """Assemble an :class:`AdvantageBatch`.

    ``units="std"`` measures advantages in units of the batch standard
    deviation of ``G - v`` before blending, so the alphas are dimensionless;
    ``units="raw"`` keeps reward units. Either way
    ``adv_individual * scale == returns - baseline``.
    """
    diff = individual_advantage(returns, baseline)
    if units == "std":
        scale = float(diff.std()) if diff.std() > 1e-12 else 1.0
    elif units == "raw":
        scale = 1.0
    else:
        raise ValueError(f"unknown advantage units {units!r}")
    a_ind = diff / scale
    means = group_mean_advantage(a_ind, group)
    a_grp = np.array([means[int(g)] for g in group])
    a_rel = group_relative_advantage(a_ind, a_grp, alpha1, alpha2, alpha3, beta)
    return AdvantageBatch(
        patient_id=np.asarray(patient_id), time=np.asarray(time), group=np.asarray(group),
        returns=np.asarray(returns, dtype=np.float64), baseline=np.asarray(baseline, dtype=np.float64),
        adv_individual=a_ind, adv_group=a_grp, adv_relative=a_rel,
        adv_used=standardize(a_rel) if normalize else a_rel.copy(),
        alpha1=alpha1, alpha2=alpha2, alpha3=alpha3, beta=beta, scale=scale,
    )
