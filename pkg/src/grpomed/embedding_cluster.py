"""Patient embeddings and k-means grouping.

Group labels are 0-based (``0..K-1``) throughout the package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .nn_core import DenseLayer, forward_mlp, init_mlp


@dataclass
class PatientEmbedding:
    patient_id: int
    vector: np.ndarray


@dataclass
class GroupAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def n_groups(self):
        return self.centroids.shape[0]

    def to_dict(self):
        return {
            "labels": self.labels.tolist(),
            "centroids": self.centroids.tolist(),
            "n_groups": self.n_groups,
            "inertia": self.inertia,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            labels=np.asarray(d["labels"], dtype=np.int64),
            centroids=np.asarray(d["centroids"], dtype=np.float64),
            inertia=float(d["inertia"]),
        )

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def init_phi(rng, feature_dim, embed_dim=4, hidden=16):
    """Random embedding network. It is never trained."""
    return init_mlp(rng, [feature_dim, hidden, embed_dim])


def identity_phi(dim):
    return [DenseLayer(np.eye(dim), np.zeros(dim), "identity")]


def embed(phi, features):
    """Map static features ``(N, f)`` or a single ``(f,)`` vector through ``phi``."""
    out, _ = forward_mlp(phi, features)
    return out


def embed_patients(phi, features):
    e = embed(phi, np.atleast_2d(features))
    return [PatientEmbedding(i, v) for i, v in enumerate(e)]


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def kmeans_plus_plus(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen center
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _assign(x, centroids):
    d2 = _sq_dists(x, centroids)
    labels = np.argmin(d2, axis=1)  # first minimum wins ties
    return labels, float(d2[np.arange(len(x)), labels].sum())


def _lloyd(x, k, rng, max_iters):
    centroids = kmeans_plus_plus(x, k, rng)
    labels, inertia = _assign(x, centroids)
    history = [inertia]
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new = centroids.copy()
        for g in range(k):
            members = labels == g
            if members.any():
                new[g] = x[members].mean(axis=0)
        # re-seed empty clusters at the point farthest from its centroid
        for g in range(k):
            if not np.any(labels == g):
                far = int(np.argmax(((x - new[labels]) ** 2).sum(axis=1)))
                new[g] = x[far]
                labels = labels.copy()
                labels[far] = g
        centroids = new
        new_labels, inertia = _assign(x, centroids)
        history.append(inertia)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    # final centroids are exact member means for the final labels
    for g in range(k):
        members = labels == g
        if members.any():
            centroids[g] = x[members].mean(axis=0)
    inertia = float(((x - centroids[labels]) ** 2).sum())
    history.append(inertia)
    return labels, centroids, inertia, history, n_iter


def kmeans(embeddings, k, seed=0, max_iters=100, n_init=8):
    """k-means++ seeded Lloyd iterations.

    With ``n_init > 1`` the restart with the lowest inertia is kept; restarts
    draw from one generator seeded by ``seed``.
    """
    if len(embeddings) and isinstance(embeddings[0], PatientEmbedding):
        embeddings = [e.vector for e in embeddings]
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"embeddings must be 2-D, got shape {x.shape}")
    n = x.shape[0]
    if k < 1 or k > n:
        raise UsageError(f"cannot form K={k} groups from {n} embeddings")
    if max_iters < 1:
        raise UsageError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run = _lloyd(x, k, rng, max_iters)
        if best is None or run[2] < best[2]:
            best = run
    labels, centroids, inertia, history, n_iter = best
    return GroupAssignment(labels.astype(np.int64), centroids, inertia, history, n_iter)


def group_members(assignment, g):
    if not 0 <= g < assignment.n_groups:
        raise UsageError(f"group {g} outside [0, {assignment.n_groups})")
    return set(np.flatnonzero(assignment.labels == g).tolist())


def partitions_match(a, b):
    """True when two label vectors describe the same partition."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        return False
    mapping = {}
    reverse = {}
    for x, y in zip(a.tolist(), b.tolist()):
        if mapping.setdefault(x, y) != y or reverse.setdefault(y, x) != x:
            return False
    return True
