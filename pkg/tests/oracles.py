"""Independent reference implementations used as test oracles.

Each one is written the slow, obvious way (explicit loops, enumeration)
and shares no code with the package beyond reading cohort parameters.
"""

import itertools
import math

import numpy as np


def returns_double_loop(rewards, gamma):
    T = len(rewards)
    return np.array([sum(gamma ** (k - t) * rewards[k] for k in range(t, T)) for t in range(T)])


def softmax_list(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def attention_loops(H, wq, wk, wv, wo, n_heads):
    """Multi-head self-attention with per-row python loops."""
    T, h = H.shape
    dk = h // n_heads
    Q, K, V = H @ wq, H @ wk, H @ wv
    C = np.zeros((T, h))
    P_all = []
    for head in range(n_heads):
        sl = slice(head * dk, (head + 1) * dk)
        P = np.zeros((T, T))
        for t in range(T):
            scores = [float(Q[t, sl] @ K[u, sl]) / math.sqrt(dk) for u in range(T)]
            P[t] = softmax_list(scores)
            for u in range(T):
                C[t, sl] += P[t, u] * V[u, sl]
        P_all.append(P)
    return C @ wo, P_all


def causal_conv_loops(conv_w, conv_b, x):
    width, _, h = conv_w.shape
    T = x.shape[0]
    out = np.zeros((T, h))
    for t in range(T):
        acc = conv_b.copy()
        for k in range(width):
            if t - k >= 0:
                acc = acc + x[t - k] @ conv_w[k]
        out[t] = np.maximum(acc, 0.0)
    return out


def fuse_loops(params, xs):
    zs = []
    for m, x in enumerate(xs):
        H = causal_conv_loops(params.conv_w[m], params.conv_b[m], x)
        z, _ = attention_loops(H, params.wq[m], params.wk[m], params.wv[m], params.wo[m], params.n_heads)
        zs.append(z)
    Z = np.concatenate(zs, axis=1)
    G = 1.0 / (1.0 + np.exp(-(Z @ params.gate_w.T + params.gate_b)))
    return G * Z


def fd_gradient(f, params, step=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. each array in ``params``."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            hi = f()
            p[idx] = orig - step
            lo = f()
            p[idx] = orig
            g[idx] = (hi - lo) / (2 * step)
        out[name] = g
    return out


def best_two_partition(x):
    """Minimum-inertia split of the rows of ``x`` into two non-empty groups, by enumeration."""
    n = len(x)
    best = (math.inf, None)
    for mask in range(1, 2 ** (n - 1)):
        labels = np.array([(mask >> i) & 1 for i in range(n)])
        inertia = sum(((x[labels == g] - x[labels == g].mean(axis=0)) ** 2).sum() for g in (0, 1))
        if inertia < best[0]:
            best = (inertia, labels)
    return best


def same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return all((a[i] == a[j]) == (b[i] == b[j]) for i in range(len(a)) for j in range(len(a)))


def open_loop_return(cohort, pid, actions, gamma=None):
    """Zero-noise discounted return of an action sequence from the group's initial mean."""
    cfg = cohort.config
    gamma = cfg.discount if gamma is None else gamma
    g = int(cohort.latent_groups[pid])
    s = cohort.init_means[g].copy()
    total = 0.0
    for t, a in enumerate(actions):
        s = cohort.transition[g] @ s + cohort.action_effect[g][:, a]
        d = s - cohort.targets[g]
        total += gamma**t * (-float(d @ d) - (cfg.action_cost if a > 0 else 0.0))
    return total


def brute_force_optimum(cohort, pid, gamma=None):
    """Best open-loop return over all |A|^T sequences on a zero-noise cohort (vectorized)."""
    cfg = cohort.config
    gamma = cfg.discount if gamma is None else gamma
    g = int(cohort.latent_groups[pid])
    seqs = np.array(list(itertools.product(range(cfg.n_actions), repeat=cfg.horizon)))
    s = np.tile(cohort.init_means[g], (len(seqs), 1))
    total = np.zeros(len(seqs))
    for t in range(cfg.horizon):
        a = seqs[:, t]
        s = s @ cohort.transition[g].T + cohort.action_effect[g][:, a].T
        d = s - cohort.targets[g]
        total += gamma**t * (-(d * d).sum(axis=1) - cfg.action_cost * (a > 0))
    i = int(np.argmax(total))
    return float(total[i]), seqs[i]


def kl_two_term(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
