"""Multi-channel temporal fusion: causal conv -> self-attention -> concat -> gate.

Per modality ``m`` with series ``X`` of shape ``(T, d_m)``::

    H   = relu(causal_conv(X))                      (T, h)
    Z_m = concat_heads(softmax(Q K^T / sqrt(d_k)) V) W_O
    Z   = [Z_1 | ... | Z_M]                         (T, M*h)
    G   = sigmoid(Z W_g^T + b_g)
    F   = G * Z

All stages accept extra leading batch axes, so a whole cohort can be fused in
one call as long as the patients share the same prefix length. Attention is
within each modality; there is no cross-modal attention and no positional
encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .nn_core import glorot_uniform, sigmoid, softmax_rows


@dataclass
class FusionParams:
    conv_w: list  # per modality (width, d_m, h)
    conv_b: list  # per modality (h,)
    wq: list  # per modality (h, h)
    wk: list
    wv: list
    wo: list
    gate_w: np.ndarray  # (M*h, M*h)
    gate_b: np.ndarray  # (M*h,)
    n_heads: int = 2

    def __post_init__(self):
        h = self.hidden
        if h % self.n_heads:
            raise ConfigError(f"hidden size {h} is not divisible by n_heads={self.n_heads}")
        mh = self.n_modalities * h
        if self.gate_w.shape != (mh, mh) or self.gate_b.shape != (mh,):
            raise ConfigError(f"gate parameters must be ({mh}, {mh}) and ({mh},)")
        for name in ("wq", "wk", "wv", "wo"):
            for w in getattr(self, name):
                if w.shape != (h, h):
                    raise ConfigError(f"{name} must be ({h}, {h}), got {w.shape}")

    @property
    def n_modalities(self):
        return len(self.conv_w)

    @property
    def hidden(self):
        return self.conv_w[0].shape[2]

    @property
    def head_dim(self):
        return self.hidden // self.n_heads

    @property
    def modality_dims(self):
        return [w.shape[1] for w in self.conv_w]

    @property
    def kernel_width(self):
        return self.conv_w[0].shape[0]

    @property
    def output_dim(self):
        return self.n_modalities * self.hidden

    def parameters(self):
        params = {}
        for m in range(self.n_modalities):
            params[f"m{m}.conv_w"] = self.conv_w[m]
            params[f"m{m}.conv_b"] = self.conv_b[m]
            params[f"m{m}.wq"] = self.wq[m]
            params[f"m{m}.wk"] = self.wk[m]
            params[f"m{m}.wv"] = self.wv[m]
            params[f"m{m}.wo"] = self.wo[m]
        params["gate_w"] = self.gate_w
        params["gate_b"] = self.gate_b
        return params

    def to_dict(self):
        return {
            "n_heads": self.n_heads,
            "conv_w": [w.tolist() for w in self.conv_w],
            "conv_b": [b.tolist() for b in self.conv_b],
            "wq": [w.tolist() for w in self.wq],
            "wk": [w.tolist() for w in self.wk],
            "wv": [w.tolist() for w in self.wv],
            "wo": [w.tolist() for w in self.wo],
            "gate_w": self.gate_w.tolist(),
            "gate_b": self.gate_b.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        arrs = lambda k: [np.asarray(w, dtype=np.float64) for w in d[k]]  # noqa: E731
        return cls(
            conv_w=arrs("conv_w"),
            conv_b=arrs("conv_b"),
            wq=arrs("wq"),
            wk=arrs("wk"),
            wv=arrs("wv"),
            wo=arrs("wo"),
            gate_w=np.asarray(d["gate_w"], dtype=np.float64),
            gate_b=np.asarray(d["gate_b"], dtype=np.float64),
            n_heads=int(d["n_heads"]),
        )


def init_fusion(rng, modality_dims, hidden=8, n_heads=2, kernel_width=3):
    if hidden % n_heads:
        raise ConfigError(f"hidden size {hidden} is not divisible by n_heads={n_heads}")
    conv_w, conv_b, wq, wk, wv, wo = [], [], [], [], [], []
    for d in modality_dims:
        fan_in = kernel_width * d
        limit = np.sqrt(6.0 / (fan_in + hidden))
        conv_w.append(rng.uniform(-limit, limit, size=(kernel_width, d, hidden)))
        conv_b.append(np.zeros(hidden))
        for bucket in (wq, wk, wv, wo):
            bucket.append(glorot_uniform(rng, hidden, hidden))
    mh = len(modality_dims) * hidden
    return FusionParams(
        conv_w, conv_b, wq, wk, wv, wo,
        gate_w=glorot_uniform(rng, mh, mh),
        gate_b=np.zeros(mh),
        n_heads=n_heads,
    )


@dataclass
class FusedFeatures:
    F: np.ndarray
    gate_values: np.ndarray
    Z: np.ndarray
    attention: list = field(default_factory=list)  # per modality (..., heads, T, T)


def _shift(x, k):
    """Row t of the result is row t-k of ``x`` (zeros before the start)."""
    if k == 0:
        return x
    out = np.zeros_like(x)
    if k < x.shape[-2]:
        out[..., k:, :] = x[..., :-k, :]
    return out


def _outer_sum(a, b):
    """Sum over all leading axes and time of a^T b."""
    return np.einsum("...ti,...tj->ij", a, b)


def encode_modality(conv_w, conv_b, x):
    """Causal 1-D convolution with relu. Returns ``(H, pre_activation)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != conv_w.shape[1]:
        raise ConfigError(f"modality has {x.shape[-1]} features, encoder expects {conv_w.shape[1]}")
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ConfigError("modality series needs at least one time step")
    pre = conv_b + sum(_shift(x, k) @ conv_w[k] for k in range(conv_w.shape[0]))
    return np.maximum(pre, 0.0), pre


def _split_heads(x, n_heads):
    *lead, t, h = x.shape
    return x.reshape(*lead, t, n_heads, h // n_heads).swapaxes(-2, -3)


def _merge_heads(x):
    x = x.swapaxes(-2, -3)
    *lead, t, nh, dk = x.shape
    return x.reshape(*lead, t, nh * dk)


def multi_head_attention(wq, wk, wv, wo, H, n_heads):
    """Self-attention over time. Returns ``(Z, cache)``; ``cache['P']`` holds the weights."""
    h = H.shape[-1]
    if h % n_heads:
        raise ConfigError(f"hidden size {h} is not divisible by n_heads={n_heads}")
    dk = h // n_heads
    qh = _split_heads(H @ wq, n_heads)
    kh = _split_heads(H @ wk, n_heads)
    vh = _split_heads(H @ wv, n_heads)
    P = softmax_rows(qh @ kh.swapaxes(-1, -2) / np.sqrt(dk))
    C = _merge_heads(P @ vh)
    return C @ wo, {"H": H, "qh": qh, "kh": kh, "vh": vh, "P": P, "C": C}


def _mha_backward(wq, wk, wv, wo, cache, dZ, n_heads):
    H, qh, kh, vh, P, C = (cache[k] for k in ("H", "qh", "kh", "vh", "P", "C"))
    scale = 1.0 / np.sqrt(H.shape[-1] // n_heads)
    d_wo = _outer_sum(C, dZ)
    dO = _split_heads(dZ @ wo.T, n_heads)
    dP = dO @ vh.swapaxes(-1, -2)
    dvh = P.swapaxes(-1, -2) @ dO
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True))
    dq = _merge_heads(dS @ kh) * scale
    dk = _merge_heads(dS.swapaxes(-1, -2) @ qh) * scale
    dv = _merge_heads(dvh)
    grads = {"wq": _outer_sum(H, dq), "wk": _outer_sum(H, dk), "wv": _outer_sum(H, dv), "wo": d_wo}
    dH = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return grads, dH


def concat_modalities(zs):
    lengths = {z.shape[-2] for z in zs}
    if len(lengths) != 1:
        raise UsageError(f"modalities disagree on series length: {sorted(lengths)}")
    return np.concatenate(zs, axis=-1)


def gate(gate_w, gate_b, Z):
    G = sigmoid(Z @ gate_w.T + gate_b)
    return FusedFeatures(F=G * Z, gate_values=G, Z=Z)


def pool_state(F):
    """Last time row of the fused features."""
    F = F.F if isinstance(F, FusedFeatures) else F
    if F.shape[-2] < 1:
        raise UsageError("cannot pool an empty series")
    return F[..., -1, :]


def _as_arrays(series):
    return [getattr(s, "data", s) for s in series]


@dataclass
class FusionCache:
    xs: list
    pres: list
    mha: list
    fused: FusedFeatures


def fuse(params: FusionParams, series, return_cache=False):
    """Full pipeline. ``series`` is one ``(…, T', d_m)`` array or ModalitySeries per modality."""
    xs = [np.asarray(x, dtype=np.float64) for x in _as_arrays(series)]
    if len(xs) != params.n_modalities:
        raise ConfigError(f"got {len(xs)} modalities, encoder has {params.n_modalities}")
    pres, mhas, zs = [], [], []
    for m, x in enumerate(xs):
        H, pre = encode_modality(params.conv_w[m], params.conv_b[m], x)
        Zm, mc = multi_head_attention(params.wq[m], params.wk[m], params.wv[m], params.wo[m], H, params.n_heads)
        pres.append(pre)
        mhas.append(mc)
        zs.append(Zm)
    fused = gate(params.gate_w, params.gate_b, concat_modalities(zs))
    fused.attention = [mc["P"] for mc in mhas]
    if return_cache:
        return fused, FusionCache(xs, pres, mhas, fused)
    return fused


def fuse_backward(params: FusionParams, cache: FusionCache, dF):
    """Gradients of a loss w.r.t. every fusion parameter given d loss / d F.

    Returns ``(grads, d_inputs)`` with ``grads`` keyed like ``params.parameters()``.
    """
    fused = cache.fused
    Z, G = fused.Z, fused.gate_values
    dpre_g = dF * Z * G * (1.0 - G)
    grads = {"gate_w": _outer_sum(dpre_g, Z), "gate_b": dpre_g.reshape(-1, dpre_g.shape[-1]).sum(axis=0)}
    dZ = dF * G + dpre_g @ params.gate_w
    h = params.hidden
    d_inputs = []
    for m, x in enumerate(cache.xs):
        dZm = dZ[..., m * h : (m + 1) * h]
        g, dH = _mha_backward(params.wq[m], params.wk[m], params.wv[m], params.wo[m], cache.mha[m], dZm, params.n_heads)
        for k, v in g.items():
            grads[f"m{m}.{k}"] = v
        dpre = dH * (cache.pres[m] > 0)
        grads[f"m{m}.conv_b"] = dpre.reshape(-1, h).sum(axis=0)
        conv_w = params.conv_w[m]
        grads[f"m{m}.conv_w"] = np.stack([_outer_sum(_shift(x, k), dpre) for k in range(conv_w.shape[0])])
        dx = np.zeros_like(x)
        T = x.shape[-2]
        for k in range(conv_w.shape[0]):
            if k < T:
                dx[..., : T - k, :] += (dpre @ conv_w[k].T)[..., k:, :]
        d_inputs.append(dx)
    return grads, d_inputs
