"""Dense layers with hand-written gradients, Adam, and a finite-difference checker.

Everything is float64 numpy. Batches are rows: a layer maps ``x`` of shape
``(n, in)`` to ``x @ W.T + b`` of shape ``(n, out)``; a 1-D input is treated
as a single row and returned 1-D.

Parameter sets are plain ``dict[str, np.ndarray]`` whose values are the live
arrays, so optimizers and the gradient checker mutate them in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CheckInvalid, ConfigError, UsageError

ACTIVATIONS = ("identity", "relu", "sigmoid", "tanh")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(m):
    """Softmax over the last axis with max-subtraction."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m):
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _activate(name, z):
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    raise ConfigError(f"unknown activation {name!r}")


def _activation_grad(name, z, a):
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    raise ConfigError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ConfigError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigError(
                f"bias shape {self.bias.shape} does not match weight rows {self.weight.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]


def glorot_uniform(rng, n_out, n_in):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def init_mlp(rng, sizes, hidden_activation="relu", output_activation="identity"):
    """Build an MLP with Glorot-uniform weights and zero biases."""
    if len(sizes) < 2:
        raise ConfigError("an MLP needs at least input and output sizes")
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = output_activation if i == len(sizes) - 2 else hidden_activation
        layers.append(DenseLayer(glorot_uniform(rng, n_out, n_in), np.zeros(n_out), act))
    return layers


def mlp_parameters(layers, prefix=""):
    params = {}
    for i, layer in enumerate(layers):
        params[f"{prefix}{i}.weight"] = layer.weight
        params[f"{prefix}{i}.bias"] = layer.bias
    return params


@dataclass
class MLPCache:
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    squeeze: bool = False


def forward_mlp(layers, x):
    """Run the network. Returns ``(output, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2:
        raise ConfigError(f"input must be 1-D or 2-D, got shape {x.shape}")
    cache = MLPCache(squeeze=squeeze)
    for i, layer in enumerate(layers):
        if h.shape[1] != layer.n_in:
            raise ConfigError(
                f"layer {i} expects {layer.n_in} inputs, got {h.shape[1]}"
            )
        cache.inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        h = _activate(layer.activation, z)
        cache.pre.append(z)
        cache.post.append(h)
    return (h[0] if squeeze else h), cache


def backward_mlp(layers, cache, upstream, prefix=""):
    """Backpropagate ``upstream`` (d loss / d output).

    Returns ``(grads, d_input)`` where ``grads`` is keyed like
    :func:`mlp_parameters` with the same ``prefix``.
    """
    if cache is None or len(cache.inputs) != len(layers):
        raise UsageError("backward_mlp needs the cache from a forward pass over the same layers")
    g = np.asarray(upstream, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    grads = {}
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        dz = g * _activation_grad(layer.activation, cache.pre[i], cache.post[i])
        grads[f"{prefix}{i}.weight"] = dz.T @ cache.inputs[i]
        grads[f"{prefix}{i}.bias"] = dz.sum(axis=0)
        g = dz @ layer.weight
    return grads, (g[0] if cache.squeeze else g)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, step_size):
    """One Adam descent step, applied in place to ``params``.

    Parameters without an entry in ``grads`` are left alone. To ascend an
    objective pass its negated gradient.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= step_size * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    n_checked: int

    def passed(self, tolerance=1e-4):
        return self.max_rel_error < tolerance


def relative_error(a, n, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradient_check(closure, params, step=1e-5, floor=1e-8, names=None, loss_fn=None):
    """Compare analytic gradients to central differences.

    ``closure()`` evaluates the model at the current contents of ``params``
    and returns ``(loss, grads)``. Each entry is perturbed in place and
    restored afterwards. ``loss_fn()``, when given, returns the loss alone
    and is used for the perturbed evaluations.
    """
    if loss_fn is None:
        loss_fn = lambda: closure()[0]  # noqa: E731
    loss0, analytic = closure()
    loss1 = loss_fn()
    if loss0 != loss1:
        raise CheckInvalid(f"closure is not deterministic ({loss0!r} vs {loss1!r})")
    per_param = {}
    total = 0
    worst = 0.0
    for name in names or list(params):
        p = params[name]
        a = np.asarray(analytic.get(name, np.zeros_like(p)), dtype=np.float64)
        if a.shape != p.shape:
            raise CheckInvalid(f"analytic gradient for {name} has shape {a.shape}, expected {p.shape}")
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            lp = loss_fn()
            p[idx] = orig - step
            lm = loss_fn()
            p[idx] = orig
            numeric[idx] = (lp - lm) / (2.0 * step)
        err = float(relative_error(a, numeric, floor).max()) if p.size else 0.0
        per_param[name] = err
        worst = max(worst, err)
        total += p.size
    return GradCheckReport(worst, per_param, total)
