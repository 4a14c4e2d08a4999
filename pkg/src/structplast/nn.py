"""Masked feed-forward networks with manual backpropagation.

Tensors are plain float64 ``numpy.ndarray`` objects. Two architectures are
provided: the MLP (784 -> H -> H -> 10) and the ConvNet (two dense conv
blocks followed by a four-layer FC head). Only hidden linear layers carry a
unit mask; a masked-out unit outputs exactly zero and receives exactly zero
pre-activation gradient.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError, NumericFault

LAYER_KINDS = ("linear", "conv2d", "maxpool2d", "flatten")
ACTIVATIONS = ("relu", "rsl", "none")
DTYPE = np.float64


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0  # in_features, or in_channels for conv2d
    out_dim: int = 0  # out_features, or out_channels for conv2d
    kernel: int = 0
    padding: int = 0
    activation: str = "none"
    masked: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.masked and (self.kind != "linear" or self.activation == "none"):
            raise ConfigError("only hidden linear layers may be masked")

    @property
    def has_params(self):
        return self.kind in ("linear", "conv2d")


@dataclass(frozen=True)
class RSLParams:
    """Shape parameters of the randomized smooth-leaky activation."""

    c: float = 0.5
    p: float = 0.5
    lower: float = 0.3
    upper: float = 0.6
    mode: str = "train"

    def __post_init__(self):
        if self.lower > self.upper:
            raise ConfigError(f"RSL lower={self.lower} exceeds upper={self.upper}")
        if not (self.lower > 0 and self.c > 0 and self.p > 0):
            raise ConfigError("RSL requires c > 0, p > 0 and lower > 0")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"RSL mode must be train or eval, got {self.mode!r}")


# ---------------------------------------------------------------- activations

def rsl_slopes(n_units, params, rng=None, mode=None):
    """Per-unit negative-side slopes: random in train mode, midpoint in eval."""
    mode = mode or params.mode
    if mode == "eval" or params.lower == params.upper:
        return np.full(n_units, 0.5 * (params.lower + params.upper), dtype=DTYPE)
    if rng is None:
        raise ConfigError("train-mode RSL needs an rng")
    return rng.uniform(params.lower, params.upper, size=n_units)


def _rsl_gate(z, params):
    # (1 + exp(-c z))^(-p), evaluated in log space
    return np.exp(-params.p * np.logaddexp(0.0, -params.c * z))


def rsl_forward(z, alpha, params):
    g = _rsl_gate(z, params)
    return z * (alpha + (1.0 - alpha) * g)


def rsl_derivative(z, alpha, params):
    g = _rsl_gate(z, params)
    dg = params.p * params.c * g * expit(-params.c * z)
    return alpha + (1.0 - alpha) * (g + z * dg)


def rsl_activation(z, params, rng=None, mode=None):
    """Apply RSL with slopes drawn along the unit axis (last axis, or axis 1 for NCHW)."""
    z = np.asarray(z, dtype=DTYPE)
    axis = 1 if z.ndim == 4 else z.ndim - 1
    alpha = rsl_slopes(z.shape[axis], params, rng, mode)
    return rsl_forward(z, _unit_broadcast(alpha, z.ndim), params)


def _unit_broadcast(vec, ndim):
    if ndim == 4:
        return vec.reshape(1, -1, 1, 1)
    return vec


def kaiming_uniform_init(shape, fan_in, rng):
    if fan_in < 1:
        raise ConfigError("fan_in must be >= 1")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def bias_uniform_init(n, fan_in, rng):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n)


# --------------------------------------------------------------------- network

class MaskedNetwork:
    """A fixed layer stack with per-unit binary masks on hidden linear layers.

    Parameters live in ``params`` keyed ``"{layer}.W"`` / ``"{layer}.b"``;
    masks live in ``masks`` keyed by layer index (boolean vectors).
    """

    def __init__(self, layers, input_shape, params=None, masks=None, rng_seed=0, rsl=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.rng_seed = rng_seed
        self.rsl = rsl
        param_layers = [i for i, s in enumerate(self.layers) if s.has_params]
        if not param_layers or self.layers[param_layers[-1]].kind != "linear":
            raise ConfigError("network must end in a linear output layer")
        if self.layers[param_layers[-1]].masked:
            raise ConfigError("the output layer is never masked")
        if any(s.activation == "rsl" for s in self.layers) and rsl is None:
            raise ConfigError("rsl activation requires RSLParams")
        if params is None:
            params = self._init_params(np.random.default_rng(rng_seed))
        self.params = params
        if masks is None:
            masks = {i: np.ones(s.out_dim, dtype=bool) for i, s in enumerate(self.layers) if s.masked}
        self.masks = masks

    # constructors -------------------------------------------------------
    @classmethod
    def mlp(cls, input_dim=784, hidden=(256, 256), n_classes=10, activation="relu",
            seed=0, rsl=None):
        layers, prev = [], input_dim
        for h in hidden:
            layers.append(LayerSpec("linear", prev, h, activation=activation, masked=True))
            prev = h
        layers.append(LayerSpec("linear", prev, n_classes))
        return cls(layers, (input_dim,), rng_seed=seed, rsl=rsl)

    @classmethod
    def convnet(cls, n_classes=100, in_channels=3, image_size=32, channels=(32, 64),
                head=(512, 512, 256), activation="relu", seed=0, rsl=None):
        layers, prev, size = [], in_channels, image_size
        for ch in channels:
            layers.append(LayerSpec("conv2d", prev, ch, kernel=3, padding=1, activation=activation))
            layers.append(LayerSpec("maxpool2d", kernel=2))
            prev, size = ch, size // 2
        layers.append(LayerSpec("flatten"))
        prev = prev * size * size
        for h in head:
            layers.append(LayerSpec("linear", prev, h, activation=activation, masked=True))
            prev = h
        layers.append(LayerSpec("linear", prev, n_classes))
        return cls(layers, (in_channels, image_size, image_size), rng_seed=seed, rsl=rsl)

    def _init_params(self, rng):
        params = {}
        for i, s in enumerate(self.layers):
            if s.kind == "linear":
                params[f"{i}.W"] = kaiming_uniform_init((s.out_dim, s.in_dim), s.in_dim, rng)
                params[f"{i}.b"] = bias_uniform_init(s.out_dim, s.in_dim, rng)
            elif s.kind == "conv2d":
                fan_in = s.in_dim * s.kernel * s.kernel
                shape = (s.out_dim, s.in_dim, s.kernel, s.kernel)
                params[f"{i}.W"] = kaiming_uniform_init(shape, fan_in, rng)
                params[f"{i}.b"] = bias_uniform_init(s.out_dim, fan_in, rng)
        return params

    def reinitialize(self, seed):
        """Fresh Kaiming draw for every parameter; masks are kept."""
        self.rng_seed = seed
        self.params = self._init_params(np.random.default_rng(seed))

    # topology helpers -----------------------------------------------------
    @property
    def masked_layers(self):
        return [i for i, s in enumerate(self.layers) if s.masked]

    @property
    def param_layers(self):
        return [i for i, s in enumerate(self.layers) if s.has_params]

    def consumer(self, layer):
        """Index of the parameterized layer reading the output of ``layer``."""
        later = [i for i in self.param_layers if i > layer]
        if not later:
            raise ConfigError(f"layer {layer} has no consumer")
        return later[0]

    def fan_in(self, layer):
        s = self.layers[layer]
        return s.in_dim * (s.kernel * s.kernel if s.kind == "conv2d" else 1)

    def active_counts(self):
        return {i: int(m.sum()) for i, m in self.masks.items()}

    def copy(self):
        return copy.deepcopy(self)

    def snapshot(self):
        return {k: v.copy() for k, v in self.params.items()}

    def n_params(self):
        return sum(v.size for v in self.params.values())


# ---------------------------------------------------------------- conv helpers

def _im2col(x, k, pad):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # b, c, ho, wo, k, k
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols, (b, c, h, w, ho, wo)


def _col2im(dcols, geom, k, pad):
    b, c, h, w, ho, wo = geom
    d = dcols.reshape(b, ho, wo, c, k, k)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u:u + ho, v:v + wo] += d[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    return dxp[:, :, pad:pad + h, pad:pad + w]


def _pool_windows(x, k):
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ConfigError(f"maxpool{k} needs spatial dims divisible by {k}, got {h}x{w}")
    xr = x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    return xr.reshape(b, c, h // k, w // k, k * k)


# ------------------------------------------------------------ forward/backward

@dataclass
class ForwardCache:
    net_id: int
    entries: list = field(default_factory=list)
    mode: str = "eval"

    def z(self, layer):
        return self.entries[layer]["z"]

    def h_raw(self, layer):
        return self.entries[layer]["h_raw"]

    def h(self, layer):
        return self.entries[layer]["out"]


@dataclass
class Gradients:
    params: dict
    units: dict  # layer -> dL/dz (B, d), zero on masked-out units
    units_unmasked: dict  # layer -> dL/dz as if the layer's mask were lifted


def _activate(spec, z, net, mode, rng):
    if spec.activation == "relu":
        return np.maximum(z, 0.0), None
    if spec.activation == "rsl":
        alpha = rsl_slopes(z.shape[1], net.rsl, rng, mode)  # units / channels on axis 1
        a = _unit_broadcast(alpha, z.ndim)
        return rsl_forward(z, a, net.rsl), a
    return z, None


def _activation_grad(spec, z, alpha, net):
    if spec.activation == "relu":
        return (z > 0).astype(DTYPE)
    if spec.activation == "rsl":
        return rsl_derivative(z, alpha, net.rsl)
    return np.ones_like(z)


def forward(net, x, mode="eval", rng=None):
    """Run ``net`` on a batch. Returns (logits, cache)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[1:] != net.input_shape:
        raise ConfigError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    cache = ForwardCache(id(net), mode=mode)
    h = x
    for i, spec in enumerate(net.layers):
        entry = {"x": h}
        if spec.kind == "linear":
            if h.shape[1] != spec.in_dim:
                raise ConfigError(f"layer {i} expects {spec.in_dim} inputs, got {h.shape[1]}")
            z = h @ net.params[f"{i}.W"].T + net.params[f"{i}.b"]
        elif spec.kind == "conv2d":
            cols, geom = _im2col(h, spec.kernel, spec.padding)
            w = net.params[f"{i}.W"].reshape(spec.out_dim, -1)
            z = (cols @ w.T + net.params[f"{i}.b"]).reshape(geom[0], geom[4], geom[5], spec.out_dim)
            z = z.transpose(0, 3, 1, 2)
            entry["cols"], entry["geom"] = cols, geom
        elif spec.kind == "maxpool2d":
            win = _pool_windows(h, spec.kernel)
            idx = win.argmax(axis=-1)
            out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
            entry["idx"], entry["in_shape"] = idx, h.shape
            entry["out"] = out
            cache.entries.append(entry)
            h = out
            continue
        else:  # flatten
            entry["in_shape"] = h.shape
            h = h.reshape(h.shape[0], -1)
            entry["out"] = h
            cache.entries.append(entry)
            continue

        h_raw, alpha = _activate(spec, z, net, mode, rng)
        out = h_raw * net.masks[i] if spec.masked else h_raw
        if not np.all(np.isfinite(out)):
            raise NumericFault("non-finite activation", layer=i)
        entry.update(z=z, h_raw=h_raw, alpha=alpha, out=out)
        cache.entries.append(entry)
        h = out
    return h, cache


def backward(net, cache, grad_logits):
    """Backpropagate ``grad_logits`` through the cached forward pass."""
    if cache.net_id != id(net) or len(cache.entries) != len(net.layers):
        raise ConfigError("forward cache does not belong to this network")
    grads, units, virtual = {}, {}, {}
    g = np.asarray(grad_logits, dtype=DTYPE)
    first_param = net.param_layers[0]
    for i in range(len(net.layers) - 1, -1, -1):
        spec, e = net.layers[i], cache.entries[i]
        if spec.kind == "maxpool2d":
            win_grad = np.zeros(g.shape + (spec.kernel * spec.kernel,), dtype=DTYPE)
            np.put_along_axis(win_grad, e["idx"][..., None], g[..., None], axis=-1)
            b, c, hh, ww = e["in_shape"]
            k = spec.kernel
            g = win_grad.reshape(b, c, hh // k, ww // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(e["in_shape"])
            continue
        if spec.kind == "flatten":
            g = g.reshape(e["in_shape"])
            continue
        if g.shape != e["out"].shape:
            raise ConfigError(f"gradient shape {g.shape} does not match layer {i} output {e['out'].shape}")
        dz = g * _activation_grad(spec, e["z"], e["alpha"], net)
        if spec.masked:
            virtual[i] = dz
            dz = dz * net.masks[i]
            units[i] = dz
        if not np.all(np.isfinite(dz)):
            raise NumericFault("non-finite gradient", layer=i)
        W = net.params[f"{i}.W"]
        if spec.kind == "linear":
            grads[f"{i}.W"] = dz.T @ e["x"]
            grads[f"{i}.b"] = dz.sum(axis=0)
            if i > first_param:
                g = dz @ W
        else:
            dzr = dz.transpose(0, 2, 3, 1).reshape(-1, spec.out_dim)
            grads[f"{i}.W"] = (dzr.T @ e["cols"]).reshape(W.shape)
            grads[f"{i}.b"] = dzr.sum(axis=0)
            if i > first_param:
                g = _col2im(dzr @ W.reshape(spec.out_dim, -1), e["geom"], spec.kernel, spec.padding)
    return Gradients(grads, units, virtual)


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ConfigError(f"labels must be {n} class indices in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def predict(net, x, batch_size=2048):
    out = [forward(net, x[s:s + batch_size])[0].argmax(axis=1) for s in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net, x, y, batch_size=2048):
    if len(x) == 0:
        return float("nan")
    return float(np.mean(predict(net, x, batch_size) == np.asarray(y)))
