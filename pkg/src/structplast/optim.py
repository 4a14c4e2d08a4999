"""SGD / Adam with cosine annealing, plus newborn-aware optimizer interventions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericFault


def cosine_lr(lr0, epoch, t_max):
    """Cosine annealing to zero over ``t_max`` epochs."""
    if t_max <= 0 or not (0 <= epoch <= t_max):
        raise ConfigError(f"epoch {epoch} outside [0, {t_max}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / t_max))


def _check_finite(grads):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient in {k}")


def sgd_step(params, grads, lr):
    """In-place ``theta -= lr * g``."""
    _check_finite(grads)
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        params[k] -= lr * g
    return params


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")

    def apply(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        if self.kind == "sgd":
            self.step += 1
            return sgd_step(params, grads, lr)
        adam_step(params, grads, self, lr)
        return params

    def zero_slices(self, key, index):
        if key in self.m:
            self.m[key][index] = 0.0
            self.v[key][index] = 0.0

    def to_dict(self):
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step,
                "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}


def adam_step(params, grads, state, lr=None):
    """Bias-corrected Adam update, in place. Returns (params, state)."""
    _check_finite(grads)
    lr = state.lr if lr is None else lr
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ------------------------------------------------------------------ Two-Speed

def two_speed_apply(theta_old, theta_base_new, r):
    """Delta scaling ``old + r * (new - old)``; r == 1 returns ``theta_base_new`` untouched."""
    if r == 1:
        return theta_base_new
    return theta_old + r * (theta_base_new - theta_old)


@dataclass
class _Birth:
    event_id: str
    masks: dict  # param key -> boolean array selecting the newborn slice
    remaining: int


class TwoSpeed:
    """Registry of newborn parameter slices whose updates are scaled by ``r``.

    Each registered birth stays live for ``window`` optimizer steps.
    """

    def __init__(self, r=5.0, window=1955):
        if r <= 0 or window < 0:
            raise ConfigError("Two-Speed needs r > 0 and window >= 0")
        self.r = float(r)
        self.window = int(window)
        self.births = []

    def register(self, event_id, net, layer, units):
        """Cover the incoming rows/bias of ``units`` and their columns in the consumer layer."""
        units = np.asarray(list(units), dtype=int)
        if units.size == 0 or self.window == 0:
            return
        masks = {}
        w = np.zeros(net.params[f"{layer}.W"].shape, dtype=bool)
        w[units] = True
        b = np.zeros(net.params[f"{layer}.b"].shape, dtype=bool)
        b[units] = True
        consumer = net.consumer(layer)
        c = np.zeros(net.params[f"{consumer}.W"].shape, dtype=bool)
        c[:, units] = True
        masks[f"{layer}.W"], masks[f"{layer}.b"], masks[f"{consumer}.W"] = w, b, c
        self.births.append(_Birth(event_id, masks, self.window))

    def active_masks(self):
        union = {}
        for birth in self.births:
            for k, m in birth.masks.items():
                union[k] = m.copy() if k not in union else (union[k] | m)
        return union

    def step(self, params, base_step):
        """Run ``base_step()`` and rescale the live newborn slices afterwards."""
        if self.r == 1 or not self.births:
            base_step()
            self._tick()
            return
        union = self.active_masks()
        old = {k: params[k][m].copy() for k, m in union.items()}
        base_step()
        for k, m in union.items():
            params[k][m] = two_speed_apply(old[k], params[k][m], self.r)
        self._tick()

    def _tick(self):
        for birth in self.births:
            birth.remaining -= 1
        self.births = [b for b in self.births if b.remaining > 0]


# ----------------------------------------------------------- Moment Transplant

def moment_transplant(state, net, layer, donor_map):
    """Copy Adam moments of donor units into newborn units of ``layer``.

    ``donor_map`` maps newborn unit -> donor unit. Incoming rows, biases and
    the consumer's input columns are copied; the step counter is unchanged.
    """
    if state.kind != "adam":
        raise ConfigError("moment transplant needs an adaptive optimizer state")
    if not donor_map:
        return state
    consumer = net.consumer(layer)
    for key in (f"{layer}.W", f"{layer}.b", f"{consumer}.W"):
        if key not in state.m:
            state.m[key] = np.zeros_like(net.params[key])
            state.v[key] = np.zeros_like(net.params[key])
    new = np.array(list(donor_map.keys()), dtype=int)
    don = np.array(list(donor_map.values()), dtype=int)
    for buf in (state.m, state.v):
        buf[f"{layer}.W"][new] = buf[f"{layer}.W"][don]
        buf[f"{layer}.b"][new] = buf[f"{layer}.b"][don]
        buf[f"{consumer}.W"][:, new] = buf[f"{consumer}.W"][:, don]
    return state
