"""Compactness accounting and per-layer unit targets."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StructuralEditError

# Bias scalars for the three masked layers of the ConvNet head.
BIAS_SCHEDULES = {
    "Neutral": (1.0, 1.0, 1.0),
    "FC1-Protect": (1.5, 1.5, 0.6),
    "FC3-Protect": (0.6, 0.6, 1.5),
    "Ends-Skewed": (1.2, 0.6, 1.2),
}


@dataclass(frozen=True)
class BiasSchedule:
    name: str
    scalars: tuple

    def __post_init__(self):
        if any(b <= 0 for b in self.scalars):
            raise ConfigError(f"bias scalars must be positive: {self.scalars}")

    @classmethod
    def named(cls, name, n_layers=3):
        """Schedule for ``n_layers`` masked layers.

        Three layers use the table directly. Two layers (the MLP) take the
        first and last scalars so "protect" keeps its early/late meaning;
        other depths interpolate linearly over layer position.
        """
        if name not in BIAS_SCHEDULES:
            raise ConfigError(f"unknown bias schedule {name!r}; choose from {sorted(BIAS_SCHEDULES)}")
        table = BIAS_SCHEDULES[name]
        if n_layers == 3:
            scalars = table
        elif n_layers == 2:
            scalars = (table[0], table[2])
        elif n_layers == 1:
            scalars = (1.0,)
        else:
            pos = np.linspace(0.0, 2.0, n_layers)
            scalars = tuple(float(np.interp(p, [0, 1, 2], table)) for p in pos)
        return cls(name, tuple(float(b) for b in scalars))


@dataclass
class CompactnessPlan:
    global_c: float
    schedule: BiasSchedule
    unit_targets: dict  # layer index -> u*
    layer_dims: dict  # layer index -> d
    unit_mass: dict  # layer index -> weights per unit (fan_in + bias)
    cycles: int = 5
    notes: list = field(default_factory=list)

    @property
    def budget(self):
        return self.global_c * sum(self.layer_dims[l] * self.unit_mass[l] for l in self.layer_dims)

    @property
    def kept_weights(self):
        return sum(self.unit_targets[l] * self.unit_mass[l] for l in self.unit_targets)

    def to_dict(self):
        return {
            "global_c": self.global_c,
            "schedule": {"name": self.schedule.name, "scalars": list(self.schedule.scalars)},
            "unit_targets": {str(k): v for k, v in self.unit_targets.items()},
            "layer_dims": {str(k): v for k, v in self.layer_dims.items()},
            "unit_mass": {str(k): v for k, v in self.unit_mass.items()},
            "cycles": self.cycles,
            "budget": self.budget,
            "kept_weights": self.kept_weights,
            "notes": list(self.notes),
        }


def layer_compactness(mask):
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ConfigError("empty mask")
    if not np.isin(mask, (0, 1)).all():
        raise ConfigError("mask must be binary")
    frac = float(mask.sum()) / mask.size
    if frac == 0.0:
        warnings.warn("degenerate layer: no active units", RuntimeWarning, stacklevel=2)
    return frac


def _layer_geometry(arch):
    """(layer ids, unit counts, per-unit weight mass) for a network or explicit list."""
    if hasattr(arch, "masked_layers"):
        ids = arch.masked_layers
        dims = [arch.layers[i].out_dim for i in ids]
        mass = [arch.fan_in(i) + 1 for i in ids]
    else:
        ids = list(range(len(arch)))
        dims = [int(d) for d, _ in arch]
        mass = [int(w) for _, w in arch]
    return ids, dims, mass


def plan_targets(arch, global_c, schedule="Neutral", cycles=5):
    """Convert a global kept-weight fraction into integer unit targets per masked layer.

    ``arch`` is a MaskedNetwork or a list of ``(units, weights_per_unit)``.
    """
    if not (0.0 < global_c <= 1.0):
        raise ConfigError(f"compactness must lie in (0, 1], got {global_c}")
    ids, dims, mass = _layer_geometry(arch)
    if isinstance(schedule, str):
        schedule = BiasSchedule.named(schedule, len(ids))
    if len(schedule.scalars) != len(ids):
        raise ConfigError(f"schedule {schedule.name} has {len(schedule.scalars)} scalars for {len(ids)} layers")

    d = np.array(dims, dtype=float)
    w = np.array(mass, dtype=float)
    b = np.array(schedule.scalars, dtype=float)
    budget = global_c * float(np.sum(d * w))
    ideal, saturated = _allocate(b, d, w, budget)  # fractional unit targets
    notes = [f"layer {ids[k]}: saturated at {dims[k]} units, surplus budget redistributed"
             for k in np.flatnonzero(saturated)]
    u = np.rint(ideal).astype(int)
    for k in range(len(ids)):
        if u[k] < 1:
            notes.append(f"layer {ids[k]}: target {ideal[k]:.3f} units clamped to 1")
        elif u[k] > dims[k]:
            notes.append(f"layer {ids[k]}: target {ideal[k]:.3f} units clamped to {dims[k]}")
    u = np.clip(u, 1, d.astype(int))
    u = _reconcile(u, ideal, w, d.astype(int), budget)
    dev = float(np.sum(u * w) - budget)
    if notes:
        notes.append(f"kept-weight deviation after reconciliation: {dev:+.1f}")
    return CompactnessPlan(
        global_c=float(global_c),
        schedule=schedule,
        unit_targets={i: int(v) for i, v in zip(ids, u)},
        layer_dims=dict(zip(ids, dims)),
        unit_mass=dict(zip(ids, mass)),
        cycles=int(cycles),
        notes=notes,
    )


def _allocate(b, d, w, budget):
    """Shares proportional to b*d*w; layers that would exceed full width are pinned there
    and the rest of the budget is re-split among the others."""
    sat = np.zeros(len(d), dtype=bool)
    while True:
        free = ~sat
        left = budget - float(np.sum(d[sat] * w[sat]))
        share = b * d * w
        ideal = d.copy()
        ideal[free] = share[free] * left / share[free].sum() / w[free]
        over = free & (ideal > d)
        if not over.any() or over.sum() == free.sum():
            return np.minimum(ideal, d), sat | over
        sat |= over


def _reconcile(u, ideal, w, d, budget):
    """Move single units (at most one per layer) while that shrinks |kept - budget|.

    The layer chosen is the one whose own residual points furthest in the
    direction of the move; ties go to the lowest layer index.
    """
    u = u.copy()
    moved = np.zeros(len(u), dtype=bool)
    for _ in range(len(u)):
        dev = float(np.sum(u * w) - budget)
        step = -1 if dev > 0 else 1
        residual = (u - ideal) * w
        best, best_key = None, None
        for k in range(len(u)):
            if moved[k] or not (1 <= u[k] + step <= d[k]):
                continue
            if abs(dev + step * w[k]) >= abs(dev):
                continue
            key = residual[k] if step < 0 else -residual[k]
            if best is None or key > best_key:
                best, best_key = k, key
        if best is None:
            break
        u[best] += step
        moved[best] = True
    return u


def apply_mask_edit(net, layer, unit_indices, action):
    """Flip mask entries in place. Parameters are not touched."""
    if layer not in net.masks:
        raise StructuralEditError(f"layer {layer} is not masked")
    mask = net.masks[layer]
    idx = np.asarray(sorted(set(int(i) for i in unit_indices)), dtype=int)
    if idx.size == 0:
        return net
    if idx.min() < 0 or idx.max() >= mask.size:
        raise StructuralEditError(f"unit index out of range for layer {layer}")
    if action == "activate":
        if mask[idx].any():
            raise StructuralEditError(f"activate on already-active units {idx[mask[idx]].tolist()}")
        mask[idx] = True
    elif action == "deactivate":
        if not mask[idx].all():
            raise StructuralEditError(f"deactivate on inactive units {idx[~mask[idx]].tolist()}")
        mask[idx] = False
    else:
        raise StructuralEditError(f"unknown mask action {action!r}")
    return net


def edit_quota(current, target, t, total_cycles, limit):
    """Units to move this cycle: min(q, ceil(q / max(1, T - t)), limit) with q = |target - current|."""
    q = abs(target - current)
    if q == 0:
        return 0
    return int(min(q, math.ceil(q / max(1, total_cycles - t)), limit))
