"""Grow and Prune operators on unit masks.

Scores are computed from a single pre-edit forward (and backward, for the
gradient scorers) on one mini-batch, so every layer in a cycle is scored
against the same network state. Ties always go to the lowest unit index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .budget import apply_mask_edit, edit_quota
from .errors import ConfigError, StructuralEditError
from .nn import backward, bias_uniform_init, forward, kaiming_uniform_init, softmax_xent

SCORERS = ("activation", "gradient", "gradmax")
INIT_POLICIES = ("fresh-kaiming", "fresh-full", "retain", "net2wider")


@dataclass
class EditEvent:
    cycle: int
    layer: int
    action: str  # "grow" | "prune"
    unit_ids: list
    scores: list
    detail: dict = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict)  # timepoint -> cohort statistics

    @property
    def event_id(self):
        return f"c{self.cycle}-l{self.layer}-{self.action}"

    def to_dict(self):
        return {
            "event_id": self.event_id,
            "cycle": self.cycle,
            "layer": self.layer,
            "action": self.action,
            "unit_ids": [int(u) for u in self.unit_ids],
            "scores": [float(s) for s in self.scores],
            "detail": self.detail,
        }


@dataclass(frozen=True)
class RewindSnapshot:
    params: dict
    epoch: int = 0

    @classmethod
    def take(cls, net, epoch=0):
        snap = {k: v.copy() for k, v in net.params.items()}
        for v in snap.values():
            v.setflags(write=False)
        return cls(snap, epoch)


# --------------------------------------------------------------------- scores

def activation_rate(post_acts, tau):
    """Fraction of post-activations above ``tau`` per unit (spatially averaged for NCHW)."""
    a = np.asarray(post_acts)
    if a.ndim == 4:
        return (a > tau).mean(axis=(0, 2, 3))
    return (a > tau).mean(axis=0)


def mean_abs(values):
    v = np.abs(np.asarray(values))
    if v.ndim == 4:
        return v.mean(axis=(0, 2, 3))
    return v.mean(axis=0)


def top_k(ids, scores, n, largest=True):
    """Pick ``n`` ids by score; ties resolved toward the lowest id."""
    ids = np.asarray(ids, dtype=int)
    scores = np.asarray(scores, dtype=float)
    if n == 0 or ids.size == 0:
        return np.zeros(0, dtype=int)
    order = np.lexsort((ids, -scores if largest else scores))
    return np.sort(ids[order[:n]])


def _candidates(net, layer):
    return np.flatnonzero(~net.masks[layer])


def score_grow_activation(net, layer, batch_x, tau=0.05, cache=None):
    """Activation-frequency score for every inactive unit of ``layer``."""
    if cache is None:
        _, cache = forward(net, batch_x)
    cand = _candidates(net, layer)
    rates = activation_rate(cache.h_raw(layer), tau)
    return cand, rates[cand]


def unmasked_unit_gradients(net, batch_x, batch_y):
    """Per-unit |dL/dz| batch means with each layer's own mask lifted."""
    logits, cache = forward(net, batch_x)
    _, g = softmax_xent(logits, batch_y)
    grads = backward(net, cache, g)
    return {l: mean_abs(v) for l, v in grads.units_unmasked.items()}, cache


def score_grow_gradient(net, layer, batch_x, batch_y, unit_grads=None):
    """Mean |dL/dz_j| over the batch for inactive units, as if they were unmasked."""
    if unit_grads is None:
        unit_grads, _ = unmasked_unit_gradients(net, batch_x, batch_y)
    cand = _candidates(net, layer)
    return cand, unit_grads[layer][cand]


def score_prune_magnitude(net, layer):
    """Mean absolute incoming weight per active unit (rows for linear, filters for conv)."""
    W = net.params[f"{layer}.W"]
    mag = np.abs(W).reshape(W.shape[0], -1).mean(axis=1)
    active = np.flatnonzero(net.masks[layer])
    return active, mag[active]


def gradmax_select(net, layer, batch_x, batch_y, n, unit_grads=None):
    if n == 0:
        return np.zeros(0, dtype=int)
    ids, scores = score_grow_gradient(net, layer, batch_x, batch_y, unit_grads)
    return top_k(ids, scores, n)


# --------------------------------------------------------------------- quotas

def grow_quota(active, target, t, total_cycles, width):
    if active > target:
        raise ConfigError(f"grow quota: active {active} already above target {target}")
    return edit_quota(active, target, t, total_cycles, width - active)


def prune_quota(active, target, t, total_cycles):
    if active < target:
        raise ConfigError(f"prune quota: active {active} already below target {target}")
    return edit_quota(active, target, t, total_cycles, active)


# ---------------------------------------------------------------------- grow

def seed_masks(net, plan, fraction, rng):
    """Random sparse seed masks for Grow: round(fraction * d) units, never above the target."""
    for layer in net.masked_layers:
        d = net.layers[layer].out_dim
        n0 = int(min(max(1, round(fraction * d)), plan.unit_targets[layer]))
        mask = np.zeros(d, dtype=bool)
        mask[rng.choice(d, size=n0, replace=False)] = True
        net.masks[layer] = mask
    return net


def rank_donors(net, layer, rates):
    """Active units ordered by activation rate (descending, lowest index on ties)."""
    active = np.flatnonzero(net.masks[layer])
    if active.size == 0:
        raise StructuralEditError(f"layer {layer} has no active donor units")
    order = np.lexsort((active, -np.asarray(rates)[active]))
    return active[order]


def _fresh_outgoing(net, layer, units, rng):
    consumer = net.consumer(layer)
    W = net.params[f"{consumer}.W"]
    W[:, units] = kaiming_uniform_init((W.shape[0], len(units)), net.fan_in(consumer), rng)


def _fresh_incoming(net, layer, units, rng):
    fan_in = net.fan_in(layer)
    W, b = net.params[f"{layer}.W"], net.params[f"{layer}.b"]
    W[units] = kaiming_uniform_init((len(units),) + W.shape[1:], fan_in, rng)
    b[units] = bias_uniform_init(len(units), fan_in, rng)


def grow_step(net, plan, t, batch, scorer="activation", init_policy="fresh-kaiming",
              tau=0.05, rng=None, noise_eps=1e-3):
    """Activate the top-scoring inactive units of every masked layer.

    ``batch`` is ``(x, y)``; labels are only needed by the gradient scorers.
    Returns one EditEvent per layer that received units. Masks are edited
    in place and parameters are never rewound.
    """
    if scorer not in SCORERS:
        raise ConfigError(f"unknown grow scorer {scorer!r}")
    if init_policy not in INIT_POLICIES:
        raise ConfigError(f"unknown init policy {init_policy!r}")
    rng = rng if rng is not None else np.random.default_rng(net.rng_seed + t)
    x, y = batch
    if scorer == "activation":
        _, cache = forward(net, x)
        unit_grads = None
    else:
        unit_grads, cache = unmasked_unit_gradients(net, x, y)

    events = []
    for layer in net.masked_layers:
        d = net.layers[layer].out_dim
        a = int(net.masks[layer].sum())
        n = grow_quota(a, plan.unit_targets[layer], t, plan.cycles, d)
        if n == 0:
            continue
        if scorer == "activation":
            ids, scores = score_grow_activation(net, layer, x, tau, cache)
        else:
            ids, scores = score_grow_gradient(net, layer, x, y, unit_grads)
        if n > ids.size:
            raise StructuralEditError(f"grow quota {n} exceeds {ids.size} candidates in layer {layer}")
        chosen = top_k(ids, scores, n)
        rates = activation_rate(cache.h(layer), tau)
        detail = {"scorer": scorer, "init_policy": init_policy, "quota": n,
                  "active_before": a, "target": plan.unit_targets[layer]}
        if init_policy == "net2wider":
            donors = _donor_sequence(rank_donors(net, layer, rates), len(chosen))
            _duplicate(net, layer, chosen, donors, noise_eps, rng)
            detail["donors"] = [int(k) for k in donors]
        else:
            apply_mask_edit(net, layer, chosen, "activate")
            # masked slices never receive gradient, so the scored incoming
            # weights are still untouched init draws; "fresh-full" redraws them anyway
            if init_policy == "fresh-full":
                _fresh_incoming(net, layer, chosen, rng)
            if init_policy in ("fresh-kaiming", "fresh-full"):
                _fresh_outgoing(net, layer, chosen, rng)
        score_of = dict(zip(ids.tolist(), scores.tolist()))
        events.append(EditEvent(t, layer, "grow", chosen.tolist(), [score_of[u] for u in chosen], detail))
    return events


# ---------------------------------------------------------------------- prune

def prune_step(net, plan, t, rewind=None):
    """Deactivate the lowest-magnitude active units of every masked layer.

    With ``rewind`` the surviving slices are reset to the snapshot afterwards.
    """
    events = []
    for layer in net.masked_layers:
        a = int(net.masks[layer].sum())
        k = prune_quota(a, plan.unit_targets[layer], t, plan.cycles)
        if k == 0:
            continue
        ids, scores = score_prune_magnitude(net, layer)
        if k > ids.size:
            raise StructuralEditError(f"prune quota {k} exceeds {ids.size} active units in layer {layer}")
        chosen = top_k(ids, scores, k, largest=False)
        apply_mask_edit(net, layer, chosen, "deactivate")
        score_of = dict(zip(ids.tolist(), scores.tolist()))
        detail = {"scorer": "magnitude", "quota": k, "active_before": a,
                  "target": plan.unit_targets[layer], "rewind": rewind is not None}
        events.append(EditEvent(t, layer, "prune", chosen.tolist(), [score_of[u] for u in chosen], detail))
    if rewind is not None:
        rewind_surviving(net, rewind)
    return events


def rewound_slices(net):
    """(param key, index) pairs covering surviving rows and the consumer's surviving input columns."""
    out = []
    for layer in net.masked_layers:
        surv = np.flatnonzero(net.masks[layer])
        consumer = net.consumer(layer)
        out.append((f"{layer}.W", (surv,)))
        out.append((f"{layer}.b", (surv,)))
        out.append((f"{consumer}.W", (slice(None), surv)))
    return out


def rewind_surviving(net, snapshot):
    for key, index in rewound_slices(net):
        net.params[key][index] = snapshot.params[key][index]
    return net


# ------------------------------------------------------------------ Net2Wider

def _donor_sequence(ranked, n):
    return np.array([ranked[i % ranked.size] for i in range(n)], dtype=int)


def _duplicate(net, layer, newborns, donors, noise_eps, rng):
    consumer = net.consumer(layer)
    W, b = net.params[f"{layer}.W"], net.params[f"{layer}.b"]
    C = net.params[f"{consumer}.W"]
    for j, k in zip(newborns, donors):
        apply_mask_edit(net, layer, [j], "activate")
        W[j] = W[k]
        if noise_eps > 0:
            W[j] += rng.uniform(-noise_eps, noise_eps, size=W.shape[1])
        b[j] = b[k]
        C[:, k] *= 0.5
        C[:, j] = C[:, k]


def net2wider_insert(net, layer, n_new, batch_x=None, tau=0.05, noise_eps=1e-3, rng=None,
                     unit_ids=None, cycle=0):
    """Duplicate incumbent units into ``n_new`` inactive slots.

    Donors are the active units with the highest activation rate on
    ``batch_x`` (reused cyclically when ``n_new`` exceeds the active count).
    Without a batch, donors are taken in index order.
    """
    inactive = _candidates(net, layer)
    if n_new > inactive.size:
        raise StructuralEditError(f"cannot insert {n_new} units; only {inactive.size} inactive")
    newborns = np.asarray(unit_ids if unit_ids is not None else inactive[:n_new], dtype=int)
    if batch_x is not None:
        _, cache = forward(net, batch_x)
        rates = activation_rate(cache.h(layer), tau)
    else:
        rates = np.zeros(net.layers[layer].out_dim)
    donors = _donor_sequence(rank_donors(net, layer, rates), len(newborns))
    rng = rng if rng is not None else np.random.default_rng(net.rng_seed)
    _duplicate(net, layer, newborns, donors, noise_eps, rng)
    return EditEvent(cycle, layer, "grow", newborns.tolist(), [float(rates[k]) for k in donors],
                     {"init_policy": "net2wider", "donors": donors.tolist(), "noise_eps": noise_eps})
