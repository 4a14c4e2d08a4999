"""Fast invariant suite behind ``structplast selftest`` (no datasets needed)."""

from __future__ import annotations

import numpy as np

from .budget import BIAS_SCHEDULES, plan_targets
from .nn import MaskedNetwork, RSLParams, backward, forward, softmax_xent
from .structural import grow_quota, net2wider_insert, prune_quota


def _gradcheck(seed):
    rng = np.random.default_rng(seed)
    net = MaskedNetwork.mlp(4, (5, 3), 3, "rsl", seed, RSLParams(0.8, 1.0, 0.3, 0.6, mode="eval"))
    net.masks[0][1] = False
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, 6)

    def loss():
        return softmax_xent(forward(net, x)[0], y)[0]

    logits, cache = forward(net, x)
    g = backward(net, cache, softmax_xent(logits, y)[1]).params
    worst = 0.0
    for k, p in net.params.items():
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + 1e-6
            lp = loss()
            p[i] = old - 1e-6
            lm = loss()
            p[i] = old
            fd = (lp - lm) / 2e-6
            worst = max(worst, abs(fd - g[k][i]) / max(1e-8, abs(fd) + abs(g[k][i])))
    return worst < 1e-4, f"max rel err {worst:.2e}"


def _net2wider(seed):
    rng = np.random.default_rng(seed)
    net = MaskedNetwork.mlp(8, (6, 6), 4, seed=seed)
    for l in net.masked_layers:
        net.masks[l][3:] = False
    x = rng.standard_normal((32, 8))
    ref = forward(net, x)[0]
    worst = 0.0
    for l in net.masked_layers:
        for _ in range(3):
            net2wider_insert(net, l, 1, batch_x=x, noise_eps=0.0, rng=rng)
            worst = max(worst, float(np.abs(forward(net, x)[0] - ref).max()))
    return worst <= 1e-10, f"max |dlogit| {worst:.1e}"


def _quotas(seed):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        d = int(rng.integers(2, 400))
        T = int(rng.integers(1, 12))
        u = int(rng.integers(1, d + 1))
        a = min(max(1, round(0.1 * d)), u)
        b = d
        for t in range(1, T + 1):
            a += grow_quota(a, u, t, T, d)
            b -= prune_quota(b, u, t, T)
        if a != u or b != u:
            return False, f"d={d} T={T} u={u}: grow {a}, prune {b}"
    return True, "200 random schedules"


def _budget(_seed):
    for arch in ([(256, 785), (256, 257)], [(512, 4097), (512, 513), (256, 513)]):
        for c in (0.2, 0.3, 0.4, 0.5):
            for name in BIAS_SCHEDULES:
                plan = plan_targets(arch, c, name)
                w = sum(u * m for u, m in zip(plan.unit_targets.values(), plan.unit_mass.values()))
                if abs(w - plan.budget) > max(m for m in plan.unit_mass.values()) * len(arch):
                    return False, f"{name} c={c}: kept {w} vs budget {plan.budget:.0f}"
    return True, "all schedules within one unit per layer"


def run_selftest(seed=0):
    checks = [("gradient check (RSL MLP)", _gradcheck), ("Net2Wider preservation", _net2wider),
              ("quota schedules", _quotas), ("budget reconciliation", _budget)]
    out = []
    for name, fn in checks:
        ok, detail = fn(seed)
        out.append((name, bool(ok), detail))
    return out
