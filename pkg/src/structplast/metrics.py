"""Trajectory metrics, significance tests and cohort vitality diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigError
from .nn import backward, forward, softmax_xent
from .structural import activation_rate as _rates
from .structural import mean_abs

EPS = 1e-8
TIMEPOINTS = ("Post", "Exit", "End")
COHORTS = ("newborn", "incumbent", "kept", "pruned")


# ------------------------------------------------------------- trajectories

def cum_acc(per_task_acc):
    vals = list(per_task_acc)
    if not vals:
        raise ConfigError("cum_acc needs at least one task accuracy")
    return math.fsum(vals) / len(vals)


def taa(trajectory):
    vals = list(trajectory)
    if not vals:
        raise ConfigError("empty trajectory")
    return math.fsum(vals) / len(vals)


def acc_final(trajectory):
    vals = list(trajectory)
    if not vals:
        raise ConfigError("empty trajectory")
    return vals[-1]


def taoa(online_batch_accuracies):
    """Mean over every processed mini-batch (so longer tasks weigh more)."""
    vals = list(online_batch_accuracies)
    if not vals:
        raise ConfigError("no online batches")
    return math.fsum(vals) / len(vals)


def early_task_taa(per_task_online, window_fraction=0.1):
    if not (0 < window_fraction <= 1):
        raise ConfigError("window_fraction must lie in (0, 1]")
    means = []
    for seq in per_task_online:
        seq = list(seq)
        if not seq:
            continue
        n = max(1, math.ceil(window_fraction * len(seq)))
        means.append(math.fsum(seq[:n]) / n)
    if not means:
        raise ConfigError("no non-empty tasks")
    return math.fsum(means) / len(means)


def ticket_cycle_delta(final_wt, final_cycle):
    return final_wt - final_cycle


# ------------------------------------------------------------------- stats

def welch_ttest(a, b):
    """Welch two-sample t statistic, Satterthwaite df and two-sided p-value."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ConfigError("Welch test needs at least two values per sample")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    if va + vb == 0:
        if a.mean() == b.mean():
            return 0.0, float(a.size + b.size - 2), 1.0
        raise ConfigError("degenerate variance: both samples constant with different means")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / ((va ** 2 / (a.size - 1) if va else 0.0) + (vb ** 2 / (b.size - 1) if vb else 0.0))
    p = float(2.0 * stats.t.sf(abs(t), df))
    return float(t), float(df), min(1.0, p)


def _average_ranks(x):
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(xs, ys):
    rx, ry = _average_ranks(xs), _average_ranks(ys)
    if rx.size != ry.size or rx.size < 2:
        raise ConfigError("spearman needs two equal-length samples of size >= 2")
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0:
        return float("nan")
    return float(rx @ ry) / den


def mean_ci95(values):
    v = np.asarray(values, dtype=float)
    m = float(v.mean())
    if v.size < 2:
        return m, float("nan")
    return m, float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


# ---------------------------------------------------------------- cohorts

def activation_rate(post_activations, tau=0.05):
    a = np.asarray(post_activations, dtype=float)
    if a.size == 0:
        return float("nan")
    return float((a > tau).mean())


def grad_magnitude(pre_activation_grads):
    g = np.asarray(pre_activation_grads, dtype=float)
    if g.size == 0:
        return float("nan")
    return float(np.abs(g).mean())


def parity(a, b, eps=EPS):
    """R = a / (b + eps) and its log. A zero numerator gives R = 0 and log -inf."""
    r = a / (b + eps)
    with np.errstate(divide="ignore"):
        return float(r), float(np.log(r)) if r > 0 else float("-inf")


def survivor_stability(post_acts, end_acts, eps=EPS):
    """(additive, log) change of survivor activation: mean(post - end), ln(mean(post) / (mean(end) + eps))."""
    post = np.asarray(post_acts, dtype=float)
    end = np.asarray(end_acts, dtype=float)
    additive = float(np.mean(post - end))
    _, log_form = parity(float(post.mean()), float(end.mean()), eps)
    return additive, log_form


def unit_statistics(net, x, y, tau=0.05):
    """Per-unit activation rate (masked output) and mean |dL/dz| (masked backward) for every masked layer."""
    logits, cache = forward(net, x)
    _, g = softmax_xent(logits, y)
    grads = backward(net, cache, g)
    out = {}
    for layer in net.masked_layers:
        out[layer] = {"act": _rates(cache.h(layer), tau), "grad": mean_abs(grads.units[layer])}
    return out


@dataclass
class CohortSnapshot:
    event_id: str
    cycle: int
    layer: int
    timepoint: str
    cohort: str
    act: float
    grad: float
    n_units: int
    tau: float = 0.05
    age: int | None = None  # epochs since the event, for post-birth tracking

    def row(self):
        return {"event_id": self.event_id, "cycle": self.cycle, "layer": self.layer,
                "timepoint": self.timepoint, "age": "" if self.age is None else self.age,
                "cohort": self.cohort, "n_units": self.n_units, "act": self.act,
                "grad": self.grad, "tau": self.tau}


def cohort_means(stats_layer, units):
    units = np.asarray(list(units), dtype=int)
    if units.size == 0:
        return float("nan"), float("nan")
    return float(stats_layer["act"][units].mean()), float(stats_layer["grad"][units].mean())


def snapshot_cohorts(event, cohorts, unit_stats, timepoint, tau=0.05, age=None):
    """CohortSnapshots for one event: ``cohorts`` maps cohort name -> unit ids in event.layer."""
    st = unit_stats[event.layer]
    out = []
    for name, units in cohorts.items():
        a, g = cohort_means(st, units)
        out.append(CohortSnapshot(event.event_id, event.cycle, event.layer, timepoint, name,
                                  a, g, len(units), tau, age))
    return out


@dataclass
class ParitySeries:
    """Per-(cycle, layer) parity ratios and log-parities for act and grad."""

    numerator: str
    denominator: str
    rows: list = field(default_factory=list)
    aggregation: str = "per-layer then unweighted mean"

    def add(self, cycle, layer, a_num, a_den, g_num, g_den, timepoint="Post", age=None):
        r_a, d_a = parity(a_num, a_den)
        r_g, d_g = parity(g_num, g_den)
        self.rows.append({"cycle": cycle, "layer": layer, "timepoint": timepoint, "age": age,
                          "R_act": r_a, "logR_act": d_a, "R_grad": r_g, "logR_grad": d_g})

    def by_cycle(self, key="logR_grad"):
        out = {}
        for r in self.rows:
            out.setdefault(r["cycle"], []).append(r[key])
        return {c: float(np.mean(v)) for c, v in sorted(out.items())}

    def mean(self, key="logR_grad"):
        vals = list(self.by_cycle(key).values())
        return float(np.mean(vals)) if vals else float("nan")


def parity_from_snapshots(snapshots, numerator="newborn", denominator="incumbent", timepoint="Post"):
    cell = {}
    for s in snapshots:
        if s.timepoint != timepoint or s.age not in (None, 0):
            continue
        cell.setdefault((s.cycle, s.layer), {})[s.cohort] = s
    series = ParitySeries(numerator, denominator)
    for (cycle, layer), d in sorted(cell.items()):
        if numerator in d and denominator in d:
            n, m = d[numerator], d[denominator]
            series.add(cycle, layer, n.act, m.act, n.grad, m.grad, timepoint)
    return series


def catchup_series(snapshots, numerator="newborn", denominator="incumbent"):
    """Ratio of newborn to incumbent means at each post-birth age, averaged over events and layers.

    Returns ``{age: {"act": ratio, "grad": ratio, "n": count}}``.
    """
    cell = {}
    for s in snapshots:
        if s.age is None:
            continue
        cell.setdefault((s.event_id, s.age), {})[s.cohort] = s
    per_age = {}
    for (_, age), d in cell.items():
        if numerator in d and denominator in d:
            ra, _ = parity(d[numerator].act, d[denominator].act)
            rg, _ = parity(d[numerator].grad, d[denominator].grad)
            per_age.setdefault(age, []).append((ra, rg))
    return {age: {"act": float(np.mean([v[0] for v in vals])), "grad": float(np.mean([v[1] for v in vals])),
                  "n": len(vals)} for age, vals in sorted(per_age.items())}


# ----------------------------------------------------------------- emitters

METRICS_COLUMNS = ("schema", "run_id", "phase", "checkpoint", "task", "epoch", "cum_acc",
                   "per_task_acc", "active_counts", "lr", "train_loss")
COHORT_COLUMNS = ("schema", "run_id", "event_id", "cycle", "layer", "timepoint", "age", "cohort",
                  "n_units", "act", "grad", "tau")
SCHEMA_VERSION = "1"


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({"schema": SCHEMA_VERSION, **r})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
