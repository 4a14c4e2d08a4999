"""Experiment protocols: structural-edit cycles, winning-ticket retraining, grow-cycle stress test.

A run is a sequence of training segments. For the IID stream each segment is
one cycle of ``epochs_per_cycle`` epochs over the same data; for continual
streams each segment is one task. Structural edits happen at the start of a
segment and a checkpoint is taken at its end, before the next edit.
"""

from __future__ import annotations

import functools
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .budget import plan_targets
from .config import RunConfig
from .errors import ConfigError
from .metrics import (COHORT_COLUMNS, METRICS_COLUMNS, acc_final, catchup_series,
                      cum_acc, early_task_taa, parity_from_snapshots, snapshot_cohorts, taa, taoa,
                      ticket_cycle_delta, unit_statistics, write_csv)
from .nn import MaskedNetwork, RSLParams, accuracy, backward, forward, softmax_xent
from .optim import OptimizerState, TwoSpeed, cosine_lr, moment_transplant
from .structural import RewindSnapshot, grow_step, prune_step, rewound_slices, seed_masks

WT_SEED_XOR = 0x5EED7C1C
NORMALIZATION = {"mnist": (0.1307, 0.3081), "fashion": (0.2860, 0.3530), "cifar10": (0.4734, 0.2516),
                 "cifar100": (0.4782, 0.2682), "synthetic": (0.5, 0.5)}
SUBSET_SEED = 12345  # reduced-data subsets are shared by every run seed


def wt_seed(seed):
    return seed ^ WT_SEED_XOR


# ------------------------------------------------------------------- records

@dataclass
class CheckpointRecord:
    index: int
    task: int
    epoch: int
    per_task_acc: list
    cum_acc: float
    active_counts: dict
    lr: float
    train_loss: float

    def row(self, run_id, phase):
        return {"run_id": run_id, "phase": phase, "checkpoint": self.index, "task": self.task,
                "epoch": self.epoch, "cum_acc": self.cum_acc,
                "per_task_acc": json.dumps([round(a, 6) for a in self.per_task_acc]),
                "active_counts": json.dumps({str(k): v for k, v in self.active_counts.items()}),
                "lr": self.lr, "train_loss": self.train_loss}


@dataclass
class RunLog:
    run_id: str
    config: dict
    phase: str = "cycle"
    plan: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    events: list = field(default_factory=list)
    cohorts: list = field(default_factory=list)
    online: list = field(default_factory=list)  # per task: list of per-batch accuracies
    initial_masks: dict = field(default_factory=dict)
    final_masks: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    paired_with: str = ""
    status: str = "running"

    @property
    def trajectory(self):
        return [c.cum_acc for c in self.checkpoints if not math.isnan(c.cum_acc)]

    def summary(self, early_window=0.1):
        s = {"run_id": self.run_id, "phase": self.phase, "status": self.status,
             "checkpoints": len(self.checkpoints), "events": len(self.events)}
        traj = self.trajectory
        if traj:
            s["acc"] = acc_final(traj)
            s["taa"] = taa(traj)
        flat = [a for task in self.online for a in task]
        if flat:
            s["taoa"] = taoa(flat)
            s["early_taa"] = early_task_taa([t for t in self.online if t], early_window)
        if self.cohorts and any(c.cohort == "newborn" for c in self.cohorts):
            par = parity_from_snapshots(self.cohorts)
            s["birth_logparity_act"] = par.mean("logR_act")
            s["birth_logparity_grad"] = par.mean("logR_grad")
            s["parity_aggregation"] = par.aggregation
        if "delta_wt_c" in self.counters:
            s["delta_wt_c"] = self.counters["delta_wt_c"]
        s.update({k: v for k, v in self.counters.items() if k in ("steps", "wall_time_s")})
        return s

    def save(self, out_dir):
        d = Path(out_dir) / self.run_id
        d.mkdir(parents=True, exist_ok=True)
        early = self.config.get("early_window", 0.1)
        meta = {"schema": "1", "run_id": self.run_id, "phase": self.phase, "paired_with": self.paired_with,
                "config": self.config, "plan": self.plan, "summary": self.summary(early),
                "counters": self.counters, "online_acc": self.online}
        (d / "config.json").write_text(json.dumps(meta, indent=1, default=_json_default))
        write_csv(d / "metrics.csv", METRICS_COLUMNS, [c.row(self.run_id, self.phase) for c in self.checkpoints])
        with open(d / "events.jsonl", "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev.to_dict(), default=_json_default) + "\n")
        write_csv(d / "cohorts.csv", COHORT_COLUMNS, [{"run_id": self.run_id, **c.row()} for c in self.cohorts])
        masks = {"schema": "1",
                 "initial": {str(k): np.flatnonzero(v).tolist() for k, v in self.initial_masks.items()},
                 "final": {str(k): np.flatnonzero(v).tolist() for k, v in self.final_masks.items()},
                 "widths": {str(k): int(v.size) for k, v in self.final_masks.items()}}
        (d / "mask_final.json").write_text(json.dumps(masks))
        return d


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load_masks(run_dir, which="final"):
    raw = json.loads((Path(run_dir) / "mask_final.json").read_text())
    out = {}
    for k, ids in raw[which].items():
        m = np.zeros(raw["widths"][k], dtype=bool)
        m[ids] = True
        out[int(k)] = m
    return out


def load_events(run_dir):
    path = Path(run_dir) / "events.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def replay_events(initial_masks, events):
    """Re-apply logged edits in order; returns the reconstructed masks."""
    masks = {k: v.copy() for k, v in initial_masks.items()}
    for ev in events:
        ev = ev if isinstance(ev, dict) else ev.to_dict()
        m = masks[ev["layer"]]
        ids = np.asarray(ev["unit_ids"], dtype=int)
        want = ev["action"] == "grow"
        if np.any(m[ids] == want):
            raise ConfigError(f"event {ev['event_id']} does not apply to the replayed mask")
        m[ids] = want
    return masks


# ---------------------------------------------------------------------- data

@functools.lru_cache(maxsize=8)
def _load_datasets(dataset, data_dir, train_subset, test_subset, normalize):
    if dataset == "synthetic":
        train, test = D.synthetic_pair(600, 100, n_classes=10, shape=(784,), seed=SUBSET_SEED)
    elif dataset in ("mnist", "fashion"):
        root = Path(data_dir) if data_dir else D.default_data_dir()
        if root is None:
            raise ConfigError("MNIST files not found; set data_dir or STRUCTPLAST_DATA")
        train, test = D.load_mnist(root, dataset)
    else:
        if not data_dir:
            raise ConfigError(f"{dataset} needs data_dir pointing at the binary batches")
        root = Path(data_dir)
        lb, C = (1, 10) if dataset == "cifar10" else (2, 100)
        trains = sorted(root.glob("data_batch_*.bin")) or [root / "train.bin"]
        train = D.load_cifar_binary(trains, lb, "train", dataset, C)
        test = D.load_cifar_binary([root / ("test_batch.bin" if lb == 1 else "test.bin")], lb, "test", dataset, C)
    rng = np.random.default_rng(SUBSET_SEED)
    if train_subset and train_subset < len(train):
        idx = np.sort(rng.choice(len(train), size=train_subset, replace=False))
        train = D.Dataset(train.images[idx], train.labels[idx], "train", train.n_classes, train.name)
    if test_subset and test_subset < len(test):
        idx = np.sort(rng.choice(len(test), size=test_subset, replace=False))
        test = D.Dataset(test.images[idx], test.labels[idx], "test", test.n_classes, test.name)
    if normalize:
        mean, std = NORMALIZATION[dataset]
        train, test = train.normalized(mean, std), test.normalized(mean, std)
    for ds in (train, test):
        ds.images.setflags(write=False)
    return train, test


def load_datasets(cfg):
    return _load_datasets(cfg.dataset, cfg.data_dir, cfg.train_subset, cfg.test_subset, cfg.normalize)


def build_stream(cfg, train=None, test=None):
    if train is None:
        train, test = load_datasets(cfg)
    B = cfg.batch_size
    kind = cfg.stream
    if kind == "iid":
        return D.make_iid_stream(train, test, cfg.total_epochs, B)
    if kind == "split":
        return D.make_split_stream(train, test, cfg.n_tasks or 5, rng=cfg.seed,
                                   epochs=cfg.task_epochs or cfg.epochs_per_cycle, batch_size=B, replay=cfg.replay)
    if kind == "permuted":
        return D.make_permuted_stream(train, cfg.n_tasks or 500, cfg.subset_size or 10000, rng=cfg.seed,
                                      test=test, epochs=cfg.task_epochs or 1, batch_size=B)
    if kind == "random_label":
        return D.make_random_label_stream(train, cfg.n_tasks or 50, cfg.subset_size or 1200, rng=cfg.seed,
                                          epochs=cfg.task_epochs or 400, batch_size=B)
    if kind == "hard_easy":
        return D.make_hard_easy_stream(train, rng=cfg.seed, test=test, n_pairs=(cfg.n_tasks or 30) // 2,
                                       steps=cfg.task_steps or 780, batch_size=B)
    return D.make_binary_pair_stream(train, cfg.n_tasks or train.n_classes // 2, cfg.subset_size or 1200,
                                     rng=cfg.seed, test=test, epochs=cfg.task_epochs or 10, batch_size=B)


def build_network(cfg, stream, init_seed):
    rsl = None
    act = "relu"
    if "rsl" in cfg.interventions:
        r = cfg.interventions["rsl"]
        rsl = RSLParams(r["c"], r["p"], r["lower"], r["upper"])
        act = "rsl"
    shape = stream.train.sample_shape
    if cfg.arch == "mlp":
        return MaskedNetwork.mlp(int(np.prod(shape)), tuple(cfg.hidden), stream.n_outputs, act, init_seed, rsl)
    if len(shape) != 3:
        raise ConfigError("convnet needs image inputs shaped (C, H, W)")
    return MaskedNetwork.convnet(stream.n_outputs, shape[0], shape[1], activation=act, seed=init_seed, rsl=rsl)


def _segments(cfg, stream, with_edits):
    """List of (task index, epochs, steps, edit cycle or None)."""
    if stream.kind == "iid":
        return [(0, cfg.epochs_per_cycle, None, t if with_edits else None) for t in range(1, cfg.cycles + 1)]
    K = len(stream.tasks)
    if with_edits and K < cfg.cycles:
        raise ConfigError(f"stream has {K} tasks, fewer than the {cfg.cycles} edit cycles")
    edit_at = {(t - 1) * K // cfg.cycles: t for t in range(1, cfg.cycles + 1)} if with_edits else {}
    return [(k, task.epochs if task.steps is None else None, task.steps, edit_at.get(k))
            for k, task in enumerate(stream.tasks)]


# ---------------------------------------------------------------------- runner

class _Runner:
    def __init__(self, cfg, stream, net, log, edits):
        self.cfg, self.stream, self.net, self.log = cfg, stream, net, log
        self.edits = edits and cfg.method != "dense"
        seed = cfg.seed
        self.data_rng = np.random.default_rng([seed, 1])
        self.diag_rng = np.random.default_rng([seed, 2])
        self.act_rng = np.random.default_rng([seed, 3])
        self.edit_rng = np.random.default_rng([seed, 4])
        self.replay_rng = np.random.default_rng([seed, 5])
        o = cfg.optimizer
        self.opt = OptimizerState(o["kind"], o["lr"], o["beta1"], o["beta2"], o["eps"])
        self.two_speed = None
        if self.edits and "two_speed" in cfg.interventions:
            ts = cfg.interventions["two_speed"]
            self.two_speed = TwoSpeed(ts["r"], ts["window"])
        self.buffer = None
        if stream.kind == "split" and stream.meta.get("replay") and cfg.replay:
            self.buffer = D.ReplayBuffer(cfg.replay_per_class, cfg.replay_total)
        self.segments = _segments(cfg, stream, self.edits)
        self.total_units = sum(e if e is not None else 1 for _, e, _, _ in self.segments)
        self.unit = 0
        self.steps = 0
        self.rewind = None
        self.live = []  # grow events tracked epoch by epoch: (event, cohorts, diag batch, birth epoch)
        self.tracked = []  # every event: (event, cohorts, diag batch), re-measured at the end

    # -- helpers
    def lr(self):
        if self.cfg.optimizer["schedule"] == "constant":
            return self.cfg.optimizer["lr"]
        return cosine_lr(self.cfg.optimizer["lr"], min(self.unit, self.total_units), self.total_units)

    def prep(self, x):
        if self.cfg.arch == "mlp" and x.ndim > 2:
            return x.reshape(len(x), -1)
        return x

    def sample_batch(self, x, y, rng, n):
        idx = np.sort(rng.choice(len(y), size=min(n, len(y)), replace=False))
        return x[idx], y[idx]

    def train_step(self, bx, by, lr):
        logits, cache = forward(self.net, bx, mode="train", rng=self.act_rng)
        loss, g = softmax_xent(logits, by)
        acc = float(np.mean(logits.argmax(axis=1) == by))
        grads = backward(self.net, cache, g).params

        def base():
            self.opt.apply(self.net.params, grads, lr)

        if self.two_speed is not None:
            self.two_speed.step(self.net.params, base)
        else:
            base()
        self.steps += 1
        return loss, acc

    # -- diagnostics
    def _snap(self, event, cohorts, batch, timepoint, age=None):
        if not self.cfg.diagnostics:
            return
        st = unit_statistics(self.net, batch[0], batch[1], self.cfg.tau)
        self.log.cohorts.extend(snapshot_cohorts(event, cohorts, st, timepoint, self.cfg.tau, age))

    # -- edits
    def edit(self, t, k):
        cfg, net = self.cfg, self.net
        x, y = self.stream.train_data(k)
        x = self.prep(x)
        score_batch = self.sample_batch(x, y, self.edit_rng, cfg.diag_batch)
        diag_batch = self.sample_batch(x, y, self.diag_rng, cfg.diag_batch)
        self._close_live("Exit")
        before = {l: m.copy() for l, m in net.masks.items()}
        if cfg.method == "grow":
            ivs = cfg.interventions
            scorer = "gradmax" if "gradmax" in ivs else cfg.scorer
            init = "net2wider" if "net2wider" in ivs else cfg.init_policy
            eps = ivs.get("net2wider", {}).get("noise_eps", 1e-3)
            events = grow_step(net, self.plan, t, score_batch, scorer, init, cfg.tau, self.edit_rng, eps)
            st = unit_statistics(net, *diag_batch, cfg.tau) if ("moment_transplant" in ivs) else None
            for ev in events:
                ev.detail["epoch"] = self.unit
                inc = np.flatnonzero(before[ev.layer])
                cohorts = {"newborn": list(ev.unit_ids), "incumbent": inc.tolist()}
                if self.two_speed is not None:
                    self.two_speed.register(ev.event_id, net, ev.layer, ev.unit_ids)
                if st is not None and inc.size:
                    acts = st[ev.layer]["act"][inc]
                    donor = int(inc[np.lexsort((inc, -acts))[0]])
                    moment_transplant(self.opt, net, ev.layer, {u: donor for u in ev.unit_ids})
                    ev.detail["moment_donor"] = donor
                self._snap(ev, cohorts, diag_batch, "Post", age=0)
                self.live.append((ev, cohorts, diag_batch, self.unit))
                self.tracked.append((ev, cohorts, diag_batch))
                self.log.events.append(ev)
        else:
            exit_stats = unit_statistics(net, *diag_batch, cfg.tau) if cfg.diagnostics else None
            rewind = self.rewind if cfg.imp_rewind else None
            events = prune_step(net, self.plan, t, rewind)
            if rewind is not None:
                for key, index in rewound_slices(net):
                    self.opt.zero_slices(key, index)
            for ev in events:
                ev.detail["epoch"] = self.unit
                if cfg.imp_rewind and rewind is None:
                    ev.detail["rewind_skipped"] = "snapshot epoch not reached"
                kept = np.flatnonzero(net.masks[ev.layer]).tolist()
                cohorts = {"kept": kept, "pruned": list(ev.unit_ids)}
                if exit_stats is not None:
                    self.log.cohorts.extend(snapshot_cohorts(ev, cohorts, exit_stats, "Exit", cfg.tau))
                self._snap(ev, {"kept": kept}, diag_batch, "Post", age=0)
                self.tracked.append((ev, {"kept": kept}, diag_batch))
                self.log.events.append(ev)

    def _close_live(self, timepoint):
        for ev, cohorts, batch, _ in self.live:
            self._snap(ev, cohorts, batch, timepoint)
        self.live = []

    def _age_snapshots(self):
        for ev, cohorts, batch, born in self.live:
            self._snap(ev, cohorts, batch, "Post", age=self.unit - born)

    # -- main loop
    def run(self, plan):
        cfg, net, log = self.cfg, self.net, self.log
        self.plan = plan
        if cfg.method == "prune" and cfg.imp_rewind and cfg.rewind_epoch == 0:
            self.rewind = RewindSnapshot.take(net, 0)
        prev_task = None
        loss = float("nan")
        for idx, (k, epochs, steps, cycle) in enumerate(self.segments):
            if prev_task is not None and k != prev_task and self.buffer is not None:
                px, py = self.stream.train_data(prev_task)
                self.buffer.add_task(self.prep(px), py)
            if cycle is not None:
                self.edit(cycle, k)
            x, y = self.stream.train_data(k)
            x = self.prep(x)
            task = self.stream.tasks[k]
            if len(log.online) <= k:
                log.online.extend([] for _ in range(k + 1 - len(log.online)))
            online = log.online[k]
            B = task.batch_size
            r = D.replay_count(B, cfg.replay_fraction, self.buffer)
            chunk = B - r
            if steps is None:
                for _ in range(epochs):
                    lr = self.lr()
                    order = self.data_rng.permutation(len(y))
                    for s in range(0, len(y), chunk):
                        bi = order[s:s + chunk]
                        bx, by = D.replay_mix(self.buffer, x[bi], y[bi], cfg.replay_fraction,
                                              self.replay_rng, batch_size=B) if r else (x[bi], y[bi])
                        loss, acc = self.train_step(bx, by, lr)
                        online.append(acc)
                    self.unit += 1
                    self._after_unit()
            else:
                lr = self.lr()
                order, pos = self.data_rng.permutation(len(y)), 0
                for _ in range(steps):
                    if pos >= len(y):
                        order, pos = self.data_rng.permutation(len(y)), 0
                    bi = order[pos:pos + chunk]
                    pos += chunk
                    bx, by = D.replay_mix(self.buffer, x[bi], y[bi], cfg.replay_fraction,
                                          self.replay_rng, batch_size=B) if r else (x[bi], y[bi])
                    loss, acc = self.train_step(bx, by, lr)
                    online.append(acc)
                self.unit += 1
                self._after_unit()
            self.checkpoint(idx, k, loss)
            prev_task = k
        self._close_live("Exit")
        for ev, cohorts, batch in self.tracked:
            if ev.action == "prune":
                alive = self.net.masks[ev.layer]
                cohorts = {"kept": [u for u in cohorts["kept"] if alive[u]]}
            self._snap(ev, cohorts, batch, "End")
        log.final_masks = {l: m.copy() for l, m in net.masks.items()}

    def _after_unit(self):
        if self.rewind is None and self.cfg.method == "prune" and self.cfg.imp_rewind \
                and self.unit == self.cfg.rewind_epoch:
            self.rewind = RewindSnapshot.take(self.net, self.unit)
        if self.live:
            self._age_snapshots()

    def checkpoint(self, idx, k, loss):
        per_task = []
        for j in self.stream.eval_tasks(k):
            ev = self.stream.eval_data(j)
            if ev is not None:
                per_task.append(accuracy(self.net, self.prep(ev[0]), ev[1]))
        ca = cum_acc(per_task) if per_task else float("nan")
        self.log.checkpoints.append(CheckpointRecord(idx, k, self.unit, per_task, ca,
                                                     self.net.active_counts(), self.lr(), float(loss)))


def _run_id(cfg, phase, suffix=""):
    if cfg.run_id:
        return cfg.run_id + suffix
    return f"{cfg.method}-{cfg.stream}-{cfg.dataset}-c{round(cfg.compactness * 100)}-s{cfg.seed}" + \
        ("-wt" if phase == "ticket" else "") + suffix


def _execute(cfg, net, log, stream, edits, out_dir):
    t0 = time.perf_counter()
    plan = plan_targets(net, cfg.compactness, cfg.bias_schedule, cfg.cycles)
    log.plan = plan.to_dict()
    if edits and cfg.method == "grow":
        seed_masks(net, plan, cfg.seed_fraction, np.random.default_rng([cfg.seed, 6]))
    log.initial_masks = {l: m.copy() for l, m in net.masks.items()}
    runner = _Runner(cfg, stream, net, log, edits)
    try:
        runner.run(plan)
        log.status = "ok"
    except Exception as e:
        log.status = f"failed: {type(e).__name__}: {e}"
        log.final_masks = {l: m.copy() for l, m in net.masks.items()}
        raise
    finally:
        log.counters.update(steps=runner.steps, epochs=runner.unit,
                            wall_time_s=round(time.perf_counter() - t0, 3))
        if out_dir is not None:
            log.save(out_dir)
    return log


def run_cycle_protocol(cfg: RunConfig, out_dir=None, init_seed=None, stream=None):
    """Edit/train cycles for ``cfg.method``; returns the RunLog (written to ``out_dir`` if given)."""
    stream = stream or build_stream(cfg)
    net = build_network(cfg, stream, cfg.seed if init_seed is None else init_seed)
    log = RunLog(_run_id(cfg, "cycle"), cfg.to_dict(), "cycle")
    return _execute(cfg, net, log, stream, True, out_dir)


def run_winning_ticket(cfg: RunConfig, final_masks, cycle_log=None, out_dir=None, init_seed=None, stream=None):
    """Freeze ``final_masks``, reinitialize from a derived seed and retrain for the full horizon."""
    stream = stream or build_stream(cfg)
    net = build_network(cfg, stream, wt_seed(cfg.seed) if init_seed is None else init_seed)
    if set(final_masks) != set(net.masks):
        raise ConfigError(f"mask layers {sorted(final_masks)} do not match network {sorted(net.masks)}")
    for l, m in final_masks.items():
        m = np.asarray(m, dtype=bool)
        if m.shape != net.masks[l].shape:
            raise ConfigError(f"mask for layer {l} has shape {m.shape}, expected {net.masks[l].shape}")
        net.masks[l] = m.copy()
    log = RunLog(_run_id(cfg, "ticket"), cfg.to_dict(), "ticket")
    if cycle_log is not None:
        log.paired_with = cycle_log.run_id
    _execute(cfg, net, log, stream, False, out_dir)  # flushed here too if training faults
    if cycle_log is not None and cycle_log.trajectory and log.trajectory:
        log.counters["delta_wt_c"] = ticket_cycle_delta(acc_final(log.trajectory), acc_final(cycle_log.trajectory))
    if out_dir is not None:
        log.save(out_dir)
    return log


def run_cycle_and_ticket(cfg, out_dir=None):
    cycle = run_cycle_protocol(cfg, out_dir)
    wt = run_winning_ticket(cfg, cycle.final_masks, cycle, out_dir)
    return cycle, wt


def run_stress_test(cfg: RunConfig, k_values=(5, 10, 20), horizon=200, out_dir=None):
    """Grow runs with K cycles over a fixed ``horizon`` of epochs; returns {K: RunLog}."""
    if cfg.stream != "iid":
        raise ConfigError("the stress test uses the IID stream")
    out = {}
    for K in k_values:
        if horizon % K:
            raise ConfigError(f"horizon {horizon} is not divisible by K={K}")
        kcfg = cfg.with_overrides(cycles=K, epochs_per_cycle=horizon // K,
                                  run_id=f"{_run_id(cfg, 'cycle')}-K{K}")
        out[K] = run_cycle_protocol(kcfg, out_dir)
    return out


def stress_summary(logs):
    rows = []
    for K, log in sorted(logs.items()):
        s = log.summary()
        rows.append({"K": K, "cycle_taa": s.get("taa"), "cycle_acc": s.get("acc"),
                     "catchup": catchup_series(log.cohorts)})
    return rows
