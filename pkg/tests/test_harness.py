import json

import numpy as np
import pytest

from structplast.config import build_config
from structplast.errors import ConfigError
from structplast.harness import (build_stream, load_events, load_masks, replay_events, run_cycle_and_ticket,
                                 run_cycle_protocol, run_stress_test, run_winning_ticket, stress_summary,
                                 wt_seed)
from structplast.metrics import read_csv

from oracles import quota_schedule

BASE = {"dataset": "synthetic", "train_subset": 300, "test_subset": 100, "cycles": 5, "epochs_per_cycle": 1,
        "batch_size": 64, "diag_batch": 64}


def cfg(**kw):
    return build_config({**BASE, **kw})


def test_dense_five_checkpoints_no_events():
    log = run_cycle_protocol(cfg())
    assert len(log.checkpoints) == 5 and log.events == []
    assert all(c.active_counts == {0: 256, 1: 256} for c in log.checkpoints)
    assert log.status == "ok"
    assert 0.0 <= log.summary()["acc"] <= 1.0


def test_grow_counts_follow_quota_schedule():
    log = run_cycle_protocol(cfg(method="grow", compactness=0.5))
    expect = quota_schedule(26, 128, 5, 256)
    for l in (0, 1):
        assert [c.active_counts[l] for c in log.checkpoints] == expect
    assert expect[-1] == 128
    assert {ev.action for ev in log.events} == {"grow"}
    # nested active sets
    masks = {l: np.zeros(256, bool) for l in (0, 1)}
    for l, m in log.initial_masks.items():
        masks[l] = m.copy()
    for ev in log.events:
        assert not masks[ev.layer][ev.unit_ids].any()
        masks[ev.layer][ev.unit_ids] = True


def test_prune_counts_follow_quota_schedule():
    log = run_cycle_protocol(cfg(method="prune", compactness=0.5))
    expect = quota_schedule(256, 128, 5, 256, grow=False)
    for l in (0, 1):
        assert [c.active_counts[l] for c in log.checkpoints] == expect
    assert all(ev.detail["rewind"] for ev in log.events)


def test_prune_late_rewind_records_skip():
    log = run_cycle_protocol(cfg(method="prune", compactness=0.5, rewind_epoch=2))
    first = [ev for ev in log.events if ev.cycle == 1]
    assert all(ev.detail.get("rewind_skipped") for ev in first)
    assert not any(ev.detail.get("rewind_skipped") for ev in log.events if ev.cycle >= 3)


def test_events_replay_to_final_mask(tmp_path):
    c = cfg(method="grow", compactness=0.3)
    log = run_cycle_protocol(c, tmp_path)
    d = tmp_path / log.run_id
    rebuilt = replay_events(load_masks(d, "initial"), load_events(d))
    final = load_masks(d)
    assert all(np.array_equal(rebuilt[l], final[l]) for l in final)


def test_saved_files_and_schema(tmp_path):
    log = run_cycle_protocol(cfg(method="prune", compactness=0.4), tmp_path)
    d = tmp_path / log.run_id
    meta = json.loads((d / "config.json").read_text())
    assert meta["schema"] == "1" and meta["config"]["method"] == "prune"
    rows = read_csv(d / "metrics.csv")
    assert len(rows) == 5 and rows[0]["phase"] == "cycle"
    coh = read_csv(d / "cohorts.csv")
    assert {r["timepoint"] for r in coh} == {"Exit", "Post", "End"}
    assert {r["cohort"] for r in coh} == {"kept", "pruned"}
    assert len(load_events(d)) == len(log.events)


def test_grow_cohort_timepoints():
    log = run_cycle_protocol(cfg(method="grow", compactness=0.5, epochs_per_cycle=2))
    ages = {s.age for s in log.cohorts if s.timepoint == "Post"}
    assert ages == {0, 1, 2}
    tps = {s.timepoint for s in log.cohorts}
    assert tps == {"Post", "Exit", "End"}
    s = log.summary()
    assert np.isfinite(s["birth_logparity_act"])


def test_ticket_all_ones_equals_dense_run():
    c = cfg()
    stream = build_stream(c)
    dense = run_cycle_protocol(c, init_seed=wt_seed(c.seed), stream=stream)
    masks = {l: np.ones(256, bool) for l in (0, 1)}
    wt = run_winning_ticket(c, masks, stream=stream)
    assert [r.cum_acc for r in wt.checkpoints] == [r.cum_acc for r in dense.checkpoints]
    assert wt.online == dense.online


def test_ticket_mask_fixed_and_delta():
    c = cfg(method="grow", compactness=0.5)
    cyc, wt = run_cycle_and_ticket(c)
    assert wt.events == []
    assert all(r.active_counts == {0: 128, 1: 128} for r in wt.checkpoints)
    assert wt.counters["delta_wt_c"] == pytest.approx(wt.trajectory[-1] - cyc.trajectory[-1])
    assert wt.paired_with == cyc.run_id


def test_ticket_rejects_bad_masks():
    with pytest.raises(ConfigError):
        run_winning_ticket(cfg(), {0: np.ones(10, bool), 1: np.ones(256, bool)})
    with pytest.raises(ConfigError):
        run_winning_ticket(cfg(), {0: np.ones(256, bool)})


def test_runs_are_deterministic():
    c = cfg(method="grow", compactness=0.4)
    a, b = run_cycle_protocol(c), run_cycle_protocol(c)
    assert [r.cum_acc for r in a.checkpoints] == [r.cum_acc for r in b.checkpoints]
    assert [e.unit_ids for e in a.events] == [e.unit_ids for e in b.events]


def test_interventions_run():
    for extra in ({"optimizer": {"kind": "adam", "lr": 1e-3},
                   "interventions": {"two_speed": {"window": 5}, "moment_transplant": True}},
                  {"interventions": {"net2wider": True, "rsl": True}},
                  {"interventions": {"gradmax": True}}):
        log = run_cycle_protocol(cfg(method="grow", compactness=0.5, cycles=2, **extra))
        assert log.status == "ok" and log.checkpoints[-1].active_counts == {0: 128, 1: 128}
    log = run_cycle_protocol(cfg(method="grow", compactness=0.5, cycles=2, optimizer={"kind": "adam"},
                                 interventions={"moment_transplant": True}))
    assert all("moment_donor" in ev.detail for ev in log.events)


def test_split_stream_with_replay_and_edits():
    log = run_cycle_protocol(cfg(method="prune", compactness=0.5, stream="split", task_epochs=1))
    assert len(log.checkpoints) == 5
    assert [len(c.per_task_acc) for c in log.checkpoints] == [1, 2, 3, 4, 5]
    # 256 -> 128 is already met after cycle 4, so cycle 5 edits nothing
    assert quota_schedule(256, 128, 5, 256, grow=False)[3] == 128
    assert [ev.cycle for ev in log.events if ev.layer == 0] == [1, 2, 3, 4]


def test_continual_edit_placement():
    log = run_cycle_protocol(cfg(method="grow", compactness=0.5, stream="permuted", n_tasks=10,
                                 subset_size=100, batch_size=16, cycles=5))
    # edits sit at tasks 0, 2, 4, 6, 8 (one epoch each); the 26 -> 128 quota is spent by cycle 4
    assert quota_schedule(26, 128, 5, 256)[3] == 128
    epochs = sorted({ev.detail["epoch"] for ev in log.events})
    assert epochs == [0, 2, 4, 6]
    with pytest.raises(ConfigError):
        run_cycle_protocol(cfg(method="grow", compactness=0.5, stream="permuted", n_tasks=3,
                               subset_size=100, cycles=5))


def test_stress_test_epochs_per_cycle(tmp_path):
    logs = run_stress_test(cfg(method="grow", compactness=0.5), (2, 4), horizon=4, out_dir=tmp_path)
    assert [len(logs[K].checkpoints) for K in (2, 4)] == [2, 4]
    assert logs[2].checkpoints[-1].epoch == logs[4].checkpoints[-1].epoch == 4
    assert (tmp_path / f"{logs[4].run_id}").name.endswith("-K4")
    rows = stress_summary(logs)
    assert [r["K"] for r in rows] == [2, 4] and 0 in rows[0]["catchup"]
    with pytest.raises(ConfigError):
        run_stress_test(cfg(method="grow", compactness=0.5), (3,), horizon=4)
