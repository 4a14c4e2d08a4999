"""Post-hoc reports over saved run directories."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .metrics import (CohortSnapshot, catchup_series, mean_ci95, parity_from_snapshots, read_csv,
                      spearman_rho, survivor_stability, welch_ttest)


def load_cohorts(run_dir):
    rows = read_csv(Path(run_dir) / "cohorts.csv")
    out = []
    for r in rows:
        out.append(CohortSnapshot(r["event_id"], int(r["cycle"]), int(r["layer"]), r["timepoint"], r["cohort"],
                                  float(r["act"]), float(r["grad"]), int(r["n_units"]), float(r["tau"]),
                                  int(r["age"]) if r["age"] != "" else None))
    return out


def load_summary(run_dir):
    return json.loads((Path(run_dir) / "config.json").read_text())["summary"]


def survivor_report(snapshots):
    """Per prune event: survivor activation change from the pre-edit (Exit) state to Post."""
    cell = {}
    for s in snapshots:
        if s.cohort == "kept" and s.timepoint in ("Exit", "Post") and s.age in (None, 0):
            cell.setdefault(s.event_id, {})[s.timepoint] = s
    out = {}
    for ev, d in sorted(cell.items()):
        if "Exit" in d and "Post" in d:
            add, lg = survivor_stability([d["Post"].act], [d["Exit"].act])
            out[ev] = {"additive": add, "log": lg}
    return out


def run_report(run_dir, early_ages=(0, 1, 2)):
    snaps = load_cohorts(run_dir)
    summary = load_summary(run_dir)
    rep = {"run": str(run_dir), "summary": summary}
    if any(s.cohort == "newborn" for s in snaps):
        par = parity_from_snapshots(snaps)
        rep["birth_parity_by_cycle"] = {"act": par.by_cycle("logR_act"), "grad": par.by_cycle("logR_grad")}
        curve = catchup_series(snaps)
        rep["catchup"] = curve
        early = [curve[a] for a in early_ages if a in curve]
        if early:
            rep["early_logparity_grad"] = float(np.mean([np.log(max(e["grad"], 1e-300)) for e in early]))
            rep["early_logparity_act"] = float(np.mean([np.log(max(e["act"], 1e-300)) for e in early]))
    surv = survivor_report(snaps)
    if surv:
        rep["survivor_stability"] = surv
    return rep


def analyze_runs(runs, group_a=None, group_b=None, metric="taa"):
    runs = list(runs or [])
    reports = [run_report(r) for r in runs]
    out = {"runs": reports}
    if group_a and group_b:
        a = [load_summary(r)[metric] for r in group_a]
        b = [load_summary(r)[metric] for r in group_b]
        t, df, p = welch_ttest(a, b)
        out["welch"] = {"metric": metric, "a": mean_ci95(a), "b": mean_ci95(b), "t": t, "df": df, "p": p}
    paired = [(r["early_logparity_grad"], r["summary"][metric]) for r in reports
              if "early_logparity_grad" in r and metric in r["summary"]]
    if len(paired) >= 3:
        xs, ys = zip(*paired)
        out["spearman_early_grad_parity_vs_" + metric] = spearman_rho(xs, ys)
    if not runs and not (group_a and group_b):
        raise ConfigError("analyze needs run directories or two groups")
    return out
