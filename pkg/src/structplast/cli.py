"""Command-line entry point: ``structplast {run,ticket,stress,analyze,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .config import parse_config
from .errors import ConfigError, DataFormatError, NumericFault

log = logging.getLogger("structplast")


def _config(args):
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return parse_config(args.config, overrides)


def _seeds(cfg):
    return cfg.seeds or [cfg.seed]


def cmd_run(args):
    from .harness import run_cycle_and_ticket, run_cycle_protocol

    cfg = _config(args)
    out = []
    for s in _seeds(cfg):
        c = cfg.with_overrides(seed=s, seeds=[])
        if args.ticket:
            cyc, wt = run_cycle_and_ticket(c, args.out)
            out += [cyc.summary(c.early_window), wt.summary(c.early_window)]
        else:
            out.append(run_cycle_protocol(c, args.out).summary(c.early_window))
    print(json.dumps(out, indent=1))
    return 0


def cmd_ticket(args):
    from .harness import load_masks, run_winning_ticket

    cfg = _config(args)
    masks = load_masks(args.masks)
    log_ = run_winning_ticket(cfg, masks, out_dir=args.out)
    print(json.dumps(log_.summary(cfg.early_window), indent=1))
    return 0


def cmd_stress(args):
    from .harness import run_stress_test, stress_summary

    cfg = _config(args)
    ks = tuple(int(k) for k in args.k.split(","))
    rows = []
    for s in _seeds(cfg):
        logs = run_stress_test(cfg.with_overrides(seed=s, seeds=[]), ks, args.horizon, args.out)
        for r in stress_summary(logs):
            rows.append({"seed": s, **r})
    print(json.dumps(rows, indent=1, default=str))
    return 0


def cmd_analyze(args):
    from .analysis import analyze_runs

    report = analyze_runs(args.runs, args.group_a, args.group_b, metric=args.metric)
    print(json.dumps(report, indent=1, default=float))
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest

    results = run_selftest(seed=args.seed or 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="structplast", description="Unit-level grow/prune experiment harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="TOML run configuration")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="runs", help="output directory (one subdirectory per run)")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="override a config key (dotted keys address sections); repeatable")

    sp = sub.add_parser("run", help="cycle protocol (optionally followed by the winning-ticket retrain)")
    common(sp)
    sp.add_argument("--ticket", action="store_true", help="also retrain the final mask from scratch")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("ticket", help="retrain a saved final mask from scratch")
    common(sp)
    sp.add_argument("--masks", required=True, help="run directory holding mask_final.json")
    sp.set_defaults(fn=cmd_ticket)

    sp = sub.add_parser("stress", help="grow-cycle stress test over K values at a fixed horizon")
    common(sp)
    sp.add_argument("--k", default="5,10,20")
    sp.add_argument("--horizon", type=int, default=200)
    sp.set_defaults(fn=cmd_stress)

    sp = sub.add_parser("analyze", help="parity, catch-up and significance report over run directories")
    sp.add_argument("runs", nargs="*")
    sp.add_argument("--group-a", nargs="*", default=None)
    sp.add_argument("--group-b", nargs="*", default=None)
    sp.add_argument("--metric", default="taa")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("selftest", help="fast invariant checks")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return args.fn(args)
    except (ConfigError, DataFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericFault as e:
        print(f"numeric fault: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
