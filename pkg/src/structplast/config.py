"""Run configuration: TOML parsing, defaults, validation and overrides."""

from __future__ import annotations

import copy
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .budget import BIAS_SCHEDULES
from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

METHODS = ("dense", "grow", "prune")
DATASETS = ("mnist", "fashion", "synthetic", "cifar10", "cifar100")
STREAMS = ("iid", "split", "permuted", "random_label", "hard_easy", "binary_pair")
ARCHS = ("mlp", "convnet")
GROW_ONLY = ("two_speed", "moment_transplant", "net2wider", "gradmax")
INTERVENTIONS = GROW_ONLY + ("rsl",)

INTERVENTION_DEFAULTS = {
    "two_speed": {"r": 5.0, "window": 1955},
    "moment_transplant": {},
    "net2wider": {"noise_eps": 1e-3},
    "gradmax": {},
    "rsl": {"c": 0.5, "p": 0.5, "lower": 0.3, "upper": 0.6},
}

OPTIMIZER_DEFAULTS = {"kind": "sgd", "lr": 0.01, "schedule": "cosine",
                      "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


@dataclass
class RunConfig:
    method: str = "dense"
    dataset: str = "mnist"
    stream: str = "iid"
    arch: str = "mlp"
    hidden: list = field(default_factory=lambda: [256, 256])
    compactness: float = 1.0
    bias_schedule: str = "Neutral"
    cycles: int = 5
    epochs_per_cycle: int = 20
    batch_size: int = 256
    seed: int = 0
    seeds: list = field(default_factory=list)
    tau: float = 0.05
    seed_fraction: float = 0.1
    scorer: str = "activation"
    init_policy: str = "fresh-kaiming"
    imp_rewind: bool = True
    rewind_epoch: int = 0
    diagnostics: bool = True
    diag_batch: int = 256
    early_window: float = 0.1
    data_dir: str = ""
    train_subset: int = 0  # 0 keeps the full training set
    test_subset: int = 0
    normalize: bool = False
    n_tasks: int = 0  # 0 -> benchmark default
    task_epochs: int = 0  # 0 -> benchmark default (split: epochs_per_cycle)
    task_steps: int = 0
    subset_size: int = 0
    replay: bool = True
    replay_fraction: float = 0.5
    replay_per_class: int = 50
    replay_total: int = 200
    out_dir: str = "runs"
    run_id: str = ""
    optimizer: dict = field(default_factory=lambda: dict(OPTIMIZER_DEFAULTS))
    interventions: dict = field(default_factory=dict)

    @property
    def total_epochs(self):
        return self.cycles * self.epochs_per_cycle

    def to_dict(self):
        return asdict(self)

    def with_overrides(self, **kw):
        d = copy.deepcopy(self.to_dict())
        d.update(kw)
        return build_config(d)


_TOP_KEYS = {f for f in RunConfig.__dataclass_fields__}


def _typed(name, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list")
        return list(value)
    return value


def build_config(raw):
    """Validate a plain mapping into a RunConfig. Unknown keys are rejected."""
    raw = dict(raw)
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    base = RunConfig()
    kw = {}
    for name in _TOP_KEYS - {"optimizer", "interventions"}:
        if name in raw:
            kw[name] = _typed(name, raw[name], getattr(base, name))

    opt = dict(OPTIMIZER_DEFAULTS)
    given = raw.get("optimizer", {}) or {}
    bad = sorted(set(given) - set(OPTIMIZER_DEFAULTS))
    if bad:
        raise ConfigError(f"unknown optimizer keys: {', '.join('optimizer.' + b for b in bad)}")
    for k, v in given.items():
        opt[k] = _typed(f"optimizer.{k}", v, OPTIMIZER_DEFAULTS[k])
    kw["optimizer"] = opt

    ivs = {}
    for name, params in (raw.get("interventions", {}) or {}).items():
        if name not in INTERVENTIONS:
            raise ConfigError(f"unknown intervention interventions.{name}")
        if params is False:
            continue
        params = {} if params is True else dict(params)
        enabled = params.pop("enabled", True)
        if not enabled:
            continue
        defaults = INTERVENTION_DEFAULTS[name]
        bad = sorted(set(params) - set(defaults))
        if bad:
            raise ConfigError(f"unknown keys for {name}: {', '.join(f'interventions.{name}.{b}' for b in bad)}")
        merged = dict(defaults)
        for k, v in params.items():
            merged[k] = _typed(f"interventions.{name}.{k}", v, defaults[k])
        ivs[name] = merged
    kw["interventions"] = ivs
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def validate(cfg):
    errs = []

    def check(cond, key, msg):
        if not cond:
            errs.append(f"{key}: {msg}")

    check(cfg.method in METHODS, "method", f"must be one of {METHODS}")
    check(cfg.dataset in DATASETS, "dataset", f"must be one of {DATASETS}")
    check(cfg.stream in STREAMS, "stream", f"must be one of {STREAMS}")
    check(cfg.arch in ARCHS, "arch", f"must be one of {ARCHS}")
    check(0 < cfg.compactness <= 1, "compactness", "must lie in (0, 1]")
    check(cfg.bias_schedule in BIAS_SCHEDULES, "bias_schedule", f"must be one of {sorted(BIAS_SCHEDULES)}")
    check(cfg.cycles >= 1, "cycles", "must be >= 1")
    check(cfg.epochs_per_cycle >= 1, "epochs_per_cycle", "must be >= 1")
    check(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    check(0 < cfg.seed_fraction <= 1, "seed_fraction", "must lie in (0, 1]")
    check(cfg.scorer in ("activation", "gradient"), "scorer", "must be activation or gradient")
    check(cfg.init_policy in ("fresh-kaiming", "fresh-full", "retain"), "init_policy",
          "must be fresh-kaiming, fresh-full or retain (use interventions.net2wider for duplication)")
    check(0 < cfg.early_window <= 1, "early_window", "must lie in (0, 1]")
    check(0 <= cfg.replay_fraction < 1, "replay_fraction", "must lie in [0, 1)")
    check(cfg.rewind_epoch >= 0, "rewind_epoch", "must be >= 0")
    check(all(isinstance(h, int) and h > 0 for h in cfg.hidden), "hidden", "must be positive integers")
    check(all(isinstance(s, int) for s in cfg.seeds), "seeds", "must be integers")
    opt = cfg.optimizer
    check(opt["kind"] in ("sgd", "adam"), "optimizer.kind", "must be sgd or adam")
    check(opt["schedule"] in ("cosine", "constant"), "optimizer.schedule", "must be cosine or constant")
    check(opt["lr"] > 0, "optimizer.lr", "must be positive")
    if cfg.method == "dense":
        check(cfg.compactness == 1.0, "compactness", "dense runs keep every unit (compactness = 1)")
    bad = [k for k in GROW_ONLY if k in cfg.interventions and cfg.method != "grow"]
    if bad:
        errs.append(f"{', '.join('interventions.' + b for b in bad)}: require method = grow (got {cfg.method})")
    if "moment_transplant" in cfg.interventions:
        check(opt["kind"] == "adam", "interventions.moment_transplant", "requires optimizer.kind = adam")
    if "rsl" in cfg.interventions:
        r = cfg.interventions["rsl"]
        check(r["c"] > 0 and r["p"] > 0 and 0 < r["lower"] <= r["upper"], "interventions.rsl",
              "needs c > 0, p > 0, 0 < lower <= upper")
    if "two_speed" in cfg.interventions:
        ts = cfg.interventions["two_speed"]
        check(ts["r"] > 0 and ts["window"] >= 0, "interventions.two_speed", "needs r > 0 and window >= 0")
    if errs:
        raise ConfigError("invalid configuration: " + "; ".join(errs))


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw, overrides):
    """Apply ``key=value`` strings (dotted keys address sections) to a raw mapping."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
            node = nxt
        node[parts[-1]] = _parse_value(text.strip())
    return raw


def parse_config(path=None, overrides=(), text=None):
    """Load a TOML config (from ``path`` or ``text``), apply overrides, validate."""
    if text is None and path is None:
        raw = {}
    else:
        try:
            raw = tomllib.loads(text if text is not None else Path(path).read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"cannot parse config: {e}") from e
    return build_config(apply_overrides(raw, overrides))
