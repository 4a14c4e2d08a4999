import json

import pytest

from structplast.cli import main
from structplast.config import RunConfig, apply_overrides, build_config, parse_config
from structplast.errors import ConfigError

RSL_TOML = """
method = "grow"
compactness = 0.5
[interventions.rsl]
c = 3.0
p = 5.0
lower = 0.125
upper = 0.333
"""

SMALL = ["dataset=\"synthetic\"", "cycles=2", "epochs_per_cycle=1", "train_subset=200", "test_subset=100",
         "diag_batch=32", "batch_size=32"]


def test_defaults():
    cfg = parse_config()
    assert cfg == RunConfig()
    assert cfg.total_epochs == 100
    assert cfg.optimizer["lr"] == 0.01


def test_rsl_table_row_accepted_verbatim():
    cfg = parse_config(text=RSL_TOML)
    assert cfg.interventions["rsl"] == {"c": 3.0, "p": 5.0, "lower": 0.125, "upper": 0.333}


def test_intervention_defaults():
    cfg = build_config({"method": "grow", "compactness": 0.5, "interventions": {"two_speed": True}})
    assert cfg.interventions["two_speed"] == {"r": 5.0, "window": 1955}
    cfg = build_config({"method": "grow", "compactness": 0.5,
                        "interventions": {"two_speed": {"enabled": False}}})
    assert cfg.interventions == {}


@pytest.mark.parametrize("raw,needle", [
    ({"bogus": 1}, "bogus"),
    ({"optimizer": {"momentum": 0.9}}, "optimizer.momentum"),
    ({"method": "grow", "compactness": 0.5, "interventions": {"rsl": {"q": 1}}}, "interventions.rsl.q"),
    ({"compactness": 0.5}, "compactness"),
    ({"method": "prune", "compactness": 0.5, "interventions": {"net2wider": True}}, "require method = grow"),
    ({"method": "grow", "compactness": 0.5, "interventions": {"moment_transplant": True}}, "adam"),
    ({"method": "grow", "compactness": 1.5}, "compactness"),
    ({"cycles": "5"}, "integer"),
    ({"bias_schedule": "Middle"}, "bias_schedule"),
])
def test_invalid_configs_name_the_key(raw, needle):
    with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
        build_config(raw)


def test_overrides():
    raw = apply_overrides({}, ["optimizer.lr=0.1", "method=\"grow\"", "compactness=0.3", "hidden=[8, 8]"])
    assert raw == {"optimizer": {"lr": 0.1}, "method": "grow", "compactness": 0.3, "hidden": [8, 8]}
    assert build_config(raw).hidden == [8, 8]
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_bad_toml():
    with pytest.raises(ConfigError):
        parse_config(text="method = ")


def test_with_overrides_revalidates():
    cfg = RunConfig()
    assert cfg.with_overrides(seed=4).seed == 4
    with pytest.raises(ConfigError):
        cfg.with_overrides(method="grow", compactness=0.0)


def _args(tmp_path, *extra):
    cfg = tmp_path / "c.toml"
    cfg.write_text("")
    out = ["--config", str(cfg), "--out", str(tmp_path / "runs")]
    for o in SMALL + list(extra):
        out += ["--override", o]
    return out


def test_cli_run_exit_zero(tmp_path, capsys):
    assert main(["run"] + _args(tmp_path, "method=\"grow\"", "compactness=0.5")) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary[0]["status"] == "ok" and summary[0]["checkpoints"] == 2
    assert (tmp_path / "runs" / "grow-iid-synthetic-c50-s0" / "events.jsonl").exists()


def test_cli_config_error_exit_two(tmp_path, capsys):
    assert main(["run"] + _args(tmp_path, "compactness=0.5")) == 2
    assert "compactness" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2


def test_cli_data_error_exit_two(tmp_path, capsys):
    bad = tmp_path / "mnist"
    bad.mkdir()
    for stem in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                 "t10k-labels-idx1-ubyte"):
        (bad / stem).write_bytes(b"\x00\x00\x09\x99garbage")
    args = ["run", "--config", str(tmp_path / "c.toml"), "--override", f"data_dir=\"{bad}\""]
    (tmp_path / "c.toml").write_text("")
    assert main(args) == 2
    assert "magic" in capsys.readouterr().err


def test_cli_numeric_fault_exit_three(tmp_path, capsys):
    assert main(["run"] + _args(tmp_path, "optimizer.lr=1e200")) == 3
    assert "layer" in capsys.readouterr().err
    meta = json.loads((tmp_path / "runs" / "dense-iid-synthetic-c100-s0" / "config.json").read_text())
    assert meta["summary"]["status"].startswith("failed: NumericFault")


def test_cli_ticket_and_analyze(tmp_path, capsys):
    assert main(["run", "--ticket"] + _args(tmp_path, "method=\"prune\"", "compactness=0.5")) == 0
    capsys.readouterr()
    runs = tmp_path / "runs"
    assert main(["ticket", "--masks", str(runs / "prune-iid-synthetic-c50-s0")] +
                _args(tmp_path, "method=\"prune\"", "compactness=0.5", "run_id=\"again\"")) == 0
    capsys.readouterr()
    assert main(["analyze", str(runs / "prune-iid-synthetic-c50-s0")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report


def test_cli_selftest(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "FAIL" not in out
