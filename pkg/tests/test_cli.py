import json
import math

import pytest

from logomarl.cli import run_command
from logomarl.config import SCHEMA, ConfigError, ExperimentConfig, schema_text
from logomarl.harness import read_csv, write_csv
from logomarl.report import mean_ci, report

TINY = ["--wm.hidden", "8", "--wm.steps", "20", "--wm.batch_size", "32", "--policy.hidden", "8",
        "--policy.steps", "6", "--policy.batch_size", "16", "--policy.eval_every", "3", "--policy.eval_episodes", "2",
        "--policy.refresh_every", "3", "--rollout.starts", "10", "--rollout.horizon", "2", "--data.episodes", "6",
        "--data.val_fraction", "0.2"]


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_config_defaults_and_overrides(tmp_path):
    cfg = ExperimentConfig.default()
    assert set(cfg.values) == set(SCHEMA)
    assert all(doc for _, doc in SCHEMA.values())
    text = "# comment\npolicy.alpha = 0.5   # inline\nseeds = 0,1,2\nablation.mpc = true\n"
    cfg = ExperimentConfig.from_text(text, [("rollout.horizon", "5")])
    assert cfg["policy.alpha"] == 0.5 and cfg.seeds == [0, 1, 2] and cfg["ablation.mpc"] is True
    assert cfg.rollout_config().horizon == 5
    assert cfg.policy_config(1).mpc and cfg.policy_config(1).seed == 1
    again = ExperimentConfig.from_text(cfg.resolved_text())
    assert again.values == cfg.values
    assert "policy.alpha = 1.0" in schema_text()


@pytest.mark.parametrize("text,field", [("nope = 1", "nope"), ("policy.alpha = x", "policy.alpha"),
                                        ("policy.gamma = 1.0", "policy.gamma"), ("seeds = a,b", "seeds"),
                                        ("just words", "line 1"), ("ablation.mpc = maybe", "ablation.mpc")])
def test_config_errors_name_field(text, field):
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_text(text)
    assert err.value.field == field


def test_config_output_root(monkeypatch, tmp_path):
    monkeypatch.setenv("LOGO_OUT", str(tmp_path))
    cfg = ExperimentConfig.from_text("experiment = e1")
    assert cfg.run_dir(3) == tmp_path / "e1" / "3"
    assert ExperimentConfig.from_text(f"outdir = {tmp_path}/x").root == tmp_path / "x" / "default"


def test_mean_ci_examples():
    assert mean_ci([10] * 5) == (10.0, 0.0)
    m, ci = mean_ci([8, 12])
    assert m == 10.0 and ci == pytest.approx(1.96 * 2 / math.sqrt(2))
    assert math.isnan(mean_ci([3.0])[1])


def _fake_results(root, seeds, arms=("none", "weighted", "H5", "H15")):
    for s in seeds:
        d = root / str(s)
        d.mkdir(parents=True)
        (d / "resolved.cfg").write_text("env.n_agents = 2\ndata.tier = medium\n")
        write_csv(d / "ablation.csv", ["arm", "seed", "mean_return", "std_return", "normalized"],
                  [(a, s, -5.0 - s - i, 0.1, 50.0 + s + i) for i, a in enumerate(arms)])


def test_report_tables_and_determinism(tmp_path):
    _fake_results(tmp_path, [0, 1])
    (tmp_path / "2").mkdir()
    (tmp_path / "2" / "resolved.cfg").write_text("env.n_agents = 2\ndata.tier = medium\n")
    lines = report(tmp_path)
    rows = {r["method"]: r for r in read_csv(tmp_path / "summary.csv")}
    assert rows["none"]["n_seeds"] == "2" and rows["none"]["missing_seeds"] == "2"
    assert float(rows["none"]["mean_return"]) == -5.5
    assert any("missing seeds: 2" in line for line in lines)
    horizon = read_csv(tmp_path / "horizon.csv")
    assert [h["horizon"] for h in horizon] == ["5", "15"]
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir() if p.is_file()}
    report(tmp_path)
    assert {p.name: p.read_bytes() for p in tmp_path.iterdir() if p.is_file()} == first


def test_unknown_flag_and_command(capsys):
    assert run_command(["collect", "--bogus", "1"]) == 2
    err = _err(capsys)
    assert err["field"] == "--bogus" and "--bogus" in err["message"]
    assert run_command(["fly"]) == 2
    assert run_command(["collect", "--policy.alpha", "abc"]) == 2
    assert _err(capsys)["field"] == "policy.alpha"


def test_missing_prerequisites(tmp_path, capsys):
    out = ["--outdir", str(tmp_path)]
    assert run_command(["train-policy"] + out) == 3
    assert _err(capsys)["error"] == "missing"
    assert run_command(["collect", "--config", str(tmp_path / "none.cfg")]) == 3
    assert run_command(["report", "--results", str(tmp_path / "absent")]) == 3
    assert run_command(["collect", "--episodes", "2"] + out + TINY[-2:]) == 0
    assert run_command(["train-policy", "--policy.steps", "2"] + out) == 3
    assert "train-wm" in _err(capsys)["message"]
    (tmp_path / "default" / "0" / "wm.logo").write_bytes(b"junk")
    assert run_command(["rollout"] + out) == 3
    assert _err(capsys)["error"] == "artifact"


def test_collect_twice_identical(tmp_path):
    args = ["collect", "--tier", "expert", "--episodes", "100", "--seed", "0"]
    assert run_command(args + ["--outdir", str(tmp_path / "a")]) == 0
    assert run_command(args + ["--outdir", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "default" / "0")
    b = (tmp_path / "b" / "default" / "0")
    assert (a / "dataset.logo").read_bytes() == (b / "dataset.logo").read_bytes()
    assert (a / "resolved.cfg").read_text() != (b / "resolved.cfg").read_text()  # outdir differs
    assert "data.tier = expert" in (a / "resolved.cfg").read_text()


def test_full_pipeline(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LOGO_OUT", str(tmp_path))
    for cmd in ("collect", "train-wm", "rollout", "train-policy", "evaluate"):
        assert run_command([cmd] + TINY) == 0, cmd
    run = tmp_path / "default" / "0"
    for name in ("dataset.logo", "wm.logo", "synthetic.logo", "policy.logo", "wm_log.csv", "metrics.csv",
                 "eval.csv", "resolved.cfg"):
        assert (run / name).exists(), name
    assert len(read_csv(run / "eval.csv")) == 2
    cfg = ExperimentConfig.from_file(run / "resolved.cfg")
    assert cfg["wm.steps"] == 20 and cfg.seeds == [0]
    assert run_command(["train-wm", "--ablation.direct_state", "true"] + TINY) == 0
    assert read_csv(run / "models.csv")[0]["seed"] == "0"
    arms = ["--ablation.arms", "none,weighted,penalty,mpc,horizons,models,timing", "--ablation.horizons", "1,2",
            "--ablation.ensemble_k", "2", "--experiment", "abl", "--seeds", "0,1"]
    assert run_command(["ablate"] + TINY + arms) == 0
    assert run_command(["report", "--experiment", "abl"]) == 0
    out = capsys.readouterr().out
    assert "normalized" in out and "ratio" in out
    summary = {r["method"] for r in read_csv(tmp_path / "abl" / "summary.csv")}
    assert {"none", "weighted", "penalty", "mpc", "H1", "H2", "ref-random", "ref-expert"} <= summary
    for name in ("horizon.csv", "timing.csv", "models.csv", "pca.csv", "summary.txt"):
        assert (tmp_path / "abl" / name).exists(), name


def test_ablation_deterministic(tmp_path, monkeypatch):
    arms = ["--ablation.arms", "none,weighted", "--seeds", "0"]
    for name in ("a", "b"):
        monkeypatch.setenv("LOGO_OUT", str(tmp_path / name))
        assert run_command(["ablate"] + TINY + arms) == 0
        assert run_command(["report"]) == 0
    for f in ("0/ablation.csv", "0/ablation_episodes.csv", "summary.csv", "summary.txt"):
        a = (tmp_path / "a" / "default" / f).read_bytes()
        assert a == (tmp_path / "b" / "default" / f).read_bytes(), f


def test_verify_command(capsys):
    assert run_command(["verify"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 11 and all(line.startswith("PASS") for line in lines)
