import json

import numpy as np
import pytest

from distac.harness import report
from distac.harness.cli import main
from distac.harness.config import ConfigError, build_config, documented_keys, parse_text
from distac.harness.flopcount import count_flops, flop_table, gmm_head_overhead
from distac.harness.persist import IntegrityError, MetricsWriter, RunDir, atomic_write, read_metrics
from distac.harness.runs import run_eval, run_export, run_toy, run_train

FAST = ["env=gridworld", "variant=gmac", "grid_size=3", "iterations=3", "n_envs=2",
        "rollout_steps=8", "minibatch_size=8", "hidden=8", "eval_every=2", "eval_episodes=2"]


def test_parse_text():
    cfg = parse_text("# comment\nenv = gridworld  # trailing\n\nvariant=gmac\n")
    assert cfg == {"env": "gridworld", "variant": "gmac"}
    with pytest.raises(ConfigError, match=":2"):
        parse_text("env = a\nnot a pair\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_text("env = a\nenv = b\n")


def test_config_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("env = gridworld\nvariant = iqac\nlr = 0.1\nseed = 4\nhidden = 16, 16\n")
    cfg = build_config(f, ["seed=9"], environ={"DISTAC_LR": "0.5", "DISTAC_SEED": "7", "HOME": "/x"})
    assert cfg["lr"] == 0.5 and cfg["seed"] == 9 and cfg["variant"] == "iqac"
    assert cfg["hidden"] == (16, 16) and cfg["gamma"] == 0.99
    tc = cfg.train_config()
    assert tc.variant == "iqac" and tc.hidden == (16, 16)
    assert cfg.env_kwargs() == {"size": 5, "variant": "dense", "slip": 0.0}


def test_config_rejections(tmp_path):
    with pytest.raises(ConfigError, match="unknown config keys: bogus"):
        build_config(None, ["env=gridworld", "variant=gmac"], environ={"DISTAC_BOGUS": "1"})
    with pytest.raises(ConfigError, match="missing required"):
        build_config(None, ["env=gridworld"], environ={})
    with pytest.raises(ConfigError, match="bad value for lr"):
        build_config(None, ["env=gridworld", "variant=gmac", "lr=fast"], environ={})
    with pytest.raises(ConfigError):
        build_config(None, ["env=atari", "variant=gmac"], environ={})
    with pytest.raises(ConfigError):
        build_config(None, ["env=gridworld", "variant=gmac", "gamma=2"], environ={})
    with pytest.raises(ConfigError):
        build_config(None, ["env=gridworld", "variant=gmac", "grid_variant=maze"], environ={})
    with pytest.raises(ConfigError, match="not found"):
        build_config(tmp_path / "missing.cfg", environ={})
    with pytest.raises(ConfigError):
        build_config(None, ["env=gridworld", "variant=gmac", "normalize_advantages=maybe"], environ={})


def test_snapshot_round_trip(tmp_path):
    cfg = build_config(None, FAST + ["entropy_coef=0.02", "normalize_advantages=false"], environ={})
    (tmp_path / "s").write_text(cfg.snapshot())
    again = build_config(tmp_path / "s", environ={})
    assert again.values == cfg.values
    assert list(documented_keys())[:2] == ["env", "variant"]


def test_atomic_write_and_metrics(tmp_path):
    p = tmp_path / "a.bin"
    atomic_write(p, b"one")
    atomic_write(p, b"two")
    assert p.read_bytes() == b"two" and not [x for x in tmp_path.iterdir() if x.name.startswith(".")]
    w = MetricsWriter(tmp_path / "m.jsonl")
    w.append({"i": 1})
    w.append({"i": 2})
    with open(tmp_path / "m.jsonl", "a") as fh:
        fh.write('{"i": 3, "tor')  # torn final record
    assert read_metrics(tmp_path / "m.jsonl") == [{"i": 1}, {"i": 2}]
    with pytest.raises(ValueError):
        w.append({"x": float("nan")})


def test_train_eval_and_tamper(tmp_path):
    cfg = build_config(None, FAST, environ={})
    manifest = run_train(cfg, tmp_path / "run")
    for key in ("manifest_version", "hash_algorithm", "files", "final_checkpoint", "final_eval", "train_config"):
        assert key in manifest
    assert set(manifest["files"]) == {"config.snapshot", "metrics.jsonl", "checkpoint-000003.bin"}
    recs = read_metrics(tmp_path / "run" / "metrics.jsonl")
    assert [r["iteration"] for r in recs] == [1, 2, 3]
    assert "eval_return" in recs[1] and "eval_return" in recs[2] and "eval_return" not in recs[0]
    block = run_eval(tmp_path / "run")
    assert block["matches_recorded"] is True
    # same seed, same config -> byte-identical metrics
    run_train(cfg, tmp_path / "run2")
    assert (tmp_path / "run" / "metrics.jsonl").read_bytes() == (tmp_path / "run2" / "metrics.jsonl").read_bytes()
    ck = tmp_path / "run" / "checkpoint-000003.bin"
    data = bytearray(ck.read_bytes())
    data[-1] ^= 1
    ck.write_bytes(bytes(data))
    with pytest.raises(IntegrityError, match="hash mismatch"):
        run_eval(tmp_path / "run")
    rd = RunDir(tmp_path / "run")
    with pytest.raises(IntegrityError, match="not listed"):
        rd.verify("other.bin")


def test_export(tmp_path):
    for name, seed in (("a", 0), ("b", 1)):
        run_train(build_config(None, FAST + [f"seed={seed}"], environ={}), tmp_path / name)
    paths = run_export([tmp_path / "a", tmp_path / "b"], tmp_path / "out")
    assert {p.name for p in paths} == {"learning_curves.csv", "learning_curves.png"}
    first = (tmp_path / "out" / "learning_curves.csv").read_text().splitlines()[0]
    assert first == "# distac-csv/1 learning_curves"
    header, rows = report.read_csv(tmp_path / "out" / "learning_curves.csv")
    assert header[:3] == ["run", "iteration", "frames"] and len(rows) == 6
    assert (tmp_path / "out" / "learning_curves.png").read_bytes()[:4] == b"\x89PNG"


def test_flops_deterministic_and_ordered():
    a = count_flops("gmac", "update")
    b = count_flops("gmac", "update")
    assert a == b and a.flops == 2 * a.madd + a.elementwise + a.special + a.compare
    rows = {r["variant"]: r for r in flop_table()}
    assert rows["iqac"]["update_flops"] > rows["iqac_e"]["update_flops"] > rows["gmac"]["update_flops"]
    assert rows["gmac"]["update_flops"] > rows["ppo_scalar"]["update_flops"]
    assert gmm_head_overhead() > 0
    with pytest.raises(ValueError):
        count_flops("dqn", "update")
    with pytest.raises(ValueError):
        count_flops("gmac", "warmup")


def test_toy_outputs(tmp_path):
    summary = run_toy(tmp_path / "toy", steps=60, contraction_trials=2, truth_episodes=200)
    names = {p.name for p in (tmp_path / "toy").iterdir()}
    assert {"densities.csv", "densities.png", "curve.csv", "curve.png", "contraction.csv", "summary.json"} <= names
    header, rows = report.read_csv(tmp_path / "toy" / "densities.csv")
    assert header == ["z", "truth", "energy_gmm", "energy_samples", "huber_quantile", "huber_quantile_imputed"]
    z = np.array([float(r[0]) for r in rows])
    truth = np.array([float(r[1]) for r in rows])
    assert np.trapezoid(truth, z) == pytest.approx(1.0, abs=1e-3)
    header, _ = report.read_csv(tmp_path / "toy" / "curve.csv")
    assert header[0] == "step"
    assert set(summary["methods"]) == {"energy_gmm", "energy_samples", "huber_quantile"}
    assert json.loads((tmp_path / "toy" / "summary.json").read_text())["steps"] == 60


def test_toy_custom_mdp(tmp_path):
    f = tmp_path / "chain.mdp"
    f.write_text("states 3\nactions 1\ngamma 0.9\nterminal 2\ntransition 0 0 1 1\ntransition 1 0 2 1\n"
                 "reward 1 0 discrete -1:0.5 1:0.5\n")
    summary = run_toy(tmp_path / "o", str(f), ["energy_samples"], steps=20, truth_episodes=500)
    assert summary["mdp"] == str(f)


def test_density_integrates():
    from distac.distcore import DiracMixture, GaussianMixture
    z = np.linspace(-5, 5, 2001)
    for d in (GaussianMixture([0.3, 0.7], [-1, 1], [0.2, 0.5]), DiracMixture([-1.0, 0.0, 2.0])):
        assert np.trapezoid(report.density(d, z), z) == pytest.approx(1.0, abs=1e-6)


def test_cli_commands(tmp_path, capsys, monkeypatch):
    run = tmp_path / "run"
    sets = sum((["--set", kv] for kv in FAST), [])
    assert main(["train", *sets, "--out", str(run)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["run"] == str(run)
    assert main(["eval", "--run", str(run)]) == 0
    assert json.loads(capsys.readouterr().out)["matches_recorded"] is True
    assert main(["eval", "--run", str(run), "--episodes", "3"]) == 0
    assert json.loads(capsys.readouterr().out)["matches_recorded"] is False
    assert main(["export", "--run", str(run), "--out", str(tmp_path / "exp")]) == 0
    capsys.readouterr()
    assert main(["flops", "--variants", "ppo_scalar,gmac", "--out", str(tmp_path / "fl")]) == 0
    text = capsys.readouterr().out
    assert "gmac" in text and "ordering" in text
    assert (tmp_path / "fl" / "flops.csv").exists() and (tmp_path / "fl" / "flops.png").exists()
    assert main(["toy", "--loss", "energy_samples", "--steps", "10", "--out", str(tmp_path / "toy")]) == 0
    capsys.readouterr()
    # configuration and integrity failures exit with code 2
    monkeypatch.setenv("DISTAC_BOGUS", "1")
    assert main(["train", *sets, "--out", str(tmp_path / "r2")]) == 2
    monkeypatch.delenv("DISTAC_BOGUS")
    assert main(["flops", "--variants", "dqn"]) == 2
    assert main(["eval", "--run", str(tmp_path / "nowhere")]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_numeric_failure_exit_code(tmp_path, capsys):
    f = tmp_path / "huge.mdp"
    f.write_text("states 2\nactions 1\nterminal 1\ntransition 0 0 1 1\nreward 0 0 constant 1e9\n")
    assert main(["toy", "--mdp", str(f), "--loss", "huber_quantile", "--steps", "5", "--out", str(tmp_path / "o")]) == 3
    assert "numeric failure" in capsys.readouterr().err
