import json
from pathlib import Path

import numpy as np
import pytest

from conftest import micro_model
from promptdoor.attack import Trigger
from promptdoor.container import ChecksumError, PrecisionMismatch
from promptdoor.evalsuite import EvalReport, EvalRow, harmonic_mean
from promptdoor.harness import cli, pipeline
from promptdoor.harness.config import ConfigError, ExperimentConfig, config_from_dict, config_hash, load_config
from promptdoor.harness.runs import (
    SWEEP_COLUMNS, Layout, RunManifest, aggregate_reports, aggregate_runs, h_of_means, load_bundle, load_checkpoint,
    render_table, save_checkpoint, sweep_csv,
)
from promptdoor.promptengine import ContextGenerator

TINY = {
    "name": "tiny",
    "corpus": {"image_size": 16, "pretrain_samples": 8, "train_samples": 6, "test_samples": 4},
    "model": {"image_size": 16, "channels": [8, 8], "d": 16, "e": 16, "text_hidden": 16},
    "pretrain": {"epochs": 1},
    "attack": {"warmup_epochs": 1, "joint_epochs": 1},
    "shots": 2,
    "seeds": [0],
    "eval": {"retrieval_shots": 2, "stealth_pairs": 8},
    "sweep": {"epsilon": [1.0, 4.0], "shots": [1], "n_ctx": [2], "warmup": [True]},
    "defense": {"nc_steps": 5, "nc_images": 4, "clp_u": [0, 5]},
}


# --- config -----------------------------------------------------------------------------

def test_defaults_validate_and_round_trip():
    cfg = ExperimentConfig()
    assert config_from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize("data,msg", [
    ({"bogus": 1}, "bogus: unknown field"),
    ({"attack": {"bogus": 1}}, "attack.bogus: unknown field"),
    ({"corpus": {"grain": "x"}}, "corpus.grain: expected float"),
    ({"shots": "4"}, "shots: expected int"),
    ({"shots": 2.5}, "shots: expected int"),
    ({"precision": 16}, "precision"),
    ({"eval": {"protocols": ["telepathy"]}}, "unknown protocol"),
    ({"sweep": {"shots": []}}, "sweep.shots"),
    ({"victim": "/nonexistent/victim.pdck"}, "does not exist"),
    ({"attack": {"epsilon": -1}}, "attack: epsilon"),
])
def test_config_errors_name_the_field(data, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(data)


def test_json_syntax_error_has_line_and_column(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "shots": 4,\n  "seeds": [0,]\n}\n')
    with pytest.raises(ConfigError, match=r"bad.json:3:\d+"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_config_hash_ignores_seeds_only():
    a = ExperimentConfig()
    assert config_hash(a) == config_hash(a.with_seeds([7, 8]))
    assert config_hash(a) != config_hash(config_from_dict({"shots": 8}))


def test_sweep_children():
    cfg = ExperimentConfig()
    eps = cfg.sweep_children("epsilon")
    assert [v for v, _ in eps] == cfg.sweep.epsilon
    assert eps[-1][1].attack["epsilon"] == pytest.approx(4 / 255)
    assert all(c.seeds == cfg.seeds for _, c in eps)
    warm = dict(cfg.sweep_children("warmup"))
    assert warm[False].attack["warmup_epochs"] == 0 and warm[True].attack["warmup_epochs"] == cfg.attack["warmup_epochs"]
    assert [c.shots for _, c in cfg.sweep_children("shots")] == cfg.sweep.shots
    assert dict(cfg.sweep_children("n_ctx"))[8].attack_config(0).n_ctx == 8
    with pytest.raises(ConfigError):
        cfg.sweep_children("lr")


# --- manifests and aggregation ------------------------------------------------------------

def _report(acc_seen, acc_unseen=50.0, asr=90.0):
    return EvalReport([EvalRow("A", acc_seen, asr, acc_unseen, asr)])


def test_manifest_round_trip_and_tamper(tmp_path):
    cfg = ExperimentConfig()
    m = RunManifest.create(cfg, [0], 1.5, {"x": ["a"]}, _report(70).to_json())
    p = m.write(tmp_path / "manifest.json")
    assert RunManifest.read(p) == m
    d = json.loads(p.read_text())
    d["config"] = d["config"].replace('"shots": 16', '"shots": 8')
    p.write_text(json.dumps(d))
    with pytest.raises(ConfigError, match="hash"):
        RunManifest.read(p)


def test_single_run_aggregate_is_identity():
    rep = _report(71.25, 63.5)
    m = RunManifest.create(ExperimentConfig(), [0], 0, metrics=rep.to_json())
    assert aggregate_runs([m]).table == rep.table()


def test_aggregate_mean():
    agg = aggregate_reports([_report(70), _report(80), _report(90)])
    assert agg.value("A", "seen")[0] == pytest.approx(80.0)
    assert agg.n_runs == 3


def test_aggregate_rejects_mixed_configs():
    a = RunManifest.create(ExperimentConfig(), [0], 0, metrics=_report(70).to_json())
    b = RunManifest.create(config_from_dict({"shots": 8}), [1], 0, metrics=_report(80).to_json())
    with pytest.raises(ConfigError, match="different configs"):
        aggregate_runs([a, b])


def test_h_is_averaged_per_run(oracles):
    agg = aggregate_reports([_report(82.69, 63.22), _report(63.22, 82.69)])
    assert agg.value("A", "h")[0] == pytest.approx(oracles["h_counterexample"]["per_run"], abs=1e-9)
    assert h_of_means(agg, "A")[0] == pytest.approx(oracles["h_counterexample"]["of_means"], abs=1e-9)


def test_render_table_and_sweep_csv():
    agg = aggregate_reports([_report(80, 60)])
    text = render_table(agg)
    assert "| A | 80.00 | 90.00 | 60.00 | 90.00 | " in text
    rows = [(1.0, [EvalRow("A", 80, 10, 70, 5), EvalRow("A", 90, 20, 60, 15)])]
    lines = sweep_csv("epsilon", rows).splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS)
    h = (harmonic_mean(80, 70) + harmonic_mean(90, 60)) / 2
    assert lines[1].startswith("epsilon,1.0,85.0000,15.0000,65.0000,10.0000,") and f"{h:.4f}" in lines[1]


# --- checkpoints -------------------------------------------------------------------------------

def test_checkpoint_dispatch_round_trip(tmp_path):
    model = micro_model(dtype=np.float32)
    gen = ContextGenerator.init(model, 0)
    trig = Trigger(np.full((3, 8, 8), 1 / 255, dtype=np.float32), 4 / 255)
    back = load_checkpoint(save_checkpoint(model, tmp_path / "m.pdck"))
    assert back.checksum() == model.checksum()
    g2 = load_checkpoint(save_checkpoint(gen, tmp_path / "g.pdck", {"k": 1}))
    for a, b in zip(gen.parameters(), g2.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(load_checkpoint(save_checkpoint(trig, tmp_path / "t.pdck")).delta, trig.delta)
    with pytest.raises(TypeError):
        save_checkpoint(object(), tmp_path / "x.pdck")


def test_checkpoint_corruption_and_precision(tmp_path):
    p = save_checkpoint(micro_model(dtype=np.float64), tmp_path / "m.pdck")
    with pytest.raises(PrecisionMismatch):
        load_checkpoint(p, precision=32)
    raw = bytearray(p.read_bytes())
    raw[-3] ^= 0x10
    p.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(p)


# --- CLI end to end on a tiny config ---------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(TINY))
    out = root / "run"
    for cmd in ("pretrain", "attack", "eval"):
        assert cli.main([cmd, "--config", str(cfg_path), "--out", str(out)]) == 0
    return cfg_path, out


def test_cli_run_layout(tiny_run):
    _, out = tiny_run
    lay = Layout(out)
    assert lay.victim.is_file() and lay.config.is_file()
    for name in pipeline.BUNDLE:
        assert lay.learner(0, name).is_file() and lay.trigger(0, name).is_file()
    assert (lay.seed_reports(0) / "metrics.csv").is_file()
    assert (lay.reports / "aggregate.csv").read_text().startswith("dataset,split,acc,asr\n")
    m = RunManifest.read(lay.manifest)
    assert set(m.artifacts) == {"pretrain", "attack", "eval"}


def test_cli_eval_matches_in_memory_pipeline(tiny_run):
    cfg_path, out = tiny_run
    cfg = load_config(cfg_path)
    lay = Layout(out)
    victim = load_checkpoint(lay.victim)
    bundle = pipeline.attack_bundle(cfg, victim, 0)
    report = pipeline.evaluate_bundle(cfg, victim, bundle, 0)
    assert (lay.seed_reports(0) / "metrics.csv").read_text() == report.to_csv()


def test_cli_bundle_reload_checks_config(tiny_run):
    cfg_path, out = tiny_run
    lay = Layout(out)
    with pytest.raises(ConfigError, match="different config"):
        load_bundle(lay, 0, "0" * 64)
    with pytest.raises(FileNotFoundError):
        load_bundle(lay, 5, config_hash(load_config(cfg_path)))


def test_cli_sweep_report_and_images(tiny_run, capsys):
    cfg_path, out = tiny_run
    base = ["--config", str(cfg_path), "--out", str(out)]
    assert cli.main(["sweep", "--axis", "epsilon", *base]) == 0
    lines = (out / "reports" / "sweep_epsilon.csv").read_text().splitlines()
    assert len(lines) == 1 + len(TINY["sweep"]["epsilon"])
    assert cli.main(["report", *base]) == 0
    assert "| Dataset |" in (out / "reports" / "table.md").read_text()
    assert cli.main(["dump-images", "--count", "2", *base]) == 0
    assert len(list((out / "images" / "seed0").glob("*.png"))) == 5
    assert cli.main(["defend", *base]) == 0
    d = json.loads((out / "reports" / "defense" / "seed0" / "defense.json").read_text())
    assert set(d["neural_cleanse"]) == {"baseline", "generator"} and len(d["clp"]) == 2
    assert "defend:" in capsys.readouterr().out


def test_cli_errors(tiny_run, tmp_path, capsys):
    cfg_path, out = tiny_run
    assert cli.main(["attack", "--config", str(cfg_path), "--out", str(tmp_path / "empty")]) == 1
    assert "run `pretrain` first" in capsys.readouterr().err
    assert cli.main(["attack", "--config", str(cfg_path), "--out", str(out), "--precision", "64"]) == 1
    assert "requested" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    assert cli.main(["eval", "--config", str(bad)]) == 1
    assert "nope: unknown field" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        cli.main(["eval", "--frobnicate"])
    assert info.value.code == 2


def test_out_defaults_to_env(monkeypatch, tmp_path):
    args = cli.build_parser().parse_args(["report"])
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    assert cli.resolve(args)[1].root == tmp_path / "desk"
    monkeypatch.delenv(cli.OUT_ENV)
    assert cli.resolve(args)[1].root == Path("runs") / "desk"
    args = cli.build_parser().parse_args(["report", "--seed", "4", "--precision", "64"])
    cfg, _ = cli.resolve(args)
    assert cfg.seeds == [4] and cfg.precision == 64
