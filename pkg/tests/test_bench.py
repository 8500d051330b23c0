import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from scorebreak.bench import (ExperimentConfig, config_hash, format_table, obtain_victim,
                              prepare_dataset, run_experiment, sweep)
from scorebreak.metrics import evaluate
from scorebreak.scorenet import TrainingConfig
from scorebreak.victim import VictimHyperparams, VictimSpec


def tiny(tmp_path, **changes):
    cfg = ExperimentConfig(
        data={"synthetic": {"image_size": 16, "counts": {"score-train": 12, "victim-train": 12, "eval": 3}},
              "seed": 0},
        training=TrainingConfig(learning_rate=2e-4, widths=(8, 16, 16), max_steps=8, batch_size=4),
        victim_training=VictimHyperparams(steps=8, batch_size=4), enforce_gate=False, query_budget=4,
        output_dir=str(tmp_path / "out"), cache_dir=str(tmp_path / "cache"))
    return replace(cfg, **changes)


def test_clean_only_matches_direct_evaluation(tmp_path):
    cfg = tiny(tmp_path, methods=("clean",), victims=(VictimSpec("unet"),))
    rec = run_experiment(cfg, plots=False)
    ds = prepare_dataset(cfg)
    ids, x, labels, _ = ds.arrays("eval")
    victim = obtain_victim(cfg, ds, VictimSpec("unet"))
    probs = victim.predict(x)
    for metric in ("mae", "cc", "miou"):
        direct = np.mean([evaluate(probs[i], labels[i], 2)[metric] for i in range(len(ids))])
        assert rec.value("unet-s0", "clean", metric) == direct
    assert {r["method"] for r in rec.rows} == {"clean"}


def test_rerun_is_bitwise_identical_and_persisted(tmp_path):
    a = run_experiment(tiny(tmp_path / "a"))
    b = run_experiment(tiny(tmp_path / "b"))
    out_a, out_b = tmp_path / "a" / "out", tmp_path / "b" / "out"
    assert (out_a / "aggregate.csv").read_bytes() == (out_b / "aggregate.csv").read_bytes()
    assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()
    assert a.config_hash == b.config_hash
    rows = list(csv.DictReader(open(out_a / "metrics.csv")))
    assert set(rows[0]) == {"config_hash", "seed", "image_id", "victim", "method", "metric", "value"}
    assert all(r["config_hash"] == a.config_hash for r in rows)
    summary = json.load(open(out_a / "summary.json"))
    assert set(summary["pivot"]) == {"unet-s0", "dilated-s0"}
    assert len(summary["pivot"]["unet-s0"]) == 7
    assert (out_a / "plots" / "mae.png").stat().st_size > 0
    assert ExperimentConfig.from_yaml(out_a / "config.yaml").hash == a.config_hash


def test_failures_are_recorded_not_fatal(tmp_path):
    cfg = tiny(tmp_path, oracle=str(tmp_path / "missing.pt"), methods=("clean", "score", "noise-control"))
    rec = run_experiment(cfg, plots=False)
    assert any(e["stage"] == "attack" and e["method"] == "score" for e in rec.errors)
    assert set(rec.pivot["unet-s0"]) == {"clean", "noise-control"}


def test_gate_enforced(tmp_path):
    hyper = VictimHyperparams(steps=8, batch_size=4, gate=1.01)
    rec = run_experiment(tiny(tmp_path, enforce_gate=True, methods=("clean",), victim_training=hyper), plots=False)
    assert rec.rows == [] and {e["stage"] for e in rec.errors} == {"victim"}


def test_linf_budget_in_every_method(tmp_path):
    from scorebreak.bench import craft, obtain_oracle
    cfg = tiny(tmp_path)
    ds = prepare_dataset(cfg)
    _, x, _, y = ds.arrays("eval")
    victim = obtain_victim(cfg, ds, VictimSpec("unet"))
    oracle = obtain_oracle(cfg, ds, 0)
    for method in cfg.methods:
        adv = craft(method, cfg, x, y, 0, oracle=oracle, victim=victim, surrogate=victim)
        assert np.max(np.abs(adv - x)) <= cfg.attack.eps + 1e-12


def test_sweep_single_value_and_zero_omega(tmp_path):
    cfg = tiny(tmp_path, methods=("clean", "score"), victims=(VictimSpec("unet"),), oracle="analytic")
    one = run_experiment(replace(cfg, output_dir=str(tmp_path / "single")), plots=False)
    recs = sweep(cfg, "omega", [90.0], plots=False)
    assert recs[0].aggregate == one.aggregate
    recs = sweep(cfg, "omega", [0.0, 30.0, 90.0])
    zero = recs[0].pivot["unet-s0"]
    assert zero["score"] == zero["clean"]
    merged = list(csv.DictReader(open(tmp_path / "out" / "sweep-omega.csv")))
    assert {r["value"] for r in merged} == {"0.0", "30.0", "90.0"}
    assert (tmp_path / "out" / "plots" / "sweep-omega-mae.png").exists()
    with pytest.raises(ValueError):
        sweep(cfg, "omega", [])
    with pytest.raises(ValueError):
        sweep(cfg, "epsilon", [1.0])


def test_config_validation_and_hash(tmp_path):
    with pytest.raises(ValueError):
        ExperimentConfig(methods=("deepfool",))
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=())
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"colour": "blue"})
    a = tiny(tmp_path)
    assert a.hash == replace(a, output_dir="elsewhere").hash
    assert a.hash != replace(a, seeds=(1,)).hash
    assert config_hash({"b": 1, "a": 2}) == config_hash({"a": 2, "b": 1})


def test_format_table(tmp_path):
    rec = run_experiment(tiny(tmp_path, methods=("clean",)), plots=False)
    lines = format_table(rec, sep="\t").splitlines()
    assert lines[0].split("\t")[:3] == ["victim", "method", "mae"]
    assert len(lines) == 3
