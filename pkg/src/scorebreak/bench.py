"""Config-driven experiments: data, score network, victims, attacks, metrics, plots.

Trained artifacts are cached by a hash of everything that determines them, so
re-running a config only repeats the attack and evaluation stages.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import plotting
from .attack import (METHODS, AttackConfig, fgsm, gaussian_noise_control, pgd, random_query_attack,
                     run_attack)
from .data import Dataset, SyntheticSpec, default_cache_dir, generate, load
from .metrics import evaluate
from .oracle import PixelwiseOracle, condition_channels
from .schedule import ScheduleSpec
from .scorenet import ScoreNetCheckpoint, ScoreTrainer, TrainingConfig, as_oracle
from .victim import TorchVictim, VictimHyperparams, VictimSpec, require_gate, train_victim

log = logging.getLogger(__name__)

ALL_METHODS = ("clean",) + METHODS
PER_VICTIM = ("score-query", "random-query")
ORACLES = ("scorenet", "analytic")
SWEEPABLE = ("omega", "m_max")


def _toy_training() -> TrainingConfig:
    return TrainingConfig(learning_rate=2e-4, widths=(16, 32, 32), max_steps=2000)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "toy"
    # either {"synthetic": SyntheticSpec fields, "seed": int} or {"path": manifest}
    data: dict = field(default_factory=lambda: {"synthetic": {}, "seed": 0})
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    training: TrainingConfig = field(default_factory=_toy_training)
    oracle: str = "scorenet"
    attack: AttackConfig = field(default_factory=AttackConfig)
    query_budget: int = 100
    pgd_steps: int = 10
    random_block: int = 4
    methods: tuple[str, ...] = ALL_METHODS
    victims: tuple[VictimSpec, ...] = (VictimSpec("unet"), VictimSpec("dilated"))
    victim_training: VictimHyperparams = field(default_factory=VictimHyperparams)
    surrogate_arch: str = "unet"
    metrics: tuple[str, ...] | None = None
    seeds: tuple[int, ...] = (0,)
    eval_limit: int | None = None
    enforce_gate: bool = True
    output_dir: str = "runs/toy"
    cache_dir: str | None = None

    def __post_init__(self):
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {ALL_METHODS}")
        if not self.seeds:
            raise ValueError("seeds must be given explicitly")
        if not ("path" in self.data or "synthetic" in self.data):
            raise ValueError("data needs a 'path' or a 'synthetic' section")
        if self.oracle not in ORACLES and not str(self.oracle).endswith(".pt"):
            raise ValueError(f"oracle must be one of {ORACLES} or a checkpoint path")
        for v in self.victims:
            if v.split == "score-train":
                raise ValueError(f"victim {v.name} would share the score model's training split")
        if self.query_budget < 1 or self.pgd_steps < 1:
            raise ValueError("query_budget and pgd_steps must be >= 1")

    # -- (de)serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name, "data": self._data_dict(), "schedule": self.schedule.to_dict(),
            "training": self.training.to_dict(), "oracle": self.oracle,
            "attack": self.attack.to_dict(), "query_budget": self.query_budget,
            "pgd_steps": self.pgd_steps, "random_block": self.random_block,
            "methods": list(self.methods), "victims": [asdict(v) for v in self.victims],
            "victim_training": asdict(self.victim_training), "surrogate_arch": self.surrogate_arch,
            "metrics": None if self.metrics is None else list(self.metrics),
            "seeds": list(self.seeds), "eval_limit": self.eval_limit,
            "enforce_gate": self.enforce_gate, "output_dir": self.output_dir, "cache_dir": self.cache_dir,
        }

    def _data_dict(self) -> dict:
        if "path" in self.data:
            return {"path": str(self.data["path"])}
        return {"synthetic": SyntheticSpec.from_dict(self.data["synthetic"]).to_dict(),
                "seed": int(self.data.get("seed", 0))}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "schedule" in d:
            d["schedule"] = ScheduleSpec.from_dict(d["schedule"])
        if "training" in d:
            d["training"] = TrainingConfig.from_dict({**_toy_training().to_dict(), **d["training"]})
        if "attack" in d:
            d["attack"] = AttackConfig.from_dict({**AttackConfig().to_dict(), **d["attack"]})
        if "victims" in d:
            d["victims"] = tuple(VictimSpec(**v) for v in d["victims"])
        if "victim_training" in d:
            d["victim_training"] = VictimHyperparams(**d["victim_training"])
        for k in ("methods", "seeds", "metrics"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_yaml(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @property
    def hash(self) -> str:
        d = self.to_dict()
        for k in ("output_dir", "cache_dir", "name"):
            d.pop(k)
        return config_hash(d)

    def cache_path(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else default_cache_dir()


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    rows: list[dict]
    aggregate: list[dict]
    pivot: dict
    wall_clock: float
    artifacts: dict[str, str] = field(default_factory=dict)
    errors: list[dict] = field(default_factory=list)

    def value(self, victim: str, method: str, metric: str) -> float:
        return self.pivot[victim][method][metric]


# -- cached stages -------------------------------------------------------------------

def _atomic_save(save, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    save(tmp)
    os.replace(tmp, path)


def _data_key(cfg: ExperimentConfig) -> dict:
    if "path" in cfg.data:
        return {"path": str(Path(cfg.data["path"]).resolve())}
    return cfg._data_dict()


def prepare_dataset(cfg: ExperimentConfig) -> Dataset:
    if "path" in cfg.data:
        return load(cfg.data["path"])
    key = _data_key(cfg)
    root = cfg.cache_path() / "data" / config_hash(key)
    if not (root / "manifest").exists():
        tmp = root.with_name(f".{root.name}.{os.getpid()}.tmp")
        shutil.rmtree(tmp, ignore_errors=True)
        generate(SyntheticSpec.from_dict(key["synthetic"]), key["seed"], tmp)
        root.parent.mkdir(parents=True, exist_ok=True)
        try:
            os.replace(tmp, root)
        except OSError:
            shutil.rmtree(tmp, ignore_errors=True)  # another process won the race
    return load(root / "manifest")


def training_config_for(cfg: ExperimentConfig, ds: Dataset, seed: int) -> TrainingConfig:
    m = ds.manifest
    return replace(cfg.training, image_size=(m.image_size, m.image_size), channels=m.channels,
                   condition_channels=condition_channels(m.n_classes), T=cfg.schedule.T, seed=seed)


def obtain_scorenet(cfg: ExperimentConfig, ds: Dataset, seed: int) -> ScoreNetCheckpoint:
    tcfg = training_config_for(cfg, ds, seed)
    key = {"data": _data_key(cfg), "schedule": cfg.schedule.to_dict(), "training": tcfg.to_dict()}
    path = cfg.cache_path() / "scorenet" / f"{config_hash(key)}.pt"
    if path.exists():
        return ScoreNetCheckpoint.load(path)
    _, images, _, masks = ds.arrays("score-train")
    if len(images) == 0:
        raise ValueError("score-train split is empty")
    log.info("training score network (seed %d, %d steps)", seed, tcfg.max_steps)
    ckpt = ScoreTrainer(tcfg, cfg.schedule.build()).fit(images, masks).checkpoint()
    _atomic_save(ckpt.save, path)
    return ckpt


def obtain_oracle(cfg: ExperimentConfig, ds: Dataset, seed: int):
    sched = cfg.schedule.build()
    if cfg.oracle == "analytic":
        return PixelwiseOracle(ds.manifest.mixture_spec(), sched)
    if cfg.oracle == "scorenet":
        return as_oracle(obtain_scorenet(cfg, ds, seed))
    return as_oracle(ScoreNetCheckpoint.load(cfg.oracle))


def obtain_victim(cfg: ExperimentConfig, ds: Dataset, spec: VictimSpec) -> TorchVictim:
    key = {"data": _data_key(cfg), "spec": asdict(spec), "hyper": asdict(cfg.victim_training)}
    path = cfg.cache_path() / "victim" / f"{config_hash(key)}.pt"
    if path.exists():
        return TorchVictim.load(path)
    _, images, labels, _ = ds.arrays(spec.split)
    log.info("training victim %s on %s", spec.name, spec.split)
    victim = train_victim(spec, images, labels, ds.n_classes, cfg.victim_training)
    _atomic_save(victim.save, path)
    return victim


# -- attack dispatch -------------------------------------------------------------------

def craft(method: str, cfg: ExperimentConfig, x, y, seed: int, oracle=None, victim=None,
          surrogate=None) -> np.ndarray:
    """Adversarial images for one method; ``x`` is ``N x H x W x C``."""
    a = cfg.attack
    sched = cfg.schedule.build()
    if method == "clean":
        return x
    if method == "score":
        return run_attack(oracle, x, y, replace(a, query_enabled=False), sched).x_adv
    if method == "score-query":
        qcfg = replace(a, query_enabled=True, m_max=cfg.query_budget)
        return run_attack(oracle, x, y, qcfg, sched, victim=victim).x_adv
    if method == "fgsm":
        return fgsm(surrogate.gradient, x, y, a.eps, a.value_range)
    if method == "pgd":
        return pgd(surrogate.gradient, x, y, a.eps, a.step, cfg.pgd_steps, a.value_range)
    if method == "random-query":
        return np.stack([random_query_attack(victim, x[i], y[i], a.eps, cfg.query_budget,
                                             rng=[seed, i], block=cfg.random_block,
                                             value_range=a.value_range).x_adv
                         for i in range(len(x))])
    if method == "noise-control":
        return np.stack([gaussian_noise_control(x[i], a.eps, a.m_max, rng=[seed, i], mu=a.step,
                                                value_range=a.value_range)
                         for i in range(len(x))])
    raise ValueError(f"unknown method {method!r}")


# -- aggregation and persistence -------------------------------------------------------

def aggregate(rows: list[dict]) -> tuple[list[dict], dict]:
    groups: dict[tuple[str, str, str], list[float]] = {}
    for r in rows:
        groups.setdefault((r["victim"], r["method"], r["metric"]), []).append(r["value"])
    table, pivot = [], {}
    for (victim, method, metric), vals in groups.items():
        mean = float(np.mean(vals))
        table.append({"victim": victim, "method": method, "metric": metric, "mean": mean, "n": len(vals)})
        pivot.setdefault(victim, {}).setdefault(method, {})[metric] = mean
    return table, pivot


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields})


ROW_FIELDS = ["config_hash", "seed", "image_id", "victim", "method", "metric", "value"]
AGG_FIELDS = ["victim", "method", "metric", "mean", "n"]


def run_experiment(cfg: ExperimentConfig, plots: bool = True) -> RunRecord:
    """Victims x methods metric matrix (with a clean row), persisted as CSV, JSON and figures."""
    t0 = time.perf_counter()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash
    errors: list[dict] = []
    rows: list[dict] = []

    ds = prepare_dataset(cfg)
    ds.manifest.check_disjoint()
    ids, x, labels, y = ds.arrays("eval", cfg.eval_limit)
    if not ids:
        raise ValueError("eval split is empty")
    k = ds.n_classes

    for seed in cfg.seeds:
        victims = []
        for spec in cfg.victims:
            try:
                v = obtain_victim(cfg, ds, replace(spec, seed=seed))
                if cfg.enforce_gate:
                    require_gate(v)
                victims.append(v)
            except Exception as exc:
                log.error("victim %s unavailable: %s", spec.name, exc)
                errors.append({"seed": seed, "stage": "victim", "victim": spec.arch, "error": str(exc)})

        oracle = surrogate = None
        try:
            if any(m in ("score", "score-query") for m in cfg.methods):
                oracle = obtain_oracle(cfg, ds, seed)
            if any(m in ("fgsm", "pgd") for m in cfg.methods):
                # the attacker's own model: trained on the score network's data, never the victims'
                surrogate = obtain_victim(cfg, ds, VictimSpec(cfg.surrogate_arch, "score-train", seed))
        except Exception as exc:
            log.error("attacker models unavailable: %s", exc)
            errors.append({"seed": seed, "stage": "attacker", "error": str(exc)})

        shared: dict[str, np.ndarray] = {}
        for method in cfg.methods:
            if method in PER_VICTIM:
                continue
            try:
                shared[method] = craft(method, cfg, x, y, seed, oracle=oracle, surrogate=surrogate)
            except Exception as exc:
                log.error("method %s failed: %s", method, exc)
                errors.append({"seed": seed, "stage": "attack", "method": method, "error": str(exc)})

        for victim in victims:
            for method in cfg.methods:
                if method in PER_VICTIM:
                    try:
                        x_adv = craft(method, cfg, x, y, seed, oracle=oracle, victim=victim)
                    except Exception as exc:
                        log.error("method %s on %s failed: %s", method, victim.name, exc)
                        errors.append({"seed": seed, "stage": "attack", "method": method,
                                       "victim": victim.name, "error": str(exc)})
                        continue
                elif method in shared:
                    x_adv = shared[method]
                else:
                    continue
                probs = victim.predict(x_adv)
                for i, iid in enumerate(ids):
                    for metric, value in evaluate(probs[i], labels[i], k).items():
                        if cfg.metrics is None or metric in cfg.metrics:
                            rows.append({"config_hash": h, "seed": seed, "image_id": iid,
                                         "victim": victim.name, "method": method,
                                         "metric": metric, "value": float(value)})

    table, pivot = aggregate(rows)
    artifacts = {"rows": str(out / "metrics.csv"), "aggregate": str(out / "aggregate.csv"),
                 "summary": str(out / "summary.json"), "config": str(out / "config.yaml")}
    _write_csv(out / "metrics.csv", rows, ROW_FIELDS)
    _write_csv(out / "aggregate.csv", table, AGG_FIELDS)
    cfg.to_yaml(out / "config.yaml")
    wall = time.perf_counter() - t0
    with open(out / "summary.json", "w") as fh:
        json.dump({"config_hash": h, "name": cfg.name, "pivot": pivot, "errors": errors,
                   "wall_clock_s": wall, "n_images": len(ids), "seeds": list(cfg.seeds)},
                  fh, indent=2, sort_keys=True)
    if plots and pivot:
        for metric in sorted({r["metric"] for r in table} - {"cc_degenerate"}):
            p = plotting.method_comparison(pivot, metric, out / "plots" / f"{metric}.png",
                                           title=f"{cfg.name}: {metric}")
            artifacts[f"plot_{metric}"] = str(p)
    return RunRecord(h, rows, table, pivot, wall, artifacts, errors)


def sweep(cfg: ExperimentConfig, parameter: str, values, plots: bool = True) -> list[RunRecord]:
    """One run per attack-parameter value with shared seeds; writes a merged table and line plots."""
    if parameter not in SWEEPABLE:
        raise ValueError(f"can only sweep {SWEEPABLE}")
    values = list(values)
    if not values:
        raise ValueError("values must be nonempty")
    base = Path(cfg.output_dir)
    records, merged = [], []
    for v in values:
        v = int(v) if parameter == "m_max" else float(v)
        run_cfg = replace(cfg, attack=replace(cfg.attack, **{parameter: v}),
                          output_dir=str(base / f"{parameter}-{v}"))
        rec = run_experiment(run_cfg, plots=plots)
        records.append(rec)
        merged += [{"parameter": parameter, "value": v, **r} for r in rec.aggregate]
    base.mkdir(parents=True, exist_ok=True)
    _write_csv(base / f"sweep-{parameter}.csv", merged, ["parameter", "value"] + AGG_FIELDS)
    if plots:
        for metric in sorted({r["metric"] for r in merged} - {"cc_degenerate"}):
            plotting.sweep_lines(merged, parameter, metric, base / "plots" / f"sweep-{parameter}-{metric}.png")
    return records


def format_table(record: RunRecord, sep: str = ",") -> str:
    """Aggregate table as delimited text (victim, method, then one column per metric)."""
    metrics: list[str] = []
    for r in record.aggregate:
        if r["metric"] not in metrics:
            metrics.append(r["metric"])
    lines = [sep.join(["victim", "method", *metrics])]
    for victim, methods in record.pivot.items():
        for method, vals in methods.items():
            lines.append(sep.join([victim, method, *(f"{vals[m]:.4f}" if m in vals else "" for m in metrics)]))
    return "\n".join(lines)

