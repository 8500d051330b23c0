"""Command-line entry point: ``scorebreak <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .attack import METHODS, AttackConfig, AttackAborted
from .bench import ExperimentConfig, craft, format_table, run_experiment, sweep
from .data import SyntheticSpec, generate, load
from .metrics import MetricReport, evaluate
from .oracle import PixelwiseOracle
from .schedule import ScheduleSpec
from .scorenet import ScoreNetCheckpoint, ScoreTrainer, TrainingConfig, as_oracle
from .victim import TorchVictim, VictimHyperparams, VictimSpec, train_victim

log = logging.getLogger("scorebreak")


def _fraction(text: str) -> float:
    """Accept ``0.03``, ``8/255`` and similar."""
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc


def _t_map(text: str):
    return int(text) if text.lstrip("-").isdigit() else text


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.config:
        data = ExperimentConfig.from_yaml(args.config).data
        spec = SyntheticSpec.from_dict(data.get("synthetic", {}))
        seed = int(data.get("seed", 0)) if args.seed is None else args.seed
    else:
        counts = dict(zip(("score-train", "victim-train", "eval"), args.counts))
        spec = SyntheticSpec(image_size=args.size, channels=args.channels, n_classes=args.n_classes,
                             separation=args.separation, sigma=args.sigma, counts=counts)
        seed = args.seed or 0
    m = generate(spec, seed, args.out)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest"),
                      "counts": {k: len(v) for k, v in m.splits.items()}}))
    return 0


def cmd_train_score(args) -> int:
    ds = load(args.data)
    m = ds.manifest
    cfg = TrainingConfig(learning_rate=args.lr, batch_size=args.batch, max_steps=args.steps,
                         image_size=(m.image_size, m.image_size), channels=m.channels,
                         condition_channels=1 if m.n_classes == 2 else m.n_classes,
                         widths=args.widths, seed=args.seed)
    _, images, _, masks = ds.arrays("score-train")
    trainer = ScoreTrainer(cfg, ScheduleSpec(T=cfg.T).build())
    trainer.fit(images, masks, checkpoint_path=args.out, checkpoint_every=args.checkpoint_every)
    trainer.checkpoint().save(args.out)
    print(json.dumps({"checkpoint": str(args.out), "steps": trainer.step,
                      "recent_loss": float(np.mean(trainer.recent))}))
    return 0


def cmd_train_victim(args) -> int:
    ds = load(args.data)
    if args.split == "score-train":
        raise SystemExit("victims must not train on the score model's split")
    _, images, labels, _ = ds.arrays(args.split)
    hyper = VictimHyperparams(steps=args.steps, learning_rate=args.lr)
    victim = train_victim(VictimSpec(args.arch, args.split, args.seed), images, labels, ds.n_classes, hyper)
    victim.save(args.out)
    print(json.dumps({"victim": str(args.out), **victim.report}))
    return 0 if victim.passed_gate else 3


def _attack_config(args) -> AttackConfig:
    return AttackConfig(epsilon=args.epsilon, mu=args.mu, m_max=args.m_max, omega=args.omega,
                        t_map=args.t_map)


def cmd_attack(args) -> int:
    ds = load(args.data)
    ids, x, _, y = ds.arrays(args.split, args.limit)
    cfg = ExperimentConfig(data={"path": str(args.data)}, attack=_attack_config(args),
                           query_budget=args.queries, seeds=(args.seed,), pgd_steps=args.pgd_steps)
    oracle = victim = None
    if args.method in ("score", "score-query"):
        if args.checkpoint == "analytic":
            oracle = PixelwiseOracle(ds.manifest.mixture_spec(), cfg.schedule.build())
        elif args.checkpoint:
            oracle = as_oracle(ScoreNetCheckpoint.load(args.checkpoint))
        else:
            raise SystemExit("--checkpoint is required for score attacks")
    if args.method in ("score-query", "random-query", "fgsm", "pgd"):
        if not args.victim:
            raise SystemExit(f"--victim is required for {args.method}")
        victim = TorchVictim.load(args.victim)
    try:
        x_adv = craft(args.method, cfg, x, y, args.seed, oracle=oracle, victim=victim, surrogate=victim)
    except AttackAborted as exc:
        log.error("%s", exc)
        return 2
    np.savez_compressed(args.out, ids=np.array(ids), x_adv=x_adv, x=x)
    print(json.dumps({"out": str(args.out), "n": len(ids), "method": args.method,
                      "max_linf": float(np.max(np.abs(x_adv - x))) if len(ids) else 0.0}))
    return 0


def cmd_evaluate(args) -> int:
    ds = load(args.data)
    victim = TorchVictim.load(args.victim)
    blob = np.load(args.adv)
    lookup = {s: i for i, s in enumerate(ds.manifest.splits[args.split])}
    report = MetricReport()
    probs = victim.predict(blob["x_adv"])
    for i, sid in enumerate(blob["ids"].tolist()):
        if sid not in lookup:
            raise SystemExit(f"image {sid} is not in split {args.split}")
        report.add(sid, evaluate(probs[i], ds.read_sample(args.split, sid).labels, ds.n_classes))
    if args.out:
        report.to_csv(args.out)
        report.to_json(Path(args.out).with_suffix(".json"))
    for k, v in report.means().items():
        print(f"{k},{v:.6f}")
    return 0


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.out:
        changes["output_dir"] = str(args.out)
    if args.seeds:
        changes["seeds"] = args.seeds
    return replace(cfg, **changes)


def cmd_report(args) -> int:
    cfg = _load_config(args)
    record = run_experiment(cfg, plots=not args.no_plots)
    print(format_table(record, sep=args.sep))
    for name, path in sorted(record.artifacts.items()):
        print(f"# {name}: {path}", file=sys.stderr)
    for err in record.errors:
        print(f"# error: {json.dumps(err)}", file=sys.stderr)
    return 1 if record.errors else 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = [float(v) for v in args.values.split(",")]
    records = sweep(cfg, args.parameter, values, plots=not args.no_plots)
    for v, rec in zip(values, records):
        print(f"# {args.parameter}={v:g}")
        print(format_table(rec, sep=args.sep))
    return 1 if any(r.errors for r in records) else 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scorebreak", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic image/mask corpus")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--config", type=Path, help="take the data section of an experiment config")
    g.add_argument("--seed", type=int)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--n-classes", type=int, default=2)
    g.add_argument("--separation", type=float, default=0.15)
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--counts", type=_ints, default=(256, 256, 64),
                   help="score-train,victim-train,eval sample counts")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-score", help="train the conditional/unconditional score network")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--widths", type=_ints, default=(16, 32, 32))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint-every", type=int, default=500)
    t.set_defaults(func=cmd_train_score)

    v = sub.add_parser("train-victim", help="train a toy segmentation victim")
    v.add_argument("--data", required=True, type=Path)
    v.add_argument("--out", required=True, type=Path)
    v.add_argument("--arch", choices=("unet", "dilated"), default="unet")
    v.add_argument("--split", default="victim-train")
    v.add_argument("--steps", type=int, default=600)
    v.add_argument("--lr", type=float, default=2e-3)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_train_victim)

    a = sub.add_parser("attack", help="craft adversarial images for one split")
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path, help=".npz with ids, x, x_adv")
    a.add_argument("--method", choices=METHODS, default="score")
    a.add_argument("--checkpoint", help="score network checkpoint, or 'analytic'")
    a.add_argument("--victim", type=Path, help="victim checkpoint (queries, or gradients for fgsm/pgd)")
    a.add_argument("--epsilon", type=_fraction, default=8 / 255, help="budget on the 8-bit scale, e.g. 8/255")
    a.add_argument("--mu", type=_fraction, default=2 / 255)
    a.add_argument("--m-max", type=int, default=30)
    a.add_argument("--omega", type=float, default=90.0)
    a.add_argument("--t-map", type=_t_map, default="head", help="head, linear, or a fixed timestep")
    a.add_argument("--queries", type=int, default=100)
    a.add_argument("--pgd-steps", type=int, default=10)
    a.add_argument("--split", default="eval")
    a.add_argument("--limit", type=int)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("evaluate", help="metrics of a victim on adversarial images")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--adv", required=True, type=Path)
    e.add_argument("--victim", required=True, type=Path)
    e.add_argument("--split", default="eval")
    e.add_argument("--out", type=Path, help="per-image CSV (a JSON summary is written next to it)")
    e.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("report", cmd_report, "run an experiment config end to end"),
                                 ("sweep", cmd_sweep, "sweep omega or m_max")):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("--config", type=Path)
        r.add_argument("--out", type=Path, help="output directory (overrides the config)")
        r.add_argument("--seeds", type=_ints)
        r.add_argument("--sep", default=",")
        r.add_argument("--no-plots", action="store_true")
        if name == "sweep":
            r.add_argument("--parameter", choices=("omega", "m_max"), required=True)
            r.add_argument("--values", required=True, help="comma-separated")
        r.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
