"""Expensive training runs shared by the slow tests, computed once per session."""

import os
import tempfile
from dataclasses import replace
from functools import lru_cache

import numpy as np

from scorebreak.bench import ExperimentConfig, run_experiment
from scorebreak.schedule import build_schedule
from scorebreak.scorenet import ScoreTrainer, TrainingConfig, as_oracle, gaussian_toy_set, score_fidelity

FIDELITY_STEPS = 2000
SEEDS = (0, 1, 2)

# fresh per session unless the caller points SCOREBREAK_CACHE at a warm cache
_CACHE = os.environ.get("SCOREBREAK_CACHE") or tempfile.mkdtemp(prefix="scorebreak-cache-")
_OUT = tempfile.mkdtemp(prefix="scorebreak-runs-")


@lru_cache(maxsize=None)
def fidelity_run(seed: int) -> dict:
    sched = build_schedule()
    spec, images, masks = gaussian_toy_set(512, rng=100 + seed)
    cfg = TrainingConfig(learning_rate=2e-4, widths=(16, 32, 32), seed=seed, max_steps=FIDELITY_STEPS)
    trainer = ScoreTrainer(cfg, sched)
    rng = np.random.default_rng(seed)
    trainer.fit(images, masks, steps=100, rng=rng)
    early = float(np.mean(trainer.recent))
    trainer.fit(images, masks, steps=FIDELITY_STEPS - 100, rng=rng)
    late = float(np.mean(trainer.recent))
    fid = score_fidelity(as_oracle(trainer.checkpoint()), spec, sched, sched.T // 2, n=64, rng=seed)
    return {"early_loss": early, "late_loss": late, **fid}


def toy_config(seed: int, **changes) -> ExperimentConfig:
    cfg = ExperimentConfig(seeds=(seed,), cache_dir=_CACHE, output_dir=os.path.join(_OUT, f"seed{seed}"))
    return replace(cfg, **changes)


@lru_cache(maxsize=None)
def toy_record(seed: int, methods: tuple = ("clean", "score", "score-query", "noise-control"),
               omega: float = 90.0):
    base = toy_config(seed)
    cfg = replace(base, methods=methods, attack=replace(base.attack, omega=omega),
                  output_dir=os.path.join(_OUT, f"seed{seed}-omega{omega}-{'-'.join(methods)}"))
    return run_experiment(cfg, plots=False)

# pass/fail lines from the acceptance module, echoed in the terminal summary
ACCEPTANCE: list[str] = []
