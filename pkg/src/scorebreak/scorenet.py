"""Joint conditional/unconditional noise estimator exposed as a score oracle.

The network predicts the injected noise ``eps_hat`` from ``(x_t, c, t)``; the
score is ``-eps_hat / sqrt(1 - abar_t)``. A random fraction of every batch is
trained with the ``-1`` unconditional condition map so one network serves both
branches.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .nets import SmallUNet, count_parameters, to_nchw, to_nhwc
from .oracle import SENTINEL, GaussianMixtureSpec, analytic_conditional_score
from .schedule import NoiseSchedule, ScheduleSpec, forward_diffuse

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "scorebreak-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainingConfig:
    uncond_probability: float = 0.1
    learning_rate: float = 2e-5
    batch_size: int = 16
    max_steps: int = 2000
    T: int = 1000
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    condition_channels: int = 1
    widths: tuple[int, ...] = (32, 64, 64)
    time_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.uncond_probability <= 1.0:
            raise ValueError("uncond_probability must be in [0, 1]")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        d["image_size"] = tuple(d.get("image_size", (32, 32)))
        d["widths"] = tuple(d.get("widths", (32, 64, 64)))
        return cls(**d)


def build_network(cfg: TrainingConfig) -> SmallUNet:
    torch.manual_seed(cfg.seed)
    return SmallUNet(cfg.channels + cfg.condition_channels, cfg.channels,
                     widths=cfg.widths, time_dim=cfg.time_dim)


def training_target_residual(predicted_score, z_t, t, sched: NoiseSchedule):
    """mean((sqrt(1 - abar_t) * s + z_t)^2); ``t`` may be one step per batch row.

    Works on numpy arrays (returns a float) and torch tensors (returns a 0-d tensor).
    """
    if tuple(predicted_score.shape) != tuple(z_t.shape):
        raise ValueError(f"shape mismatch: {tuple(predicted_score.shape)} vs {tuple(z_t.shape)}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ValueError(f"timestep outside [1, {sched.T}]")
    coef = np.sqrt(1.0 - sched.alpha_bars[t_arr - 1])
    if coef.ndim:
        coef = coef.reshape((-1,) + (1,) * (len(predicted_score.shape) - 1))
    if torch.is_tensor(predicted_score):
        coef = torch.as_tensor(coef, dtype=predicted_score.dtype)
        return ((coef * predicted_score + z_t) ** 2).mean()
    return float(np.mean((coef * predicted_score + z_t) ** 2))


@dataclass
class ScoreNetCheckpoint:
    config: TrainingConfig
    schedule: ScheduleSpec
    state_dict: dict
    step: int = 0
    loss_stats: dict = field(default_factory=dict)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": "scorenet",
                    "config": self.config.to_dict(), "schedule": self.schedule.to_dict(),
                    "state_dict": self.state_dict, "step": self.step,
                    "loss_stats": self.loss_stats}, path)
        return path

    @classmethod
    def load(cls, path) -> "ScoreNetCheckpoint":
        blob = load_container(path, "scorenet")
        return cls(TrainingConfig.from_dict(blob["config"]), ScheduleSpec.from_dict(blob["schedule"]),
                   blob["state_dict"], blob["step"], blob["loss_stats"])


def load_container(path, kind: str) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a scorebreak checkpoint")
    if blob.get("version", 0) > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob['version']}")
    if blob.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {blob.get('kind')}")
    return blob


class ScoreTrainer:
    """Single-writer training state: network, optimizer, step counter, loss statistics."""

    def __init__(self, cfg: TrainingConfig, sched: NoiseSchedule):
        if sched.T != cfg.T:
            raise ValueError(f"schedule has T={sched.T}, config says {cfg.T}")
        self.cfg = cfg
        self.sched = sched
        self.net = build_network(cfg)
        self.opt = torch.optim.Adam(self.net.parameters(), lr=cfg.learning_rate)
        self.step = 0
        self.recent = deque(maxlen=100)
        self.history: list[tuple[int, float]] = []
        self.last_unconditional: np.ndarray | None = None
        log.info("score network: %d parameters", count_parameters(self.net))

    def train_step(self, batch, rng: np.random.Generator) -> float:
        """One optimizer update on ``batch = (images NHWC, masks NHWK)``."""
        images, masks = (np.asarray(a, dtype=np.float64) for a in batch)
        if len(images) == 0:
            raise ValueError("empty batch")
        if np.any(masks < -0.5) or np.any(masks > 0.5):
            raise ValueError("masks must be normalized to [-0.5, 0.5]")
        n = len(images)
        uncond = rng.random(n) < self.cfg.uncond_probability
        c = np.where(uncond[:, None, None, None], SENTINEL, masks)
        t = rng.integers(1, self.sched.T + 1, size=n)
        z = rng.standard_normal(images.shape)
        x_t = np.stack([forward_diffuse(images[i], int(t[i]), z[i], self.sched) for i in range(n)])
        self.last_unconditional = uncond

        self.net.train()
        inp = to_nchw(np.concatenate([x_t, c], axis=-1))
        eps_hat = self.net(inp, torch.as_tensor(t))
        sigma = torch.as_tensor(np.sqrt(1.0 - self.sched.alpha_bars[t - 1]), dtype=torch.float32)
        score = -eps_hat / sigma[:, None, None, None]
        loss = training_target_residual(score, to_nchw(z), t, self.sched)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()

        value = float(loss.detach())
        self.step += 1
        self.recent.append(value)
        if self.step % 10 == 0:
            self.history.append((self.step, float(np.mean(self.recent))))
        return value

    def fit(self, images, masks, steps: int | None = None, rng: np.random.Generator | int | None = None,
            checkpoint_path=None, checkpoint_every: int = 0) -> "ScoreTrainer":
        """Train on minibatches drawn with replacement from the given arrays."""
        rng = np.random.default_rng(self.cfg.seed if rng is None else rng)
        steps = self.cfg.max_steps if steps is None else steps
        for _ in range(steps):
            idx = rng.integers(0, len(images), size=self.cfg.batch_size)
            self.train_step((images[idx], masks[idx]), rng)
            if checkpoint_path and checkpoint_every and self.step % checkpoint_every == 0:
                self.checkpoint().save(checkpoint_path)
            if self.step % 500 == 0:
                log.info("step %d loss %.4f", self.step, float(np.mean(self.recent)))
        return self

    def checkpoint(self) -> ScoreNetCheckpoint:
        spec = self.sched.spec or ScheduleSpec(T=self.sched.T)
        state = {k: v.detach().clone() for k, v in self.net.state_dict().items()}
        return ScoreNetCheckpoint(self.cfg, spec, state, self.step,
                                  {"recent_mean": float(np.mean(self.recent)) if self.recent else None,
                                   "history": list(self.history)})


class ScoreNetOracle:
    """Read-only score oracle backed by a trained network (deterministic inference)."""

    def __init__(self, net: SmallUNet, cfg: TrainingConfig, sched: NoiseSchedule):
        self.net = net.eval()
        self.cfg = cfg
        self.sched = sched

    def _prepare(self, x, c):
        x = np.asarray(x, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if c.ndim == 3:
            c = np.broadcast_to(c, (len(x),) + c.shape)
        h, w = self.cfg.image_size
        if x.shape[1:] != (h, w, self.cfg.channels):
            raise ValueError(f"input {x.shape[1:]} incompatible with network input {(h, w, self.cfg.channels)}")
        if c.shape != x.shape[:3] + (self.cfg.condition_channels,):
            raise ValueError(f"condition {c.shape} incompatible with {self.cfg.condition_channels} channels")
        return x, c, single

    def _eval(self, x, c, t):
        sigma = np.sqrt(1.0 - self.sched.alpha_bar(t))
        with torch.no_grad():
            tt = torch.full((len(x),), int(t), dtype=torch.long)
            eps_hat = self.net(to_nchw(np.concatenate([x, c], axis=-1)), tt)
        return -to_nhwc(eps_hat) / sigma

    def score(self, x_t, c, t):
        x, c, single = self._prepare(x_t, c)
        out = self._eval(x, c, t)
        return out[0] if single else out

    def score_pair(self, x_t, c, t):
        """Conditional and unconditional scores from one batched forward pass."""
        x, c, single = self._prepare(x_t, c)
        out = self._eval(np.concatenate([x, x]), np.concatenate([c, np.full_like(c, SENTINEL)]), t)
        cond, uncond = out[: len(x)], out[len(x):]
        return (cond[0], uncond[0]) if single else (cond, uncond)


def as_oracle(ckpt: ScoreNetCheckpoint) -> ScoreNetOracle:
    net = build_network(ckpt.config)
    net.load_state_dict(ckpt.state_dict)
    return ScoreNetOracle(net, ckpt.config, ckpt.schedule.build())


def score_fidelity(oracle, spec, sched: NoiseSchedule, t: int, n: int = 64,
                   rng: np.random.Generator | int | None = 0, condition=None) -> dict[str, float]:
    """Compare an oracle with the exact single-Gaussian score on noised samples.

    Samples ``x_0 ~ N(mu, sigma2 I)`` from component 0 of ``spec``, noises them
    to step ``t``, and reports the relative L2 error and mean cosine similarity.
    """
    rng = np.random.default_rng(rng)
    mu = spec.means[0]
    x0 = mu + np.sqrt(spec.sigma2[0]) * rng.standard_normal((n,) + mu.shape)
    z = rng.standard_normal(x0.shape)
    xt = np.stack([forward_diffuse(x0[i], t, z[i], sched) for i in range(n)])
    c = np.full(xt.shape[:3] + (1,), -0.5) if condition is None else condition
    got = oracle.score(xt, c, t)
    want = np.stack([analytic_conditional_score(spec, xt[i], 0, t, sched) for i in range(n)])
    g, w = got.reshape(n, -1), want.reshape(n, -1)
    rel = float(np.linalg.norm(g - w) / np.linalg.norm(w))
    cos = float(np.mean(np.sum(g * w, 1) / (np.linalg.norm(g, axis=1) * np.linalg.norm(w, axis=1))))
    return {"rel_l2": rel, "cosine": cos}


def gaussian_toy_set(n: int, size: int = 32, sigma2: float = 0.05,
                     rng: np.random.Generator | int | None = 0):
    """Single-Gaussian image set with a smooth mean pattern, all-background condition maps.

    Returns ``(spec, images, masks)``; ``spec`` is the exact one-component model.
    """
    rng = np.random.default_rng(rng)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    mu = np.stack([0.5 * np.sin(3 * xx), 0.4 * np.cos(2 * yy), 0.3 * (xx - yy)], -1)
    spec = GaussianMixtureSpec(mu[None], sigma2, [1.0])
    images = mu + np.sqrt(sigma2) * rng.standard_normal((n, size, size, 3))
    masks = np.full((n, size, size, 1), -0.5)
    return spec, images, masks
