"""Toy victim segmenters: trained conv nets and the closed-form Bayes classifier.

Victims only ever *measure* attacks. Every victim implements ``predict(x)``
returning per-pixel probabilities (``H x W x 1`` foreground probability for
binary tasks, ``H x W x K`` class probabilities otherwise); trained victims
also expose ``gradient(x, y)`` so they can act as white-box surrogates.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .metrics import miou_acc
from .nets import DilatedNet, SmallUNet, to_nchw, to_nhwc
from .oracle import GaussianMixtureSpec, condition_to_labels, mixture_posterior
from .scorenet import CHECKPOINT_FORMAT, CHECKPOINT_VERSION, load_container

log = logging.getLogger(__name__)

ARCHITECTURES = ("unet", "dilated")


class VictimGateError(RuntimeError):
    pass


@dataclass(frozen=True)
class VictimSpec:
    arch: str = "unet"
    split: str = "victim-train"
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; registered: {ARCHITECTURES}")

    @property
    def name(self) -> str:
        return f"{self.arch}-s{self.seed}"


@dataclass(frozen=True)
class VictimHyperparams:
    steps: int = 600
    learning_rate: float = 2e-3
    batch_size: int = 16
    val_fraction: float = 0.2
    gate: float = 0.80


def build_victim_net(arch: str, channels: int, n_classes: int, seed: int):
    torch.manual_seed(seed)
    out = 1 if n_classes == 2 else n_classes
    if arch == "unet":
        return SmallUNet(channels, out, widths=(16, 32, 32))
    if arch == "dilated":
        return DilatedNet(channels, out, width=24)
    raise ValueError(f"unknown architecture {arch!r}")


def _loss(logits: torch.Tensor, labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    if n_classes == 2:
        return F.binary_cross_entropy_with_logits(logits[:, 0], labels.float())
    return F.cross_entropy(logits, labels)


def _probs(logits: torch.Tensor, n_classes: int) -> torch.Tensor:
    return torch.sigmoid(logits) if n_classes == 2 else torch.softmax(logits, dim=1)


@dataclass
class TorchVictim:
    net: torch.nn.Module
    spec: VictimSpec
    n_classes: int
    channels: int = 3
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.net.eval()

    @property
    def passed_gate(self) -> bool:
        return bool(self.report.get("passed_gate", False))

    @property
    def name(self) -> str:
        return self.spec.name

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        xb = x[None] if single else x
        with torch.no_grad():
            p = to_nhwc(_probs(self.net(to_nchw(xb)), self.n_classes))
        return p[0] if single else p

    def gradient(self, x, y) -> np.ndarray:
        """d loss / d x for the ground-truth condition map ``y`` (white-box use)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        xb = to_nchw(x[None] if single else x).requires_grad_(True)
        labels = torch.as_tensor(condition_to_labels(y))
        if single:
            labels = labels[None]
        loss = _loss(self.net(xb), labels, self.n_classes)
        (g,) = torch.autograd.grad(loss, xb)
        g = to_nhwc(g)
        return g[0] if single else g

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": "victim",
                    "config": {"spec": asdict(self.spec), "n_classes": self.n_classes,
                               "channels": self.channels},
                    "state_dict": self.net.state_dict(), "report": self.report}, path)
        return path

    @classmethod
    def load(cls, path) -> "TorchVictim":
        blob = load_container(path, "victim")
        cfg = blob["config"]
        spec = VictimSpec(**cfg["spec"])
        net = build_victim_net(spec.arch, cfg["channels"], cfg["n_classes"], spec.seed)
        net.load_state_dict(blob["state_dict"])
        return cls(net, spec, cfg["n_classes"], cfg["channels"], blob["report"])


def mean_miou(victim, images, labels, n_classes: int, batch: int = 64) -> float:
    if len(images) == 0:
        return float("nan")
    scores = []
    for i in range(0, len(images), batch):
        probs = victim.predict(images[i:i + batch])
        pred = (probs[..., 0] >= 0.5).astype(np.int64) if probs.shape[-1] == 1 else probs.argmax(-1)
        scores += [miou_acc(p, g, n_classes)[0] for p, g in zip(pred, labels[i:i + batch])]
    return float(np.mean(scores))


def train_victim(spec: VictimSpec, images, labels, n_classes: int,
                 hyper: VictimHyperparams = VictimHyperparams()) -> TorchVictim:
    """Train a victim on one split; the last ``val_fraction`` of it is held out for the gate."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    n_val = int(round(len(images) * hyper.val_fraction))
    tr_x, tr_y = images[: len(images) - n_val], labels[: len(images) - n_val]
    va_x, va_y = images[len(images) - n_val:], labels[len(images) - n_val:]
    if len(tr_x) == 0:
        raise ValueError("no training images")

    net = build_victim_net(spec.arch, images.shape[-1], n_classes, spec.seed)
    opt = torch.optim.Adam(net.parameters(), lr=hyper.learning_rate)
    rng = np.random.default_rng(spec.seed)
    net.train()
    for step in range(hyper.steps):
        idx = rng.integers(0, len(tr_x), size=hyper.batch_size)
        loss = _loss(net(to_nchw(tr_x[idx])), torch.as_tensor(tr_y[idx]), n_classes)
        opt.zero_grad()
        loss.backward()
        opt.step()
    victim = TorchVictim(net, spec, n_classes, images.shape[-1])
    train_miou = mean_miou(victim, tr_x, tr_y, n_classes)
    val_miou = mean_miou(victim, va_x, va_y, n_classes) if n_val else train_miou
    victim.report = {"train_miou": train_miou, "val_miou": val_miou, "steps": hyper.steps,
                     "gate": hyper.gate, "passed_gate": bool(val_miou >= hyper.gate)}
    if not victim.passed_gate:
        log.warning("victim %s failed the clean-mIoU gate: %.3f < %.2f", spec.name, val_miou, hyper.gate)
    return victim


def require_gate(victim) -> None:
    if hasattr(victim, "passed_gate") and not victim.passed_gate:
        raise VictimGateError(f"victim {getattr(victim, 'name', victim)} did not pass its clean-mIoU gate; "
                              "refusing to measure attacks on it")


class BayesVictim:
    """Per-pixel posterior of the texture model: p(class | pixel colour)."""

    name = "bayes"
    passed_gate = True

    def __init__(self, spec: GaussianMixtureSpec):
        if len(spec.event_shape) != 1:
            raise ValueError("bayes victim needs per-class mean colours of shape (K, C)")
        self.spec = spec
        self.n_classes = spec.n_classes

    def predict(self, x) -> np.ndarray:
        post = np.moveaxis(mixture_posterior(self.spec, np.asarray(x, dtype=np.float64), 1.0, event_ndim=1), 0, -1)
        return post[..., 1:2] if self.n_classes == 2 else post


def bayes_victim(spec: GaussianMixtureSpec) -> BayesVictim:
    return BayesVictim(spec)
