"""Discrete diffusion noise schedule and the forward noising transforms.

Timesteps are 1-indexed: ``t`` ranges over ``1..T`` and ``alphas[t - 1]`` is
the per-step signal retention at step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("linear", "quadratic")


@dataclass(frozen=True)
class ScheduleSpec:
    """Serializable description of a schedule: ``{family, endpoints, T}``."""

    family: str = "linear"
    endpoints: tuple[float, float] = (1e-4, 2e-2)
    T: int = 1000

    def build(self) -> "NoiseSchedule":
        return build_schedule(self.T, self.family, self.endpoints)

    def to_dict(self) -> dict:
        return {"family": self.family, "endpoints": list(self.endpoints), "T": self.T}

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleSpec":
        return cls(family=d.get("family", "linear"),
                   endpoints=tuple(float(v) for v in d.get("endpoints", (1e-4, 2e-2))),
                   T=int(d.get("T", 1000)))


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step ``alphas`` and their cumulative products ``alpha_bars``.

    Constructing directly from ``alphas`` accepts any values in ``[0, 1]``;
    :func:`build_schedule` is stricter and is the normal entry point.
    """

    alphas: np.ndarray
    alpha_bars: np.ndarray = field(init=False)
    spec: ScheduleSpec | None = None

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        if alphas.size == 0:
            raise ValueError("schedule needs at least one step")
        if np.any(alphas < 0) or np.any(alphas > 1) or not np.all(np.isfinite(alphas)):
            raise ValueError("alphas must lie in [0, 1]")
        alphas.setflags(write=False)
        bars = np.cumprod(alphas)
        bars.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", bars)

    @property
    def T(self) -> int:
        return int(self.alphas.size)

    def _check(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check(t) - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._check(t) - 1])


def build_schedule(T: int = 1000, family: str = "linear",
                   endpoints: tuple[float, float] = (1e-4, 2e-2)) -> NoiseSchedule:
    """Build a schedule from a named variance family.

    ``endpoints`` are the first and last per-step variances ``beta_t = 1 - alpha_t``.
    "linear" spaces beta linearly; "quadratic" spaces sqrt(beta) linearly.
    A zero-variance schedule (``alpha_t = 1``) is accepted as a degenerate case.
    """
    T = int(T)
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    b0, b1 = (float(v) for v in endpoints)
    if family == "linear":
        betas = np.linspace(b0, b1, T, dtype=np.float64)
    elif family == "quadratic":
        if b0 < 0 or b1 < 0:
            raise ValueError("quadratic family needs non-negative endpoints")
        betas = np.linspace(np.sqrt(b0), np.sqrt(b1), T, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown schedule family {family!r}; expected one of {FAMILIES}")
    alphas = 1.0 - betas
    if np.any(alphas <= 0) or np.any(alphas > 1):
        raise ValueError("endpoints give alpha_t outside (0, 1]")
    return NoiseSchedule(alphas, spec=ScheduleSpec(family, (b0, b1), T))


def _mix(x, z, a: float):
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs z {z.shape}")
    return np.sqrt(a) * x + np.sqrt(1.0 - a) * z


def forward_diffuse(x0, t: int, z, sched: NoiseSchedule) -> np.ndarray:
    """Jump straight to step ``t``: sqrt(abar_t) x0 + sqrt(1 - abar_t) z."""
    return _mix(x0, z, sched.alpha_bar(t))


def single_step_diffuse(x_prev, t: int, z, sched: NoiseSchedule) -> np.ndarray:
    """One transition ``t-1 -> t``: sqrt(alpha_t) x_prev + sqrt(1 - alpha_t) z."""
    return _mix(x_prev, z, sched.alpha(t))
