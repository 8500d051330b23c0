"""Score-driven l-inf attack and the gradient/query/noise baselines.

Images live in ``VALUE_RANGE`` (``[-1, 1]``). Budgets in :class:`AttackConfig`
are fractions of the 8-bit scale (``8/255`` means eight grey levels) and are
converted to absolute units with :func:`pixel_budget`; the free functions
(:func:`fgsm`, :func:`pgd`, ...) take absolute budgets.

All attack loops accept a single image ``(H, W, C)`` or a batch ``(N, H, W, C)``;
every operation is elementwise or per-image, so batching never changes results.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .cfgscore import GuidanceParams, conditional_segmentation_score
from .oracle import ScoreOracle, condition_to_labels
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

VALUE_RANGE = (-1.0, 1.0)
METHODS = ("score", "score-query", "fgsm", "pgd", "random-query", "noise-control")


def pixel_budget(fraction: float, value_range=VALUE_RANGE) -> float:
    lo, hi = value_range
    return float(fraction) * (hi - lo)


class QueryTarget(Protocol):
    def predict(self, x: np.ndarray) -> np.ndarray: ...


class AttackAborted(RuntimeError):
    """A victim query failed; ``partial`` holds the result up to that step."""

    def __init__(self, message: str, partial: "AttackResult"):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    mu: float = 2 / 255
    m_max: int = 30
    omega: float = 90.0
    # "head": t = m + 1; "linear": spread over [1, T]; an int: fixed t
    t_map: str | int = "head"
    # which schedule factor plays alpha_m: per-step alpha_t or cumulative alpha-bar_t
    alpha_kind: str = "step"
    noising: bool = True
    clipping: bool = True
    query_enabled: bool = False
    value_range: tuple[float, float] = VALUE_RANGE

    def __post_init__(self):
        if not 0 < self.mu <= self.epsilon:
            raise ValueError(f"need 0 < mu <= epsilon, got mu={self.mu}, epsilon={self.epsilon}")
        if self.m_max < 1:
            raise ValueError("m_max must be >= 1")
        if self.alpha_kind not in ("step", "cumulative"):
            raise ValueError(f"alpha_kind must be 'step' or 'cumulative', got {self.alpha_kind!r}")
        if not (self.t_map in ("head", "linear") or _as_int(self.t_map) is not None):
            raise ValueError(f"bad t_map {self.t_map!r}")

    @property
    def eps(self) -> float:
        return pixel_budget(self.epsilon, self.value_range)

    @property
    def step(self) -> float:
        return pixel_budget(self.mu, self.value_range)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["value_range"] = list(self.value_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "value_range" in d:
            d["value_range"] = tuple(d["value_range"])
        return cls(**d)


def _as_int(v):
    try:
        return int(v)
    except (TypeError, ValueError):
        return None


def timestep_for(m: int, cfg: AttackConfig, T: int) -> int:
    """Diffusion timestep used at attack step ``m``."""
    if cfg.t_map == "head":
        t = m + 1
    elif cfg.t_map == "linear":
        t = 1 if cfg.m_max == 1 else 1 + round(m * (T - 1) / (cfg.m_max - 1))
    else:
        t = int(cfg.t_map)
    if not 1 <= t <= T:
        raise ValueError(f"t_map({m}) = {t} outside schedule range [1, {T}]")
    return t


def _alpha(m: int, cfg: AttackConfig, sched: NoiseSchedule) -> tuple[int, float]:
    t = timestep_for(m, cfg, sched.T)
    a = sched.alpha(t) if cfg.alpha_kind == "step" else sched.alpha_bar(t)
    return t, a


def clip_to_range(x, value_range=VALUE_RANGE):
    return np.clip(x, value_range[0], value_range[1])


def clip_to_ball(x, center, eps: float, value_range=VALUE_RANGE):
    """Project onto ``[center - eps, center + eps]`` intersected with the value range."""
    lo = np.maximum(center - eps, value_range[0])
    hi = np.minimum(center + eps, value_range[1])
    return np.clip(x, lo, hi)


def _check_shapes(*arrays):
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {np.shape(a)}")


# -- score attack building blocks ---------------------------------------------

def step_perturbation(oracle: ScoreOracle, x_pseudo, y, m: int, cfg: AttackConfig,
                      sched: NoiseSchedule) -> np.ndarray:
    """-sqrt(1 - alpha_m) * omega * (s(x|y) - s(x)), evaluated at the pseudo sample."""
    t, a = _alpha(m, cfg, sched)
    css = conditional_segmentation_score(oracle, x_pseudo, y, t, GuidanceParams(cfg.omega))
    return -np.sqrt(1.0 - a) * css


def advance_pseudo(x_pseudo, delta_m, x_clean, m: int, cfg: AttackConfig,
                   sched: NoiseSchedule) -> np.ndarray:
    """Noise the pseudo sample with the step perturbation, then clip around the clean image."""
    _check_shapes(x_pseudo, delta_m, x_clean)
    _, a = _alpha(m, cfg, sched)
    x_pseudo = np.asarray(x_pseudo, dtype=np.float64)
    if cfg.noising:
        mixed = np.sqrt(a) * x_pseudo + np.sqrt(1.0 - a) * np.asarray(delta_m, dtype=np.float64)
    else:
        mixed = np.sqrt(a) * x_pseudo
    if cfg.clipping:
        return clip_to_ball(mixed, np.asarray(x_clean, dtype=np.float64), cfg.eps, cfg.value_range)
    return clip_to_range(mixed, cfg.value_range)


def accumulate(delta_adv, delta_m, cfg: AttackConfig) -> np.ndarray:
    """delta_adv <- clip_eps(mu * sign(delta_m) + delta_adv); sign(0) = 0."""
    _check_shapes(delta_adv, delta_m)
    return np.clip(cfg.step * np.sign(delta_m) + delta_adv, -cfg.eps, cfg.eps)


# -- losses used for querying ---------------------------------------------------

def query_loss(probs, labels) -> np.ndarray:
    """Per-image loss of a victim prediction: BCE for one channel, CE otherwise.

    ``probs`` is ``(..., H, W, K)``, ``labels`` ``(..., H, W)``; returns shape ``(...)``.
    """
    probs = np.clip(np.asarray(probs, dtype=np.float64), 1e-7, 1 - 1e-7)
    labels = np.asarray(labels)
    if probs.shape[-1] == 1:
        p = probs[..., 0]
        ll = labels * np.log(p) + (1 - labels) * np.log1p(-p)
    else:
        ll = np.log(np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0])
    return -ll.mean(axis=(-2, -1))


# -- results --------------------------------------------------------------------

@dataclass
class AttackState:
    x: np.ndarray
    x_pseudo: np.ndarray
    delta_adv: np.ndarray
    m: int = 0
    best_delta: np.ndarray | None = None
    best_loss: np.ndarray | None = None
    best_step: np.ndarray | None = None
    query_count: int = 0


@dataclass
class AttackResult:
    x_adv: np.ndarray
    delta_adv: np.ndarray
    method: str = "score"
    trace: list[dict] = field(default_factory=list)
    queries: int = 0
    best_loss: np.ndarray | None = None
    best_step: np.ndarray | None = None
    # False where querying was on but no query beat the initial threshold 0
    improved: np.ndarray | None = None


def _finalize(x, delta, value_range) -> np.ndarray:
    return clip_to_range(x + delta, value_range)


def run_attack(oracle: ScoreOracle, x, y, cfg: AttackConfig, sched: NoiseSchedule,
               victim: QueryTarget | None = None) -> AttackResult:
    """Score-driven attack; optionally query ``victim`` to keep the best step.

    Each step computes the step perturbation at the current pseudo sample,
    accumulates its sign into ``delta_adv``, and advances the pseudo sample.
    When querying, the victim sees the pseudo sample *before* the advance and
    the accumulated perturbation of that step is kept if its loss is the best so far.
    """
    if cfg.query_enabled and victim is None:
        raise ValueError("query mode needs a victim")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lo, hi = cfg.value_range
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("x outside the valid value range")
    batched = x.ndim == 4
    labels = condition_to_labels(y) if cfg.query_enabled else None
    n = x.shape[0] if batched else 1

    state = AttackState(x=x, x_pseudo=x.copy(), delta_adv=np.zeros_like(x))
    if cfg.query_enabled:
        state.best_delta = np.zeros_like(x)
        state.best_loss = np.zeros(n)
        state.best_step = np.full(n, -1)
    trace: list[dict] = []

    def result() -> AttackResult:
        delta = state.delta_adv
        improved = None
        if cfg.query_enabled:
            improved = state.best_step >= 0
            chosen = state.best_delta if batched else state.best_delta.reshape(x.shape)
            keep = improved.reshape((n,) + (1,) * 3) if batched else bool(improved[0])
            delta = np.where(keep, chosen, state.delta_adv)
            if not np.all(improved):
                log.warning("no query improved on the zero threshold for %d image(s); "
                            "returning the accumulated perturbation", int(np.sum(~improved)))
        return AttackResult(
            x_adv=_finalize(x, delta, cfg.value_range), delta_adv=delta,
            method="score-query" if cfg.query_enabled else "score", trace=trace,
            queries=state.query_count, best_loss=state.best_loss,
            best_step=state.best_step, improved=improved)

    for m in range(cfg.m_max):
        state.m = m
        t = timestep_for(m, cfg, sched.T)
        delta_m = step_perturbation(oracle, state.x_pseudo, y, m, cfg, sched)
        x_query = state.x_pseudo
        x_next = advance_pseudo(state.x_pseudo, delta_m, x, m, cfg, sched)
        state.delta_adv = accumulate(state.delta_adv, delta_m, cfg)
        rec = {"m": m, "t": t,
               "delta_m_absmax": float(np.max(np.abs(delta_m))),
               "delta_m_absmean": float(np.mean(np.abs(delta_m))),
               "delta_adv_absmax": float(np.max(np.abs(state.delta_adv)))}
        if cfg.query_enabled:
            try:
                probs = victim.predict(x_query)
            except Exception as exc:  # victim is an external black box
                trace.append(rec)
                raise AttackAborted(f"victim query failed at step {m}: {exc}", result()) from exc
            state.query_count += n
            loss = np.atleast_1d(query_loss(probs, labels))
            better = loss > state.best_loss
            if np.any(better):
                mask = better.reshape((n,) + (1,) * 3) if batched else bool(better[0])
                state.best_delta = np.where(mask, state.delta_adv, state.best_delta)
                state.best_loss = np.where(better, loss, state.best_loss)
                state.best_step = np.where(better, m, state.best_step)
            rec["query_loss"] = loss.tolist()
        trace.append(rec)
        state.x_pseudo = x_next
    return result()


# -- baselines -------------------------------------------------------------------

GradientProvider = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _grad(victim_grad: GradientProvider, x, y) -> np.ndarray:
    g = np.asarray(victim_grad(x, y), dtype=np.float64)
    if g.shape != np.shape(x):
        raise ValueError(f"gradient shape {g.shape} != input shape {np.shape(x)}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    return g


def fgsm(victim_grad: GradientProvider, x, y, epsilon: float,
         value_range=VALUE_RANGE) -> np.ndarray:
    """One signed-gradient step of size ``epsilon`` (absolute units)."""
    x = np.asarray(x, dtype=np.float64)
    return clip_to_range(x + epsilon * np.sign(_grad(victim_grad, x, y)), value_range)


def pgd(victim_grad: GradientProvider, x, y, epsilon: float, mu: float, steps: int,
        value_range=VALUE_RANGE) -> np.ndarray:
    """Iterated signed-gradient ascent projected onto the eps-ball around ``x``."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy()
    for _ in range(int(steps)):
        x_adv = x_adv + mu * np.sign(_grad(victim_grad, x_adv, y))
        x_adv = clip_to_ball(x_adv, x, epsilon, value_range)
    return x_adv


def _random_signs(rng: np.random.Generator, shape, block: int) -> np.ndarray:
    if block <= 1:
        return rng.choice([-1.0, 1.0], size=shape)
    *lead, h, w, c = shape
    hb, wb = -(-h // block), -(-w // block)
    coarse = rng.choice([-1.0, 1.0], size=(*lead, hb, wb, c))
    fine = np.repeat(np.repeat(coarse, block, axis=-3), block, axis=-2)
    return fine[..., :h, :w, :]


def random_query_attack(victim: QueryTarget, x, y, epsilon: float, budget: int,
                        rng: np.random.Generator | int | None = None, block: int = 4,
                        chunk: int = 50, value_range=VALUE_RANGE) -> AttackResult:
    """Argmax over ``budget`` random sign perturbations of the victim's query loss.

    Proposals are +-epsilon sign patterns constant over ``block``-sized tiles.
    Works on one image; ``chunk`` proposals are sent to the victim per call.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    labels = condition_to_labels(y)
    best_loss, best_delta, trace = -np.inf, None, []
    done = 0
    while done < budget:
        k = min(chunk, budget - done)
        deltas = epsilon * _random_signs(rng, (k,) + x.shape, block)
        cands = clip_to_range(x[None] + deltas, value_range)
        losses = np.atleast_1d(query_loss(victim.predict(cands), labels[None]))
        for i, loss in enumerate(losses):
            trace.append({"query": done + i, "query_loss": float(loss)})
        i = int(np.argmax(losses))
        if losses[i] > best_loss:
            best_loss, best_delta = float(losses[i]), cands[i] - x
        done += k
    return AttackResult(x_adv=_finalize(x, best_delta, value_range), delta_adv=best_delta,
                        method="random-query", trace=trace, queries=budget,
                        best_loss=np.array([best_loss]))


def gaussian_noise_control(x, epsilon: float, steps: int, rng: np.random.Generator | int | None = None,
                           mu: float | None = None, value_range=VALUE_RANGE) -> np.ndarray:
    """Accumulate ``mu * sign(N(0, I))`` for ``steps`` steps inside the eps-ball."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    mu = epsilon / 4 if mu is None else mu
    delta = np.zeros_like(x)
    for _ in range(int(steps)):
        delta = np.clip(delta + mu * np.sign(rng.standard_normal(x.shape)), -epsilon, epsilon)
    return _finalize(x, delta, value_range)
