"""Score-oracle contract and closed-form oracles for Gaussian-mixture data.

A score oracle maps ``(x_t, c, t)`` to ``grad_x log p_t(x_t | c)`` with the same
shape as ``x_t``. ``c`` is a condition map with values in ``[-0.5, 0.5]`` or the
unconditional sentinel, a map filled with ``-1``.

Two analytic oracles are provided:

* :class:`ClassConditionalOracle` -- one class label per *image*; each class is
  an isotropic Gaussian around a mean image.
* :class:`PixelwiseOracle` -- one class label per *pixel*; pixels are
  independent given the label map, each class an isotropic Gaussian around a
  mean colour. This is the exact model behind the synthetic corpus textures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule

SENTINEL = -1.0


@runtime_checkable
class ScoreOracle(Protocol):
    def score(self, x_t: np.ndarray, c: np.ndarray, t: int) -> np.ndarray: ...


# -- condition maps ---------------------------------------------------------

def condition_channels(n_classes: int) -> int:
    """Binary tasks use a single channel; multi-class tasks one per class."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    return 1 if n_classes == 2 else n_classes


def normalize_mask(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Map an ``H x W`` label map to an ``H x W x K`` condition in [-0.5, 0.5]."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels outside [0, {n_classes - 1}]")
    if n_classes == 2:
        onehot = (labels == 1)[..., None]
    else:
        onehot = labels[..., None] == np.arange(n_classes)
    return onehot.astype(np.float64) - 0.5


def condition_to_labels(c: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_mask`; drops the channel axis."""
    c = np.asarray(c)
    if is_sentinel(c):
        raise ValueError("the unconditional sentinel carries no labels")
    if c.shape[-1] == 1:
        return (c[..., 0] > 0).astype(np.int64)
    return np.argmax(c, axis=-1)


def unconditional_like(c_or_shape) -> np.ndarray:
    shape = c_or_shape if isinstance(c_or_shape, tuple) else np.shape(c_or_shape)
    return np.full(shape, SENTINEL)


def is_sentinel(c: np.ndarray) -> bool:
    c = np.asarray(c)
    return c.size > 0 and bool(np.all(c == SENTINEL))


def check_condition(c: np.ndarray) -> None:
    c = np.asarray(c)
    if is_sentinel(c):
        return
    if np.any(c < -0.5) or np.any(c > 0.5):
        raise ValueError("condition values must lie in [-0.5, 0.5] (or be the -1 sentinel)")


# -- Gaussian mixtures -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianMixtureSpec:
    """Class-conditional isotropic Gaussians.

    ``means`` has shape ``(K, *event_shape)``; ``sigma2`` is a scalar or one
    variance per class; ``weights`` are the class priors.
    """

    means: np.ndarray
    sigma2: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim < 1 or means.shape[0] < 1:
            raise ValueError("need at least one component")
        k = means.shape[0]
        sigma2 = np.broadcast_to(np.asarray(self.sigma2, dtype=np.float64), (k,)).copy()
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.shape != (k,):
            raise ValueError(f"expected {k} weights, got {weights.shape}")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(sigma2 <= 0):
            raise ValueError("sigma2 must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "weights", weights)

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def event_shape(self) -> tuple[int, ...]:
        return self.means.shape[1:]

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "sigma2": self.sigma2.tolist(),
                "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixtureSpec":
        return cls(np.asarray(d["means"]), np.asarray(d["sigma2"]), np.asarray(d["weights"]))


def _diffused(spec: GaussianMixtureSpec, abar: float):
    """Means and variances of each component after noising to level ``abar``."""
    return np.sqrt(abar) * spec.means, abar * spec.sigma2 + (1.0 - abar)


def _component_logpdf(spec: GaussianMixtureSpec, x, abar: float, event_ndim: int) -> np.ndarray:
    """log N(x; m_k, v_k I) for every k; output shape ``(K, *batch)``."""
    means, var = _diffused(spec, abar)
    x = np.asarray(x, dtype=np.float64)
    axes = tuple(range(-event_ndim, 0)) if event_ndim else ()
    d = int(np.prod(x.shape[x.ndim - event_ndim:])) if event_ndim else 1
    out = []
    for k in range(spec.n_classes):
        sq = np.sum((x - means[k]) ** 2, axis=axes) if axes else (x - means[k]) ** 2
        out.append(-0.5 * sq / var[k] - 0.5 * d * np.log(2 * np.pi * var[k]))
    return np.stack(out)


def analytic_conditional_score(spec: GaussianMixtureSpec, x_t, class_id: int, t: int,
                               sched: NoiseSchedule) -> np.ndarray:
    """Score of one diffused component: (sqrt(abar) mu_k - x_t) / (abar sigma2 + 1 - abar)."""
    class_id = int(class_id)
    if not 0 <= class_id < spec.n_classes:
        raise ValueError(f"unknown class id {class_id}")
    means, var = _diffused(spec, sched.alpha_bar(t))
    return (means[class_id] - np.asarray(x_t, dtype=np.float64)) / var[class_id]


def mixture_posterior(spec: GaussianMixtureSpec, x, abar: float, event_ndim: int | None = None) -> np.ndarray:
    """Posterior class probabilities, shape ``(K, *batch)``."""
    if event_ndim is None:
        event_ndim = len(spec.event_shape)
    logp = _component_logpdf(spec, x, abar, event_ndim) + np.log(spec.weights).reshape(
        (-1,) + (1,) * (np.ndim(x) - event_ndim))
    return np.exp(logp - logsumexp(logp, axis=0, keepdims=True))


def analytic_marginal_score(spec: GaussianMixtureSpec, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Posterior-weighted sum of component scores for the whole mixture."""
    x_t = np.asarray(x_t, dtype=np.float64)
    abar = sched.alpha_bar(t)
    means, var = _diffused(spec, abar)
    post = mixture_posterior(spec, x_t, abar)
    out = np.zeros_like(x_t)
    for k in range(spec.n_classes):
        out += post[k] * (means[k] - x_t) / var[k]
    return out


# -- oracles -----------------------------------------------------------------

class ClassConditionalOracle:
    """Exact scores when the condition names a single class for the whole image.

    The condition map must carry one label everywhere; the event shape is the
    full image.
    """

    def __init__(self, spec: GaussianMixtureSpec, sched: NoiseSchedule):
        self.spec = spec
        self.sched = sched

    def score(self, x_t, c, t):
        if is_sentinel(c):
            return analytic_marginal_score(self.spec, x_t, t, self.sched)
        labels = np.unique(condition_to_labels(c))
        if labels.size != 1:
            raise ValueError("class-conditional oracle needs a uniform condition map")
        return analytic_conditional_score(self.spec, x_t, int(labels[0]), t, self.sched)


class PixelwiseOracle:
    """Exact scores for pixel-independent textures.

    ``spec.means`` has shape ``(K, C)``; inputs are ``(..., H, W, C)`` and the
    condition ``(..., H, W, K_c)``.
    """

    def __init__(self, spec: GaussianMixtureSpec, sched: NoiseSchedule):
        if len(spec.event_shape) != 1:
            raise ValueError("pixelwise oracle needs per-class mean colours of shape (K, C)")
        self.spec = spec
        self.sched = sched

    def score(self, x_t, c, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        abar = self.sched.alpha_bar(t)
        means, var = _diffused(self.spec, abar)
        if is_sentinel(c):
            post = mixture_posterior(self.spec, x_t, abar, event_ndim=1)
            out = np.zeros_like(x_t)
            for k in range(self.spec.n_classes):
                out += post[k][..., None] * (means[k] - x_t) / var[k]
            return out
        labels = condition_to_labels(c)
        return (means[labels] - x_t) / var[labels][..., None]

    def posterior(self, x, abar: float = 1.0) -> np.ndarray:
        """Per-pixel class posterior, shape ``(..., H, W, K)``."""
        post = mixture_posterior(self.spec, x, abar, event_ndim=1)
        return np.moveaxis(post, 0, -1)
