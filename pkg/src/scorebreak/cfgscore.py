"""Conditional segmentation score from a joint conditional/unconditional score model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .oracle import ScoreOracle, is_sentinel, unconditional_like


@dataclass(frozen=True)
class GuidanceParams:
    omega: float = 90.0

    def __post_init__(self):
        if not math.isfinite(self.omega):
            raise ValueError("omega must be finite")


def conditional_segmentation_score(oracle: ScoreOracle, x, y, t: int,
                                   g: GuidanceParams = GuidanceParams()) -> np.ndarray:
    """omega * (s(x | y) - s(x)): the gradient of log p(y | x) up to scale.

    Oracles exposing ``score_pair(x, c, t)`` evaluate both branches in one
    forward pass; the arithmetic is unchanged.
    """
    if is_sentinel(y):
        raise ValueError("y must be a conditional map, not the unconditional sentinel")
    pair = getattr(oracle, "score_pair", None)
    if pair is not None:
        cond, uncond = pair(x, y, t)
    else:
        cond = oracle.score(x, y, t)
        uncond = oracle.score(x, unconditional_like(y), t)
    return g.omega * (np.asarray(cond, dtype=np.float64) - np.asarray(uncond, dtype=np.float64))
