"""Mutual exclusion between old-class predictions and new-class seeds.

Where the previous model's binarized prediction claims a pixel, the
current step's seed map must not nominate a new class. The check counts
offending pixels; enforcement zeroes the whole seed vector at claimed
pixels, so the pixel's one-hot becomes the zero vector and the sum of
the two per-pixel indicator norms never exceeds 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassSpace, ScoreMap, Semantics, one_hot
from .binarize import BinaryPrediction
from .localizer import SeedMap


@dataclass
class TmeReport:
    violations: int
    violation_mask: np.ndarray  # [H, W] uint8, 1 where the constraint is broken
    enforced: bool = False


def _check_shapes(old_pred: BinaryPrediction, seed: SeedMap) -> None:
    if old_pred.hw != seed.hw:
        raise ValueError(f"old prediction {old_pred.hw} and seed {seed.hw} disagree on size")


def tme_check(old_pred: BinaryPrediction, seed: SeedMap, space: ClassSpace) -> TmeReport:
    """Count pixels claimed by an old class where a new class still wins."""
    _check_shapes(old_pred, seed)
    if seed.channels != space.num_channels:
        raise ValueError("seed channels do not match the class space")
    sub = seed.scores.select((0,) + space.new_channels)
    new_hot = one_hot(sub, drop_background=True).data.any(axis=0)
    viol = old_pred.foreground() & new_hot
    return TmeReport(violations=int(viol.sum()), violation_mask=viol.astype(np.uint8))


def tme_enforce(old_pred: BinaryPrediction, seed: SeedMap) -> SeedMap:
    """Zero the seed vector wherever the old prediction claims the pixel.

    Idempotent: claimed pixels are already zero on a second pass, and
    the exclusion mask is merged, not replaced.
    """
    _check_shapes(old_pred, seed)
    fg = old_pred.foreground()
    scores = seed.scores.data.copy()
    scores[:, fg] = 0.0
    excluded = fg.astype(np.uint8)
    if seed.excluded is not None:
        excluded = np.maximum(excluded, seed.excluded)
    return SeedMap(ScoreMap(scores, Semantics.SCORES), excluded=excluded)
