"""Turning dense scores into mask-aligned binary predictions.

The assignment step matches class-agnostic masks against the one-hot
argmax of a score map: a mask adopts a class when their overlap ratio
(intersection over the smaller of the two areas) clears a threshold.
Assigned masks are unioned per class and the union is clipped to 1.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .core import ScoreMap, Semantics, one_hot
from .masks import BinaryMaskSet


class PredictionSource(enum.Enum):
    OLD_MODEL = "old_model"
    SEED_MAP = "seed_map"


@dataclass
class MaskAssignment:
    """Mask-to-class table with the overlap statistics that produced it."""

    table: np.ndarray  # [m, n_classes] uint8, at most one 1 per row
    intersections: np.ndarray  # [m, n_classes] int64
    ratios: np.ndarray  # [m, n_classes] float64
    multi_candidate_rows: int  # masks that cleared the threshold for 2+ classes


@dataclass
class BinaryPrediction:
    """Per-class binary maps over foreground channels only (no background)."""

    pred: ScoreMap
    class_ids: tuple[int, ...]
    threshold: float
    source: PredictionSource

    def __post_init__(self) -> None:
        if self.pred.semantics is not Semantics.BINARY:
            raise ValueError("binary predictions must carry binary semantics")
        if len(self.class_ids) != self.pred.channels:
            raise ValueError("one class id per channel required")

    def foreground(self) -> np.ndarray:
        """[H, W] bool, true where any class channel is hot."""
        return self.pred.data.any(axis=0)

    @property
    def hw(self) -> tuple[int, int]:
        return self.pred.height, self.pred.width


def _check_threshold(threshold: float) -> float:
    t = float(threshold)
    if not (0.5 <= t <= 1.0):
        raise ValueError(f"overlap threshold must lie in [0.5, 1], got {t}")
    return t


def assign_masks(pred_one_hot: ScoreMap, mask_set: BinaryMaskSet, threshold: float) -> MaskAssignment:
    """Match masks to classes by overlap ratio against a one-hot prediction.

    ratio(i, c) = |mask_i ∩ pred_c| / min(|mask_i|, |pred_c|), compared
    strictly against the threshold. A mask clearing it for several
    classes goes to the largest intersection, ties to the lowest class
    channel; such rows are counted and surfaced as a warning.
    """
    t = _check_threshold(threshold)
    if pred_one_hot.semantics is not Semantics.BINARY:
        raise ValueError("assignment expects a one-hot (binary) prediction map")
    if (pred_one_hot.height, pred_one_hot.width) != mask_set.hw:
        raise ValueError("prediction and masks disagree on image size")
    n_cls = pred_one_hot.channels
    m = mask_set.count
    h, w = mask_set.hw
    pred_flat = pred_one_hot.data.reshape(n_cls, h * w)
    masks_flat = mask_set.masks.reshape(m, h * w).astype(np.float64)
    inter = np.rint(masks_flat @ pred_flat.T).astype(np.int64)  # [m, n_cls]
    pred_areas = np.rint(pred_flat.sum(axis=1)).astype(np.int64)
    denom = np.minimum(mask_set.areas[:, None], pred_areas[None, :])
    with np.errstate(invalid="ignore"):
        ratios = np.where(denom > 0, inter / np.maximum(denom, 1), 0.0)
    candidates = ratios > t
    table = np.zeros((m, n_cls), dtype=np.uint8)
    multi = 0
    for i in range(m):
        hits = np.flatnonzero(candidates[i])
        if hits.size == 0:
            continue
        if hits.size == 1:
            table[i, hits[0]] = 1
            continue
        multi += 1
        best = hits[np.argmax(inter[i, hits])]  # first max -> lowest channel
        table[i, best] = 1
    if multi:
        warnings.warn(
            f"{multi} mask(s) cleared the overlap threshold for several classes",
            RuntimeWarning,
            stacklevel=2,
        )
    return MaskAssignment(table=table, intersections=inter, ratios=ratios, multi_candidate_rows=multi)


def binarize(
    scores: ScoreMap,
    mask_set: BinaryMaskSet,
    threshold: float,
    source: PredictionSource,
    class_ids: tuple[int, ...] | None = None,
) -> BinaryPrediction:
    """Snap a score map (background + foreground channels) onto the masks.

    Pipeline: one-hot the scores, assign masks to foreground classes,
    union each class's masks, clip to 1. Pixels claimed by masks of
    different classes keep the class whose one-hot channel is hot there
    if it is among the claimants, else the lowest claimant channel.
    ``class_ids`` names the foreground channels; it defaults to their
    ordinals when the caller has no class space at hand.
    """
    t = _check_threshold(threshold)
    if scores.channels < 1:
        raise ValueError("score map needs a background channel plus foreground channels")
    n_cls = scores.channels - 1
    ids = tuple(class_ids) if class_ids is not None else tuple(range(1, n_cls + 1))
    if len(ids) != n_cls:
        raise ValueError(f"expected {n_cls} class ids, got {len(ids)}")
    oh = one_hot(scores, drop_background=True)
    assignment = assign_masks(oh, mask_set, t)
    h, w = mask_set.hw
    masks_flat = mask_set.masks.reshape(mask_set.count, h * w).astype(np.float64)
    union = assignment.table.T.astype(np.float64) @ masks_flat  # [n_cls, N]
    union = np.minimum(union, 1.0)
    conflict = union.sum(axis=0) > 1.0
    if conflict.any():
        cand = union[:, conflict]
        hot = oh.data.reshape(n_cls, -1)[:, conflict]
        winner = np.argmax(cand * (1.0 + hot), axis=0)
        cand[:] = (np.arange(n_cls)[:, None] == winner[None, :]).astype(np.float64)
        union[:, conflict] = cand
    pred = ScoreMap(union.reshape(n_cls, h, w), Semantics.BINARY)
    return BinaryPrediction(pred=pred, class_ids=ids, threshold=t, source=source)
