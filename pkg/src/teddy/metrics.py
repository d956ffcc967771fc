"""Evaluation: label maps, intersection-over-union, forgetting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassSpace, ScoreMap


@dataclass
class MetricsReport:
    """Per-class IoU plus group means; absent classes carry no entry.

    A class missing from both the prediction and the reference is
    excluded rather than scored, so group means only average classes
    that could have been gotten right or wrong. An empty group averages
    to None.
    """

    per_class: dict[int, float]
    old_mean: float | None
    new_mean: float | None
    all_mean: float | None

    def to_json(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "old_mean": self.old_mean,
            "new_mean": self.new_mean,
            "all_mean": self.all_mean,
        }


def predict_labelmap(logits: ScoreMap, space: ClassSpace) -> np.ndarray:
    """Argmax over channels, translated to class ids (ties: lowest channel)."""
    if logits.channels != space.num_channels:
        raise ValueError("logits do not match the class space")
    lut = np.array([space.class_of(ch) for ch in range(space.num_channels)], dtype=np.int64)
    return lut[logits.data.argmax(axis=0)]


def _group_mean(per_class: dict[int, float], ids) -> float | None:
    vals = [per_class[c] for c in ids if c in per_class]
    return float(np.mean(vals)) if vals else None


def iou_counts(pred: np.ndarray, gt: np.ndarray, class_ids) -> tuple[np.ndarray, np.ndarray]:
    """Intersection and union pixel counts per class id, for accumulation."""
    if pred.shape != gt.shape:
        raise ValueError("prediction and reference must share a shape")
    inter = np.empty(len(class_ids), dtype=np.int64)
    union = np.empty(len(class_ids), dtype=np.int64)
    for j, c in enumerate(class_ids):
        p = pred == c
        g = gt == c
        inter[j] = np.count_nonzero(p & g)
        union[j] = np.count_nonzero(p | g)
    return inter, union


def miou(pred: np.ndarray, gt: np.ndarray, space: ClassSpace) -> MetricsReport:
    """IoU per class and group means for one labeled image (or stack)."""
    ids = (0,) + space.all_classes
    inter, union = iou_counts(pred, gt, ids)
    return report_from_counts(inter, union, space)


def report_from_counts(inter: np.ndarray, union: np.ndarray, space: ClassSpace) -> MetricsReport:
    ids = (0,) + space.all_classes
    per_class = {
        c: float(i / u) for c, i, u in zip(ids, inter, union) if u > 0
    }
    return MetricsReport(
        per_class=per_class,
        old_mean=_group_mean(per_class, space.old_classes),
        new_mean=_group_mean(per_class, space.new_classes),
        all_mean=_group_mean(per_class, ids),
    )


def evaluate_model(model, samples, space: ClassSpace | None = None) -> MetricsReport:
    """Corpus-level IoU: counts accumulate across images before dividing."""
    from .trainer import model_forward

    space = space or model.class_space
    ids = (0,) + space.all_classes
    inter = np.zeros(len(ids), dtype=np.int64)
    union = np.zeros(len(ids), dtype=np.int64)
    for s in samples:
        logits, _ = model_forward(model, s)
        pred = predict_labelmap(logits, space)
        i, u = iou_counts(pred, s.eval_labels(), ids)
        inter += i
        union += u
    return report_from_counts(inter, union, space)


def forgetting(history: list[MetricsReport], class_ids) -> dict[int, float]:
    """Best past IoU minus final IoU, per class; positive means lost ground."""
    if len(history) < 2:
        raise ValueError("forgetting needs at least two reports")
    final = history[-1]
    out = {}
    for c in class_ids:
        past = [h.per_class[c] for h in history[:-1] if c in h.per_class]
        if past and c in final.per_class:
            out[c] = float(max(past) - final.per_class[c])
    return out
