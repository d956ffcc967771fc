"""Seed scoring and image-level losses for the weakly labeled branch.

The localizer head turns per-pixel features into class scores (seeds).
Image-level supervision reaches it through a weighted global pooling:
per-pixel softmax weights concentrate the pooled score on the pixels
that already respond, and a focal term keeps tiny activation areas from
stalling at zero coverage.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassSpace, ScoreMap, Semantics, bce, logistic


@dataclass(frozen=True)
class PoolingConfig:
    focal_weight: float = 0.01
    focal_exponent: float = 3.0
    stabilizer: float = 1e-5

    def __post_init__(self) -> None:
        if self.focal_weight < 0.0:
            raise ValueError("focal_weight must be nonnegative")
        if self.focal_exponent < 1.0:
            raise ValueError("focal_exponent must be at least 1")
        if self.stabilizer <= 0.0:
            raise ValueError("stabilizer must be positive")


@dataclass
class SeedMap:
    """Per-pixel class scores plus the pixels an exclusion pass zeroed."""

    scores: ScoreMap
    excluded: np.ndarray | None = None  # [H, W] uint8, 1 = forced to background

    def __post_init__(self) -> None:
        if self.scores.semantics is not Semantics.SCORES:
            raise ValueError("seed maps carry raw scores")
        if self.excluded is not None:
            self.excluded = np.asarray(self.excluded, dtype=np.uint8)
            if self.excluded.shape != (self.scores.height, self.scores.width):
                raise ValueError("exclusion mask shape must match the score map")

    @property
    def channels(self) -> int:
        return self.scores.channels

    @property
    def hw(self) -> tuple[int, int]:
        return self.scores.height, self.scores.width


def seed_scores(weight: np.ndarray, bias: np.ndarray, features: np.ndarray) -> SeedMap:
    """Affine per-pixel scoring: weight [C, d] @ features [d, H, W] + bias [C]."""
    w = np.asarray(weight, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    f = np.asarray(features, dtype=np.float64)
    if w.ndim != 2 or b.shape != (w.shape[0],) or f.ndim != 3 or f.shape[0] != w.shape[1]:
        raise ValueError(
            f"inconsistent shapes: weight {w.shape}, bias {b.shape}, features {f.shape}"
        )
    scores = np.tensordot(w, f, axes=1) + b[:, None, None]
    return SeedMap(ScoreMap(scores, Semantics.SCORES))


def _softmax_channels(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def pool_internals(flat_scores: np.ndarray, cfg: PoolingConfig) -> dict:
    """Shared pieces of the pooling forward pass, on [C, N] scores.

    Returned keys: weights w [C, N], denom [C], pooled [C], coverage [C]
    (mean weight per channel), focal [C]. The backward pass in the
    trainer consumes the same pieces so the two can never drift apart.
    """
    w = _softmax_channels(flat_scores)
    denom = cfg.stabilizer + w.sum(axis=1)
    pooled = (w * flat_scores).sum(axis=1) / denom
    coverage = w.mean(axis=1)
    focal = cfg.focal_weight * (1.0 - coverage) ** cfg.focal_exponent * np.log(coverage + cfg.stabilizer)
    return {"weights": w, "denom": denom, "pooled": pooled, "coverage": coverage, "focal": focal}


def gwp_pool(seed: SeedMap, channels, cfg: PoolingConfig) -> np.ndarray:
    """Weighted global pooling with the focal coverage penalty, per channel.

    The per-pixel weights are a softmax across all channels of the given
    map; ``channels`` selects which pooled entries are returned. Callers
    control the competition set by what they pass in (the image-level
    loss hands over only the new-class slice).
    """
    idx = np.asarray(channels, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("gwp_pool needs at least one channel")
    if idx.min() < 0 or idx.max() >= seed.channels:
        raise ValueError(f"channel indices {channels} out of range for {seed.channels} channels")
    flat = seed.scores.data.reshape(seed.channels, -1)
    pieces = pool_internals(flat, cfg)
    return (pieces["pooled"] + pieces["focal"])[idx]


def loss_cls(image_labels: np.ndarray, seed: SeedMap, space: ClassSpace, cfg: PoolingConfig) -> float:
    """Image-level BCE on pooled new-class scores, averaged over new classes.

    Pooling sees only the new-class slice of the seed map: the weight
    softmax makes pooled channels compete, and letting the background or
    old rows join that competition lets the optimizer silence an absent
    class by inflating rows this loss is not responsible for.
    """
    chans = space.new_channels
    y = np.asarray(image_labels, dtype=np.float64)
    if not chans:
        raise ValueError("no new classes to classify")
    if y.shape != (len(chans),):
        raise ValueError(f"expected {len(chans)} image labels, got shape {y.shape}")
    if seed.channels != space.num_channels:
        raise ValueError("seed channels do not match the class space")
    sliced = SeedMap(seed.scores.select(chans))
    pooled = gwp_pool(sliced, range(len(chans)), cfg)
    return float(np.mean(bce(y, logistic(pooled))))


def loss_loc(old_logits: ScoreMap, seed: SeedMap, space: ClassSpace) -> float:
    """Distill the previous model's per-pixel beliefs into the old seed rows.

    Soft targets: sigmoid of the old model's logits, matched channel by
    channel against sigmoid of the seed scores, averaged over pixels
    then over old classes (background excluded on both sides).
    """
    n_old = len(space.old_classes)
    if n_old == 0:
        raise ValueError("no old classes to distill")
    if old_logits.channels != 1 + n_old:
        raise ValueError(
            f"old model emits background + {n_old} classes, got {old_logits.channels} channels"
        )
    if seed.channels != space.num_channels or old_logits.data.shape[1:] != seed.scores.data.shape[1:]:
        raise ValueError("seed and old-model maps do not align")
    target = logistic(old_logits.data[1:])
    pred = logistic(seed.scores.data[list(space.old_channels)])
    return float(np.mean(bce(target, pred)))
