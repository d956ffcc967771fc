"""Shared primitives: tagged score maps, class bookkeeping, logistic math."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

# Probabilities are clipped to [PROB_EPS, 1 - PROB_EPS] before any log.
PROB_EPS = 1e-7


class Semantics(enum.Enum):
    """What the values in a score map mean."""

    LOGITS = "logits"
    PROBABILITIES = "probabilities"
    SCORES = "scores"
    BINARY = "binary"


@dataclass
class ScoreMap:
    """Dense per-channel map of shape [channels, height, width].

    Channel 0 is the background channel whenever the map spans a class
    space; maps over foreground classes only (binarized predictions)
    carry no background channel and say so at their call sites.
    """

    data: np.ndarray
    semantics: Semantics

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"score map must be [c, h, w], got shape {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def pixel(self, row: int, col: int) -> np.ndarray:
        """Per-pixel channel vector (a view, not a copy)."""
        return self.data[:, row, col]

    def select(self, channel_indices) -> "ScoreMap":
        """New map restricted to the given channel indices, same semantics."""
        idx = np.asarray(channel_indices, dtype=np.intp)
        return ScoreMap(self.data[idx].copy(), self.semantics)

    def copy(self) -> "ScoreMap":
        return ScoreMap(self.data.copy(), self.semantics)

    def validate(self) -> "ScoreMap":
        """Range check against the semantics tag; cheap enough for boundaries only."""
        if not np.isfinite(self.data).all():
            raise ValueError("score map contains non-finite values")
        if self.semantics is Semantics.PROBABILITIES:
            if self.data.min() < 0.0 or self.data.max() > 1.0:
                raise ValueError("probability map outside [0, 1]")
        elif self.semantics is Semantics.BINARY:
            if not np.isin(self.data, (0.0, 1.0)).all():
                raise ValueError("binary map contains values other than 0 and 1")
        return self


@dataclass(frozen=True)
class ClassSpace:
    """Label space at one incremental step: background + old + new classes.

    Channel layout is fixed as [background] + old (in order) + new (in
    order); class ids are positive and 0 is reserved for background.
    """

    old_classes: tuple[int, ...]
    new_classes: tuple[int, ...]

    BACKGROUND: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "old_classes", tuple(int(c) for c in self.old_classes))
        object.__setattr__(self, "new_classes", tuple(int(c) for c in self.new_classes))
        ids = self.old_classes + self.new_classes
        if any(c <= 0 for c in ids):
            raise ValueError("class ids must be positive; 0 is reserved for background")
        if len(set(ids)) != len(ids):
            raise ValueError(f"old and new classes must be disjoint, got {ids}")

    @property
    def all_classes(self) -> tuple[int, ...]:
        return self.old_classes + self.new_classes

    @property
    def num_channels(self) -> int:
        return 1 + len(self.all_classes)

    @property
    def old_channels(self) -> tuple[int, ...]:
        return tuple(range(1, 1 + len(self.old_classes)))

    @property
    def new_channels(self) -> tuple[int, ...]:
        start = 1 + len(self.old_classes)
        return tuple(range(start, start + len(self.new_classes)))

    def channel_of(self, class_id: int) -> int:
        if class_id == self.BACKGROUND:
            return 0
        return 1 + self.all_classes.index(class_id)

    def class_of(self, channel: int) -> int:
        if channel == 0:
            return self.BACKGROUND
        return self.all_classes[channel - 1]

    def advanced(self, new_classes) -> "ClassSpace":
        """Class space of the next step: everything known so far becomes old."""
        return ClassSpace(self.all_classes, tuple(new_classes))


def _sigmoid_array(a: np.ndarray) -> np.ndarray:
    # exp(-|a|) never overflows; the two branches share it.
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic(x):
    """Elementwise sigmoid. ScoreMap in, ScoreMap out; arrays pass through."""
    if isinstance(x, ScoreMap):
        return ScoreMap(_sigmoid_array(x.data), Semantics.PROBABILITIES)
    out = _sigmoid_array(np.asarray(x, dtype=np.float64))
    return out if out.ndim else float(out)


def one_hot(scores: ScoreMap, drop_background: bool = False) -> ScoreMap:
    """Argmax over channels; ties go to the lowest channel index.

    A pixel whose channel vector is exactly zero stays a zero vector
    (no channel wins), which is what downstream exclusion relies on.
    """
    if scores.channels == 0:
        raise ValueError("one_hot needs at least one channel")
    arr = scores.data
    winner = arr.argmax(axis=0)
    out = (np.arange(arr.shape[0])[:, None, None] == winner[None]).astype(np.float64)
    all_zero = (arr == 0.0).all(axis=0)
    out[:, all_zero] = 0.0
    if drop_background:
        out = out[1:]
    return ScoreMap(out, Semantics.BINARY)


def clamp_unit(a):
    """min(1, a) for nonnegative inputs; negative input is a caller bug."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.size and arr.min() < 0.0:
        raise ValueError("clamp_unit expects nonnegative input")
    out = np.minimum(arr, 1.0)
    return out if out.ndim else float(out)


def bce(target, prob):
    """Binary cross-entropy -(t*ln(p) + (1-t)*ln(1-p)) with p clipped.

    Targets may be soft but must lie in [0, 1]; probabilities are clipped
    to [PROB_EPS, 1 - PROB_EPS] so the value is always finite.
    """
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(prob, dtype=np.float64)
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("bce targets must lie in [0, 1]")
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    out = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    return out if out.ndim else float(out)
