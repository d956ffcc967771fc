"""Class-agnostic mask proposals: color partitioner, label oracle, ingestion.

All providers emit stacks of binary masks in a deterministic order:
connected components sorted by their first pixel in row-major scan
order, never by any library-internal labeling order.
"""
from __future__ import annotations

import enum
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import io as tdy_io
from .data import ImageSample

# 4-connectivity: diagonal neighbors do not join a component.
_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class MaskProvenance(enum.Enum):
    PARTITIONER = "partitioner"
    ORACLE = "oracle"
    INGESTED = "ingested"


@dataclass
class BinaryMaskSet:
    """Stack of binary masks [m, H, W]; masks may overlap, never be empty."""

    masks: np.ndarray
    provenance: MaskProvenance
    areas: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.masks.ndim != 3:
            raise ValueError(f"mask stack must be [m, h, w], got shape {self.masks.shape}")
        if self.masks.size and not np.isin(self.masks, (0, 1)).all():
            raise ValueError("masks must be binary")
        self.areas = self.masks.sum(axis=(1, 2), dtype=np.int64)
        if (self.areas == 0).any():
            raise ValueError("empty masks are not allowed")

    @property
    def count(self) -> int:
        return self.masks.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]


def _components_by_scan_order(binary: np.ndarray) -> list[np.ndarray]:
    labeled, n = ndimage.label(binary, structure=_FOUR)
    comps = []
    for k in range(1, n + 1):
        mask = labeled == k
        comps.append((int(np.flatnonzero(mask.ravel())[0]), mask))
    comps.sort(key=lambda t: t[0])
    return [m for _, m in comps]


def partition_components(image: np.ndarray, quant_levels: int = 6, min_area: int = 4) -> BinaryMaskSet:
    """Quantize colors, then split each color level into 4-connected pieces.

    A crude stand-in for an off-the-shelf region proposer: class-agnostic,
    purely bottom-up, and oblivious to the label space. Pieces smaller
    than ``min_area`` are dropped; dropping everything is legal but loud.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected an rgb image [3, h, w], got shape {img.shape}")
    if quant_levels < 2:
        raise ValueError("need at least 2 quantization levels")
    if min_area < 1:
        raise ValueError("min_area must be positive")
    q = np.clip((img * quant_levels).astype(np.int64), 0, quant_levels - 1)
    code = (q[0] * quant_levels + q[1]) * quant_levels + q[2]
    pieces = []
    for value in np.unique(code):
        for mask in _components_by_scan_order(code == value):
            if int(mask.sum()) >= min_area:
                pieces.append((int(np.flatnonzero(mask.ravel())[0]), mask))
    pieces.sort(key=lambda t: t[0])
    h, w = code.shape
    if not pieces:
        warnings.warn("partitioner produced no masks for this image", RuntimeWarning, stacklevel=2)
        return BinaryMaskSet(np.zeros((0, h, w), dtype=np.uint8), MaskProvenance.PARTITIONER)
    stack = np.stack([m for _, m in pieces]).astype(np.uint8)
    return BinaryMaskSet(stack, MaskProvenance.PARTITIONER)


def oracle_masks(labels: np.ndarray) -> BinaryMaskSet:
    """Perfect proposals: one mask per connected component of each class."""
    gt = np.asarray(labels)
    if gt.ndim != 2:
        raise ValueError(f"labels must be [h, w], got shape {gt.shape}")
    pieces = []
    for value in np.unique(gt):
        if value == 0:
            continue
        for mask in _components_by_scan_order(gt == value):
            pieces.append((int(np.flatnonzero(mask.ravel())[0]), mask))
    pieces.sort(key=lambda t: t[0])
    h, w = gt.shape
    if not pieces:
        return BinaryMaskSet(np.zeros((0, h, w), dtype=np.uint8), MaskProvenance.ORACLE)
    stack = np.stack([m for _, m in pieces]).astype(np.uint8)
    return BinaryMaskSet(stack, MaskProvenance.ORACLE)


def mask_file_name(index: int) -> str:
    return f"masks_{index:04d}.tdym"


def save_mask_set(path, mask_set: BinaryMaskSet) -> None:
    tdy_io.save_masks(path, mask_set.masks)


def load_mask_set(path, expect_hw: tuple[int, int] | None = None) -> BinaryMaskSet:
    return BinaryMaskSet(tdy_io.load_masks(path, expect_hw=expect_hw), MaskProvenance.INGESTED)


def make_provider(spec: str, quant_levels: int = 6, min_area: int = 4):
    """Build a ``(index, sample) -> BinaryMaskSet`` callable from a CLI spec.

    Accepted specs: ``partitioner``, ``oracle``, ``ingest:<dir>``. The
    oracle reads dense labels through the evaluation-side accessor; it
    stands in for an external proposal model, not for training-time
    label access.
    """
    if spec == "partitioner":
        return lambda index, sample: partition_components(
            sample.pixels, quant_levels=quant_levels, min_area=min_area
        )
    if spec == "oracle":
        return lambda index, sample: oracle_masks(sample.eval_labels())
    if spec.startswith("ingest:"):
        root = spec.split(":", 1)[1]
        if not root:
            raise ValueError("ingest provider needs a directory: ingest:<dir>")

        def _load(index: int, sample: ImageSample) -> BinaryMaskSet:
            path = os.path.join(root, mask_file_name(index))
            return load_mask_set(path, expect_hw=sample.hw)

        return _load
    raise ValueError(f"unknown mask provider {spec!r}; use partitioner, oracle, or ingest:<dir>")
