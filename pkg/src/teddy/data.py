"""Synthetic desk scenes: colored shapes on a noisy background.

Every image carries dense class labels. Incremental splits hide those
labels behind an access guard for steps after the first, where training
may only see image-level presence vectors for the step's new classes.
"""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .core import ClassSpace
from . import io as tdy_io


class GtAccessError(RuntimeError):
    """Raised when training-time code touches dense labels it must not see."""


class SplitMode(enum.Enum):
    DISJOINT = "disjoint"
    OVERLAP = "overlap"


@dataclass(frozen=True)
class ClassDef:
    """One drawable class: id, shape kind, fill color."""

    class_id: int
    kind: str
    color: tuple[float, float, float]


# Classes 5 and 6 are deliberately close in color to earlier classes
# (magenta shares red/blue, cyan shares green/blue) so late steps are
# not trivially separable from the palette alone.
DEFAULT_CATALOG: tuple[ClassDef, ...] = (
    ClassDef(1, "square", (0.90, 0.10, 0.10)),
    ClassDef(2, "disk", (0.10, 0.80, 0.15)),
    ClassDef(3, "triangle", (0.15, 0.20, 0.90)),
    ClassDef(4, "diamond", (0.90, 0.85, 0.10)),
    ClassDef(5, "disk", (0.85, 0.10, 0.80)),
    ClassDef(6, "square", (0.10, 0.80, 0.85)),
)

_KINDS = ("square", "disk", "triangle", "diamond")


@dataclass(frozen=True)
class DatasetConfig:
    height: int = 32
    width: int = 32
    min_shapes: int = 1
    max_shapes: int = 3
    size_min: int = 3
    size_max: int | None = None
    noise: float = 0.05
    background: tuple[float, float, float] = (0.45, 0.45, 0.45)
    catalog: tuple[ClassDef, ...] = DEFAULT_CATALOG
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height < 12 or self.width < 12:
            raise ValueError("images must be at least 12x12")
        if not (1 <= self.min_shapes <= self.max_shapes):
            raise ValueError("need 1 <= min_shapes <= max_shapes")
        if not (0.0 <= self.noise < 0.5):
            raise ValueError("noise amplitude must lie in [0, 0.5)")
        if self.size_min < 2:
            raise ValueError("size_min must be at least 2")
        top = self.effective_size_max
        if top < self.size_min or 2 * top + 1 > min(self.height, self.width):
            raise ValueError("shape sizes do not fit the image")
        ids = [c.class_id for c in self.catalog]
        if len(set(ids)) != len(ids) or any(i <= 0 for i in ids) or max(ids, default=1) > 255:
            raise ValueError("catalog ids must be unique, positive, and fit uint8")
        if any(c.kind not in _KINDS for c in self.catalog):
            raise ValueError(f"shape kinds must be one of {_KINDS}")

    @property
    def effective_size_max(self) -> int:
        return self.size_max if self.size_max is not None else max(self.size_min, min(self.height, self.width) // 4)


@dataclass
class ImageSample:
    """One scene. Dense labels sit behind the train/eval access split."""

    pixels: np.ndarray  # [3, H, W] float32 in [0, 1]
    gt: np.ndarray  # [H, W] uint8 class ids, 0 = background
    image_level: np.ndarray  # uint8 presence bits over labeled_classes
    labeled_classes: tuple[int, ...]
    eval_only_gt: bool = False
    index: int = 0

    def train_labels(self) -> np.ndarray:
        if self.eval_only_gt:
            raise GtAccessError(
                f"sample {self.index}: dense labels are evaluation-only at this step"
            )
        return self.gt

    def eval_labels(self) -> np.ndarray:
        return self.gt

    @property
    def hw(self) -> tuple[int, int]:
        return self.gt.shape


@dataclass
class StepDataset:
    step_index: int
    class_space: ClassSpace
    mode: SplitMode
    samples: list[ImageSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


def _render(kind: str, h: int, w: int, cy: int, cx: int, s: int) -> np.ndarray:
    rr, cc = np.ogrid[:h, :w]
    dr, dc = rr - cy, cc - cx
    if kind == "square":
        return (np.abs(dr) <= s) & (np.abs(dc) <= s)
    if kind == "disk":
        return dr * dr + dc * dc <= s * s
    if kind == "triangle":
        # apex up, base down; width grows with the row
        return (np.abs(dr) <= s) & (np.abs(dc) <= (dr + s) // 2)
    if kind == "diamond":
        return np.abs(dr) + np.abs(dc) <= s
    raise ValueError(f"unknown shape kind {kind!r}")


def image_level_of(sample: ImageSample, class_ids) -> np.ndarray:
    """Presence bits for the given class ids, read from the dense labels."""
    present = np.unique(sample.eval_labels())
    return np.array([1 if c in present else 0 for c in class_ids], dtype=np.uint8)


def gen_shapes(cfg: DatasetConfig, count: int) -> list[ImageSample]:
    """Draw ``count`` scenes. Same config and count -> bit-identical output.

    Shapes are opaque, drawn back to front, and rejected rather than
    allowed to overlap; a shape that cannot be placed in 30 tries is
    dropped (the first shape always lands, so scenes are never empty).
    """
    if count < 0:
        raise ValueError("count must be nonnegative")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    h, w = cfg.height, cfg.width
    smax = cfg.effective_size_max
    catalog_ids = tuple(c.class_id for c in cfg.catalog)
    samples = []
    for idx in range(count):
        canvas = np.empty((3, h, w), dtype=np.float64)
        canvas[:] = np.asarray(cfg.background)[:, None, None]
        gt = np.zeros((h, w), dtype=np.uint8)
        occupied = np.zeros((h, w), dtype=bool)
        n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        for _ in range(n_shapes):
            cls = cfg.catalog[int(rng.integers(0, len(cfg.catalog)))]
            s = int(rng.integers(cfg.size_min, smax + 1))
            for _attempt in range(30):
                cy = int(rng.integers(s, h - s))
                cx = int(rng.integers(s, w - s))
                mask = _render(cls.kind, h, w, cy, cx, s)
                if not (mask & occupied).any():
                    canvas[:, mask] = np.asarray(cls.color)[:, None]
                    gt[mask] = cls.class_id
                    occupied |= mask
                    break
        if cfg.noise > 0.0:
            canvas += cfg.noise * rng.uniform(-1.0, 1.0, size=(3, h, w))
        pixels = np.clip(canvas, 0.0, 1.0).astype(np.float32)
        sample = ImageSample(
            pixels=pixels,
            gt=gt,
            image_level=np.zeros(len(catalog_ids), dtype=np.uint8),
            labeled_classes=catalog_ids,
            index=idx,
        )
        sample.image_level = image_level_of(sample, catalog_ids)
        samples.append(sample)
    return samples


def split_incremental(samples, steps, mode: SplitMode) -> list[StepDataset]:
    """Carve a corpus into incremental steps.

    ``steps`` lists the new class ids per step and must partition the
    foreground classes that actually occur. Both modes keep only samples
    containing at least one of the step's new classes; disjoint mode
    additionally drops samples showing any class from a later step.
    """
    flat: list[int] = [c for group in steps for c in group]
    if len(set(flat)) != len(flat):
        raise ValueError(f"step class lists overlap: {steps}")
    present: set[int] = set()
    for s in samples:
        present.update(int(c) for c in np.unique(s.eval_labels()) if c != 0)
    missing = present - set(flat)
    if missing:
        raise ValueError(f"classes {sorted(missing)} occur in the data but in no step")

    out = []
    for t, new in enumerate(steps):
        old = [c for group in steps[:t] for c in group]
        space = ClassSpace(tuple(old), tuple(new))
        seen = {0, *old, *new}
        kept = []
        for s in samples:
            ids = set(int(c) for c in np.unique(s.eval_labels()))
            if not ids.intersection(new):
                continue
            if mode is SplitMode.DISJOINT and not ids.issubset(seen):
                continue
            gt_step = s.gt
            if t == 0 and not ids.issubset(seen):
                # Unannotated future objects read as background in the
                # only step whose dense labels are used for training.
                gt_step = np.where(np.isin(s.gt, sorted(seen)), s.gt, 0).astype(s.gt.dtype)
            kept.append(
                ImageSample(
                    pixels=s.pixels,
                    gt=gt_step,
                    image_level=image_level_of(s, new),
                    labeled_classes=tuple(new),
                    eval_only_gt=t > 0,
                    index=s.index,
                )
            )
        out.append(StepDataset(step_index=t, class_space=space, mode=mode, samples=kept))
    return out


def _catalog_to_json(catalog) -> list[dict]:
    return [{"class_id": c.class_id, "kind": c.kind, "color": list(c.color)} for c in catalog]


def _catalog_from_json(items) -> tuple[ClassDef, ...]:
    return tuple(ClassDef(int(d["class_id"]), str(d["kind"]), tuple(float(x) for x in d["color"])) for d in items)


def config_to_json(cfg: DatasetConfig) -> dict:
    return {
        "height": cfg.height,
        "width": cfg.width,
        "min_shapes": cfg.min_shapes,
        "max_shapes": cfg.max_shapes,
        "size_min": cfg.size_min,
        "size_max": cfg.size_max,
        "noise": cfg.noise,
        "background": list(cfg.background),
        "catalog": _catalog_to_json(cfg.catalog),
        "seed": cfg.seed,
    }


def config_from_json(d: dict) -> DatasetConfig:
    return DatasetConfig(
        height=int(d["height"]),
        width=int(d["width"]),
        min_shapes=int(d["min_shapes"]),
        max_shapes=int(d["max_shapes"]),
        size_min=int(d["size_min"]),
        size_max=None if d.get("size_max") is None else int(d["size_max"]),
        noise=float(d["noise"]),
        background=tuple(float(x) for x in d["background"]),
        catalog=_catalog_from_json(d["catalog"]),
        seed=int(d["seed"]),
    )


def save_dataset(dirpath, samples, cfg: DatasetConfig | None = None) -> None:
    """Write a corpus directory: dataset.json plus one tensor pair per sample."""
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        pix_name = f"sample_{i:04d}.pix.tdy"
        gt_name = f"sample_{i:04d}.gt.tdy"
        tdy_io.save_tensor(os.path.join(dirpath, pix_name), s.pixels, "f32", semantics="rgb")
        tdy_io.save_tensor(os.path.join(dirpath, gt_name), s.gt[None], "u8", semantics="labels")
        entries.append(
            {
                "pixels": pix_name,
                "labels": gt_name,
                "image_level": [int(v) for v in s.image_level],
                "labeled_classes": [int(c) for c in s.labeled_classes],
                "eval_only_gt": bool(s.eval_only_gt),
                "index": int(s.index),
            }
        )
    manifest = {"samples": entries}
    if cfg is not None:
        manifest["config"] = config_to_json(cfg)
    with open(os.path.join(dirpath, "dataset.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(dirpath) -> tuple[list[ImageSample], DatasetConfig | None]:
    with open(os.path.join(dirpath, "dataset.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    samples = []
    for e in manifest["samples"]:
        pixels, _ = tdy_io.load_tensor(os.path.join(dirpath, e["pixels"]))
        gt, _ = tdy_io.load_tensor(os.path.join(dirpath, e["labels"]))
        samples.append(
            ImageSample(
                pixels=pixels,
                gt=gt[0],
                image_level=np.asarray(e["image_level"], dtype=np.uint8),
                labeled_classes=tuple(int(c) for c in e["labeled_classes"]),
                eval_only_gt=bool(e["eval_only_gt"]),
                index=int(e["index"]),
            )
        )
    cfg = config_from_json(manifest["config"]) if "config" in manifest else None
    return samples, cfg


def save_step_dataset(dirpath, step_ds: StepDataset) -> None:
    """Persist one step's view: the corpus layout plus a step stanza."""
    save_dataset(dirpath, step_ds.samples)
    manifest_path = os.path.join(dirpath, "dataset.json")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    manifest["step"] = {
        "step_index": int(step_ds.step_index),
        "mode": step_ds.mode.value,
        "old_classes": [int(c) for c in step_ds.class_space.old_classes],
        "new_classes": [int(c) for c in step_ds.class_space.new_classes],
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_step_dataset(dirpath) -> StepDataset:
    samples, _ = load_dataset(dirpath)
    with open(os.path.join(dirpath, "dataset.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if "step" not in manifest:
        raise KeyError("dataset.json carries no step stanza; was this saved from a StepDataset?")
    meta = manifest["step"]
    space = ClassSpace(
        tuple(int(c) for c in meta["old_classes"]),
        tuple(int(c) for c in meta["new_classes"]),
    )
    return StepDataset(
        step_index=int(meta["step_index"]),
        class_space=space,
        mode=SplitMode(meta["mode"]),
        samples=samples,
    )
