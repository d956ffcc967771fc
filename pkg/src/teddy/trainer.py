"""Linear per-pixel models, hand-derived gradients, SGD, training loops.

Models are deliberately tiny: one affine head for segmentation logits
and one for localization seeds, both over fixed per-pixel features
(color plus normalized position plus a constant). Small enough that
every gradient is derived by hand and checked against central finite
differences, large enough that the incremental protocol is non-trivial.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import PROB_EPS, ClassSpace, ScoreMap, Semantics, bce, logistic
from .localizer import PoolingConfig, SeedMap, loss_cls, loss_loc, pool_internals, seed_scores
from .fusion import FusionConfig, build_bundle, loss_seg
from .binarize import PredictionSource, binarize
from .data import StepDataset

FEATURE_DIM = 12

CHECKPOINT_FORMAT = "teddy-checkpoint"


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


def featurize(pixels: np.ndarray) -> np.ndarray:
    """Per-pixel features [12, H, W] from rgb, position, and a constant.

    The color block carries r, g, b plus their pairwise products and
    squares; color mixtures (e.g. magenta vs red and blue separately)
    are linearly separable in this basis but not in raw rgb.
    """
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected rgb pixels [3, h, w], got shape {img.shape}")
    _, h, w = img.shape
    r, g, b = img
    rows = (np.arange(h, dtype=np.float64)[:, None] + 0.5) / h
    cols = (np.arange(w, dtype=np.float64)[None, :] + 0.5) / w
    feats = np.empty((FEATURE_DIM, h, w))
    feats[0:3] = img
    feats[3] = r * g
    feats[4] = r * b
    feats[5] = g * b
    feats[6] = r * r
    feats[7] = g * g
    feats[8] = b * b
    feats[9] = np.broadcast_to(rows, (h, w))
    feats[10] = np.broadcast_to(cols, (h, w))
    feats[11] = 1.0
    return feats


@dataclass
class LinearHead:
    weight: np.ndarray  # [C, d]
    bias: np.ndarray  # [C]

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"inconsistent head shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def forward_flat(self, flat_features: np.ndarray) -> np.ndarray:
        return self.weight @ flat_features + self.bias[:, None]

    def expanded(self, extra_rows: int) -> "LinearHead":
        """New head with ``extra_rows`` zero-initialized rows appended."""
        c, d = self.weight.shape
        weight = np.zeros((c + extra_rows, d))
        weight[:c] = self.weight
        bias = np.zeros(c + extra_rows)
        bias[:c] = self.bias
        return LinearHead(weight, bias)

    def copy(self) -> "LinearHead":
        return LinearHead(self.weight.copy(), self.bias.copy())


@dataclass
class ToyModel:
    class_space: ClassSpace
    seg: LinearHead
    loc: LinearHead
    feature_dim: int = FEATURE_DIM
    step_index: int = 0

    def __post_init__(self) -> None:
        c = self.class_space.num_channels
        for name, head in (("seg", self.seg), ("loc", self.loc)):
            if head.channels != c or head.weight.shape[1] != self.feature_dim:
                raise ValueError(f"{name} head does not match the class space/feature dim")

    @classmethod
    def create(cls, space: ClassSpace, step_index: int = 0, feature_dim: int = FEATURE_DIM) -> "ToyModel":
        c = space.num_channels
        zeros = lambda: LinearHead(np.zeros((c, feature_dim)), np.zeros(c))
        return cls(class_space=space, seg=zeros(), loc=zeros(), feature_dim=feature_dim, step_index=step_index)

    def expand_for(self, space: ClassSpace, step_index: int) -> "ToyModel":
        """Fresh model for the next step: old rows copied, new rows zero."""
        if space.old_classes != self.class_space.all_classes:
            raise ValueError(
                f"step expects old classes {space.old_classes}, model knows {self.class_space.all_classes}"
            )
        extra = len(space.new_classes)
        return ToyModel(
            class_space=space,
            seg=self.seg.expanded(extra),
            loc=self.loc.expanded(extra),
            feature_dim=self.feature_dim,
            step_index=step_index,
        )

    def copy(self) -> "ToyModel":
        return ToyModel(self.class_space, self.seg.copy(), self.loc.copy(), self.feature_dim, self.step_index)

    def seg_logits(self, flat_features: np.ndarray, hw: tuple[int, int]) -> ScoreMap:
        c = self.class_space.num_channels
        return ScoreMap(self.seg.forward_flat(flat_features).reshape(c, *hw), Semantics.LOGITS)

    def seed_map(self, flat_features: np.ndarray, hw: tuple[int, int]) -> SeedMap:
        c = self.class_space.num_channels
        return SeedMap(ScoreMap(self.loc.forward_flat(flat_features).reshape(c, *hw), Semantics.SCORES))


def model_forward(model: ToyModel, sample) -> tuple[ScoreMap, SeedMap]:
    """Segmentation logits and localization seeds for one image."""
    feats = featurize(sample.pixels)
    flat = feats.reshape(FEATURE_DIM, -1)
    hw = feats.shape[1], feats.shape[2]
    return model.seg_logits(flat, hw), model.seed_map(flat, hw)


@dataclass
class Grads:
    seg_weight: np.ndarray
    seg_bias: np.ndarray
    loc_weight: np.ndarray
    loc_bias: np.ndarray

    @classmethod
    def zeros_like(cls, model: ToyModel) -> "Grads":
        return cls(
            np.zeros_like(model.seg.weight),
            np.zeros_like(model.seg.bias),
            np.zeros_like(model.loc.weight),
            np.zeros_like(model.loc.bias),
        )

    def blocks(self):
        return (
            ("seg_weight", self.seg_weight),
            ("seg_bias", self.seg_bias),
            ("loc_weight", self.loc_weight),
            ("loc_bias", self.loc_bias),
        )

    def finite(self) -> bool:
        return all(np.isfinite(arr).all() for _, arr in self.blocks())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    warmup_epochs: int = 5  # epochs before the pseudo-label loss joins
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    order_seed: int = 0
    tme: bool = True
    fusion: bool = True
    weight_cls: float = 1.0
    weight_loc: float = 1.0
    weight_seg: float = 1.0
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    fusion_cfg: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self) -> None:
        if self.epochs < 0 or not (0 <= self.warmup_epochs <= self.epochs):
            raise ValueError("need 0 <= warmup_epochs <= epochs")
        if self.lr0 <= 0.0:
            raise ValueError("lr0 must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be nonnegative")
        if self.poly_power <= 0.0:
            raise ValueError("poly_power must be positive")
        for name in ("weight_cls", "weight_loc", "weight_seg"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossReport:
    epoch: int
    lr: float
    loss_cls: float
    loss_loc: float
    loss_seg: float
    loss_total: float


@dataclass
class SgdState:
    velocity: Grads

    @classmethod
    def for_model(cls, model: ToyModel) -> "SgdState":
        return cls(velocity=Grads.zeros_like(model))


def poly_lr(epoch: int, cfg: TrainConfig) -> float:
    """Flat during warmup, then polynomial decay over the remaining epochs."""
    if epoch < 0 or epoch >= max(cfg.epochs, 1):
        raise ValueError(f"epoch {epoch} outside the schedule")
    if epoch < cfg.warmup_epochs:
        return cfg.lr0
    span = cfg.epochs - cfg.warmup_epochs
    if span <= 0:
        return cfg.lr0
    k = epoch - cfg.warmup_epochs
    return cfg.lr0 * (1.0 - k / span) ** cfg.poly_power


def sgd_step(model: ToyModel, state: SgdState, grads: Grads, lr: float, cfg: TrainConfig) -> None:
    """Momentum SGD with coupled weight decay, in place.

    velocity <- momentum * velocity + grad + weight_decay * param
    param <- param - lr * velocity
    """
    if not grads.finite():
        raise TrainingDivergedError("non-finite gradient")
    params = (
        (model.seg.weight, state.velocity.seg_weight, grads.seg_weight),
        (model.seg.bias, state.velocity.seg_bias, grads.seg_bias),
        (model.loc.weight, state.velocity.loc_weight, grads.loc_weight),
        (model.loc.bias, state.velocity.loc_bias, grads.loc_bias),
    )
    for param, vel, grad in params:
        vel *= cfg.momentum
        vel += grad + cfg.weight_decay * param
        param -= lr * vel


def bce_logit_grad(target: np.ndarray, logit: np.ndarray) -> np.ndarray:
    """d bce(target, sigmoid(logit)) / d logit, honoring the probability clip.

    Inside the clip range the derivative is sigmoid(logit) - target;
    where the sigmoid saturates past the clip, bce is constant in the
    logit and the derivative is exactly zero.
    """
    p = logistic(np.asarray(logit, dtype=np.float64))
    g = p - np.asarray(target, dtype=np.float64)
    g[(p <= PROB_EPS) | (p >= 1.0 - PROB_EPS)] = 0.0
    return g


def grad_loss_cls(image_labels: np.ndarray, seed: SeedMap, space: ClassSpace, cfg: PoolingConfig) -> np.ndarray:
    """Gradient of the image-level loss w.r.t. the seed scores, [C, N].

    Let w be the per-pixel softmax over the new-class rows S (the slice
    the pooling sees), T_c the weighted score sum, D_c the stabilized
    weight sum, A_c = T_c / D_c the pooled score, and m_c the mean
    weight (coverage). With the focal term F(m_c), g_c = A_c + F(m_c)
    and upstream error u_c = (sigmoid(g_c) - y_c) / |new|:

        dL/dS[k, i] = w[k, i] * ( u_k * (1/D_k + q[k, i])
                                  - sum_c u_c * w[c, i] * q[c, i] )
        q[c, i] = (S[c, i] - A_c) / D_c + F'(m_c) / N

    which folds the softmax Jacobian into one weighted inner product.
    """
    rows = list(space.new_channels)
    y = np.asarray(image_labels, dtype=np.float64)
    c_total = seed.channels
    flat = seed.scores.data.reshape(c_total, -1)
    n = flat.shape[1]
    flat_sl = flat[rows]
    pieces = pool_internals(flat_sl, cfg)
    w, denom, pooled, coverage = (
        pieces["weights"],
        pieces["denom"],
        pieces["pooled"],
        pieces["coverage"],
    )
    g = pooled + pieces["focal"]

    sig = logistic(g)
    upstream = (sig - y) / len(rows)
    upstream[(sig <= PROB_EPS) | (sig >= 1.0 - PROB_EPS)] = 0.0

    lam, pw, eps = cfg.focal_weight, cfg.focal_exponent, cfg.stabilizer
    focal_slope = lam * (
        -pw * (1.0 - coverage) ** (pw - 1.0) * np.log(coverage + eps)
        + (1.0 - coverage) ** pw / (coverage + eps)
    )
    q = (flat_sl - pooled[:, None]) / denom[:, None] + (focal_slope / n)[:, None]
    inner = (upstream[:, None] * w * q).sum(axis=0)
    out = np.zeros_like(flat)
    out[rows] = w * (upstream[:, None] * (1.0 / denom[:, None] + q) - inner[None, :])
    return out


def grad_loss_loc(old_logits: ScoreMap, seed: SeedMap, space: ClassSpace) -> np.ndarray:
    """Gradient of the distillation loss w.r.t. the seed scores, [C, N]."""
    n_old = len(space.old_classes)
    c_total = seed.channels
    flat = seed.scores.data.reshape(c_total, -1)
    n = flat.shape[1]
    out = np.zeros_like(flat)
    target = logistic(old_logits.data[1:].reshape(n_old, -1))
    rows = list(space.old_channels)
    out[rows] = bce_logit_grad(target, flat[rows]) / (n_old * n)
    return out


def grad_loss_seg(supervision: ScoreMap, logits: ScoreMap) -> np.ndarray:
    """Gradient of the dense target loss w.r.t. the logits, [C, N]."""
    c = logits.channels
    x = logits.data.reshape(c, -1)
    target = supervision.data.reshape(c, -1)
    return bce_logit_grad(target, x) / x.size


def compute_gradients(
    model: ToyModel,
    flat_features: np.ndarray,
    hw: tuple[int, int],
    image_labels: np.ndarray | None = None,
    old_logits: ScoreMap | None = None,
    supervision: ScoreMap | None = None,
    pool_cfg: PoolingConfig | None = None,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> tuple[Grads, dict]:
    """Analytic gradients of the active weighted losses for one image.

    Passing ``image_labels`` activates the image-level loss, passing
    ``old_logits`` the distillation loss (both drive the localizer
    head), and passing a fixed ``supervision`` target the dense loss on
    the segmentation head. Targets are constants: nothing propagates
    through pseudo-label construction.
    """
    pool_cfg = pool_cfg or PoolingConfig()
    w_cls, w_loc, w_seg = weights
    space = model.class_space
    grads = Grads.zeros_like(model)
    losses = {"cls": 0.0, "loc": 0.0, "seg": 0.0}
    d_seed = None
    if image_labels is not None or old_logits is not None:
        seed = model.seed_map(flat_features, hw)
        d_seed = np.zeros((space.num_channels, flat_features.shape[1]))
        if image_labels is not None:
            losses["cls"] = loss_cls(image_labels, seed, space, pool_cfg)
            d_seed += w_cls * grad_loss_cls(image_labels, seed, space, pool_cfg)
        if old_logits is not None:
            losses["loc"] = loss_loc(old_logits, seed, space)
            d_seed += w_loc * grad_loss_loc(old_logits, seed, space)
        grads.loc_weight = d_seed @ flat_features.T
        grads.loc_bias = d_seed.sum(axis=1)
    if supervision is not None:
        seg = model.seg_logits(flat_features, hw)
        losses["seg"] = loss_seg(supervision, seg)
        d_logits = w_seg * grad_loss_seg(supervision, seg)
        grads.seg_weight = d_logits @ flat_features.T
        grads.seg_bias = d_logits.sum(axis=1)
    losses["total"] = w_cls * losses["cls"] + w_loc * losses["loc"] + w_seg * losses["seg"]
    return grads, losses


def total_loss(
    model: ToyModel,
    flat_features: np.ndarray,
    hw: tuple[int, int],
    image_labels: np.ndarray | None = None,
    old_logits: ScoreMap | None = None,
    supervision: ScoreMap | None = None,
    pool_cfg: PoolingConfig | None = None,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> float:
    """Weighted sum of the active losses; the finite-difference target."""
    pool_cfg = pool_cfg or PoolingConfig()
    w_cls, w_loc, w_seg = weights
    space = model.class_space
    total = 0.0
    if image_labels is not None or old_logits is not None:
        seed = model.seed_map(flat_features, hw)
        if image_labels is not None:
            total += w_cls * loss_cls(image_labels, seed, space, pool_cfg)
        if old_logits is not None:
            total += w_loc * loss_loc(old_logits, seed, space)
    if supervision is not None:
        total += w_seg * loss_seg(supervision, model.seg_logits(flat_features, hw))
    return total


def _supervised_target(gt: np.ndarray, space: ClassSpace) -> ScoreMap:
    """One-hot dense target over all channels, background row included."""
    ids = np.array([space.class_of(ch) for ch in range(space.num_channels)])
    target = (gt[None, :, :] == ids[:, None, None]).astype(np.float64)
    return ScoreMap(target, Semantics.PROBABILITIES)


def run_step0(
    step_ds: StepDataset, cfg: TrainConfig, epoch_callback=None
) -> tuple[ToyModel, list[LossReport], SgdState]:
    """Fully supervised pretraining on the first step's dense labels."""
    space = step_ds.class_space
    model = ToyModel.create(space, step_index=step_ds.step_index)
    if not step_ds.samples:
        raise ValueError("empty step dataset")
    state = SgdState.for_model(model)
    rng = np.random.Generator(np.random.PCG64(cfg.order_seed))
    prepared = []
    for s in step_ds.samples:
        feats = featurize(s.pixels)
        prepared.append(
            (feats.reshape(FEATURE_DIM, -1), s.hw, _supervised_target(s.train_labels(), space))
        )
    reports = []
    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg)
        seg_sum = 0.0
        for idx in rng.permutation(len(prepared)):
            flat, hw, target = prepared[idx]
            grads, losses = compute_gradients(
                model, flat, hw, supervision=target, weights=(0.0, 0.0, cfg.weight_seg)
            )
            if not np.isfinite(losses["total"]):
                raise TrainingDivergedError(f"non-finite loss on image {idx} (epoch {epoch})")
            sgd_step(model, state, grads, lr, cfg)
            seg_sum += losses["seg"]
        report = LossReport(
            epoch=epoch,
            lr=lr,
            loss_cls=0.0,
            loss_loc=0.0,
            loss_seg=seg_sum / len(prepared),
            loss_total=cfg.weight_seg * seg_sum / len(prepared),
        )
        reports.append(report)
        if epoch_callback is not None:
            epoch_callback(epoch, model, report)
    return model, reports, state


def run_increment(
    old_model: ToyModel,
    step_ds: StepDataset,
    mask_provider,
    cfg: TrainConfig,
    epoch_callback=None,
) -> tuple[ToyModel, list[LossReport], SgdState]:
    """One incremental step from image-level labels and mask proposals.

    Every epoch trains the localizer on the image-level and distillation
    losses over the raw (unenforced) seeds; once past the warmup epochs,
    each image also runs the full pseudo-label pipeline against the
    frozen old model and trains the segmentation head on the assembled
    target. The old model's logits, proposal masks, and binarized
    prediction are constants per image and cached across epochs.
    """
    space = step_ds.class_space
    if not step_ds.samples:
        raise ValueError("empty step dataset")
    model = old_model.expand_for(space, step_index=step_ds.step_index)
    state = SgdState.for_model(model)
    rng = np.random.Generator(np.random.PCG64(cfg.order_seed))

    prepared = []
    for i, s in enumerate(step_ds.samples):
        feats = featurize(s.pixels)
        flat = feats.reshape(FEATURE_DIM, -1)
        hw = s.hw
        old_logits = old_model.seg_logits(flat, hw)
        mask_set = mask_provider(i, s)
        old_pred = binarize(
            old_logits, mask_set, cfg.fusion_cfg.alpha, PredictionSource.OLD_MODEL, class_ids=space.old_classes
        )
        y = np.asarray(s.image_level, dtype=np.float64)
        if y.shape != (len(space.new_classes),):
            raise ValueError(f"sample {s.index} carries {y.shape} image labels, expected {len(space.new_classes)}")
        prepared.append((flat, hw, y, old_logits, mask_set, old_pred))

    reports = []
    n = len(prepared)
    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg)
        dense_active = epoch >= cfg.warmup_epochs
        sums = {"cls": 0.0, "loc": 0.0, "seg": 0.0, "total": 0.0}
        for idx in rng.permutation(n):
            flat, hw, y, old_logits, mask_set, old_pred = prepared[idx]
            seed = model.seed_map(flat, hw)
            grads = Grads.zeros_like(model)
            l_cls = loss_cls(y, seed, space, cfg.pooling)
            l_loc = loss_loc(old_logits, seed, space)
            d_seed = cfg.weight_cls * grad_loss_cls(y, seed, space, cfg.pooling)
            d_seed += cfg.weight_loc * grad_loss_loc(old_logits, seed, space)
            grads.loc_weight = d_seed @ flat.T
            grads.loc_bias = d_seed.sum(axis=1)
            l_seg = 0.0
            if dense_active:
                seg = model.seg_logits(flat, hw)
                bundle = build_bundle(
                    old_logits,
                    seed,
                    mask_set,
                    seg,
                    space,
                    cfg.fusion_cfg,
                    apply_tme=cfg.tme,
                    apply_fusion=cfg.fusion,
                    old_pred=old_pred,
                )
                l_seg = loss_seg(bundle.supervision, seg)
                d_logits = cfg.weight_seg * grad_loss_seg(bundle.supervision, seg)
                grads.seg_weight = d_logits @ flat.T
                grads.seg_bias = d_logits.sum(axis=1)
            total = cfg.weight_cls * l_cls + cfg.weight_loc * l_loc + cfg.weight_seg * l_seg
            if not np.isfinite(total):
                raise TrainingDivergedError(f"non-finite loss on image {idx} (epoch {epoch})")
            sgd_step(model, state, grads, lr, cfg)
            sums["cls"] += l_cls
            sums["loc"] += l_loc
            sums["seg"] += l_seg
            sums["total"] += total
        report = LossReport(
            epoch=epoch,
            lr=lr,
            loss_cls=sums["cls"] / n,
            loss_loc=sums["loc"] / n,
            loss_seg=sums["seg"] / n,
            loss_total=sums["total"] / n,
        )
        reports.append(report)
        if epoch_callback is not None:
            epoch_callback(epoch, model, report)
    return model, reports, state


def config_to_json(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_json(d: dict) -> TrainConfig:
    pooling = PoolingConfig(**d.get("pooling", {}))
    fusion_cfg = FusionConfig(**d.get("fusion_cfg", {}))
    plain = {k: v for k, v in d.items() if k not in ("pooling", "fusion_cfg")}
    return TrainConfig(pooling=pooling, fusion_cfg=fusion_cfg, **plain)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(config_to_json(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_model(
    path, model: ToyModel, train_cfg: TrainConfig | None = None, state: SgdState | None = None
) -> None:
    """Serialize params and momentum buffers as f32 blocks, byte-stable."""
    from . import io as tdy_io

    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "step_index": model.step_index,
        "feature_dim": model.feature_dim,
        "old_classes": list(model.class_space.old_classes),
        "new_classes": list(model.class_space.new_classes),
    }
    if train_cfg is not None:
        header["train_config"] = config_to_json(train_cfg)
        header["config_hash"] = config_hash(train_cfg)
    if state is None:
        state = SgdState.for_model(model)
    blocks = {
        "seg_weight": (model.seg.weight[:, :, None], "f32"),
        "seg_bias": (model.seg.bias[:, None, None], "f32"),
        "loc_weight": (model.loc.weight[:, :, None], "f32"),
        "loc_bias": (model.loc.bias[:, None, None], "f32"),
        "vel_seg_weight": (state.velocity.seg_weight[:, :, None], "f32"),
        "vel_seg_bias": (state.velocity.seg_bias[:, None, None], "f32"),
        "vel_loc_weight": (state.velocity.loc_weight[:, :, None], "f32"),
        "vel_loc_bias": (state.velocity.loc_bias[:, None, None], "f32"),
    }
    tdy_io.save_checkpoint(path, header, blocks)


def load_model(path) -> tuple[ToyModel, dict, SgdState]:
    from . import io as tdy_io

    header, blocks = tdy_io.load_checkpoint(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise tdy_io.TdyMismatchError(f"not a model checkpoint: format {header.get('format')!r}")
    space = ClassSpace(tuple(header["old_classes"]), tuple(header["new_classes"]))
    model = ToyModel(
        class_space=space,
        seg=LinearHead(blocks["seg_weight"][:, :, 0], blocks["seg_bias"][:, 0, 0]),
        loc=LinearHead(blocks["loc_weight"][:, :, 0], blocks["loc_bias"][:, 0, 0]),
        feature_dim=int(header["feature_dim"]),
        step_index=int(header["step_index"]),
    )
    state = SgdState.for_model(model)
    for name, buf in (
        ("vel_seg_weight", state.velocity.seg_weight),
        ("vel_seg_bias", state.velocity.seg_bias),
        ("vel_loc_weight", state.velocity.loc_weight),
        ("vel_loc_bias", state.velocity.loc_bias),
    ):
        if name in blocks:
            np.copyto(buf, blocks[name].reshape(buf.shape))
    return model, header, state


def check_gradients(n_configs: int = 20, seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> dict:
    """Central finite differences vs the analytic gradients.

    Random small models and inputs, cycling through the loss subsets
    {image-level}, {distillation}, {dense}, {all three}. Relative error
    uses max(|analytic|, |numeric|, 1e-6) as the denominator.
    """
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    per_config = []
    for k in range(n_configs):
        n_old = int(rng.integers(1, 3))
        n_new = int(rng.integers(1, 3))
        h, w = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        d = int(rng.integers(3, 6))
        space = ClassSpace(tuple(range(1, n_old + 1)), tuple(range(n_old + 1, n_old + n_new + 1)))
        c = space.num_channels
        model = ToyModel(
            class_space=space,
            seg=LinearHead(rng.normal(0.0, 0.6, (c, d)), rng.normal(0.0, 0.6, c)),
            loc=LinearHead(rng.normal(0.0, 0.6, (c, d)), rng.normal(0.0, 0.6, c)),
            feature_dim=d,
        )
        flat = rng.uniform(0.0, 1.0, (d, h * w))
        subset = ("cls", "loc", "seg", "all")[k % 4]
        kwargs = {
            "image_labels": rng.integers(0, 2, n_new).astype(np.float64)
            if subset in ("cls", "all")
            else None,
            "old_logits": ScoreMap(rng.normal(0.0, 1.0, (1 + n_old, h, w)), Semantics.LOGITS)
            if subset in ("loc", "all")
            else None,
            "supervision": ScoreMap(rng.uniform(0.0, 1.0, (c, h, w)), Semantics.PROBABILITIES)
            if subset in ("seg", "all")
            else None,
        }
        grads, _ = compute_gradients(model, flat, (h, w), **kwargs)
        config_worst = 0.0
        for attr, analytic in (
            (model.seg.weight, grads.seg_weight),
            (model.seg.bias, grads.seg_bias),
            (model.loc.weight, grads.loc_weight),
            (model.loc.bias, grads.loc_bias),
        ):
            it = np.nditer(attr, flags=["multi_index"])
            for _ in it:
                ix = it.multi_index
                keep = attr[ix]
                attr[ix] = keep + step
                up = total_loss(model, flat, (h, w), **kwargs)
                attr[ix] = keep - step
                down = total_loss(model, flat, (h, w), **kwargs)
                attr[ix] = keep
                numeric = (up - down) / (2.0 * step)
                a = float(analytic[ix])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                config_worst = max(config_worst, rel)
        worst = max(worst, config_worst)
        per_config.append({"config": k, "losses": subset, "max_rel_error": config_worst})
    return {
        "configs": n_configs,
        "step": step,
        "tolerance": tol,
        "max_rel_error": worst,
        "passed": worst <= tol,
        "elapsed_s": time.perf_counter() - t0,
        "per_config": per_config,
    }
