"""Pseudo-label fusion: combining mask-snapped and softly scored labels.

For every pixel and new class, two label sources compete: the binarized
seed prediction (sharp, mask-aligned, sometimes absent) and the soft
pseudo-label (dense, blurry). A per-pixel pair of binary coefficients
(u, v) mixes them; the mixing weights minimize the cross-entropy between
the mixed label and the current model's own prediction, over the
relaxed constraint set u <= 1, v <= 1, u + v >= 1. The objective is
affine in the clipped mix, so the optimum sits at one of the three
vertices (1,0), (0,1), (1,1) and has a closed form; a brute-force
vertex oracle double-checks it.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import ClassSpace, ScoreMap, Semantics, bce, clamp_unit, logistic, one_hot
from .binarize import BinaryPrediction, PredictionSource, binarize
from .localizer import SeedMap, _softmax_channels
from .masks import BinaryMaskSet
from .tme import TmeReport, tme_check, tme_enforce

# Vertex enumeration order; ties in the oracle resolve to the earliest.
UV_VERTICES: tuple[tuple[int, int], ...] = ((1, 0), (0, 1), (1, 1))


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.8  # overlap threshold for binarizing the old model
    beta: float = 0.5  # overlap threshold for binarizing the seeds
    eta: float = 0.5  # hard/soft mix of the pseudo-labels

    def __post_init__(self) -> None:
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (0.5 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0.5, 1], got {v}")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")


@dataclass
class FusionCoefficients:
    """Binary mixing tensors over background + new-class channels."""

    u: np.ndarray  # [1 + n_new, H, W] uint8
    v: np.ndarray

    def __post_init__(self) -> None:
        self.u = np.asarray(self.u, dtype=np.uint8)
        self.v = np.asarray(self.v, dtype=np.uint8)
        if self.u.shape != self.v.shape or self.u.ndim != 3:
            raise ValueError("u and v must share a [c, h, w] shape")
        for name, arr in (("u", self.u), ("v", self.v)):
            if not np.isin(arr, (0, 1)).all():
                raise ValueError(f"{name} must be binary")
        if (self.u.astype(np.int64) + self.v < 1).any():
            raise ValueError("infeasible coefficients: u + v >= 1 must hold everywhere")


def soft_pseudo_labels(seed: SeedMap, space: ClassSpace, eta: float) -> ScoreMap:
    """Mix one-hot and softmax views of the new-class seeds.

    Works on the background + new-class slice of the seed map. Pixels
    the exclusion pass zeroed are overridden to pure background: their
    softmax would otherwise be uniform, which is noise, not evidence.
    """
    if not (0.0 <= eta <= 1.0):
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if seed.channels != space.num_channels:
        raise ValueError("seed channels do not match the class space")
    sub = seed.scores.select((0,) + space.new_channels)
    hard = one_hot(sub).data
    soft = _softmax_channels(sub.data.reshape(sub.channels, -1)).reshape(sub.data.shape)
    labels = eta * hard + (1.0 - eta) * soft
    if seed.excluded is not None:
        forced = seed.excluded.astype(bool)
        labels[:, forced] = 0.0
        labels[0, forced] = 1.0
    return ScoreMap(labels, Semantics.PROBABILITIES)


def solve_uv(current_logits: ScoreMap, seed_pred: BinaryPrediction, soft: ScoreMap) -> FusionCoefficients:
    """Closed-form minimizer of the per-pixel mixing problem.

    The objective bce(clip(u*r + v*p), sigmoid(logit)) is affine in the
    clipped mix, so: positive logit wants the largest mix, (1, 1);
    otherwise the smaller of r and p wins, ties preferring the sharp
    source, (1, 0). Background always takes (0, 1): the old-model
    binarization has no background channel to contribute there.
    """
    n_new = seed_pred.pred.channels
    if current_logits.channels != 1 + n_new or soft.channels != 1 + n_new:
        raise ValueError("logits and soft labels must cover background + new classes")
    if current_logits.semantics is not Semantics.LOGITS:
        raise ValueError("solve_uv keys off raw logits")
    if current_logits.data.shape[1:] != seed_pred.pred.data.shape[1:] or soft.data.shape != current_logits.data.shape:
        raise ValueError("inconsistent map sizes")
    x = current_logits.data[1:]
    r = seed_pred.pred.data
    p = soft.data[1:]
    pos = x > 0.0
    sharp = r <= p  # prefer the mask-aligned source on ties
    u = np.where(pos, 1, np.where(sharp, 1, 0)).astype(np.uint8)
    v = np.where(pos, 1, np.where(sharp, 0, 1)).astype(np.uint8)
    shape = (1,) + x.shape[1:]
    u_full = np.concatenate([np.zeros(shape, dtype=np.uint8), u])
    v_full = np.concatenate([np.ones(shape, dtype=np.uint8), v])
    return FusionCoefficients(u=u_full, v=v_full)


def oracle_uv(logit: float, r: float, p: float) -> tuple[int, int]:
    """Brute-force reference: evaluate every vertex, keep the first best."""
    sig = logistic(float(logit))
    best = None
    best_loss = np.inf
    for u, v in UV_VERTICES:
        loss = bce(clamp_unit(u * r + v * p), sig)
        if loss < best_loss:
            best, best_loss = (u, v), loss
    return best


def closed_form_check(trials: int = 100_000, seed: int = 1, tol: float = 1e-12) -> dict:
    """Fuzz the closed form against vertex enumeration, vectorized.

    Draws logit ~ N(0, 2) excluding the near-tie band |logit| <= 1e-9,
    r uniform over {0, 1}, p uniform over [0, 1]. The contract is loss
    equality: the closed form's objective value must match the vertex
    minimum on every triple. Vertices often tie (r = 1 with a positive
    logit reaches the same clipped mix two ways), so differing argmin
    picks are reported but are not failures.
    """
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(seed))
    logit = np.empty(0)
    while logit.size < trials:
        draw = rng.normal(0.0, 2.0, trials - logit.size)
        logit = np.concatenate([logit, draw[np.abs(draw) > 1e-9]])
    r = rng.integers(0, 2, trials).astype(np.float64)
    p = rng.uniform(0.0, 1.0, trials)
    sig = logistic(logit)

    vertex_losses = np.stack(
        [bce(clamp_unit(u * r + v * p), sig) for u, v in UV_VERTICES]
    )
    best_idx = vertex_losses.argmin(axis=0)  # first minimum == strict-less scan
    verts = np.asarray(UV_VERTICES)
    oracle_u, oracle_v = verts[best_idx, 0], verts[best_idx, 1]

    pos = logit > 0.0
    sharp = r <= p
    u = np.where(pos, 1, np.where(sharp, 1, 0))
    v = np.where(pos, 1, np.where(sharp, 0, 1))
    closed_loss = bce(clamp_unit(u * r + v * p), sig)

    gaps = np.abs(closed_loss - vertex_losses[best_idx, np.arange(trials)])
    mismatches = int((gaps > tol).sum())
    argmin_ties = int(((u != oracle_u) | (v != oracle_v)).sum())
    return {
        "trials": int(trials),
        "mismatches": mismatches,
        "max_loss_gap": float(gaps.max()),
        "argmin_ties": argmin_ties,
        "tolerance": float(tol),
        "passed": mismatches == 0,
        "elapsed_s": time.perf_counter() - t0,
    }


def fuse_predictions(coeffs: FusionCoefficients, seed_pred: BinaryPrediction, soft: ScoreMap) -> ScoreMap:
    """Apply the mixing coefficients: clip(u*r + v*p) channelwise."""
    n_new = seed_pred.pred.channels
    if coeffs.u.shape[0] != 1 + n_new or soft.channels != 1 + n_new:
        raise ValueError("coefficients, seeds, and soft labels must agree on channels")
    if soft.data.shape != coeffs.u.shape or seed_pred.pred.data.shape[1:] != coeffs.u.shape[1:]:
        raise ValueError("inconsistent map sizes")
    r_ext = np.concatenate([np.zeros((1,) + seed_pred.pred.data.shape[1:]), seed_pred.pred.data])
    fused = np.minimum(coeffs.u * r_ext + coeffs.v * soft.data, 1.0)
    return ScoreMap(fused, Semantics.PROBABILITIES)


def assemble_supervision(old_logits: ScoreMap, fused: ScoreMap, space: ClassSpace) -> ScoreMap:
    """Stack the full training target over background + old + new channels.

    Old classes keep the previous model's probabilities (distillation);
    new classes take the fused labels; background takes the pointwise
    minimum of the two background beliefs, so neither source can claim
    a pixel for background that the other hands to a class.
    """
    n_old, n_new = len(space.old_classes), len(space.new_classes)
    if old_logits.channels != 1 + n_old or fused.channels != 1 + n_new:
        raise ValueError("maps do not match the class space")
    if old_logits.data.shape[1:] != fused.data.shape[1:]:
        raise ValueError("inconsistent map sizes")
    sig_old = logistic(old_logits.data)
    target = np.empty((space.num_channels,) + old_logits.data.shape[1:])
    target[0] = np.minimum(sig_old[0], fused.data[0])
    target[list(space.old_channels)] = sig_old[1:]
    target[list(space.new_channels)] = fused.data[1:]
    return ScoreMap(target, Semantics.PROBABILITIES)


def loss_seg(supervision: ScoreMap, logits: ScoreMap) -> float:
    """Mean BCE between the assembled target and sigmoid of the logits."""
    if supervision.data.shape != logits.data.shape:
        raise ValueError("supervision and logits must share a shape")
    return float(np.mean(bce(supervision.data, logistic(logits.data))))


@dataclass
class PseudoLabelBundle:
    """Everything one image's pseudo-label pass produced, for reuse and dumps."""

    old_pred: BinaryPrediction  # binarized old model (the exclusion source)
    seed: SeedMap  # seeds after the optional exclusion pass
    soft_labels: ScoreMap  # eta-mixed pseudo-labels, background + new
    seed_pred: BinaryPrediction  # binarized seeds over the new classes
    coeffs: FusionCoefficients
    fused: ScoreMap  # mixed labels, background + new
    supervision: ScoreMap  # full training target, all channels
    tme_report: TmeReport


def build_bundle(
    old_logits: ScoreMap,
    seed: SeedMap,
    mask_set: BinaryMaskSet,
    current_logits: ScoreMap,
    space: ClassSpace,
    cfg: FusionConfig,
    apply_tme: bool = True,
    apply_fusion: bool = True,
    old_pred: BinaryPrediction | None = None,
) -> PseudoLabelBundle:
    """Run one image through the whole pseudo-label pipeline.

    ``old_pred`` may carry a precomputed binarization of the (frozen)
    old model; passing it skips recomputing an epoch-invariant quantity
    and changes nothing else. With fusion disabled the soft labels pass
    through unmixed, which corresponds to the always-feasible choice
    u = 0, v = 1.
    """
    if current_logits.channels != space.num_channels:
        raise ValueError("current logits must cover the full class space")
    if old_pred is None:
        old_pred = binarize(old_logits, mask_set, cfg.alpha, PredictionSource.OLD_MODEL, class_ids=space.old_classes)
    if apply_tme:
        seed = tme_enforce(old_pred, seed)
    report = tme_check(old_pred, seed, space)
    report.enforced = apply_tme
    soft = soft_pseudo_labels(seed, space, cfg.eta)
    seed_sub = seed.scores.select((0,) + space.new_channels)
    seed_pred = binarize(seed_sub, mask_set, cfg.beta, PredictionSource.SEED_MAP, class_ids=space.new_classes)
    if apply_fusion:
        cur_new = current_logits.select((0,) + space.new_channels)
        coeffs = solve_uv(cur_new, seed_pred, soft)
        fused = fuse_predictions(coeffs, seed_pred, soft)
    else:
        coeffs = FusionCoefficients(
            u=np.zeros((1 + len(space.new_classes),) + seed.hw, dtype=np.uint8),
            v=np.ones((1 + len(space.new_classes),) + seed.hw, dtype=np.uint8),
        )
        fused = soft.copy()
    supervision = assemble_supervision(old_logits, fused, space)
    return PseudoLabelBundle(
        old_pred=old_pred,
        seed=seed,
        soft_labels=soft,
        seed_pred=seed_pred,
        coeffs=coeffs,
        fused=fused,
        supervision=supervision,
        tme_report=report,
    )
