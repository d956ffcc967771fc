"""Acceptance suite.

One test per shipping criterion. Each test prints exactly one
PASS/FAIL line with its headline numbers before asserting, so a full
run of this file reads as the release checklist.
"""

import hashlib
import os
import time
import warnings

import numpy as np
import pytest

from teddy.binarize import BinaryPrediction, PredictionSource, assign_masks, binarize
from teddy.core import ClassSpace, ScoreMap, Semantics, bce, one_hot
from teddy.data import DatasetConfig, SplitMode, gen_shapes, split_incremental
from teddy.fusion import closed_form_check, loss_seg
from teddy.io import load_masks, load_tensor, save_masks, save_tensor
from teddy.localizer import PoolingConfig, SeedMap, loss_cls, loss_loc
from teddy.masks import BinaryMaskSet, MaskProvenance, make_provider
from teddy.metrics import evaluate_model
from teddy.tme import tme_check, tme_enforce
from teddy.trainer import TrainConfig, check_gradients, run_increment, run_step0, save_model

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

GOLDEN_SHA256 = {
    "golden.tdy": "961de62b8cce546e6bfa21a7c79c7990d9fde58ef9a5a023c89576eaef72005e",
    "golden_masks.tdym": "a98cf3714439c674696e7fc0666d5e17c47e86535dd1ca57fbbbb54d492ceb35",
    "golden.ckpt": "7ea9219f84b9166532a4a6dcd5ac41bf0908c924768ba94d3b037d6e685cdec7",
    "golden.pgm": "621c368055a87c95f3d07c641e709bcfce6728cca79d7b41120eb67167ffc21b",
}


def verdict(number, label, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] criterion {number} ({label}): {detail}")


def seed_of(data):
    return SeedMap(ScoreMap(np.asarray(data, dtype=np.float64), Semantics.SCORES))


def test_criterion_1_closed_form_matches_vertex_oracle():
    t0 = time.perf_counter()
    result = closed_form_check(trials=100_000, seed=1, tol=1e-12)
    elapsed = time.perf_counter() - t0
    ok = (
        result["passed"]
        and result["mismatches"] == 0
        and result["max_loss_gap"] <= 1e-12
        and elapsed < 5.0
    )
    verdict(
        1,
        "closed-form mixing equals vertex oracle",
        ok,
        f"trials=100000 mismatches={result['mismatches']} "
        f"max_loss_gap={result['max_loss_gap']:.3e} elapsed={elapsed:.2f}s",
    )
    assert ok, result


def test_criterion_2_exclusion_guarantee():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    leftover = 0
    non_idempotent = 0
    for i in range(1000):
        h = int(rng.integers(4, 12))
        w = int(rng.integers(4, 12))
        n_old = int(rng.integers(1, 4))
        n_new = int(rng.integers(1, 4))
        space = ClassSpace(
            tuple(range(1, n_old + 1)), tuple(range(n_old + 1, n_old + n_new + 1))
        )
        if i % 4 == 0:
            # Adversarial path: overlapping ingested masks binarized
            # against a random old-model score map.
            planes = np.zeros((int(rng.integers(2, 5)), h, w), dtype=np.uint8)
            for p in planes:
                r0, c0 = int(rng.integers(0, h - 1)), int(rng.integers(0, w - 1))
                r1 = int(rng.integers(r0 + 1, h + 1))
                c1 = int(rng.integers(c0 + 1, w + 1))
                p[r0:r1, c0:c1] = 1
            mset = BinaryMaskSet(planes, MaskProvenance.INGESTED)
            scores = ScoreMap(rng.standard_normal((1 + n_old, h, w)), Semantics.SCORES)
            old = binarize(
                scores, mset, 0.8, PredictionSource.OLD_MODEL, class_ids=space.old_classes
            )
        else:
            # Direct path: claims drawn per channel, so pixels may be
            # claimed by several old classes at once.
            claims = rng.random((n_old, h, w)) < 0.4
            old = BinaryPrediction(
                pred=ScoreMap(claims.astype(np.float64), Semantics.BINARY),
                class_ids=space.old_classes,
                threshold=0.8,
                source=PredictionSource.OLD_MODEL,
            )
        seed = seed_of(rng.standard_normal((space.num_channels, h, w)) * 3)
        clean = tme_enforce(old, seed)
        leftover += tme_check(old, clean, space).violations
        again = tme_enforce(old, clean)
        if not (
            np.array_equal(again.scores.data, clean.scores.data)
            and np.array_equal(again.excluded, clean.excluded)
        ):
            non_idempotent += 1
    elapsed = time.perf_counter() - t0
    ok = leftover == 0 and non_idempotent == 0 and elapsed < 5.0
    verdict(
        2,
        "exclusion guarantee",
        ok,
        f"instances=1000 leftover_violations={leftover} "
        f"non_idempotent={non_idempotent} elapsed={elapsed:.2f}s",
    )
    assert ok


def test_criterion_3_single_class_binarization():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    bad_rows = 0
    bad_pixels = 0
    done = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        while done < 1000:
            h = int(rng.integers(6, 14))
            w = int(rng.integers(6, 14))
            k = int(rng.integers(1, 5))
            label = rng.integers(0, k + 1, (h, w))
            planes = [label == j for j in range(1, k + 1) if (label == j).any()]
            if not planes:
                continue
            mset = BinaryMaskSet(
                np.stack(planes).astype(np.uint8), MaskProvenance.INGESTED
            )
            scores = ScoreMap(rng.standard_normal((1 + k, h, w)), Semantics.SCORES)
            table = assign_masks(one_hot(scores, drop_background=True), mset, 0.8).table
            bad_rows += int((table.sum(axis=1) > 1).sum())
            pred = binarize(scores, mset, 0.8, PredictionSource.OLD_MODEL)
            bad_pixels += int((pred.pred.data.sum(axis=0) > 1).sum())
            done += 1

    # Constructed dual-candidate fixtures: the larger intersection wins,
    # and an exact tie goes to the lowest class channel.
    def plane(h, w, r0, r1, c0, c1):
        m = np.zeros((h, w), dtype=np.float64)
        m[r0:r1, c0:c1] = 1.0
        return m

    c0 = plane(8, 8, 0, 2, 0, 2)
    c1 = plane(8, 8, 4, 6, 0, 3)
    both = BinaryMaskSet(((c0 + c1) > 0)[None].astype(np.uint8), MaskProvenance.INGESTED)
    with pytest.warns(RuntimeWarning, match="several classes"):
        sized = assign_masks(ScoreMap(np.stack([c0, c1]), Semantics.BINARY), both, 0.6)
    c1_tie = plane(8, 8, 4, 6, 0, 2)
    both_tie = BinaryMaskSet(
        ((c0 + c1_tie) > 0)[None].astype(np.uint8), MaskProvenance.INGESTED
    )
    with pytest.warns(RuntimeWarning, match="several classes"):
        tied = assign_masks(ScoreMap(np.stack([c0, c1_tie]), Semantics.BINARY), both_tie, 0.6)
    fixtures_ok = (
        sized.table.tolist() == [[0, 1]]
        and sized.intersections.tolist() == [[4, 6]]
        and sized.multi_candidate_rows == 1
        and tied.table.tolist() == [[1, 0]]
        and tied.intersections.tolist() == [[4, 4]]
    )
    elapsed = time.perf_counter() - t0
    ok = bad_rows == 0 and bad_pixels == 0 and fixtures_ok
    verdict(
        3,
        "single-class binarization",
        ok,
        f"instances=1000 multi_assign_rows={bad_rows} multi_class_pixels={bad_pixels} "
        f"tie_break_fixtures={'ok' if fixtures_ok else 'BROKEN'} elapsed={elapsed:.2f}s",
    )
    assert ok


def test_criterion_4_gradients_match_finite_differences():
    t0 = time.perf_counter()
    result = check_gradients(n_configs=20, seed=4)
    elapsed = time.perf_counter() - t0
    ok = result["passed"] and result["max_rel_error"] <= 1e-4 and elapsed < 30.0
    verdict(
        4,
        "analytic gradients match finite differences",
        ok,
        f"configs=20 max_rel_error={result['max_rel_error']:.3e} elapsed={elapsed:.2f}s",
    )
    assert ok, {k: v for k, v in result.items() if k != "per_config"}


def test_criterion_5_scalar_loss_golden_values():
    ln2_gap = abs(bce(1.0, 0.5) - np.log(2.0))

    # Image-classification loss: constant new-class scores (2, -1) on a
    # 32x32 grid against image labels (1, 0), focal term off.
    space_cls = ClassSpace((), (1, 2))
    data = np.zeros((3, 32, 32))
    data[1] = 2.0
    data[2] = -1.0
    cls = loss_cls(np.array([1, 0]), seed_of(data), space_cls, PoolingConfig(focal_weight=0.0))
    cls_gap = abs(cls - 0.22009484928059772)

    # Old-knowledge localization loss: old logits (0, 2) against seed
    # logits (1, 1) on the single old class.
    space_loc = ClassSpace((1,), (2,))
    old = ScoreMap(np.array([[[0.0, 0.0]], [[0.0, 2.0]]]), Semantics.LOGITS)
    loc = loss_loc(old, seed_of(np.array([[[0.0, 0.0]], [[1.0, 1.0]], [[0.0, 0.0]]])), space_loc)
    loc_gap = abs(loc - 0.6228631485292817)

    # Dense pseudo-supervision loss: targets (1, 0.3) against predicted
    # probabilities (0.8, 0.6).
    g = ScoreMap(np.array([[[1.0]], [[0.3]]]), Semantics.PROBABILITIES)
    logits = ScoreMap(np.array([[[np.log(4.0)]], [[np.log(1.5)]]]), Semantics.LOGITS)
    seg = loss_seg(g, logits)
    seg_gap = abs(seg - 0.5088973753779578)

    ok = ln2_gap < 1e-9 and cls_gap < 1e-6 and loc_gap < 1e-6 and seg_gap < 1e-6
    verdict(
        5,
        "scalar loss golden values",
        ok,
        f"ln2_gap={ln2_gap:.1e} cls_gap={cls_gap:.1e} loc_gap={loc_gap:.1e} seg_gap={seg_gap:.1e}",
    )
    assert ok


def benchmark_one_seed(seed):
    """Shared pretrain, then one ablated and one full increment."""
    samples = gen_shapes(DatasetConfig(seed=seed), 200)
    steps = split_incremental(samples, [[1, 2, 3, 4], [5, 6]], SplitMode.OVERLAP)
    pretrain_cfg = TrainConfig(epochs=40, warmup_epochs=5, lr0=0.1, order_seed=seed)
    base_model, _, _ = run_step0(steps[0], pretrain_cfg)
    provider = make_provider("oracle")
    out = {}
    for label, toggles in (("base", False), ("full", True)):
        cfg = TrainConfig(
            epochs=40,
            warmup_epochs=5,
            lr0=0.1,
            order_seed=seed,
            tme=toggles,
            fusion=toggles,
        )
        model, _, _ = run_increment(base_model, steps[1], provider, cfg)
        report = evaluate_model(model, samples)
        assert report.old_mean is not None and report.new_mean is not None
        out[label] = (report.old_mean, report.new_mean)
    return out


def test_criterion_6_ablation_direction():
    # Synthetic 4+2 overlap benchmark: 200 default-catalog images per
    # seed, oracle masks, 40 epochs at lr0=0.1 for both phases, seeds
    # 0..4 with the pretrain shared inside each seed. Enabling the
    # exclusion rule plus fusion must strictly improve new-class mIoU
    # while keeping old-class mIoU within 0.01 of the ablated baseline.
    t0 = time.perf_counter()
    results = [benchmark_one_seed(seed) for seed in range(5)]
    elapsed = time.perf_counter() - t0
    base_old = float(np.mean([r["base"][0] for r in results]))
    base_new = float(np.mean([r["base"][1] for r in results]))
    full_old = float(np.mean([r["full"][0] for r in results]))
    full_new = float(np.mean([r["full"][1] for r in results]))
    # The 0.95 floor is a frozen regression tripwire: the full arm has
    # reached new-class mIoU 1.0 on every benchmark seed to date.
    ok = (
        full_new > base_new
        and full_old >= base_old - 0.01
        and full_new >= 0.95
        and elapsed < 300.0
    )
    verdict(
        6,
        "end-to-end ablation direction",
        ok,
        f"base old/new={base_old:.4f}/{base_new:.4f} "
        f"full old/new={full_old:.4f}/{full_new:.4f} elapsed={elapsed:.1f}s",
    )
    assert ok


def test_criterion_7_determinism_and_formats(tmp_path):
    problems = []

    for name, frozen in sorted(GOLDEN_SHA256.items()):
        with open(os.path.join(FIXTURES, name), "rb") as fh:
            if hashlib.sha256(fh.read()).hexdigest() != frozen:
                problems.append(f"digest:{name}")

    arr, header = load_tensor(os.path.join(FIXTURES, "golden.tdy"))
    expected = np.array(
        [
            [[0.0, 1.5], [-2.25, 3.125]],
            [[1e-7, -1e-7], [255.0, -255.0]],
            [[0.1, 0.2], [0.3, 0.4]],
        ],
        dtype=np.float32,
    )
    if not (arr.dtype == np.float32 and np.array_equal(arr, expected)):
        problems.append("golden-tensor-bits")
    if header.get("semantics") != "probe":
        problems.append("golden-tensor-header")
    golden_planes = np.zeros((3, 4, 5), dtype=np.uint8)
    golden_planes[0, :2, :2] = 1
    golden_planes[1, 2:, 3:] = 1
    golden_planes[2, 1, 1:4] = 1
    if not np.array_equal(load_masks(os.path.join(FIXTURES, "golden_masks.tdym")), golden_planes):
        problems.append("golden-masks-bits")

    rng = np.random.default_rng(7)
    tensor = rng.standard_normal((3, 5, 4)).astype(np.float32)
    save_tensor(tmp_path / "rt.tdy", tensor, "f32", "scores")
    back, _ = load_tensor(tmp_path / "rt.tdy")
    if not np.array_equal(back, tensor):
        problems.append("tensor-round-trip")
    planes = (rng.random((4, 6, 6)) < 0.5).astype(np.uint8)
    planes[planes.sum(axis=(1, 2)) == 0, 0, 0] = 1
    save_masks(tmp_path / "rt.tdym", planes)
    if not np.array_equal(load_masks(tmp_path / "rt.tdym"), planes):
        problems.append("masks-round-trip")

    samples = gen_shapes(DatasetConfig(height=16, width=16, seed=7), 20)
    steps = split_incremental(samples, [[1, 2, 3, 4], [5, 6]], SplitMode.OVERLAP)
    cfg0 = TrainConfig(epochs=4, warmup_epochs=0, lr0=0.1, order_seed=7)
    cfg1 = TrainConfig(epochs=3, warmup_epochs=1, lr0=0.1, order_seed=7)
    ckpts = []
    metrics = []
    for run in range(2):
        model0, _, state0 = run_step0(steps[0], cfg0)
        model1, _, state1 = run_increment(model0, steps[1], make_provider("oracle"), cfg1)
        p0 = tmp_path / f"step0_{run}.ckpt"
        p1 = tmp_path / f"step1_{run}.ckpt"
        save_model(p0, model0, cfg0, state0)
        save_model(p1, model1, cfg1, state1)
        ckpts.append((p0.read_bytes(), p1.read_bytes()))
        metrics.append(evaluate_model(model1, samples).to_json())
    if ckpts[0] != ckpts[1]:
        problems.append("checkpoint-determinism")
    if metrics[0] != metrics[1]:
        problems.append("metrics-determinism")

    ok = not problems
    verdict(
        7,
        "determinism and formats",
        ok,
        "golden digests, bit-identical loads, exact round trips, repeated runs"
        + ("" if ok else f" -> {problems}"),
    )
    assert ok, problems


def test_criterion_8_split_protocol_conformance():
    samples = gen_shapes(DatasetConfig(seed=0), 200)
    future_pixels = 0
    missing_new = 0
    scanned = 0
    for layout in ([[1, 2, 3, 4], [5, 6]], [[1, 2], [3, 4], [5, 6]]):
        disjoint = split_incremental(samples, layout, SplitMode.DISJOINT)
        seen = set()
        for t, step in enumerate(disjoint):
            seen |= set(layout[t])
            allowed = np.array([0] + sorted(seen))
            for s in step.samples:
                future_pixels += int((~np.isin(s.eval_labels(), allowed)).sum())
                scanned += 1
        overlap = split_incremental(samples, layout, SplitMode.OVERLAP)
        for t, step in enumerate(overlap):
            new_ids = np.array(layout[t])
            later = np.array([c for g in layout[t + 1 :] for c in g])
            for s in step.samples:
                gt = s.eval_labels()
                if not np.isin(gt, new_ids).any():
                    missing_new += 1
                if t == 0 and later.size and np.isin(gt, later).any():
                    # Step-0 storage must have remapped future classes away.
                    future_pixels += int(np.isin(gt, later).sum())
                scanned += 1
    ok = future_pixels == 0 and missing_new == 0 and scanned > 0
    verdict(
        8,
        "split protocol conformance",
        ok,
        f"samples_scanned={scanned} future_pixels={future_pixels} "
        f"samples_missing_new_class={missing_new}",
    )
    assert ok
