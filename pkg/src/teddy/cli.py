"""Command-line entry points.

Every training-ish command resolves its options in three layers (explicit
flags, then an optional --config run.json, then built-in defaults) and
writes the resolved values back to run.json in its output directory, so
any run can be replayed from its own artifacts. Errors leave as one JSON
object on stderr and a nonzero exit code.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import io as tdy_io
from .core import ClassSpace
from .data import (
    DatasetConfig,
    GtAccessError,
    SplitMode,
    config_to_json as dataset_config_to_json,
    gen_shapes,
    load_dataset,
    save_dataset,
    split_incremental,
)
from .fusion import FusionConfig, build_bundle, closed_form_check
from .localizer import PoolingConfig
from .masks import make_provider, save_mask_set
from .metrics import evaluate_model, iou_counts, report_from_counts
from .trainer import (
    TrainConfig,
    TrainingDivergedError,
    check_gradients,
    load_model,
    model_forward,
    run_increment,
    run_step0,
    save_model,
)

_TRAIN_DEFAULTS = TrainConfig()
_FUSION_DEFAULTS = FusionConfig()
_POOL_DEFAULTS = PoolingConfig()
_DATA_DEFAULTS = DatasetConfig()


def _fail(exc: BaseException) -> int:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(payload), file=sys.stderr)
    return 2


def _resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("TEDDY_SEED")
    return int(env) if env is not None else 0


def _parse_steps(text: str) -> list[list[int]]:
    """'1,2,3,4/5,6' (or ';'-separated) -> [[1, 2, 3, 4], [5, 6]]."""
    groups = text.replace(";", "/").split("/")
    steps = []
    for g in groups:
        ids = [int(tok) for tok in g.split(",") if tok.strip() != ""]
        if not ids:
            raise ValueError(f"empty step group in {text!r}")
        steps.append(ids)
    return steps


def _parse_onoff(text) -> bool:
    if isinstance(text, bool):
        return text
    if text in ("on", "off"):
        return text == "on"
    raise ValueError(f"expected 'on' or 'off', got {text!r}")


def _layered(args: argparse.Namespace, keys: dict) -> dict:
    """Explicit flag > --config value > built-in default, per key."""
    config = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            run = json.load(f)
        config = run.get("resolved", run)
    out = {}
    for key, default in keys.items():
        explicit = getattr(args, key, None)
        if explicit is not None:
            out[key] = explicit
        elif key in config:
            out[key] = config[key]
        else:
            out[key] = default
    return out


def _write_run_json(out_dir: str, command: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {"command": command, "resolved": resolved}
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _train_keys() -> dict:
    return {
        "epochs": _TRAIN_DEFAULTS.epochs,
        "warmup_epochs": _TRAIN_DEFAULTS.warmup_epochs,
        "lr0": _TRAIN_DEFAULTS.lr0,
        "momentum": _TRAIN_DEFAULTS.momentum,
        "weight_decay": _TRAIN_DEFAULTS.weight_decay,
        "poly_power": _TRAIN_DEFAULTS.poly_power,
        "order_seed": None,  # falls back to --seed
        "tme": _TRAIN_DEFAULTS.tme,
        "fusion": _TRAIN_DEFAULTS.fusion,
        "weight_cls": _TRAIN_DEFAULTS.weight_cls,
        "weight_loc": _TRAIN_DEFAULTS.weight_loc,
        "weight_seg": _TRAIN_DEFAULTS.weight_seg,
        "alpha": _FUSION_DEFAULTS.alpha,
        "beta": _FUSION_DEFAULTS.beta,
        "eta": _FUSION_DEFAULTS.eta,
        "focal_lambda": _POOL_DEFAULTS.focal_weight,
        "focal_p": _POOL_DEFAULTS.focal_exponent,
        "stabilizer": _POOL_DEFAULTS.stabilizer,
    }


def _train_config_from(resolved: dict, seed: int) -> TrainConfig:
    order_seed = resolved.get("order_seed")
    return TrainConfig(
        epochs=int(resolved["epochs"]),
        warmup_epochs=int(resolved["warmup_epochs"]),
        lr0=float(resolved["lr0"]),
        momentum=float(resolved["momentum"]),
        weight_decay=float(resolved["weight_decay"]),
        poly_power=float(resolved["poly_power"]),
        order_seed=int(order_seed) if order_seed is not None else seed,
        tme=_parse_onoff(resolved["tme"]),
        fusion=_parse_onoff(resolved["fusion"]),
        weight_cls=float(resolved["weight_cls"]),
        weight_loc=float(resolved["weight_loc"]),
        weight_seg=float(resolved["weight_seg"]),
        pooling=PoolingConfig(
            focal_weight=float(resolved["focal_lambda"]),
            focal_exponent=float(resolved["focal_p"]),
            stabilizer=float(resolved["stabilizer"]),
        ),
        fusion_cfg=FusionConfig(
            alpha=float(resolved["alpha"]),
            beta=float(resolved["beta"]),
            eta=float(resolved["eta"]),
        ),
    )


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run.json from a previous run; flags still win")
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int, dest="warmup_epochs")
    p.add_argument("--lr0", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--poly-power", type=float, dest="poly_power")
    p.add_argument("--order-seed", type=int, dest="order_seed")
    p.add_argument("--tme", choices=("on", "off"))
    p.add_argument("--fusion", choices=("on", "off"))
    p.add_argument("--weight-cls", type=float, dest="weight_cls")
    p.add_argument("--weight-loc", type=float, dest="weight_loc")
    p.add_argument("--weight-seg", type=float, dest="weight_seg")
    p.add_argument("--alpha", type=float, help="overlap threshold for the old model's binarization")
    p.add_argument("--beta", type=float, help="overlap threshold for the seed binarization")
    p.add_argument("--eta", type=float, help="hard/soft pseudo-label mix")
    p.add_argument("--focal-lambda", type=float, dest="focal_lambda")
    p.add_argument("--focal-p", type=float, dest="focal_p")
    p.add_argument("--stabilizer", type=float)


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", required=True, help="class ids per step, e.g. '1,2,3,4/5,6'")
    p.add_argument("--mode", choices=("disjoint", "overlap"), default="overlap")


def _add_mask_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--mask-provider",
        dest="mask_provider",
        default="partitioner",
        help="partitioner, oracle, or ingest:<dir> (masks_<i>.tdym per step sample)",
    )
    p.add_argument("--quant-levels", type=int, dest="quant_levels", default=6)
    p.add_argument("--min-area", type=int, dest="min_area", default=4)


def _split_step(args, step_index: int):
    samples, _ = load_dataset(args.data)
    steps = _parse_steps(args.steps)
    if not (0 <= step_index < len(steps)):
        raise ValueError(f"step {step_index} out of range for {len(steps)} steps")
    return split_incremental(samples, steps, SplitMode(args.mode))[step_index], samples


def _save_losses(out_dir: str, reports) -> None:
    with open(os.path.join(out_dir, "losses.json"), "w", encoding="utf-8") as f:
        json.dump([dataclasses.asdict(r) for r in reports], f, indent=2)
        f.write("\n")


def _save_metrics(out_dir: str, report) -> dict:
    payload = report.to_json()
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return payload


def _cmd_gen_data(args) -> int:
    seed = _resolve_seed(args.seed)
    keys = {
        "count": 200,
        "height": _DATA_DEFAULTS.height,
        "width": _DATA_DEFAULTS.width,
        "min_shapes": _DATA_DEFAULTS.min_shapes,
        "max_shapes": _DATA_DEFAULTS.max_shapes,
        "size_min": _DATA_DEFAULTS.size_min,
        "size_max": _DATA_DEFAULTS.size_max,
        "noise": _DATA_DEFAULTS.noise,
    }
    resolved = _layered(args, keys)
    cfg = DatasetConfig(
        height=int(resolved["height"]),
        width=int(resolved["width"]),
        min_shapes=int(resolved["min_shapes"]),
        max_shapes=int(resolved["max_shapes"]),
        size_min=int(resolved["size_min"]),
        size_max=None if resolved["size_max"] is None else int(resolved["size_max"]),
        noise=float(resolved["noise"]),
        seed=seed,
    )
    samples = gen_shapes(cfg, int(resolved["count"]))
    save_dataset(args.out, samples, cfg)
    resolved.update({"seed": seed, "out": args.out})
    _write_run_json(args.out, "gen-data", resolved)
    print(json.dumps({"out": args.out, "samples": len(samples), "config": dataset_config_to_json(cfg)}))
    return 0


def _cmd_pretrain(args) -> int:
    seed = _resolve_seed(args.seed)
    resolved = _layered(args, _train_keys())
    cfg = _train_config_from(resolved, seed)
    step_ds, _ = _split_step(args, 0)
    model, reports, state = run_step0(step_ds, cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    save_model(ckpt, model, cfg, state)
    _save_losses(args.out, reports)
    metrics = _save_metrics(args.out, evaluate_model(model, step_ds.samples))
    resolved.update({"seed": seed, "steps": args.steps, "mode": args.mode, "data": args.data, "out": args.out})
    _write_run_json(args.out, "pretrain", resolved)
    print(json.dumps({"checkpoint": ckpt, "epochs": len(reports), "metrics": metrics}))
    return 0


def _cmd_increment(args) -> int:
    seed = _resolve_seed(args.seed)
    resolved = _layered(args, _train_keys())
    cfg = _train_config_from(resolved, seed)
    if args.step < 1:
        raise ValueError("increment starts at step 1; use pretrain for step 0")
    step_ds, _ = _split_step(args, args.step)
    old_model, _, _ = load_model(args.checkpoint)
    provider = make_provider(args.mask_provider, quant_levels=args.quant_levels, min_area=args.min_area)
    model, reports, state = run_increment(old_model, step_ds, provider, cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    save_model(ckpt, model, cfg, state)
    _save_losses(args.out, reports)
    metrics = _save_metrics(args.out, evaluate_model(model, step_ds.samples))
    resolved.update(
        {
            "seed": seed,
            "steps": args.steps,
            "mode": args.mode,
            "step": args.step,
            "data": args.data,
            "checkpoint": args.checkpoint,
            "mask_provider": args.mask_provider,
            "quant_levels": args.quant_levels,
            "min_area": args.min_area,
            "out": args.out,
        }
    )
    _write_run_json(args.out, "increment", resolved)
    print(json.dumps({"checkpoint": ckpt, "epochs": len(reports), "metrics": metrics}))
    return 0


def _cmd_pseudo(args) -> int:
    seed = _resolve_seed(args.seed)
    resolved = _layered(args, _train_keys())
    cfg = _train_config_from(resolved, seed)
    if args.step < 1:
        raise ValueError("pseudo-labels exist from step 1 on")
    step_ds, _ = _split_step(args, args.step)
    if not (0 <= args.index < len(step_ds.samples)):
        raise ValueError(f"index {args.index} out of range for {len(step_ds.samples)} step samples")
    sample = step_ds.samples[args.index]
    old_model, _, _ = load_model(args.checkpoint)
    space = step_ds.class_space
    if args.current:
        current, _, _ = load_model(args.current)
        if current.class_space != space:
            raise ValueError("current checkpoint does not match the step's class space")
    else:
        current = old_model.expand_for(space, step_index=step_ds.step_index)
    provider = make_provider(args.mask_provider, quant_levels=args.quant_levels, min_area=args.min_area)
    mask_set = provider(args.index, sample)
    old_logits, _ = model_forward(old_model, sample)
    current_logits, seed_map = model_forward(current, sample)
    bundle = build_bundle(
        old_logits,
        seed_map,
        mask_set,
        current_logits,
        space,
        cfg.fusion_cfg,
        apply_tme=cfg.tme,
        apply_fusion=cfg.fusion,
    )
    if cfg.tme and bundle.tme_report.violations:
        raise AssertionError(
            f"exclusion violated after enforcement: {bundle.tme_report.violations} pixels"
        )
    out = args.out
    os.makedirs(out, exist_ok=True)
    tdy_io.save_tensor(os.path.join(out, "seed_scores.tdy"), bundle.seed.scores.data, "f32", "scores")
    tdy_io.save_tensor(os.path.join(out, "soft_labels.tdy"), bundle.soft_labels.data, "f32", "probabilities")
    tdy_io.save_tensor(os.path.join(out, "fused.tdy"), bundle.fused.data, "f32", "probabilities")
    tdy_io.save_tensor(os.path.join(out, "supervision.tdy"), bundle.supervision.data, "f32", "probabilities")
    tdy_io.save_tensor(os.path.join(out, "old_pred.tdy"), bundle.old_pred.pred.data.astype(np.uint8), "u8", "binary")
    tdy_io.save_tensor(os.path.join(out, "seed_pred.tdy"), bundle.seed_pred.pred.data.astype(np.uint8), "u8", "binary")
    tdy_io.save_tensor(os.path.join(out, "coeff_u.tdy"), bundle.coeffs.u, "u8", "binary")
    tdy_io.save_tensor(os.path.join(out, "coeff_v.tdy"), bundle.coeffs.v, "u8", "binary")
    save_mask_set(os.path.join(out, "masks.tdym"), mask_set)
    summary = {
        "index": args.index,
        "step": args.step,
        "masks": mask_set.count,
        "tme": {"enforced": bundle.tme_report.enforced, "violations": bundle.tme_report.violations},
        "image_level": [int(v) for v in sample.image_level],
    }
    with open(os.path.join(out, "bundle.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    resolved.update(
        {
            "seed": seed,
            "steps": args.steps,
            "mode": args.mode,
            "step": args.step,
            "index": args.index,
            "data": args.data,
            "checkpoint": args.checkpoint,
            "current": args.current,
            "mask_provider": args.mask_provider,
            "out": out,
        }
    )
    _write_run_json(out, "pseudo", resolved)
    print(json.dumps(summary))
    return 0


def _eval_chunk(payload):
    model, samples, ids = payload
    import numpy as _np

    inter = _np.zeros(len(ids), dtype=_np.int64)
    union = _np.zeros(len(ids), dtype=_np.int64)
    from .metrics import predict_labelmap
    from .trainer import model_forward as fwd

    for s in samples:
        logits, _ = fwd(model, s)
        pred = predict_labelmap(logits, model.class_space)
        i, u = iou_counts(pred, s.eval_labels(), ids)
        inter += i
        union += u
    return inter, union


def _cmd_eval(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    samples, _ = load_dataset(args.data)
    space = model.class_space
    if args.jobs and args.jobs > 1 and len(samples) > 1:
        ids = (0,) + space.all_classes
        chunks = np.array_split(np.arange(len(samples)), min(args.jobs, len(samples)))
        inter = np.zeros(len(ids), dtype=np.int64)
        union = np.zeros(len(ids), dtype=np.int64)
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            parts = pool.map(
                _eval_chunk, [(model, [samples[i] for i in chunk], ids) for chunk in chunks]
            )
            for i, u in parts:
                inter += i
                union += u
        report = report_from_counts(inter, union, space)
    else:
        report = evaluate_model(model, samples, space)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _save_metrics(args.out, report)
        _write_run_json(args.out, "eval", {"checkpoint": args.checkpoint, "data": args.data, "jobs": args.jobs})
    print(json.dumps(report.to_json(), sort_keys=True))
    return 0


def _cmd_verify_uv(args) -> int:
    result = closed_form_check(trials=args.trials, seed=_resolve_seed(args.seed), tol=args.tol)
    print(json.dumps(result, sort_keys=True))
    return 0 if result["passed"] else 1


def _cmd_check_grad(args) -> int:
    result = check_gradients(n_configs=args.configs, seed=_resolve_seed(args.seed), step=args.step, tol=args.tol)
    slim = {k: v for k, v in result.items() if k != "per_config"}
    print(json.dumps(slim, sort_keys=True))
    return 0 if result["passed"] else 1


def _cmd_export_pgm(args) -> int:
    arr, header = tdy_io.load_tensor(args.input)
    if args.channel < 0 or args.channel >= arr.shape[0]:
        raise ValueError(f"channel {args.channel} out of range for shape {arr.shape}")
    plane = arr[args.channel]
    tdy_io.export_pgm(args.out, plane, label_map=args.labelmap, max_label=args.max_label)
    print(json.dumps({"out": args.out, "shape": list(plane.shape), "kind": header.get("kind")}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teddy", description=__doc__, allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--min-shapes", type=int, dest="min_shapes")
    p.add_argument("--max-shapes", type=int, dest="max_shapes")
    p.add_argument("--size-min", type=int, dest="size_min")
    p.add_argument("--size-max", type=int, dest="size_max")
    p.add_argument("--noise", type=float)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="supervised training on step 0")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _add_split_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("increment", help="one weakly supervised incremental step")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True, help="model from the previous step")
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--seed", type=int)
    _add_split_flags(p)
    _add_mask_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_increment)

    p = sub.add_parser("pseudo", help="dump one image's pseudo-label bundle")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True, help="old model (previous step)")
    p.add_argument("--current", help="current model checkpoint; default: expanded old model")
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--index", type=int, default=0, help="sample index within the step split")
    p.add_argument("--seed", type=int)
    _add_split_flags(p)
    _add_mask_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_pseudo)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="directory for metrics.json (optional)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("verify-uv", help="fuzz the closed-form mixing against the vertex oracle")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-12)
    p.set_defaults(func=_cmd_verify_uv)

    p = sub.add_parser("check-grad", help="finite-difference audit of the analytic gradients")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_cmd_check_grad)

    p = sub.add_parser("export-pgm", help="render one tensor channel as ASCII PGM")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--labelmap", action="store_true", help="treat values as label ids")
    p.add_argument("--max-label", type=int, dest="max_label")
    p.set_defaults(func=_cmd_export_pgm)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        ValueError,
        KeyError,
        AssertionError,
        OSError,
        GtAccessError,
        TrainingDivergedError,
        tdy_io.TdyError,
    ) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
