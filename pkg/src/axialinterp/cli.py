"""Command-line entry point: train, predict, eval, bench, roughness, match, iou, triplets-dryrun."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from axialinterp import __version__
from axialinterp.trainer import TrainingDiverged

log = logging.getLogger("axialinterp")

DEVICE_ENV = "AXIALINTERP_DEVICE"


class CliError(Exception):
    pass


def _zs(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--zs expects comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="axialinterp", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a generator from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--input", required=True, help="dataset manifest (JSON list of {path, mode})")
    t.add_argument("--output", required=True, help="checkpoint directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--devices", type=int)
    t.add_argument("--epochs", type=int)

    pr = sub.add_parser("predict", help="upsample a stack along z")
    pr.add_argument("--model", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--output", required=True)
    g = pr.add_mutually_exclusive_group(required=True)
    g.add_argument("--passes", type=int)
    g.add_argument("--zs", type=_zs)
    pr.add_argument("--framing", choices=("tile", "resize"), default="tile")

    e = sub.add_parser("eval", help="score a prediction against ground truth")
    e.add_argument("--input", required=True, help="predicted stack")
    e.add_argument("--gt", required=True)
    e.add_argument("--stride", type=int, required=True)
    e.add_argument("--report")

    b = sub.add_parser("bench", help="model vs cubic baseline on a ground-truth stack")
    b.add_argument("--model", required=True)
    b.add_argument("--input", required=True, help="high-resolution ground-truth stack")
    b.add_argument("--passes", type=int, default=1)
    b.add_argument("--report")

    r = sub.add_parser("roughness", help="per-label spherical-harmonic roughness")
    r.add_argument("--input", required=True, help="label mask TIFF")
    r.add_argument("--spacing", type=_zs, default=[1.0, 1.0, 1.0], help="dz,dy,dx")
    r.add_argument("--report")

    m = sub.add_parser("match", help="match labels by maximal overlap")
    m.add_argument("--input", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--report")

    i = sub.add_parser("iou", help="IoU of dilated, smoothed binary masks")
    i.add_argument("--input", required=True)
    i.add_argument("--gt", required=True)
    i.add_argument("--radius", type=int, default=2)
    i.add_argument("--sigma", type=float, default=1.0)
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--report")

    d = sub.add_parser("triplets-dryrun", help="print triplet counts per stack")
    d.add_argument("--input", required=True, help="dataset manifest")
    return p


def _finite(o):
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite(v) for v in o]
    if isinstance(o, float) and not np.isfinite(o):
        return str(o)
    return o


def _emit(doc: dict, report: str | None) -> None:
    doc = _finite({"toolkit_version": __version__, **doc})
    text = json.dumps(doc, indent=2, default=_json_default, allow_nan=False)
    if report:
        Path(report).parent.mkdir(parents=True, exist_ok=True)
        Path(report).write_text(text + "\n")
    print(text)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return _finite(float(o))
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"file not found: {path}")
    return p


def _load_labels(path: str) -> np.ndarray:
    import tifffile

    return np.asarray(tifffile.imread(_require(path)))


def cmd_train(args) -> dict:
    from axialinterp.trainer import TrainConfig, train
    from axialinterp.triplets import extract_fixed_triplets, extract_windowed_triplets, read_dataset_manifest
    from axialinterp.volio import load_stack

    overrides = {"seed": args.seed, "device_count": args.devices, "epochs": args.epochs}
    cfg = TrainConfig.from_file(_require(args.config), overrides)
    out = Path(args.output)
    cfg.checkpoint_dir = str(out)
    cfg.log_path = str(out / "train_log.jsonl")
    env_device = os.environ.get(DEVICE_ENV)
    if env_device:
        cfg.device = env_device
    samples = []
    for entry in read_dataset_manifest(_require(args.input)):
        stack = load_stack(entry["path"])
        sid = str(entry["path"])
        if entry["mode"] == "fixed":
            samples += extract_fixed_triplets(stack, sid, policy="resize", size=cfg.frame_size)
        else:
            samples += extract_windowed_triplets(stack, entry["window"], sid, policy="resize", size=cfg.frame_size)
    trainer, records = train(cfg, samples)
    final = trainer.save(out / "final.pt", cfg.epochs)
    return {"command": "train", "checkpoint": str(final), "steps": trainer.step, "config_hash": cfg.config_hash(), "triplets": len(samples)}


def cmd_predict(args) -> dict:
    from axialinterp.checkpoint import load_checkpoint
    from axialinterp.volio import load_stack, save_stack
    from axialinterp.zaugment import augment_volume

    model = load_checkpoint(_require(args.model))
    if args.zs is not None and model.mode != "plus":
        raise CliError("--zs needs a plus-mode model; this checkpoint is fixed-mode")
    stack = load_stack(_require(args.input))
    t0 = time.perf_counter()
    out = augment_volume(model, stack, passes=args.passes, zs=args.zs, policy=args.framing)
    elapsed = time.perf_counter() - t0
    save_stack(out, args.output, {"toolkit_version": __version__})
    return {"command": "predict", "output": args.output, "depth_in": stack.depth, "depth_out": out.depth, "seconds": elapsed, "provenance": out.metadata.get("provenance")}


def cmd_eval(args) -> dict:
    from axialinterp.evalkit import interstack_report
    from axialinterp.volio import load_stack

    pred = load_stack(_require(args.input))
    gt = load_stack(_require(args.gt))
    rep = interstack_report(pred, gt, args.stride, dataset=args.gt, model=str(pred.metadata.get("provenance", {}).get("model_hash", "")))
    return {"command": "eval", "provenance": pred.metadata.get("provenance"), **rep.as_dict()}


def cmd_bench(args) -> dict:
    from axialinterp.checkpoint import load_checkpoint
    from axialinterp.evalkit import bicubic_z, interstack_report, render_table
    from axialinterp.volio import load_stack
    from axialinterp.zaugment import augment_volume

    gt = load_stack(_require(args.input))
    factor = 2**args.passes
    if (gt.depth - 1) % factor:
        raise CliError(f"ground truth depth {gt.depth} is not {factor}*(n-1)+1")
    low = type(gt)(gt.voxels[::factor].copy(), gt.bit_depth, gt.spacing, dict(gt.metadata))
    model = load_checkpoint(_require(args.model))
    rows = []
    t0 = time.perf_counter()
    cub = bicubic_z(low, factor)
    t_cub = time.perf_counter() - t0
    rep_c = interstack_report(cub, gt, factor - 1)
    rows.append({"method": "Bicubic", "params": None, "train_s": None, "predict_s": t_cub, "rmse": rep_c.rmse, "psnr_db": rep_c.psnr_db, "ssim": rep_c.ssim})
    t0 = time.perf_counter()
    pred = augment_volume(model, low, passes=args.passes)
    t_pred = time.perf_counter() - t0
    rep_m = interstack_report(pred, gt, factor - 1)
    train_s = model.checkpoint_manifest.get("train_seconds")
    rows.append({"method": f"Model ({model.mode})", "params": model.student_parameter_count(), "train_s": train_s, "predict_s": t_pred, "rmse": rep_m.rmse, "psnr_db": rep_m.psnr_db, "ssim": rep_m.ssim})
    table = render_table(rows)
    print(table, file=sys.stderr)
    return {"command": "bench", "rows": rows, "table": table, "model_hash": model.model_hash, "config_hash": model.checkpoint_manifest.get("config_hash"), "conventions": rep_m.conventions}


def cmd_roughness(args) -> dict:
    from axialinterp.shapelab import SH_CONVENTION, roughness_table

    mask = _load_labels(args.input)
    return {"command": "roughness", "sh_convention": SH_CONVENTION, "rows": roughness_table(mask, tuple(args.spacing))}


def cmd_match(args) -> dict:
    from dataclasses import asdict

    from axialinterp.shapelab import match_labels

    rows = match_labels(_load_labels(args.input), _load_labels(args.gt))
    return {"command": "match", "rows": [asdict(r) for r in rows]}


def cmd_iou(args) -> dict:
    from axialinterp.shapelab import smoothed_iou

    value, empty = smoothed_iou(_load_labels(args.input), _load_labels(args.gt), args.radius, args.sigma, args.threshold)
    return {"command": "iou", "iou": value, "both_empty": empty, "radius": args.radius, "sigma": args.sigma, "threshold": args.threshold}


def cmd_dryrun(args) -> dict:
    import tifffile

    from axialinterp.triplets import read_dataset_manifest, triplet_count

    rows = []
    for entry in read_dataset_manifest(_require(args.input)):
        with tifffile.TiffFile(_require(str(entry["path"]))) as tif:
            depth = len(tif.pages)
        rows.append({"path": str(entry["path"]), "mode": entry["mode"], "depth": depth, "triplets": triplet_count(depth, entry["mode"], entry["window"])})
    return {"command": "triplets-dryrun", "stacks": rows, "total": sum(r["triplets"] for r in rows)}


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "roughness": cmd_roughness,
    "match": cmd_match,
    "iou": cmd_iou,
    "triplets-dryrun": cmd_dryrun,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        doc = COMMANDS[args.command](args)
    except (CliError, FileNotFoundError, ValueError, TrainingDiverged) as exc:
        parser.print_usage(sys.stderr)
        msg = " ".join(str(exc).split())
        print(f"error: {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    _emit(doc, getattr(args, "report", None))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
