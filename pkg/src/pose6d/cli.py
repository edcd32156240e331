"""Command-line entry point.

Every subcommand reads one JSON run config (``--config``) and accepts
dot-path overrides for any of its keys, e.g. ``--train.epochs 50``.
Exit status: 0 on success, 2 for an invalid command line or config,
1 when the run itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from pose6d.config import ConfigError, RunConfig, config_keys
from pose6d.eval import report
from pose6d.eval.experiments import EXPERIMENTS, Dataset, backgrounds_for, evaluate_report, run_experiment
from pose6d.geometry import Pose5D, Quaternion, RigidTransform, angular_distance, lift_to_6d
from pose6d.icp.cloud import PointCloud, estimate_covariances, segment_to_cloud
from pose6d.icp.gicp import gicp_refine
from pose6d.net.checkpoint import load_checkpoint, save_checkpoint
from pose6d.net.gradcheck import run_gradcheck
from pose6d.net.model import predict, prepare_input
from pose6d.net.train import SampleArrays, train, write_curves_csv
from pose6d.synth.compose import crop_origin
from pose6d.synth.dataset import (
    generate_dataset,
    load_dataset,
    manifest_intrinsics,
    manifest_symmetries,
    save_dataset,
)
from pose6d.synth.objects import catalog, get_objects

log = logging.getLogger("pose6d")

GRADCHECK_TOLERANCE = 1e-4
CHECKPOINT_NAME = "checkpoint.p6d"


class UsageError(Exception):
    """Bad command-line input detected after parsing."""


def _key_help() -> str:
    lines = ["config keys (set in the --config file or as --<key> VALUE):"]
    for key, default in config_keys():
        shown = ",".join(default) if isinstance(default, tuple) else json.dumps(default)
        lines.append(f"  {key} (default {shown})")
    return "\n".join(lines)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap; 1 is the reproducible mode (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    keys = p.add_argument_group("config overrides")
    for key, _ in config_keys():
        if key == "seed":  # covered by --seed
            continue
        keys.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="pose6d", description=__doc__.splitlines()[0], epilog=_key_help(),
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_key_help(), formatter_class=fmt)
        _common(p)
        return p

    p = add("synth", "render a toy dataset and its manifest")
    p.add_argument("--out", type=Path, required=True, help="dataset directory")

    p = add("train", "train a network on a dataset; writes checkpoint, curves CSV and figure")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = add("eval", "evaluate a checkpoint on a dataset; writes per-sample and occlusion-binned reports")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("lift", "lift crop-relative predictions to camera-frame 6D poses using depth")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path, help="predict uv and orientation with this network")
    src.add_argument("--ground-truth", action="store_true", help="use the dataset targets instead of predictions")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--window", type=int, default=5, help="depth median window in pixels (default 5)")
    p.add_argument("--out", type=Path, required=True, help="poses JSON file")

    p = add("refine", "refine lifted poses by GICP against the depth segment")
    p.add_argument("--poses", type=Path, required=True, help="poses JSON written by lift")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model-points", type=int, default=1500, help="points sampled on each object model")
    p.add_argument("--out", type=Path, required=True, help="refined poses JSON file")

    p = add("experiment", "run one experiment and write its report")
    p.add_argument("name", choices=sorted(EXPERIMENTS))
    p.add_argument("--out", type=Path, required=True)

    p = add("gradcheck", "finite-difference gradient suite")
    p.add_argument("--eps", type=float, default=1e-5)
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return RunConfig.load(args.config, overrides)


# subcommands

def cmd_synth(cfg: RunConfig, args) -> int:
    objects = get_objects(cfg.objects)
    tr, va, manifest = generate_dataset(objects, backgrounds_for(cfg), cfg.synth_config)
    save_dataset(args.out, tr, va, manifest)
    report.write_json(args.out / "run_config.json", cfg.to_json())
    print(f"wrote {len(tr)} train and {len(va)} val samples to {args.out}")
    return 0


def _load(path: Path) -> Dataset:
    tr, va, manifest = load_dataset(path)
    return Dataset(tr, va, manifest)


def cmd_train(cfg: RunConfig, args) -> int:
    data = _load(args.data)
    args.out.mkdir(parents=True, exist_ok=True)

    def progress(epoch: int, row: dict) -> None:
        log.info("epoch %d: loss %.5f, val trans %.2f px, val rot %.2f deg", epoch, row["train_loss"],
                 row["val_trans_px"], row["val_rot_deg"])

    params, history = train(data.train, data.val, cfg.arch.spec(data.num_classes), cfg.train, seed=cfg.seed,
                            symmetries=data.symmetries, on_epoch=progress)
    save_checkpoint(params, args.out / CHECKPOINT_NAME)
    write_curves_csv(history, args.out / "curves.csv")
    report.plot_curves(history, args.out / "curves.png")
    report.write_json(args.out / "run_config.json", cfg.to_json())
    print(f"final val: {history.val_trans_px[-1]:.3f} px, {history.val_rot_deg[-1]:.3f} deg")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    params = load_checkpoint(args.checkpoint, np.dtype(cfg.train.dtype).type)
    data = _load(args.data)
    result = evaluate_report(params, data, args.out, cfg.train.alpha, cfg.experiment.occlusion_bins)
    for split, m in result["summary"].items():
        print(f"{split}: {m['trans_px']:.3f} px, {m['rot_deg']:.3f} deg")
    return 0


def cmd_lift(cfg: RunConfig, args) -> int:
    tr, va, manifest = load_dataset(args.data)
    samples = tr if args.split == "train" else va
    entries = manifest["splits"][args.split]
    intr = manifest_intrinsics(manifest)
    crop = manifest["config"]["crop_size"]
    if args.ground_truth:
        preds = [s.target for s in samples]
    else:
        params = load_checkpoint(args.checkpoint, np.dtype(cfg.train.dtype).type)
        arrays = SampleArrays.from_samples(samples)
        raw = predict(params, prepare_input(arrays.images, params.dtype.type), arrays.class_ids).astype(float)
        preds = [Pose5D(float(p[0]), float(p[1]), Quaternion.from_array(p[2:])) for p in raw]
    out = []
    for s, e, pred in zip(samples, entries, preds):
        if s.depth_crop is None:
            raise ValueError(f"sample {e['id']} has no depth map")
        lifted = lift_to_6d(pred, s.crop_center, crop, s.depth_crop, intr, crop_origin(s.crop_center, crop),
                            args.window)
        row = {"id": e["id"], "class_id": s.class_id, "pose": lifted.to_json()}
        if s.pose is not None:
            row["truth"] = s.pose.to_json()
            row["translation_error_m"] = float(np.linalg.norm(lifted.t - s.pose.t))
        out.append(row)
    report.write_json(args.out, {"split": args.split, "source": "ground_truth" if args.ground_truth else "network",
                                 "poses": out})
    errs = [r["translation_error_m"] for r in out if "translation_error_m" in r]
    if errs:
        print(f"lifted {len(out)} poses; mean translation error {np.mean(errs) * 1000:.2f} mm")
    return 0


def cmd_refine(cfg: RunConfig, args) -> int:
    poses = json.loads(args.poses.read_text())
    tr, va, manifest = load_dataset(args.data)
    split = poses.get("split", "val")
    by_id = {e["id"]: s for e, s in zip(manifest["splits"][split], tr if split == "train" else va)}
    intr = manifest_intrinsics(manifest)
    crop = manifest["config"]["crop_size"]
    objects = catalog()
    rng = np.random.default_rng(cfg.seed)
    models: dict[int, PointCloud] = {}
    gicp = cfg.gicp
    out = []
    for row in poses["poses"]:
        s = by_id.get(row["id"])
        if s is None:
            raise ValueError(f"pose for unknown sample id {row['id']}")
        cls = manifest["classes"][s.class_id]
        if s.class_id not in models:
            if cls["name"] not in objects:
                raise ValueError(f"no model for object {cls['name']!r}")
            pts = objects[cls["name"]].sample_surface(args.model_points, rng)
            models[s.class_id] = estimate_covariances(PointCloud(pts), gicp.k_neighbors, gicp.plane_epsilon)
        model = models[s.class_id]
        scene = estimate_covariances(segment_to_cloud(s.depth_crop > 0, s.depth_crop, intr,
                                                      crop_origin(s.crop_center, crop)),
                                     gicp.k_neighbors, gicp.plane_epsilon)
        initial = RigidTransform.from_json(row["pose"])
        config = gicp
        if config.max_correspondence_distance is None:
            extent = float(np.linalg.norm(np.ptp(model.points, axis=0)))
            config = replace(config, max_correspondence_distance=0.25 * extent)
        # the visible scene surface is matched into the full model, then inverted
        res = gicp_refine(scene, model, initial.inverse(), config)
        refined = res.transform.inverse()
        item = {"id": row["id"], "class_id": s.class_id, "initial": row["pose"], "pose": refined.to_json(),
                "iterations": res.iterations, "cost": res.cost}
        if s.pose is not None:
            item["translation_error_m"] = float(np.linalg.norm(refined.t - s.pose.t))
            item["rotation_error_deg"] = angular_distance(refined.rotation, s.pose.rotation)
        out.append(item)
    report.write_json(args.out, {"split": split, "poses": out})
    errs = [r["translation_error_m"] for r in out if "translation_error_m" in r]
    if errs:
        print(f"refined {len(out)} poses; mean translation error {np.mean(errs) * 1000:.2f} mm")
    return 0


def cmd_experiment(cfg: RunConfig, args) -> int:
    result = run_experiment(args.name, cfg, args.out)
    print(json.dumps(report.jsonable(result.get("results", result.get("epochs_to_threshold"))), sort_keys=True))
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = run_gradcheck(args.eps, cfg.seed)
    for name, err in results.items():
        print(f"{name:28s} {err:.3e}")
    worst = max(results.values())
    ok = math.isfinite(worst) and worst <= GRADCHECK_TOLERANCE
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAIL'}, tolerance {GRADCHECK_TOLERANCE:g})")
    if not ok:
        print(f"pose6d: gradient check failed: {worst:.3e} > {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
    return 0 if ok else 1


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "lift": cmd_lift,
    "refine": cmd_refine,
    "experiment": cmd_experiment,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the diagnostic
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = load_config(args)
    except (ConfigError, UsageError) as exc:
        print(f"pose6d: invalid config: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"pose6d: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(args.threads):
            return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # report any failure as one line and a nonzero status
        log.debug("failure", exc_info=True)
        print(f"pose6d: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
