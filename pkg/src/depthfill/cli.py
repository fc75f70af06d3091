"""Command-line entry point for reproducible file-based experiments.

Subcommands: synth (generate a synthetic dataset), densify (classical
interpolation baselines), eval (metric reports from prediction PNGs),
train (one variant end to end), infer (refined PNGs from a checkpoint),
gradcheck (finite-difference suite), variants (all four pipelines plus a
comparison CSV). Every command requires explicit seeds where randomness
is involved, validates inputs before writing, and drops a JSON metadata
sidecar (config hash and tool version) next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import statistics
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .gradcheck import run_gradcheck
from .interp import InterpMethod, densify
from .maps import DepthMap
from .metrics import MetricAccumulator, MetricReport, write_metric_csv
from .model import CompletionModel, Variant
from .png_io import list_frames, read_depth_png, write_depth_png, write_frame
from .synth import SceneConfig, sparsify, synth_scene
from .train import ExperimentConfig, run_variant, run_variant_matrix


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthfill", description=__doc__)
    p.add_argument("--version", action="version", version=f"depthfill {__version__}")
    sub = p.add_subparsers(required=True)

    s = sub.add_parser("synth", help="generate a synthetic train/val dataset")
    s.add_argument("--config", required=True, help="SceneConfig JSON file")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True, help="total number of frames")
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("densify", help="interpolate sparse depth PNGs to dense ones")
    s.add_argument("--method", required=True, choices=[m.value for m in InterpMethod])
    s.add_argument("--in", dest="indir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_densify)

    s = sub.add_parser("eval", help="score prediction PNGs against groundtruth PNGs")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True, help="report CSV path")
    s.add_argument("--label", default="eval", help="value for the method column")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("train", help="train one pipeline variant")
    s.add_argument("--config", required=True, help="experiment JSON file")
    s.add_argument("--out", required=True, help="checkpoint output path")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("infer", help="run a checkpoint over a directory of frames")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="indir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_infer)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--step", type=float, default=1e-5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("variants", help="train all four variants and compare")
    s.add_argument("--config", required=True, help="experiment JSON file")
    s.add_argument("--out", required=True, help="comparison CSV path")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=_cmd_variants)
    return p


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _write_sidecar(anchor: Path, command: str, payload: dict) -> None:
    sidecar = anchor / "metadata.json" if anchor.is_dir() else anchor.with_name(anchor.name + ".meta.json")
    sidecar.write_text(
        json.dumps(
            {
                "tool": "depthfill",
                "version": __version__,
                "command": command,
                "config_sha256": _config_hash(payload),
            },
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )


def _cmd_synth(args) -> int:
    cfg = SceneConfig.from_dict(json.loads(Path(args.config).read_text()))
    if args.n < 2:
        raise ValueError("need at least 2 frames (one per split)")
    out = Path(args.out)
    n_val = max(1, round(args.n * cfg.val_fraction))
    n_train = args.n - n_val
    if n_train < 1:
        raise ValueError(f"val_fraction {cfg.val_fraction} leaves no training frames")
    for i in range(args.n):
        split = "train" if i < n_train else "val"
        scene = synth_scene(cfg, seed=args.seed * 100_000 + i)
        sparse = sparsify(scene.depth, cfg.sparse_density, seed=args.seed * 100_000 + i, pattern="uniform")
        gt = scene.depth
        if cfg.gt_density < 1.0:
            gt = sparsify(scene.depth, cfg.gt_density, seed=args.seed * 100_000 + i + 50_000)
        write_frame(out, split, "scene0", f"{i:05d}", scene.rgb, sparse, gt)
    _write_sidecar(out, "synth", {"config": json.loads(Path(args.config).read_text()), "n": args.n, "seed": args.seed})
    print(f"wrote {n_train} train + {n_val} val frames to {out}")
    return 0


def _depth_png_inputs(indir: Path) -> list[tuple[str, Path]]:
    """(output-name, path) pairs from a flat PNG dir or a dataset layout."""
    flat = sorted(indir.glob("*.png"))
    if flat:
        return [(p.name, p) for p in flat]
    nested = sorted(indir.glob("*/sparse/*.png"))
    if nested:
        return [(f"{p.parent.parent.name}__{p.name}", p) for p in nested]
    raise FileNotFoundError(f"no depth PNGs under {indir} (flat or <scene>/sparse layout)")


def _cmd_densify(args) -> int:
    method = InterpMethod(args.method)
    indir = Path(args.indir)
    inputs = _depth_png_inputs(indir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, path in inputs:
        write_depth_png(densify(read_depth_png(path), method), out / name)
    _write_sidecar(out, "densify", {"method": args.method, "in": str(indir), "n_frames": len(inputs)})
    print(f"densified {len(inputs)} frames with {method.value} into {out}")
    return 0


def _cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    preds = {p.relative_to(pred_dir): p for p in sorted(pred_dir.rglob("*.png"))}
    if not preds:
        raise FileNotFoundError(f"no prediction PNGs under {pred_dir}")
    acc = MetricAccumulator()
    for rel, path in preds.items():
        gt_path = gt_dir / rel
        if not gt_path.is_file():
            raise FileNotFoundError(f"missing groundtruth for {rel}")
        acc.add(read_depth_png(path), read_depth_png(gt_path), name=str(rel))
    report = acc.report()
    write_metric_csv(args.out, [(args.label, report)])
    _write_sidecar(Path(args.out), "eval", {"pred": str(pred_dir), "gt": str(gt_dir), "label": args.label})
    print(_format_report(args.label, report))
    return 0


def _cmd_train(args) -> int:
    cfg = ExperimentConfig.from_json_file(args.config)
    result = run_variant(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.model.save(out)
    log_path = out.with_name(out.name + ".log.jsonl")
    with open(log_path, "w") as f:
        for record in result.log:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    write_metric_csv(out.with_name(out.name + ".metrics.csv"), [(cfg.variant.value, result.report)], key_column="variant")
    _write_sidecar(out, "train", cfg.to_dict())
    print(f"best epoch {result.best_epoch}: {_format_report(cfg.variant.value, result.report)}")
    return 0


def _cmd_infer(args) -> int:
    model = CompletionModel.load(args.ckpt)
    frames = list_frames(args.indir, require_groundtruth=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for frame in frames:
        rgb, sparse, _ = frame.load()
        write_depth_png(model.infer(rgb, sparse), out / f"{Path(frame.name).name}.png")
    _write_sidecar(out, "infer", {"ckpt": str(args.ckpt), "in": str(args.indir), "n_frames": len(frames)})
    print(f"wrote {len(frames)} refined depth maps to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck(
        instances=args.instances, step=args.step, tolerance=args.tolerance, seed=args.seed
    )
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name}: max_rel_err={r.max_rel_err:.3e} (tol {r.tolerance:g}, {r.instances} instances)")
    if failed:
        print(f"{failed}/{len(results)} checks failed", file=sys.stderr)
        return 2
    return 0


def _cmd_variants(args) -> int:
    cfg = ExperimentConfig.from_json_file(args.config)
    seeds = list(cfg.seeds)
    reports = run_variant_matrix(cfg, list(Variant), seeds, jobs=args.jobs)
    per_seed_rows = [(f"{v}:{s}", reports[(v, s)]) for (v, s) in sorted(reports)]
    median_rows = []
    for variant in Variant:
        seed_reports = [reports[(variant.value, s)] for s in seeds]
        median_rows.append((variant.value, _median_report(seed_reports)))
        print(_format_report(variant.value, median_rows[-1][1]))
    write_metric_csv(args.out, median_rows, key_column="variant")
    write_metric_csv(Path(args.out).with_suffix(".per_seed.csv"), per_seed_rows, key_column="variant")
    _write_sidecar(Path(args.out), "variants", cfg.to_dict())
    return 0


def _median_report(reports: list[MetricReport]) -> MetricReport:
    med = lambda key: float(np.median([getattr(r, key) for r in reports]))  # noqa: E731
    return MetricReport(
        rmse_mm=med("rmse_mm"),
        mae_mm=med("mae_mm"),
        irmse_per_km=med("irmse_per_km"),
        imae_per_km=med("imae_per_km"),
        n_valid_pixels=reports[0].n_valid_pixels,
    )


def _format_report(label: str, r: MetricReport) -> str:
    def fmt(v):
        return "inf" if math.isinf(v) else f"{v:.2f}"

    return (
        f"{label}: rmse={fmt(r.rmse_mm)}mm mae={fmt(r.mae_mm)}mm "
        f"irmse={fmt(r.irmse_per_km)} imae={fmt(r.imae_per_km)} (1/km), {r.n_valid_pixels} px"
    )


if __name__ == "__main__":
    sys.exit(main())
