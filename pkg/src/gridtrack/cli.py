"""Command-line driver.

Subcommands:
  reconstruct   fit a deformation model to a cloud sequence, write meshes,
                loss curves, metrics, checkpoint, and the resolved config
  evaluate      compare predicted frames against ground truth
  synth         generate a synthetic ground-truth bundle
  keyframe      print per-frame keyframe scores and the selected index

Exit codes: 0 success, 2 I/O errors, 3 configuration/parse errors,
4 numeric failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config as config_mod, evalsynth, meshio, report, trainer
from .geometry import GeometryError, normalize_sequence
from .meshio import FileFormatError

EXIT_OK = 0
EXIT_IO = 2
EXIT_PARSE = 3
EXIT_NUMERIC = 4


def _add_shared_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--fast", action="store_true", help="250-epoch preset")
    p.add_argument("--full", action="store_true", help="1000-epoch preset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--no-precond", action="store_true",
                   help="disable gradient smoothing on the grids")
    p.add_argument("--no-normal-latent", action="store_true",
                   help="feed zeros instead of the normal-direction features")
    p.add_argument("--no-iso", action="store_true", help="drop the edge-length term")
    p.add_argument("--levels", type=int, help="number of position grid levels")
    p.add_argument("--time-enc", choices=("fourier", "polynomial", "gaussian", "learned"))
    p.add_argument("--rotation", choices=("quaternion", "cayley", "exponential"))
    p.add_argument("--delta", choices=("default", "constant", "linear",
                                       "exponential", "interpolated"))
    p.add_argument("--omega", choices=("default", "constant", "delta", "single"))


def _resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    updates = {}
    if args.fast and args.full:
        raise config_mod.ConfigError("--fast and --full are mutually exclusive")
    if args.fast:
        updates["epochs"] = trainer.DEFAULT_EPOCHS_FAST
    if args.full:
        updates["epochs"] = trainer.DEFAULT_EPOCHS_FULL
    for flag, key in [("epochs", "epochs"), ("seed", "seed"), ("threads", "threads"),
                      ("precision", "precision"), ("levels", "levels"),
                      ("time_enc", "time_encoding"), ("rotation", "rotation"),
                      ("delta", "delta_variant"), ("omega", "omega_variant")]:
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    if args.no_precond:
        updates["use_preconditioning"] = False
    if args.no_normal_latent:
        updates["use_normal_latent"] = False
    if args.no_iso:
        updates["use_isometry"] = False
    for key in ("clouds", "reference", "out", "synth"):
        value = getattr(args, key, None)
        if value is not None:
            updates[{"clouds": "clouds_dir", "reference": "reference_mesh",
                     "out": "output_dir", "synth": "synth_kind"}[key]] = value
    if getattr(args, "frames", None) is not None:
        updates["synth_frames"] = args.frames
    if getattr(args, "points", None) is not None:
        updates["synth_points"] = args.points
    return dataclasses.replace(cfg, **updates)


def cmd_reconstruct(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(cfg.output_dir)
    gt_sequence = None
    if cfg.synth_kind:
        gt_sequence = evalsynth.gen_sequence(cfg.synth_kind, cfg.synth_frames,
                                             cfg.synth_points, seed=cfg.seed,
                                             subdivisions=cfg.synth_subdivisions)
        clouds = gt_sequence.clouds
        reference = gt_sequence.gt_meshes[0]
    else:
        if not cfg.clouds_dir:
            raise config_mod.ConfigError("clouds_dir (or synth_kind) is required")
        if not cfg.reference_mesh:
            raise config_mod.ConfigError("reference_mesh is required for file input")
        clouds = meshio.load_cloud_sequence(cfg.clouds_dir)
        reference = meshio.read_mesh(cfg.reference_mesh)

    if cfg.synth_kind and gt_sequence is not None:
        # the synthetic reference is the ground-truth keyframe surface
        t_key_guess = cfg.keyframe_override or (len(clouds) // 2)
        reference = gt_sequence.gt_meshes[max(0, t_key_guess - 1)]

    result = trainer.run(clouds, reference, cfg.train_config(), progress=True)

    out_dir.mkdir(parents=True, exist_ok=True)
    for i, mesh in enumerate(result.meshes, start=1):
        meshio.write_mesh(out_dir / f"frame_{i:04d}.obj", mesh)
    report.write_loss_csv(result.history, out_dir / "loss.csv")
    report.plot_loss_curves(result.history, out_dir / "loss.png")
    config_mod.save(cfg, out_dir / "config_resolved.cfg")
    checkpoint.save_checkpoint(result.state, out_dir / "checkpoint.bin",
                               config_text=config_mod.emit(cfg))

    summary = {
        "frames": len(clouds),
        "vertices": result.state.vertex_count,
        "keyframe": result.state.t_key,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "precision": cfg.precision,
        "wall_seconds": f"{result.wall_seconds:.3f}",
        "normalization_center": result.state.transform.center.tolist(),
        "normalization_scale": result.state.transform.scale,
        "chamfer_form": ("truncated" if np.isfinite(cfg.chamfer_truncation)
                         else "plain squared"),
    }
    if result.history:
        summary["final_total_loss"] = repr(result.history[-1].total)
        summary["final_mean_cd"] = repr(float(result.history[-1].cd_per_frame.mean()))

    if cfg.compute_metrics:
        reports = []
        rng = np.random.default_rng(cfg.seed)
        for f, mesh in enumerate(result.meshes):
            pred_pts = result.frames_normalized[f]
            if cfg.metric_surface_samples > 0:
                normalized_mesh = mesh.with_vertices(
                    result.state.transform.apply(mesh.vertices))
                pred_pts, _ = evalsynth.sample_surface(
                    normalized_mesh, cfg.metric_surface_samples, rng)
            cloud_pts = result.state.clouds[f].astype(np.float64)
            reports.append(evalsynth.MetricReport(
                cd=evalsynth.metric_cd(pred_pts, cloud_pts), nc=None,
                fscore=evalsynth.metric_fscore(pred_pts, cloud_pts,
                                               cfg.fscore_threshold_pct),
                corr=None))
        if gt_sequence is not None:
            corr = evalsynth.metric_corr(result.frames_normalized,
                                         gt_sequence.gt_trajectories,
                                         result.state.t_key)
            summary["correspondence_error"] = repr(corr)
        report.write_metrics_csv(reports, out_dir / "metrics.csv")
        report.plot_metrics(reports, out_dir / "metrics.png")
        mean = report.aggregate_metrics(reports)
        summary["metric_cd_vs_clouds"] = repr(mean.cd)
        summary["metric_fscore_vs_clouds"] = repr(mean.fscore)
        summary["fscore_threshold_referent"] = "percent of cloud bbox diagonal"

    report.write_run_report(out_dir / "report.txt", summary)
    print(f"wrote {len(result.meshes)} frames to {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred_meshes = meshio.load_mesh_sequence(args.pred_dir)
    gt_meshes = meshio.load_mesh_sequence(args.gt_dir)
    if len(pred_meshes) != len(gt_meshes):
        print(f"error: frame-count mismatch: {len(pred_meshes)} predicted vs "
              f"{len(gt_meshes)} ground-truth frames", file=sys.stderr)
        return EXIT_PARSE
    reports = []
    rng = np.random.default_rng(args.seed)
    for pred, gt in zip(pred_meshes, gt_meshes):
        if args.surface_samples > 0:
            pred_pts, _ = evalsynth.sample_surface(pred, args.surface_samples, rng)
            gt_pts, _ = evalsynth.sample_surface(gt, args.surface_samples, rng)
        else:
            pred_pts, gt_pts = pred.vertices, gt.vertices
        reports.append(evalsynth.MetricReport(
            cd=evalsynth.metric_cd(pred_pts, gt_pts),
            nc=evalsynth.metric_nc(pred, gt),
            fscore=evalsynth.metric_fscore(pred_pts, gt_pts, args.threshold),
            corr=None))
    traj_path = Path(args.gt_dir) / "traj.bin"
    corr = None
    if traj_path.exists():
        gt_traj = meshio.read_trajectories(traj_path)
        pred_traj = np.stack([m.vertices for m in pred_meshes])
        corr = evalsynth.metric_corr(pred_traj, gt_traj, t_key=args.corr_keyframe)
        reports = [dataclasses.replace(r, corr=corr) for r in reports]

    mean = report.aggregate_metrics(reports)
    print("frame       cd    cd[x1e-5]      nc   fscore")
    for i, r in enumerate(reports, start=1):
        print(f"{i:5d} {r.cd:12.6e} {r.cd_x1e5:8.4f} {r.nc:7.4f} {r.fscore:8.4f}")
    print(f" mean {mean.cd:12.6e} {mean.cd_x1e5:8.4f} {mean.nc:7.4f} {mean.fscore:8.4f}")
    if corr is not None:
        print(f"correspondence error: {corr:.6e}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_metrics_csv(reports, out_dir / "metrics.csv")
        report.plot_metrics(reports, out_dir / "metrics.png")
        report.write_run_report(out_dir / "report.txt", {
            "frames": len(reports), "mean_cd": repr(mean.cd),
            "mean_cd_x1e5": repr(mean.cd_x1e5), "mean_nc": repr(mean.nc),
            "mean_fscore": repr(mean.fscore),
            "correspondence_error": "" if corr is None else repr(corr),
            "fscore_threshold_pct": args.threshold,
            "fscore_threshold_referent": "percent of gt bbox diagonal",
            "nc_convention": "symmetric mean absolute cosine",
        })
    return EXIT_OK


def cmd_synth(args) -> int:
    seq = evalsynth.gen_sequence(args.kind, args.frames, args.points, seed=args.seed,
                                 subdivisions=args.subdivisions)
    evalsynth.write_sequence(seq, args.out)
    print(f"wrote {seq.frame_count} clouds + meshes + trajectories to {args.out}")
    return EXIT_OK


def cmd_keyframe(args) -> int:
    clouds = meshio.load_cloud_sequence(args.clouds_dir)
    normalized, _ = normalize_sequence(clouds)
    t_key, scores = trainer.select_keyframe(normalized, args.occupancy_resolution,
                                            args.alpha)
    for i, score in enumerate(scores, start=1):
        marker = "  <- keyframe" if i == t_key else ""
        print(f"frame {i:4d}  score {score:.6f}{marker}")
    print(f"selected keyframe: {t_key}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridtrack", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="optimize deformations for a sequence")
    p.add_argument("--clouds", help="directory of per-frame PLY clouds")
    p.add_argument("--reference", help="keyframe mesh (OBJ or PLY)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--synth", choices=evalsynth.MOTION_KINDS,
                   help="generate this synthetic sequence instead of reading files")
    p.add_argument("--frames", type=int, help="synthetic frame count")
    p.add_argument("--points", type=int, help="synthetic points per frame")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="metrics for predicted vs ground-truth frames")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--out", help="write metrics.csv/metrics.png/report.txt here")
    p.add_argument("--threshold", type=float, default=evalsynth.FSCORE_THRESHOLD_PCT,
                   help="f-score threshold, percent of gt bbox diagonal")
    p.add_argument("--surface-samples", type=int, default=0,
                   help="sample this many surface points per mesh (0 = vertices)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corr-keyframe", type=int, default=1,
                   help="1-based keyframe for trajectory matching")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic ground-truth bundle")
    p.add_argument("kind", choices=evalsynth.MOTION_KINDS)
    p.add_argument("--frames", type=int, default=17)
    p.add_argument("--points", type=int, default=evalsynth.DEFAULT_POINTS_PER_FRAME)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subdivisions", type=int, default=evalsynth.DEFAULT_SUBDIVISIONS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("keyframe", help="score frames and print the keyframe")
    p.add_argument("clouds_dir")
    p.add_argument("--occupancy-resolution", type=int, default=128)
    p.add_argument("--alpha", type=float, default=0.001)
    p.set_defaults(func=cmd_keyframe)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, OSError) as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return EXIT_IO
    except (config_mod.ConfigError, FileFormatError, GeometryError, ValueError) as exc:
        print(f"error (parse): {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"error (numeric): {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
