"""Command-line interface: dataset synthesis, training, rendering, eval.

Subcommands
-----------
synth      write a synthetic motion-blurred dataset to disk
train      fit an avatar to a dataset; writes checkpoints and a loss log
render     render sharp images from a checkpoint at dataset or file poses
eval       score sharp renders against a dataset's held-out sharp frames
gradcheck  compare analytic gradients against finite differences
sweep      train across several virtual-pose counts and tabulate metrics

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command is
deterministic given --seed. `BLURSPLAT_THREADS` sets the default worker
cap applied when --threads is not passed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

BLUR_SIZES = {"small": 17, "medium": 33, "large": 49}
THREADS_ENV = "BLURSPLAT_THREADS"


class CliError(Exception):
    """Raised for clean runtime failures (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    """argparse reserves exit code 2 for usage errors; we use 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _set_threads(n: int | None) -> None:
    if n is None:
        raw = os.environ.get(THREADS_ENV, "").strip()
        n = int(raw) if raw else None
    if n is None:
        return
    if n < 1:
        raise CliError("--threads must be a positive integer")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except Exception:
        pass


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    from .synthdata import blur_oracle, make_motion, make_scene, write_dataset

    m = args.m if args.m is not None else BLUR_SIZES[args.blur_size]
    scene_seed, motion_seed, noise_seed = (
        int(s) for s in np.random.SeedSequence(args.seed).generate_state(3))
    scene = make_scene(scene_seed, n_gaussians=args.gaussians,
                       image_size=args.size, focal=args.focal,
                       distance=args.distance)
    script = make_motion(scene.chain, motion_seed, frames=args.frames, m=m,
                         amplitude=args.amplitude, max_step=args.max_step)
    dataset = blur_oracle(scene, script, scene.train_camera,
                          pose_noise=args.pose_noise, noise_seed=noise_seed)
    dataset.seed = args.seed
    dataset.extras = {
        "scene_seed": scene_seed,
        "motion_seed": motion_seed,
        "noise_seed": noise_seed,
        "n_gaussians": args.gaussians,
        "image_size": args.size,
        "focal": args.focal,
        "distance": args.distance,
        "frames": args.frames,
        "amplitude": args.amplitude,
        "max_step": args.max_step,
        "pose_noise": args.pose_noise,
        "center_poses": [script.center_pose(f).to_dict()
                         for f in range(script.n_frames)],
    }
    write_dataset(dataset, args.out)
    print(f"wrote {script.n_frames} frames (m={m}, seed={args.seed}) "
          f"to {args.out}")
    return 0


# ---------------------------------------------------------------- train


def _load_config(args):
    """TrainConfig from --config JSON (if any) plus CLI overrides."""
    from .train import TrainConfig

    if args.config:
        cfg = TrainConfig.from_json(args.config)
    else:
        cfg = TrainConfig()
    if args.iters is not None:
        # keep the stage schedule (and density-control window) at the same
        # relative positions unless overridden explicitly
        f = args.iters / cfg.total_iters
        cfg.traj_start = max(1, round(cfg.traj_start * f))
        cfg.fusion_start = max(cfg.traj_start + 1, round(cfg.fusion_start * f))
        cfg.densify_from = max(1, round(cfg.densify_from * f))
        cfg.densify_until = max(1, round(cfg.densify_until * f))
        cfg.densify_interval = max(1, round(cfg.densify_interval * f))
        cfg.total_iters = args.iters
    overrides = {
        "traj_start": args.traj_start,
        "fusion_start": args.fusion_start,
        "n_virtual": args.n,
        "seed": args.seed,
        "lr_trajectory": args.lr_trajectory,
        "n_init_gaussians": args.gaussians,
        "densify_until": args.densify_until,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.no_motion_model:
        cfg.motion_enabled = False
    if args.no_fusion:
        cfg.fusion_enabled = False
    cfg.validate()
    return cfg


def _snapshot(out_dir: str, args, cfg) -> None:
    os.makedirs(out_dir, exist_ok=True)
    cfg.to_json(os.path.join(out_dir, "config.json"))
    snap = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    with open(os.path.join(out_dir, "invocation.json"), "w") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True)


def _progress_printer(quiet: bool):
    if quiet:
        return None

    def emit(row):
        print(f"iter {row['iteration']:6d} [{row['stage']:6s}] "
              f"total {row['total']:.5f} rgb {row['rgb']:.5f} "
              f"n={row['n_gaussians']}", flush=True)

    return emit


def cmd_train(args) -> int:
    from .synthdata import read_dataset
    from .train import Trainer

    dataset = read_dataset(args.data)
    cfg = _load_config(args)
    out_dir = args.out or os.path.join(
        "runs", f"train-{os.path.basename(os.path.normpath(args.data))}"
                f"-seed{cfg.seed}")
    _snapshot(out_dir, args, cfg)
    trainer = Trainer(dataset, cfg, out_dir=out_dir)
    start = time.perf_counter()
    trainer.train(progress=_progress_printer(args.quiet))
    elapsed = time.perf_counter() - start
    print(f"trained {cfg.total_iters} iterations in {elapsed:.1f}s; "
          f"checkpoint at {os.path.join(out_dir, 'ckpt_final')}")
    return 0


# ---------------------------------------------------------------- render


def _resolve_checkpoint(path: str) -> str:
    """Accept either a checkpoint directory or a run directory."""
    if os.path.isfile(os.path.join(path, "meta.json")):
        return path
    nested = os.path.join(path, "ckpt_final")
    if os.path.isfile(os.path.join(nested, "meta.json")):
        return nested
    return path  # load_checkpoint reports the clean error


def _pick_camera(dataset, name: str):
    if name == "train":
        return dataset.camera
    if name.startswith("eval"):
        idx = int(name[4:] or 0)
        if 0 <= idx < len(dataset.eval_cameras):
            return dataset.eval_cameras[idx]
        raise CliError(f"dataset has {len(dataset.eval_cameras)} eval "
                       f"camera(s); {name!r} is out of range")
    raise CliError(f"unknown camera {name!r} (use train, eval0, eval1, ...)")


def _load_pose_file(path: str, chain):
    from .articulation import Pose

    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"pose file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"corrupt pose file {path}: {exc}")
    if isinstance(data, dict):
        data = data.get("poses", data)
    if not isinstance(data, list) or not data:
        raise CliError("pose file must be a JSON list of poses or "
                       "{'poses': [...]}")
    poses = [Pose.from_dict(d) for d in data]
    for pose in poses:
        if pose.joint_rotations.shape[0] != chain.n_joints:
            raise CliError(f"pose has {pose.joint_rotations.shape[0]} joints; "
                           f"model expects {chain.n_joints}")
    return poses


def _parse_frames(spec: str, n: int):
    if spec == "all":
        return list(range(n))
    try:
        idxs = [int(tok) for tok in spec.split(",") if tok.strip()]
    except ValueError:
        raise CliError(f"--frames expects 'all' or comma-separated indices, "
                       f"got {spec!r}")
    for i in idxs:
        if not 0 <= i < n:
            raise CliError(f"frame index {i} out of range (0..{n - 1})")
    return idxs


def _write_png_preview(path: str, image: np.ndarray) -> None:
    from PIL import Image

    arr = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def cmd_render(args) -> int:
    from .checkpoint import load_checkpoint
    from .imgio import write_pfm
    from .model import render_avatar
    from .render import RasterSettings
    from .synthdata import read_dataset

    model, _, _, _ = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    dataset = read_dataset(args.data)
    camera = _pick_camera(dataset, args.camera)
    if args.poses:
        poses = _load_pose_file(args.poses, model.chain)
    else:
        poses = dataset.input_poses
    idxs = _parse_frames(args.frames, len(poses))

    os.makedirs(args.out, exist_ok=True)
    settings = RasterSettings()
    background = np.asarray(dataset.background, dtype=np.float64)
    for i in idxs:
        image, _ = render_avatar(model, poses[i], camera, background, settings)
        rgb = image[..., :3]
        write_pfm(os.path.join(args.out, f"sharp_{i:04d}.pfm"), rgb)
        _write_png_preview(os.path.join(args.out, f"sharp_{i:04d}.png"), rgb)
    print(f"rendered {len(idxs)} frame(s) to {args.out}")
    return 0


# ---------------------------------------------------------------- eval

EVAL_CSV_COLUMNS = ("frame", "psnr", "ssim")


def _write_metrics_csv(fh, result) -> None:
    """Columns: frame (index or 'mean'), psnr (dB), ssim ([-1, 1])."""
    writer = csv.writer(fh)
    writer.writerow(EVAL_CSV_COLUMNS)
    for row in result["frames"]:
        writer.writerow([row["frame"], f"{row['psnr']:.6f}",
                         f"{row['ssim']:.8f}"])
    writer.writerow(["mean", f"{result['mean_psnr']:.6f}",
                     f"{result['mean_ssim']:.8f}"])


def _oracle_eval(dataset):
    """Score the ground-truth generator against its own sharp frames."""
    from .articulation import Pose
    from .metrics import psnr, ssim
    from .render import RasterSettings
    from .synthdata import make_scene, render_ground_truth

    extras = dataset.extras
    needed = ("scene_seed", "n_gaussians", "image_size", "focal", "distance",
              "center_poses")
    missing = [k for k in needed if k not in extras]
    if missing:
        raise CliError("dataset lacks generator metadata for --oracle "
                       f"(missing {', '.join(missing)}); re-synthesize with "
                       "this tool")
    scene = make_scene(extras["scene_seed"],
                       n_gaussians=extras["n_gaussians"],
                       image_size=extras["image_size"],
                       focal=extras["focal"], distance=extras["distance"])
    settings = RasterSettings()
    rows = []
    for f, pose_dict in enumerate(extras["center_poses"]):
        pose = Pose.from_dict(pose_dict)
        image = render_ground_truth(scene, pose, dataset.camera, settings)
        pred = image[..., :3]
        gt = np.asarray(dataset.sharp[f], dtype=np.float64)
        rows.append({"frame": f, "psnr": psnr(pred, gt), "ssim": ssim(pred, gt)})
    return {
        "frames": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
    }


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .synthdata import read_dataset
    from .train import evaluate

    dataset = read_dataset(args.data)
    if args.oracle:
        result = _oracle_eval(dataset)
    else:
        if not args.checkpoint:
            raise CliError("--checkpoint is required unless --oracle is set")
        model, _, _, _ = load_checkpoint(_resolve_checkpoint(args.checkpoint))
        result = evaluate(model, dataset)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            _write_metrics_csv(fh, result)
    else:
        _write_metrics_csv(sys.stdout, result)
    print(f"mean_psnr={result['mean_psnr']:.4f} "
          f"mean_ssim={result['mean_ssim']:.6f} "
          f"frames={len(result['frames'])}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck, run_net_gradcheck

    jobs = []
    if args.module in ("all", "render"):
        jobs.append(("render", run_gradcheck, 1e-5))
    if args.module in ("all", "tinynet"):
        jobs.append(("tinynet", run_net_gradcheck, 1e-5))
    all_passed = True
    for name, runner, default_h in jobs:
        h = args.h if args.h is not None else default_h
        passed, results = runner(n_scenes=args.seeds, seed0=args.seed0, h=h,
                                 tolerance=args.tolerance, verbose=True)
        worst = max(r[2] for r in results)
        status = "PASS" if passed else "FAIL"
        print(f"{name}: max rel err {worst:.3e} over {len(results)} seeds "
              f"(tolerance {args.tolerance:g}) {status}")
        all_passed = all_passed and passed
    return 0 if all_passed else 2


# ---------------------------------------------------------------- sweep

SWEEP_CSV_COLUMNS = ("n", "mean_psnr", "mean_ssim", "final_total",
                     "n_gaussians", "seconds")


def cmd_sweep(args) -> int:
    from .synthdata import read_dataset
    from .train import Trainer, evaluate

    try:
        n_values = [int(tok) for tok in args.n_values.split(",") if tok.strip()]
    except ValueError:
        raise CliError(f"--n-values expects comma-separated integers, "
                       f"got {args.n_values!r}")
    if not n_values or any(n < 1 for n in n_values):
        raise CliError("--n-values needs positive integers")

    dataset = read_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for n in n_values:
        args.n = n
        cfg = _load_config(args)
        run_dir = os.path.join(args.out, f"n{n:02d}")
        _snapshot(run_dir, args, cfg)
        trainer = Trainer(dataset, cfg, out_dir=run_dir)
        start = time.perf_counter()
        trainer.train(progress=_progress_printer(args.quiet))
        seconds = time.perf_counter() - start
        result = evaluate(trainer.model, dataset)
        row = {"n": n, "mean_psnr": result["mean_psnr"],
               "mean_ssim": result["mean_ssim"],
               "final_total": trainer.log_rows[-1]["total"],
               "n_gaussians": trainer.model.cloud.n, "seconds": seconds}
        rows.append(row)
        print(f"n={n:3d} mean_psnr={row['mean_psnr']:.4f} "
              f"mean_ssim={row['mean_ssim']:.6f} ({seconds:.1f}s)")
    csv_path = os.path.join(args.out, "sweep.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({**row,
                             "mean_psnr": f"{row['mean_psnr']:.6f}",
                             "mean_ssim": f"{row['mean_ssim']:.8f}",
                             "final_total": f"{row['final_total']:.8f}",
                             "seconds": f"{row['seconds']:.2f}"})
    print(f"wrote {csv_path}")
    return 0


# ---------------------------------------------------------------- parser


def _add_train_flags(p) -> None:
    p.add_argument("--config", help="JSON file of training configuration keys")
    p.add_argument("--iters", type=int,
                   help="total iterations; stage starts and the density-"
                        "control window scale proportionally")
    p.add_argument("--traj-start", type=int, dest="traj_start",
                   help="iteration at which exposure trajectories turn on")
    p.add_argument("--fusion-start", type=int, dest="fusion_start",
                   help="iteration at which the fusion stage turns on")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--lr-trajectory", type=float, dest="lr_trajectory",
                   help="learning rate for exposure trajectories")
    p.add_argument("--gaussians", type=int,
                   help="number of Gaussians at initialization")
    p.add_argument("--densify-until", type=int, dest="densify_until",
                   help="last iteration of the density-control window")
    p.add_argument("--no-motion-model", action="store_true",
                   help="ablation: never leave the single-pose sharp stage")
    p.add_argument("--no-fusion", action="store_true",
                   help="ablation: skip the fused-output stage")
    p.add_argument("--quiet", action="store_true",
                   help="suppress periodic progress lines")


def build_parser() -> _Parser:
    # SUPPRESS keeps a subcommand's absent --threads from overwriting a
    # value given before the subcommand
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help=f"worker cap (default ${THREADS_ENV} or "
                             "library defaults)")

    parser = _Parser(prog="blursplat",
                     description=__doc__.splitlines()[0],
                     parents=[common])
    parser.set_defaults(threads=None)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common],
                       help="write a synthetic motion-blurred dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--blur-size", choices=sorted(BLUR_SIZES),
                   default="small", dest="blur_size",
                   help="exposure length: small=17, medium=33, large=49 "
                        "subframes")
    p.add_argument("--m", type=int, default=None,
                   help="odd subframe count per frame (overrides --blur-size)")
    p.add_argument("--size", type=int, default=64, help="image side length")
    p.add_argument("--gaussians", type=int, default=1500,
                   help="ground-truth Gaussian count")
    p.add_argument("--focal", type=float, default=69.0)
    p.add_argument("--distance", type=float, default=2.2,
                   help="camera distance from the figure")
    p.add_argument("--amplitude", type=float, default=3.0,
                   help="motion amplitude scale")
    p.add_argument("--max-step", type=float, default=0.05, dest="max_step",
                   help="per-subframe joint rotation cap (radians)")
    p.add_argument("--pose-noise", type=float, default=0.0, dest="pose_noise",
                   help="std of the input-pose perturbation (radians)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common],
                       help="fit an avatar to a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="run directory (default under runs/)")
    p.add_argument("--n", type=int, help="virtual poses per exposure")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common],
                       help="render sharp images from a checkpoint")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint directory (or run directory)")
    p.add_argument("--data", required=True,
                   help="dataset directory supplying cameras and poses")
    p.add_argument("--out", required=True, help="output image directory")
    p.add_argument("--poses", help="JSON pose file overriding dataset poses")
    p.add_argument("--camera", default="train",
                   help="train (default) or evalN")
    p.add_argument("--frames", default="all",
                   help="'all' or comma-separated frame indices")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common],
                       help="score sharp renders against held-out frames")
    p.add_argument("--checkpoint", help="checkpoint directory (or run dir)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="metrics CSV path (default: stdout)")
    p.add_argument("--oracle", action="store_true",
                   help="score the dataset's own generator instead of a "
                        "checkpoint (self-consistency check)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference gradient verification")
    p.add_argument("--seeds", type=int, default=20,
                   help="number of random scenes")
    p.add_argument("--seed0", type=int, default=0, help="first seed")
    p.add_argument("--module", choices=("all", "render", "tinynet"),
                   default="all", help="restrict the checked scope")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--h", type=float, default=None,
                   help="finite-difference step (default per module)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", parents=[common],
                       help="train over several virtual-pose counts")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.add_argument("--n-values", default="3,5,7,9,13", dest="n_values",
                   help="comma-separated virtual-pose counts")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _set_threads(args.threads)
        code = args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return code


if __name__ == "__main__":
    sys.exit(main())
