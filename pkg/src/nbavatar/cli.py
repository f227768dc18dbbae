"""Command-line entry point: ``python -m nbavatar <command> [options]``.

Commands
--------
synth         render a synthetic multi-view dataset
train         optimize an avatar on a dataset, writing a checkpoint and a metrics CSV
render        render one (frame, camera) of a dataset with a trained checkpoint
reenact       render a driving pose sequence with a trained checkpoint
eval          held-out PSNR / SSIM table
gradcheck     analytic-vs-finite-difference gradient suite
oracle-check  tiled rasterizer against the all-pairs reference

Exit status is 0 on success, 1 when a validation fails and 2 for bad
arguments or unusable inputs.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--threads", type=int, default=None, help="worker threads for rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nbavatar", description="Mesh-anchored neural billboard avatars.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--kind", choices=["sphere", "cube", "strip"], default="sphere")
    p.add_argument("--subdiv", type=int, default=2)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--cams", type=int, default=8)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--held-out", type=int, nargs="*", default=[3], help="held-out camera indices")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", help="train an avatar")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--iters", type=int, help="override the iteration count")
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")
    p.add_argument("--stop-at", type=int, help="stop after this many total iterations")
    p.add_argument("--no-dice", action="store_true", help="drop the silhouette loss")
    p.add_argument("--no-reg", action="store_true", help="drop the regularizers")
    p.add_argument("--no-dnr", action="store_true", help="textures carry color; no decoder")

    p = sub.add_parser("render", help="render one view")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output PPM")
    p.add_argument("--alpha", type=Path, help="also write billboard opacity as PGM")
    p.add_argument("--features", type=Path, help="also dump the feature image (NBIM)")

    p = sub.add_parser("reenact", help="render a driving pose sequence")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset with the template mesh and cameras")
    p.add_argument("--poses", type=Path, help="NBAN vertex animation (default: the dataset's poses)")
    p.add_argument("--camera", type=int, default=None, help="camera index (default: first held-out)")
    p.add_argument("--out", type=Path, required=True, help="output directory for PPM frames")

    p = sub.add_parser("eval", help="held-out PSNR/SSIM")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--frame-stride", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--scenes", type=int, default=50)

    p = sub.add_parser("oracle-check", help="tiled vs reference rasterizer")
    _common(p)
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    return parser


def _configure_threads(n):
    if n is None:
        return
    if n < 1:
        raise ValueError("--threads must be positive")
    if "numba" not in sys.modules:
        os.environ["NUMBA_NUM_THREADS"] = str(n)
    from .raster import set_threads

    set_threads(n)


def _load(args):
    from .synth import load_dataset
    from .trainer import attach_mesh, load_state

    ds = load_dataset(args.data)
    state = load_state(args.checkpoint)
    attach_mesh(state, ds.mesh)
    return ds, state


def cmd_synth(args) -> int:
    from .synth import make_dataset, write_dataset

    if args.frames < 1 or args.cams < 1:
        raise ValueError("--frames and --cams must be positive")
    ds = make_dataset(args.kind, args.subdiv, args.frames, args.cams, args.width, args.height, args.seed,
                      held_out=tuple(args.held_out))
    write_dataset(ds, args.out)
    print(f"wrote {args.frames * args.cams} views to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .errors import NaNGradient
    from .synth import load_dataset
    from .trainer import TrainConfig, load_state, save_state, train

    overrides = {"seed": args.seed}
    if args.iters is not None:
        overrides["iters"] = args.iters
    for flag in ("no_dice", "no_reg", "no_dnr"):
        if getattr(args, flag):
            overrides[flag] = True
    ds = load_dataset(args.data)
    if args.resume is not None:
        state = load_state(args.resume)
        cfg = state.config
    else:
        state = None
        # image size follows the dataset unless the config file pins it
        H, W = ds.images.shape[2:4]
        text = args.config.read_text() if args.config is not None else ""
        given = {line.split("=", 1)[0].strip() for line in text.splitlines() if "=" in line.split("#", 1)[0]}
        size = {k: v for k, v in (("width", W), ("height", H)) if k not in given}
        cfg = TrainConfig.from_text(text, **size, **overrides)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.out / "checkpoint.nbav"

    def log(row):
        shown = ", ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items())
        print(shown, flush=True)

    try:
        state, _ = train(cfg, ds, state=state, stop_at=args.stop_at, metrics_path=args.out / "metrics.csv",
                         checkpoint_path=ckpt, log=log)
    except NaNGradient as exc:
        print(f"error: non-finite gradient in group {exc.group}; last good state saved to {ckpt}",
              file=sys.stderr)
        return EXIT_FAIL
    save_state(ckpt, state)
    (args.out / "config.txt").write_text(cfg.to_text())
    print(f"checkpoint at iteration {state.iteration}: {ckpt}")
    return EXIT_OK


def cmd_render(args) -> int:
    from . import io
    from .anchor import pose_billboards
    from .mesh import polygon_frames
    from .raster import render
    from .trainer import predict

    ds, state = _load(args)
    if not 0 <= args.frame < ds.n_frames or not 0 <= args.camera < len(ds.cameras):
        raise ValueError("frame or camera index out of range")
    frames = polygon_frames(ds.posed_mesh(args.frame))
    cam = ds.cameras[args.camera]
    rgb, a_nb = predict(state, frames, cam)
    io.write_ppm(args.out, rgb)
    if args.alpha is not None:
        io.write_pgm(args.alpha, a_nb)
    if args.features is not None:
        feat, _ = render(pose_billboards(state.billboards, frames), cam, state.config.early_termination)
        io.save_feature_image(args.features, feat)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_reenact(args) -> int:
    from . import io
    from .trainer import reenact

    ds, state = _load(args)
    poses = io.load_animation(args.poses) if args.poses is not None else ds.poses
    cam_index = args.camera if args.camera is not None else (ds.test_cams or [0])[0]
    if not 0 <= cam_index < len(ds.cameras):
        raise ValueError("camera index out of range")
    images = reenact(state, poses, ds.cameras[cam_index])
    args.out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        io.write_ppm(args.out / f"frame{i:03d}.ppm", img)
    print(f"wrote {len(images)} frames to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .synth import psnr, ssim
    from .mesh import polygon_frames
    from .trainer import predict

    ds, state = _load(args)
    if not ds.test_cams:
        raise ValueError("dataset has no held-out cameras")
    print("frame camera psnr ssim")
    ps, ss = [], []
    for f in range(0, ds.n_frames, max(1, args.frame_stride)):
        frames = polygon_frames(ds.posed_mesh(f))
        for c in ds.test_cams:
            pred, _ = predict(state, frames, ds.cameras[c])
            gt = ds.image(f, c) * ds.mask(f, c)[..., None]
            p, s = psnr(pred.clip(0, 1), gt), ssim(pred.clip(0, 1), gt)
            ps.append(p)
            ss.append(s)
            print(f"{f} {c} {p:.4f} {s:.4f}")
    print(f"mean - {sum(ps) / len(ps):.4f} {sum(ss) / len(ss):.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import TOLERANCES, gradient_suite

    res = gradient_suite(seed=args.seed, n_scenes=args.scenes)
    for name, err in res["families"].items():
        verdict = "ok" if res["verdicts"][name] else "FAIL"
        print(f"{name:16s} max_rel_err={err:.3e} tol={TOLERANCES[name]:.0e} {verdict}")
    print(f"{'passed' if res['passed'] else 'failed'} in {res['seconds']:.1f} s")
    return EXIT_OK if res["passed"] else EXIT_FAIL


def cmd_oracle_check(args) -> int:
    from .checks import oracle_suite

    res = oracle_suite(n_scenes=args.scenes, seed=args.seed)
    ok = res["max_abs_diff"] <= args.tol
    print(f"scenes={res['scenes']} max_abs_diff={res['max_abs_diff']:.3e} tol={args.tol:.0e} "
          f"time={res['seconds']:.1f}s {'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "reenact": cmd_reenact,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        _configure_threads(args.threads)
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # library errors carry their own message
        from .errors import NBAvatarError

        if isinstance(exc, NBAvatarError):
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        raise


if __name__ == "__main__":
    sys.exit(main())
