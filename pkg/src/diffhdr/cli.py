"""Command-line entry points: synthesize, train, infer, evaluate, plot-dist."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np


def _cmd_synthesize(args) -> int:
    from .datapipe import HDRFrame, make_sequence, save_sequence

    pattern = [float(x) for x in args.pattern.split(",")]
    files = sorted(f for f in os.listdir(args.input) if f.endswith(".npy"))
    if not files:
        print(f"no .npy HDR frames found in {args.input}", file=sys.stderr)
        return 1
    frames = [
        HDRFrame(pixels=np.load(os.path.join(args.input, f)), index=i)
        for i, f in enumerate(files)
    ]
    seq = make_sequence(
        frames,
        pattern,
        gamma=args.gamma,
        bit_depth=args.bit_depth,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    save_sequence(seq, args.out)
    print(f"wrote {len(seq)} frames (pattern {pattern}) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .config import load_config
    from .training import run_stage

    config = load_config(args.config)
    manifest = run_stage(args.stage, config)
    print(
        f"stage {args.stage}: {len(manifest.loss_history)} steps, "
        f"final loss {manifest.loss_history[-1]:.5f}, "
        f"{manifest.wall_seconds:.1f}s, checkpoint {manifest.checkpoint_digest[:12]}"
    )
    return 0


def _cmd_infer(args) -> int:
    from .config import load_config
    from .datapipe import load_sequence
    from .diffusion import SamplerConfig
    from .training import infer_sequence

    config = load_config(args.config)
    sequence = load_sequence(args.input)
    sampler = SamplerConfig(
        num_steps=config.sampler_steps,
        eta=config.sampler_eta,
        seed=args.seed if args.seed is not None else config.seed,
    )
    frames = infer_sequence(sequence, config.work_dir, sampler)
    os.makedirs(args.out, exist_ok=True)
    for i, frame in enumerate(frames):
        np.save(os.path.join(args.out, f"hdr_{i:04d}.npy"), frame.pixels)
    print(f"reconstructed {len(frames)} frames into {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .metrics import evaluate_run

    report = evaluate_run(args.pred, args.gt, mu=args.mu)
    report.save(args.out)
    print(
        f"{report.frame_count} frames: PSNR_T {report.psnr_mean:.3f} dB, "
        f"SSIM_T {report.ssim_mean:.5f} -> {args.out}"
    )
    return 0


def _load_patch_dir(path: str) -> np.ndarray:
    arrays = []
    for name in sorted(os.listdir(path)):
        if not name.endswith(".npy"):
            continue
        arr = np.load(os.path.join(path, name))
        if arr.ndim == 3:
            arr = arr[None]
        arrays.append(arr)
    if not arrays:
        raise ValueError(f"no .npy patches in {path}")
    return np.concatenate(arrays, axis=0)


def _cmd_plot_dist(args) -> int:
    from .metrics import distribution_plot

    sets = []
    for spec in args.sets:
        label, _, directory = spec.partition("=")
        if not directory:
            print(f"--sets entries must look like label=dir, got {spec!r}", file=sys.stderr)
            return 1
        sets.append((label, _load_patch_dir(directory)))
    distribution_plot(sets, args.out, seed=args.seed, perplexity=args.perplexity, peak=args.peak)
    print(f"wrote {args.out} and coordinate file")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffhdr", description="HDR video reconstruction toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="synthesize an alternating-exposure LDR sequence")
    p.add_argument("--input", required=True, help="directory of .npy HDR frames")
    p.add_argument("--pattern", required=True, help="comma-separated exposures, e.g. 1,8")
    p.add_argument("--out", required=True)
    p.add_argument("--noise-sigma", type=float, default=0.0, dest="noise_sigma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=2.2)
    p.add_argument("--bit-depth", type=int, default=8, dest="bit_depth")
    p.set_defaults(func=_cmd_synthesize)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=["autoencoder", "ldm", "tcam", "recon"])
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="reconstruct HDR frames for a sequence")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True, help="sequence directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evaluate", help="tonemapped metrics between two frame directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mu", type=float, default=5000.0)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("plot-dist", help="2-D embedding figure of labeled patch sets")
    p.add_argument("--sets", nargs="+", required=True, metavar="LABEL=DIR")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perplexity", type=float, default=10.0)
    p.add_argument("--peak", type=float, default=1.0)
    p.set_defaults(func=_cmd_plot_dist)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
