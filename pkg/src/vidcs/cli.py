"""Command-line interface.

Subcommands: sample, reconstruct, train, eval, make-dataset, export-op.
Exit codes: 0 success, 2 usage/config errors, 3 parse/geometry errors,
4 training divergence.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    GeometryError,
    KernelError,
    ParseError,
    ShapeError,
    UnsupportedRateError,
)
from .metrics import psnr, ssim
from .mhme import ReferenceBuffer
from .model_io import load_model, save_model
from .sensing import (
    center_crop_to_multiple,
    from_milli,
    load_measurements,
    load_operator,
    make_operator,
    normalize_measurements,
    normalize_plane,
    operator_from_rows,
    sample_frame,
    save_measurements,
    save_operator,
    to_milli,
)
from .train import TrainConfig, clip_to_samples, make_clip_corpus, train_loop
from .unfold import _infer_rate, build_model, decode_sequence, reconstruct_frame
from .video_io import load_frames, write_pgm, write_y4m


def _read_config(path: str) -> dict[str, str]:
    """Flat key=value config; '#' starts a comment line."""
    out: dict[str, str] = {}
    with open(path, "r") as fh:
        for ln, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if "=" not in s:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {s!r}")
            key, val = s.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _parse_conv_spec(text: str) -> tuple[tuple[int, int], ...]:
    if not text:
        return ()
    layers = []
    for part in text.split(","):
        if "x" not in part:
            raise ConfigError(f"conv spec entries look like CHxK, got {part!r}")
        ch, ks = part.strip().split("x", 1)
        layers.append((int(ch), int(ks)))
    return tuple(layers)


def _parse_cr_list(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _load_clips(data_path: str, block_size: int) -> list[list]:
    """Load one .y4m file or every .y4m in a directory as center-cropped clips."""
    if os.path.isdir(data_path):
        names = sorted(n for n in os.listdir(data_path) if n.endswith(".y4m"))
        if not names:
            raise ConfigError(f"no .y4m clips found in {data_path}")
        paths = [os.path.join(data_path, n) for n in names]
    else:
        paths = [data_path]
    clips = []
    for p in paths:
        frames = load_frames(p)
        clips.append([center_crop_to_multiple(f, block_size) for f in frames])
    return clips


def _cmd_sample(args) -> int:
    op = load_operator(args.op)
    frames = load_frames(args.video)
    frames = [center_crop_to_multiple(f, op.block_size) for f in frames]
    view = op.rate_view(args.cr)
    grids = [sample_frame(view, f) for f in frames]
    save_measurements(args.out, grids)
    g = grids[0]
    print(
        f"sampled {len(grids)} frames at cr={args.cr:g}: "
        f"{g.m_b} channels x {g.grid_h}x{g.grid_w} blocks -> {args.out}"
    )
    return 0


def _cmd_reconstruct(args) -> int:
    model = load_model(args.model)
    grids = load_measurements(args.meas)
    if not grids:
        raise FormatError("measurement stream holds no frames")
    if grids[0].block_size != model.block_size:
        raise GeometryError(
            f"measurements use {grids[0].block_size}x{grids[0].block_size} blocks, "
            f"model expects {model.block_size}x{model.block_size}"
        )
    cr = _infer_rate(model, grids[0])
    view = model.sampling_view(cr)
    os.makedirs(args.out, exist_ok=True)
    ref = None
    decoded = []
    for i, grid in enumerate(grids):
        grid.cr_milli = cr
        gn = normalize_measurements(grid, view, model.norm_mean, model.norm_std)
        plane = reconstruct_frame(model, gn, ref, use_mhme=not args.no_mhme)
        decoded.append(plane)
        ref = ReferenceBuffer(normalize_plane(plane, model.norm_mean, model.norm_std))
        write_pgm(os.path.join(args.out, f"frame_{i:04d}.pgm"), plane)
    print(f"decoded {len(decoded)} frames at cr={from_milli(cr):g} -> {args.out}")
    if args.gt:
        gt = load_frames(args.gt)
        if len(gt) < len(decoded):
            raise GeometryError(f"ground truth has {len(gt)} frames, stream has {len(decoded)}")
        h, w = decoded[0].values.shape
        scores = []
        for i, plane in enumerate(decoded):
            ref_plane = center_crop_to_multiple(gt[i], model.block_size)
            if ref_plane.values.shape != (h, w):
                raise GeometryError(
                    f"ground truth frame {i} is {ref_plane.values.shape}, decoded is {(h, w)}"
                )
            p, s = psnr(ref_plane, plane), ssim(ref_plane, plane)
            scores.append((p, s))
            print(f"frame={i} psnr={p:.2f} ssim={s:.4f}")
        mean_p = float(np.mean([p for p, _ in scores]))
        mean_s = float(np.mean([s for _, s in scores]))
        print(f"mean psnr={mean_p:.2f} ssim={mean_s:.4f}")
    return 0


def _cmd_train(args) -> int:
    cfgmap = _read_config(args.config)

    def get(key: str, default: str) -> str:
        return cfgmap.get(key, default)

    if "data" not in cfgmap:
        raise ConfigError("train config needs a data= entry (y4m file or directory)")
    block_size = int(get("block_size", "16"))
    stages = int(get("stages", "1"))
    cr_list = _parse_cr_list(get("cr_list", "0.1"))
    use_itp = get("itp", "0").strip() not in ("0", "false", "no", "")
    conv_spec = _parse_conv_spec(get("conv_spec", "64x3,32x3,1x3"))
    clips = _load_clips(cfgmap["data"], block_size)
    holdout = int(get("holdout", "0"))
    if holdout < 0 or holdout >= len(clips):
        if holdout:
            raise ConfigError(f"holdout={holdout} leaves no training clips")
    train_clips = clips[: len(clips) - holdout] if holdout else clips
    samples = [s for clip in train_clips for s in clip_to_samples(clip)]
    op = make_operator(block_size, max(cr_list), int(get("op_seed", "7")))
    model = build_model(
        block_size=block_size,
        stages=stages,
        cr_list=cr_list,
        conv_spec=conv_spec,
        use_itp=use_itp,
        mh_stride=int(get("mh_stride", "1")),
        alpha=float(get("alpha", "0.5")),
        seed=int(get("seed", "0")),
        op=op,
    )
    tcfg = TrainConfig(
        iterations=int(get("iterations", "1000")),
        batch_size=int(get("batch_size", "250")),
        lr=float(get("lr", "0.001")),
        mc_weight=float(get("mc_weight", "0.5")),
        seed=int(get("seed", "0")),
        refresh_every=int(get("refresh_every", "0")),
        log_path=args.log or cfgmap.get("log"),
    )
    rows = train_loop(model, samples, op, tcfg)
    save_model(model, args.out)
    last = rows[-1] if rows else None
    tail = f", final loss {last.loss:.6g}" if last else ""
    print(f"trained {tcfg.iterations} iterations on {len(samples)} samples{tail} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    frames = load_frames(args.video)
    frames = [center_crop_to_multiple(f, model.block_size) for f in frames]
    for cr in model.cr_list_milli:
        decoded = decode_sequence(model, frames, cr, use_mhme=not args.no_mhme)
        ps = [psnr(g, d) for g, d in zip(frames, decoded)]
        ss = [ssim(g, d) for g, d in zip(frames, decoded)]
        print(f"cr={from_milli(cr):.3f} psnr={np.mean(ps):.2f} ssim={np.mean(ss):.4f}")
    return 0


def _cmd_make_dataset(args) -> int:
    clips = make_clip_corpus(
        args.clips, args.frames, args.height, args.width, args.max_shift, args.seed
    )
    os.makedirs(args.out, exist_ok=True)
    for i, clip in enumerate(clips):
        write_y4m(os.path.join(args.out, f"clip_{i:03d}.y4m"), clip)
    print(f"wrote {len(clips)} clips of {args.frames}x{args.height}x{args.width} -> {args.out}")
    return 0


def _cmd_export_op(args) -> int:
    if args.model:
        model = load_model(args.model)
        op = operator_from_rows(model.op_rows, model.block_size, model.op_seed)
    else:
        if args.cr_max is None:
            raise ConfigError("export-op needs either --model or --cr-max")
        op = make_operator(args.block_size, args.cr_max, args.seed)
    save_operator(op, args.out)
    print(f"wrote operator: B={op.block_size}, {op.m_max} rows -> {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidcs", description="Block-based video compressive sensing codec"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="measure a video into a measurement stream")
    p.add_argument("--op", required=True, help="operator file")
    p.add_argument("--video", required=True, help=".y4m file or directory of .pgm frames")
    p.add_argument("--cr", type=float, required=True, help="compression ratio")
    p.add_argument("--out", required=True, help="output measurement stream")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("reconstruct", help="decode a measurement stream")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--meas", required=True, help="measurement stream")
    p.add_argument("--out", required=True, help="output frame directory")
    p.add_argument("--format", choices=["pgm"], default="pgm", help="output frame format")
    p.add_argument("--gt", help="ground-truth video for metrics")
    p.add_argument("--no-mhme", action="store_true", help="skip motion-compensated fusion")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--log", help="metrics log path (overrides config)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="decode a video at every trained rate and report metrics")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--video", required=True, help=".y4m file or directory of .pgm frames")
    p.add_argument("--no-mhme", action="store_true", help="skip motion-compensated fusion")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("make-dataset", help="generate synthetic translating-texture clips")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--max-shift", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_make_dataset)

    p = sub.add_parser("export-op", help="write an operator file")
    p.add_argument("--model", help="take rows from a trained model")
    p.add_argument("--block-size", type=int, default=16)
    p.add_argument("--cr-max", type=float, default=None)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True, help="output operator file")
    p.set_defaults(func=_cmd_export_op)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return int(code) if code else 0
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (
        ParseError,
        FormatError,
        GeometryError,
        ShapeError,
        KernelError,
        UnsupportedRateError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
