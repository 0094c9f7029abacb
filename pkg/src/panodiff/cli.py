"""Command-line entry point: ``panodiff <subcommand> [options]``.

Exit codes: 0 success, 1 unexpected failure, 2 usage error or unknown
subcommand, 3 malformed input file, 4 invalid configuration, 5 gradient
check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import formats
from .config import ConfigError, ExperimentConfig
from .formats import FormatError, atomic_write
from .geometry import ErpGrid, GeometryError, NfovSpec, RotationAngles, nfov_mask, rotate_image
from .sampling import (
    AnalyticGaussianDenoiser, SampleTrace, SamplerConfig, SgaSchedule, default_schedule,
    seam_metric, sga_sample,
)
from .semantic import LabelEmbeddingTable, encode_segmentation
from .synth import synth_corpus
from .training import ToyModel, spherical_reprojection, train_toy

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_FORMAT, EXIT_CONFIG, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _need_out(args):
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    return Path(args.out)


def _read_tensor(path):
    try:
        return formats.load_tensor(path)
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc


def _read_table(path):
    try:
        return formats.load_table(path)
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc


def _as_ids(arr, path):
    if not np.all(np.mod(arr, 1) == 0) or arr.ndim != 2:
        raise FormatError(f"{path}: segmentation map must be a 2-D array of integer ids")
    return arr.astype(np.int64)


def to_pgm(image) -> bytes:
    """8-bit binary PGM of the first channel, min-max scaled."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    return f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + pix.tobytes()


def _csv(rows) -> bytes:
    return "".join(",".join(str(v) for v in r) + "\n" for r in rows).encode()


def cmd_rotate(args):
    x = _read_tensor(args.input)
    out = _need_out(args)
    angles = RotationAngles(args.yaw, args.pitch, args.roll)
    formats.save_tensor(out, rotate_image(x, angles))


def cmd_nfov_mask(args):
    cfg = _load_config(args)
    h = args.height or cfg.height
    spec = NfovSpec(args.fov, args.aspect, RotationAngles(args.yaw, args.pitch, args.roll))
    formats.save_tensor(_need_out(args), nfov_mask(ErpGrid(h, 2 * h), spec))


def cmd_encode(args):
    seg = _as_ids(_read_tensor(args.segmap), args.segmap)
    table = _read_table(args.table)
    visible = None
    if args.visible:
        visible = _read_tensor(args.visible)
    size = None
    if args.height:
        size = (args.height, 2 * args.height)
    out = _need_out(args)
    formats.save_tensor(out, encode_segmentation(seg, table, visible, size))


def cmd_augment(args):
    cfg = _load_config(args)
    out = _need_out(args)
    try:
        panos, segs, table, _ = formats.load_dataset(args.dataset)
    except OSError as exc:
        raise FormatError(str(exc)) from exc
    new_p, new_s, angles = [], [], []
    for n, (x, s) in enumerate(zip(panos, segs)):
        for c in range(args.copies):
            xr, sr, a = spherical_reprojection(x, s, cfg.data_bounds, [cfg.seed, n, c])
            new_p.append(xr)
            new_s.append(sr)
            angles.append(list(a))
    formats.write_dataset(out, new_p, new_s, table, {"rotations": angles})


def _corpus(cfg, args):
    if args.dataset:
        try:
            panos, segs, table, _ = formats.load_dataset(args.dataset)
        except OSError as exc:
            raise FormatError(str(exc)) from exc
        return np.stack(panos), np.stack(segs), table
    grid = ErpGrid(cfg.height, cfg.width)
    panos, segs = synth_corpus(grid, args.count, cfg.c_z, cfg.num_classes, [cfg.seed, 7])
    return panos, segs, _default_table(cfg)


def _default_table(cfg):
    return LabelEmbeddingTable.from_labels([f"class{i}" for i in range(cfg.num_classes - 1)], cfg.c_e)


def cmd_synth_data(args):
    cfg = _load_config(args)
    out = _need_out(args)
    panos, segs = synth_corpus(ErpGrid(cfg.height, cfg.width), args.count, cfg.c_z, cfg.num_classes, cfg.seed)
    formats.write_dataset(out, panos, segs, _default_table(cfg), {"seed": cfg.seed})


def cmd_train_toy(args):
    cfg = _load_config(args)
    if args.steps is not None:
        cfg = cfg.replace(train_steps=args.steps)
    out = _need_out(args)
    panos, segs, table = _corpus(cfg, args)
    if table.num_classes != cfg.num_classes or table.dim != cfg.c_e:
        raise ConfigError(f"embedding table is {table.dim}x{table.num_classes}, "
                          f"config expects c_e={cfg.c_e}, num_classes={cfg.num_classes}")
    state, history = train_toy(cfg, panos, segs, table)
    rows = [("step", "L_c", "L_siam", "L_all")]
    rows += [(n + 1, repr(h.l_c), repr(h.l_siam), repr(h.l_all)) for n, h in enumerate(history)]
    formats.save_checkpoint(out / "checkpoint.npz", state.model.named_parameters(), cfg.to_json(), state.step)
    formats.save_table(out / "labels.sdet", table)
    atomic_write(out / "losses.csv", _csv(rows))


def _load_model(path):
    try:
        params, cfg_json, _ = formats.load_checkpoint(path)
    except OSError as exc:
        raise FormatError(str(exc)) from exc
    try:
        cfg = ExperimentConfig.from_dict(json.loads(cfg_json))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: checkpoint config is not JSON") from exc
    model = ToyModel.init(cfg)
    try:
        model.load_parameters(params)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return model, cfg


def cmd_generate(args):
    out = _need_out(args)
    if args.checkpoint:
        model, cfg = _load_model(args.checkpoint)
        if args.config:
            cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
    else:
        cfg = _load_config(args)
        model = AnalyticGaussianDenoiser(args.mu0, args.var0)
    n = args.n if args.n is not None else cfg.n_steps
    k = args.k_rot if args.k_rot is not None else cfg.k_rot
    mode = args.mode or cfg.sampler_mode
    cfg = cfg.replace(n_steps=n, k_rot=k, sampler_mode=mode,
                      train_timesteps=max(cfg.train_timesteps, n))
    guidance = None
    if args.segmap:
        if not args.checkpoint:
            raise UsageError("--segmap needs --checkpoint (the analytic denoiser ignores guidance)")
        seg = _as_ids(_read_tensor(args.segmap), args.segmap)
        table_path = args.table or Path(args.checkpoint).parent / "labels.sdet"
        table = _read_table(table_path)
        e = encode_segmentation(seg, table, size=(cfg.height, cfg.width))
        guidance = model.control_latent(e)
    schedule = default_schedule(n, cfg.train_timesteps, cfg.beta_min, cfg.beta_max)
    sga = SgaSchedule.build(n, k, cfg.width, snap=not args.no_snap and cfg.snap)
    shape = (cfg.c_z, cfg.height, cfg.width)
    images, traces = [], []
    for i in range(args.count):
        trace = SampleTrace()
        images.append(sga_sample(model, schedule, sga, SamplerConfig(mode, cfg.seed + i), shape,
                                 guidance, trace))
        traces.append(trace)
    events = {e["step"]: e for e in traces[0].events}
    rows = [("step", "rotated", "yaw_deg", "cumulative_deg")]
    cumulative = 0.0
    for t in range(n, 0, -1):
        ev = events.get(t)
        if ev:
            cumulative = ev["cumulative"]
        rows.append((t, int(ev is not None), repr(ev["yaw"]) if ev else "0.0", repr(cumulative)))
    names = ["image.sdtf"] if args.count == 1 else [f"image_{i:04d}.sdtf" for i in range(args.count)]
    for name, img in zip(names, images):
        formats.save_tensor(out / name, img)
        if args.ppm:
            atomic_write(out / name.replace(".sdtf", ".pgm"), to_pgm(img))
    atomic_write(out / "steps.csv", _csv(rows))


def cmd_seam(args):
    img = _read_tensor(args.input)
    d_seam, d_int, ratio = seam_metric(img)
    line = f"{d_seam!r},{d_int!r},{ratio!r}"
    print(line)
    if args.out:
        atomic_write(Path(args.out), f"d_seam,d_interior,ratio\n{line}\n".encode())


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_all

    seed = args.seed if args.seed is not None else 0
    errs = run_all(args.instances, seed)
    ok = all(v < TOLERANCE for v in errs.values())
    for name, v in errs.items():
        print(f"{name:22s} max rel err {v:.3e} {'ok' if v < TOLERANCE else 'FAIL'}")
    if args.out:
        atomic_write(Path(args.out), (json.dumps({"tolerance": TOLERANCE, "max_rel_err": errs, "ok": ok},
                                                 indent=2, sort_keys=True) + "\n").encode())
    return EXIT_OK if ok else EXIT_GRADCHECK


def _angles(p):
    p.add_argument("--yaw", type=float, default=0.0)
    p.add_argument("--pitch", type=float, default=0.0)
    p.add_argument("--roll", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--out", help="output file or directory")

    parser = argparse.ArgumentParser(prog="panodiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rotate", parents=[common], help="rotate a panorama tensor")
    p.add_argument("input")
    _angles(p)
    p.set_defaults(func=cmd_rotate)

    p = sub.add_parser("nfov-mask", parents=[common], help="visibility mask of a perspective view")
    p.add_argument("--fov", type=float, required=True, help="horizontal field of view in degrees")
    p.add_argument("--aspect", type=float, default=2.0)
    p.add_argument("--height", type=int, help="grid height (width is twice this)")
    _angles(p)
    p.set_defaults(func=cmd_nfov_mask)

    p = sub.add_parser("encode", parents=[common], help="per-pixel class embedding of a segmentation map")
    p.add_argument("segmap")
    p.add_argument("table")
    p.add_argument("--visible", help="mask tensor; invisible pixels become Unknown")
    p.add_argument("--height", type=int, help="downsample to this grid height")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("augment", parents=[common], help="randomly reproject every pair of a dataset")
    p.add_argument("dataset")
    p.add_argument("--copies", type=int, default=1)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-toy", parents=[common], help="train the toy controlled denoiser")
    p.add_argument("--dataset", help="dataset directory (default: synthetic corpus)")
    p.add_argument("--count", type=int, default=64, help="synthetic corpus size")
    p.add_argument("--steps", type=int, help="overrides train_steps")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("generate", parents=[common], help="sample with or without rotation steps")
    p.add_argument("--checkpoint", help="trained model (default: analytic Gaussian denoiser)")
    p.add_argument("--segmap", help="guidance segmentation map (needs --checkpoint)")
    p.add_argument("--table", help="embedding table (default: labels.sdet beside the checkpoint)")
    p.add_argument("--k-rot", type=int, help="rotation steps; 0 disables")
    p.add_argument("--n", type=int, help="denoising steps")
    p.add_argument("--mode", choices=["deterministic", "stochastic"])
    p.add_argument("--no-snap", action="store_true", help="do not round the angle to whole columns")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--mu0", type=float, default=0.0)
    p.add_argument("--var0", type=float, default=1.0)
    p.add_argument("--ppm", action="store_true", help="also write 8-bit grayscale previews")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("seam", parents=[common], help="seam discontinuity of an image tensor")
    p.add_argument("input")
    p.set_defaults(func=cmd_seam)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of all backward passes")
    p.add_argument("--instances", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--count", type=int, default=16)
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"panodiff {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"panodiff {args.command}: malformed file: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ConfigError as exc:
        print(f"panodiff {args.command}: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, GeometryError, RuntimeError) as exc:
        print(f"panodiff {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
