"""``tarpose`` command line: train, eval, infer, gradcheck, flops, gen-data.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 gradcheck failure.
Diagnostics go to stderr; results to stdout.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as tio
from . import model as M
from . import synth
from . import train as TR
from .tensor import DimensionError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CHECK = 0, 1, 2, 3


class CliError(RuntimeError):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tarpose", description="Temporal pose estimation toolkit.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True, help="run config (.ini)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None, help="override [train] seed")

    e = sub.add_parser("eval", help="PCK of a checkpoint on a generated dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="directory written by gen-data")
    e.add_argument("--report", required=True, help="CSV report path")
    e.add_argument("--config", default=None, help="run config; default: config.ini beside the checkpoint")

    i = sub.add_parser("infer", help="heatmaps, overlay and keypoints for one clip")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--clip", required=True, help="directory of frame_XX.ppm files")
    i.add_argument("--out", required=True)
    i.add_argument("--config", default=None, help="run config; default: config.ini beside the checkpoint")

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and the micro model")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)

    f = sub.add_parser("flops", help="fusion FLOPs per variant")
    f.add_argument("--config", default=None, help="run config; default: ViT-B sized setting")
    f.add_argument("--own-depth", action="store_true",
                   help="use variant_layers for the ablations instead of matching the JTA depth")

    d = sub.add_parser("gen-data", help="write a seeded synthetic benchmark")
    d.add_argument("--kind", required=True, choices=synth.KINDS)
    d.add_argument("--count", required=True, type=int)
    d.add_argument("--seed", required=True, type=int)
    d.add_argument("--out", required=True)
    d.add_argument("--span", type=int, default=1, help="temporal span T (clips hold 2T+1 frames)")
    d.add_argument("--height", type=int, default=64)
    d.add_argument("--width", type=int, default=48)
    d.add_argument("--no-frames", action="store_true", help="write manifest and keypoints only")
    return p


def _model_for(checkpoint: str, config: str | None):
    cfg_path = Path(config) if config else Path(checkpoint).with_name("config.ini")
    if not cfg_path.exists():
        raise CliError(f"no run config at {cfg_path}; pass --config")
    run = tio.load_config(cfg_path)
    arrays = tio.read_checkpoint(checkpoint)
    expected = M.init_params(run.model, 0)
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CliError(f"checkpoint does not match the config: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in expected.items():
        if arrays[name].shape != p.shape:
            raise CliError(f"checkpoint tensor {name} has shape {arrays[name].shape}, config expects {p.shape}")
    return run, TR.params_from_arrays(arrays)


def _datasets(run: tio.RunConfig):
    d, m = run.data, run.model
    span = m.fusion.temporal_span
    h, w = m.backbone.image_h, m.backbone.image_w
    train_ds = synth.make_benchmark(d.kind, d.count, span, d.seed, H=h, W=w)
    eval_ds = None
    if d.eval_count > 0:
        eval_ds = synth.make_benchmark(d.eval_kind or d.kind, d.eval_count, span, d.eval_seed, H=h, W=w)
    return train_ds, eval_ds


def cmd_train(args) -> int:
    run = tio.load_config(args.config)
    if args.seed is not None:
        run = tio.with_overrides(run, seed=args.seed)
    train_ds, eval_ds = _datasets(run)
    res = TR.train(run.model, train_ds, run.train.epochs, run.train.seed, run.train,
                   eval_dataset=eval_ds, out_dir=args.out, data_cfg=run.data)
    means = " ".join(f"pck@{a}={res.report.mean[a]:.4f}" for a in TR.ALPHAS)
    print(f"steps={len(res.losses)} final_loss={res.losses[-1]:.6g} {res.report.split} {means}")
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run, params = _model_for(args.checkpoint, args.config)
    ds = synth.load_dataset(args.dataset)
    _check_geometry(run.model, ds.clips[0].frames.shape if ds.clips else None)
    rep = TR.evaluate(params, run.model, ds, split=f"{ds.kind}:{args.dataset}")
    names = synth.JOINT_NAMES if run.model.backbone.n_joints == len(synth.JOINT_NAMES) else None
    rows = ["joint,name," + ",".join(f"pck@{a}" for a in TR.ALPHAS)]
    for j in range(run.model.backbone.n_joints):
        name = names[j] if names else f"joint{j}"
        rows.append(f"{j},{name}," + ",".join(_num(rep.per_joint[a][j]) for a in TR.ALPHAS))
    rows.append("mean,all," + ",".join(_num(rep.mean[a]) for a in TR.ALPHAS))
    if ds.kind == "occlusion":
        rows.append("occluded,all," + ",".join(_num(TR.occluded_pck(params, run.model, ds, a)) for a in TR.ALPHAS))
    Path(args.report).write_text("\n".join(rows) + "\n")
    print(" ".join(f"pck@{a}={rep.mean[a]:.4f}" for a in TR.ALPHAS))
    return EXIT_OK


def _num(x) -> str:
    return "" if x is None or np.isnan(x) else f"{float(x):.6f}"


def _check_geometry(cfg: M.ModelConfig, frames_shape) -> None:
    if frames_shape is None:
        raise CliError("dataset is empty")
    nf, _, h, w = frames_shape
    if (h, w) != (cfg.backbone.image_h, cfg.backbone.image_w):
        raise CliError(f"frames are {h}x{w}, model expects {cfg.backbone.image_h}x{cfg.backbone.image_w}")
    if cfg.fusion_variant != "single_frame" and nf != cfg.fusion.n_frames:
        raise CliError(f"clips hold {nf} frames, model expects {cfg.fusion.n_frames}")


def cmd_infer(args) -> int:
    run, params = _model_for(args.checkpoint, args.config)
    paths = sorted(Path(args.clip).glob("frame_*.ppm"))
    if not paths:
        raise CliError(f"no frame_*.ppm files in {args.clip}")
    frames = np.stack([tio.read_ppm(p) for p in paths])
    _check_geometry(run.model, frames.shape)
    heat = M.predict(frames[None], params, run.model).data[0]
    xy, score = TR.argmax_decode(heat, run.model.backbone.heatmap_stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = run.model.backbone.n_joints
    names = synth.JOINT_NAMES if n == len(synth.JOINT_NAMES) else [f"joint{j}" for j in range(n)]
    for j in range(n):
        tio.export_heatmap_pgm(heat[j], out / f"heatmap_{j:02d}_{names[j]}.pgm")
    parents = synth.PARENTS if n == len(synth.PARENTS) else None
    tio.export_overlay_ppm(frames[len(paths) // 2], xy, out / "overlay.ppm", parents=parents)
    tio.write_keypoints_csv(out / "keypoints.csv", xy, score)
    print(f"wrote {n} heatmaps, overlay.ppm and keypoints.csv to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    entries = TR.gradcheck_suite(tol=args.tol, seed=args.seed)
    width = max(len(e.name) for e in entries)
    for e in entries:
        print(f"{'PASS' if e.passed else 'FAIL'}  {e.name:<{width}}  max_rel_err={e.max_rel_error:.3e}")
    failed = [e.name for e in entries if not e.passed]
    if failed:
        print(f"gradcheck failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(entries)} checks within {args.tol:g}")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = tio.load_config(args.config).model if args.config else M.vitb_scale_config()
    table = M.flop_table(cfg, equal_depth=not args.own_depth)
    b = cfg.backbone
    print(f"C={b.channels} tokens/frame={b.n_tokens} frames={cfg.fusion.n_frames} "
          f"jta_layers={cfg.fusion.jta_layers} ablation_layers="
          f"{cfg.variant_layers if args.own_depth else cfg.fusion.jta_layers}")
    for name, fl in table.items():
        print(f"{name:<20} {fl:>16d}  {fl / 1e9:9.3f} GFLOPs")
    order = sorted(table, key=table.get)
    print("ordering: " + " < ".join(order))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise CliError("--count must be >= 1")
    ds = synth.make_benchmark(args.kind, args.count, args.span, args.seed, H=args.height, W=args.width,
                              out_dir=args.out, write_frames=not args.no_frames)
    print(f"wrote {len(ds)} {args.kind} clips to {args.out} (manifest sha256 {ds.manifest_hash()[:16]})")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "gradcheck": cmd_gradcheck, "flops": cmd_flops, "gen-data": cmd_gen_data,
}


def cli_main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (CliError, tio.CheckpointError, tio.ConfigError, synth.GenerationError, TR.TrainingError,
            DimensionError, ValueError, OSError) as exc:
        print(f"tarpose {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli_main())
