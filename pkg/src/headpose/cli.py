"""Command-line entry points: synth, train, eval, predict, gradcheck."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from headpose import __version__, data, gradcheck, posenet
from headpose import train as T


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field; unset flags leave the config file / defaults alone."""
    for f in dataclasses.fields(T.TrainConfig):
        default = f.default
        if isinstance(default, bool):
            p.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, tuple):
            p.add_argument(_flag(f.name), dest=f.name, type=type(default[0]), nargs=len(default), default=None,
                           metavar=f.name.upper())
        else:
            p.add_argument(_flag(f.name), dest=f.name, type=type(default), default=None)
    p.add_argument("--config", type=Path, help="flat key = value file; flags override it")


def config_from_args(args) -> T.TrainConfig:
    cfg = T.TrainConfig()
    if getattr(args, "config", None) is not None:
        cfg = T.parse_config_text(args.config.read_text(), cfg)
    overrides = {}
    for f in dataclasses.fields(T.TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[f.name] = tuple(v) if isinstance(v, list) else v
    return dataclasses.replace(cfg, **overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="headpose", description="Siamese depth-only head pose regression.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--subjects", type=int, default=4)
    s.add_argument("--frames", type=int, default=50, help="frames per subject")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--first-subject", type=int, default=0)
    s.add_argument("--pose-center", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar="DEG")
    s.add_argument("--pose-span", type=float, nargs=3, default=(60.0, 50.0, 75.0), metavar="DEG",
                   help="half-widths for pitch, roll, yaw")

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--val-fraction", type=float, default=0.1, help="share of subjects held out")
    _add_train_flags(t)

    e = sub.add_parser("eval", help="MAE report for a dataset")
    e.add_argument("--params", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--manifest", type=Path, help="training manifest; supplies the angle range")

    p = sub.add_parser("predict", help="timed per-frame predictions")
    p.add_argument("--params", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--frame-id", action="append", help="restrict to these frames (repeatable)")
    p.add_argument("--limit", type=int)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--coords", type=int, default=200, help="coordinates per layer")
    g.add_argument("--batch", type=int, default=1)
    return parser


def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise FileNotFoundError(f"{what} directory not found: {path}")


def cmd_synth(args) -> int:
    dist = data.PoseDistribution(tuple(args.pose_center), tuple(args.pose_span))
    cfg = data.SynthConfig(subjects_offset=args.first_subject)
    ds = data.generate_dataset(args.out, args.subjects, args.frames, dist, args.seed, cfg)
    (args.out / "manifest.json").write_text(json.dumps({
        "command": "synth", "seed": args.seed, "subjects": args.subjects, "frames_per_subject": args.frames,
        "first_subject": args.first_subject, "pose_center": list(dist.center), "pose_span": list(dist.span),
        "code_version": __version__}, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds)} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    _require_dir(args.data, "data")
    cfg = config_from_args(args)
    ds = data.Dataset.load(args.data)
    train_set, val_set = ds.holdout_split(args.val_fraction) if args.val_fraction > 0 else (ds, None)
    args.out.mkdir(parents=True, exist_ok=True)
    T.write_manifest(args.out, cfg, command="train", data=str(args.data), val_fraction=args.val_fraction,
                     train_subjects=train_set.subjects(), val_subjects=val_set.subjects() if val_set else [])
    params, hist = T.train(cfg, train_set, val_set, log_path=args.out / "train.log",
                           checkpoint_path=args.out / "params.bin")
    posenet.save_params(params, args.out / "params.bin")
    last = hist[-1]
    print(last.line())
    return 0


def cmd_eval(args) -> int:
    _require_dir(args.data, "data")
    cfg = T.read_manifest(args.manifest) if args.manifest else T.TrainConfig()
    params = posenet.load_params(args.params)
    rep = T.evaluate(params, data.Dataset.load(args.data), cfg.range)
    args.out.mkdir(parents=True, exist_ok=True)
    rep.export_csv(args.out / "per_frame.csv")
    rep.export_json(args.out / "summary.json")
    T.write_manifest(args.out, cfg, command="eval", params=str(args.params), data=str(args.data))
    mae = " ".join(f"{n}={v:.4f}" for n, v in zip(T.ANGLE_NAMES, rep.mae_degrees))
    print(f"frames={len(rep.frame_ids)} failed={rep.n_failed} mae_deg {mae}")
    return 0


def cmd_predict(args) -> int:
    _require_dir(args.data, "data")
    params = posenet.load_params(args.params)
    ds = data.Dataset.load(args.data)
    anns = ds.annotations
    if args.frame_id:
        want = set(args.frame_id)
        anns = [a for a in anns if a.frame_id in want]
        missing = want - {a.frame_id for a in anns}
        if missing:
            raise KeyError(f"unknown frame id(s): {', '.join(sorted(missing))}")
    if args.limit is not None:
        anns = anns[:args.limit]
    latencies = []
    for ann in anns:
        res = T.predict(params, ds.frame(ann.frame_id), ann)
        latencies.append(res.latency_s)
        if res.error:
            print(f"{ann.frame_id} error={res.error}")
        else:
            p, r, y = res.angles_degrees
            print(f"{ann.frame_id} pitch={p:.3f} roll={r:.3f} yaw={y:.3f} ms={1e3 * res.latency_s:.2f}")
    if latencies:
        print(f"mean_latency_ms={1e3 * float(np.mean(latencies)):.3f} frames={len(latencies)}")
    return 0


def cmd_gradcheck(args) -> int:
    params = posenet.build_network(args.seed, dtype=np.float64)
    x = np.random.default_rng(args.seed).standard_normal((args.batch, *posenet.INPUT_SHAPE))
    rep = gradcheck.grad_check(params, gradcheck.sum_of_squares_loss, x, coords_per_layer=args.coords,
                               seed=args.seed)
    print(rep.format())
    return 0 if rep.passed else 1


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError) as exc:
        parser.print_usage(sys.stderr)
        print(f"headpose {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
