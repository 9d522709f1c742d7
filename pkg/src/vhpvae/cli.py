"""Command-line interface: dataset generation, training, evaluation, interpolation.

Every command is reproducible from its flags and config file alone; all file
outputs are written atomically.  Exit codes: 0 success, 1 runtime failure
(single diagnostic line on stderr), 2 usage errors.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from .config import parse_config
from .evalmetrics import (active_units, active_units_csv, angle_regression,
                          eval_report_csv, rate_distortion)
from .latentgraph import (build_graph, decode_path, frames_to_strip,
                          insert_queries, path_csv, save_pgm, shortest_path,
                          smoothness_factor)
from .pendulum import (atomic_write_bytes, generate, load_angles, load_tensor,
                       save_angles, save_tensor)
from .trainer import Trainer


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="vhpvae",
        description="Train and probe VAEs with a learned hierarchical prior.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-pendulum", help="render a pendulum image dataset")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output tensor file (.vhpt)")

    p = sub.add_parser("train", help="train a model per config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="dataset tensor file (overrides config)")
    p.add_argument("--out", help="checkpoint path (overrides config)")
    p.add_argument("--log", help="metrics CSV path (overrides config)")

    p = sub.add_parser("eval", help="rate/distortion and test NLL report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="config supplying s_loglik/seed defaults")
    p.add_argument("--s", type=int, help="importance samples for the NLL")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="report CSV (stdout when omitted)")

    p = sub.add_parser("active-units", help="per-dimension KL diagnostics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (stdout when omitted)")

    p = sub.add_parser("regress-angle",
                       help="circular regression error of encoded angles")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--angles", required=True, help="angle CSV from gen-pendulum")
    p.add_argument("--out", help="CSV path (stdout when omitted)")

    p = sub.add_parser("interpolate",
                       help="shortest-path interpolation on the latent graph")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--nodes", type=int, default=1000)
    p.add_argument("--k", type=int, default=18)
    p.add_argument("--from", dest="src", type=int, required=True,
                   help="dataset row (with --data) or graph node id")
    p.add_argument("--to", dest="dst", type=int, required=True)
    p.add_argument("--data", help="encode these rows as query endpoints")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="path CSV of latents")
    p.add_argument("--frames", help="decoded frames tensor file")
    p.add_argument("--images", help="PGM strip of decoded frames")

    p = sub.add_parser("smoothness", help="second-difference RMS of frames")
    p.add_argument("--frames", required=True, help="frames tensor file")
    p.add_argument("--out", help="per-dimension CSV (stdout line regardless)")
    return parser


def _load_matrix(path):
    arr = np.asarray(load_tensor(path), dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError(f"{path}: expected a rank >= 2 tensor")
    return arr.reshape(arr.shape[0], -1)


def _require(value, flag):
    if value is None:
        raise ValueError(f"no {flag} path given (flag or config)")
    return value


def _cmd_gen_pendulum(args):
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    images, angles = generate(args.n, args.seed)
    save_tensor(args.out, images)
    angles_path = os.path.splitext(args.out)[0] + ".angles.csv"
    save_angles(angles_path, angles)
    print(f"wrote {args.n} images to {args.out} and angles to {angles_path}")
    return 0


def _cmd_train(args):
    cfg = parse_config(args.config)
    data_path = _require(args.data or cfg.data, "--data")
    out_path = _require(args.out or cfg.out, "--out")
    data = _load_matrix(data_path)
    model = cfg.create_model(data.shape[1])
    trainer = Trainer(model, cfg.schedule_config(), cfg.train_config())
    trainer.run(data)
    trainer.save(out_path)
    log_path = args.log or cfg.log
    if log_path is not None:
        trainer.save_metrics(log_path)
    state = trainer.schedule_state
    print(f"trained {trainer.step} steps / {trainer.epoch} epochs; "
          f"phase={state.phase} beta={state.beta:.6g}; checkpoint {out_path}")
    return 0


def _cmd_eval(args):
    cfg = parse_config(args.config) if args.config else None
    s = args.s if args.s is not None else (cfg.s_loglik if cfg else 1000)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    trainer = Trainer.load(args.ckpt)
    data = _load_matrix(args.data)
    report = rate_distortion(trainer.model, data, s_loglik=s, seed=seed)
    text = eval_report_csv(report)
    if args.out:
        atomic_write_bytes(args.out, text.encode("ascii"))
        print(f"wrote report to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_active_units(args):
    trainer = Trainer.load(args.ckpt)
    data = _load_matrix(args.data)
    report = active_units(trainer.model, data, threshold=args.threshold,
                          seed=args.seed)
    text = active_units_csv(report)
    if args.out:
        atomic_write_bytes(args.out, text.encode("ascii"))
        print(f"wrote report to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_regress_angle(args):
    trainer = Trainer.load(args.ckpt)
    data = _load_matrix(args.data)
    angles = load_angles(args.angles)
    error = angle_regression(trainer.model, data, angles)
    line = f"mean_abs_error_rad,{repr(error)}"
    if args.out:
        atomic_write_bytes(args.out, f"metric,value\n{line}\n".encode("ascii"))
    print(line)
    return 0


def _cmd_interpolate(args):
    trainer = Trainer.load(args.ckpt)
    model = trainer.model
    graph = build_graph(model, args.nodes, args.k, args.seed)
    if args.data:
        data = _load_matrix(args.data)
        for idx in (args.src, args.dst):
            if not 0 <= idx < data.shape[0]:
                raise ValueError(f"dataset row {idx} out of range")
        a, b = insert_queries(graph, model, data[args.src], data[args.dst])
    else:
        a, b = args.src, args.dst
    result = shortest_path(graph, a, b)
    frames = decode_path(model, result)
    atomic_write_bytes(args.out, path_csv(result).encode("ascii"))
    if args.frames:
        save_tensor(args.frames, frames)
    if args.images:
        side = math.isqrt(frames.shape[1])
        if side * side != frames.shape[1]:
            raise ValueError("--images needs square frames")
        save_pgm(args.images, frames_to_strip(frames.reshape(-1, side, side)))
    if len(result.ids) >= 3:
        _, smooth = smoothness_factor(frames)
    else:
        smooth = float("nan")
    print(f"path hops={len(result.ids) - 1} length={result.length:.6g} "
          f"smoothness={smooth:.6g}")
    return 0


def _cmd_smoothness(args):
    frames = np.asarray(load_tensor(args.frames), dtype=np.float64)
    if frames.ndim < 2:
        raise ValueError("frames tensor must have rank >= 2")
    per_dim, aggregate = smoothness_factor(frames.reshape(frames.shape[0], -1))
    if args.out:
        lines = ["dimension,rms_second_difference"]
        lines.extend(f"{i},{repr(float(v))}" for i, v in enumerate(per_dim))
        lines.append(f"aggregate,{repr(aggregate)}")
        atomic_write_bytes(args.out, ("\n".join(lines) + "\n").encode("ascii"))
    print(f"aggregate,{repr(aggregate)}")
    return 0


_COMMANDS = {
    "gen-pendulum": _cmd_gen_pendulum,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "active-units": _cmd_active_units,
    "regress-angle": _cmd_regress_angle,
    "interpolate": _cmd_interpolate,
    "smoothness": _cmd_smoothness,
}


def dispatch(argv):
    """Parse argv and run one command; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
