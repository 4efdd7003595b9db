"""Command-line entry points: train, infer, evaluate, ablate, signature."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import sigcore, train
from .config import TrainConfig, load_config, parse_overrides


def _config_from_args(args) -> TrainConfig:
    overrides = parse_overrides(args.set or [])
    for name in ("task", "seed", "epochs", "outdir"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if args.config:
        return load_config(args.config, overrides)
    return TrainConfig(**overrides)


def _add_config_flags(parser):
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field (repeatable)")
    parser.add_argument("--task")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--outdir")


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    record = train.run_train(cfg)
    metrics = record.metrics
    print(f"run {record.config_hash} seed {record.seed}: "
          f"y0={metrics.y0:.6g} rpe={metrics.rpe_percent} "
          f"nan%={metrics.nan_rate_percent:.3g} out={record.outdir}")
    return 0


def cmd_infer(args) -> int:
    y0, info = train.run_infer(args.checkpoint, n_paths=args.paths, seed=args.seed)
    out = {"y0": y0, **{k: v for k, v in info.items() if k != "evals"}}
    print(json.dumps(out, indent=1, sort_keys=True, default=float))
    return 0


def cmd_evaluate(args) -> int:
    grid = tuple(float(q) for q in args.cvar_grid.split(",")) if args.cvar_grid else None
    report = train.run_evaluate(args.checkpoint, cvar_grid=grid, n_paths=args.paths)
    flat = report.to_flat_dict()
    out = Path(args.out or "evaluation")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(flat))
        writer.writeheader()
        writer.writerow(flat)
    out.with_suffix(".json").write_text(json.dumps(flat, indent=1, sort_keys=True))
    print(json.dumps(flat, indent=1, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    values: list = []
    if args.values:
        for raw in args.values.split(","):
            raw = raw.strip()
            if not raw:
                continue
            if args.knob == "malliavin" or args.knob == "use_signatures":
                values.append(raw.lower() in ("1", "true", "yes", "on"))
            else:
                values.append(int(raw))
    rows = train.run_ablate(cfg, args.knob, values)
    out = Path(args.out or (Path(cfg.outdir) / f"ablate_{args.knob}.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    train.write_ablate_csv(out, rows)
    for row in rows:
        print(row)
    return 0


def cmd_signature(args) -> int:
    raw = np.genfromtxt(args.path, delimiter=",", dtype=float)
    if np.isnan(raw).any():  # header row present
        raw = np.genfromtxt(args.path, delimiter=",", dtype=float, skip_header=1)
    samples = raw[:, None] if raw.ndim == 1 else raw
    if args.no_time_augment:
        points = samples
    else:
        t = np.linspace(0.0, 1.0, samples.shape[0])[:, None]
        points = np.concatenate([t, samples], axis=1)
    alphabet = points.shape[1]
    state = sigcore.new_logsig_state(alphabet, args.depth)
    for a, b in zip(points[:-1], points[1:]):
        state = sigcore.update_logsig(state, b - a)
    header = ",".join(str(w) for w in state.basis)
    line = ",".join(repr(float(c)) for c in state.coords)
    text = header + "\n" + line + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sigbsde",
        description="Path-dependent BSDE solver with log-signature controls",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    _add_config_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_infer = sub.add_parser("infer", help="value a trained checkpoint")
    p_infer.add_argument("checkpoint")
    p_infer.add_argument("--paths", type=int)
    p_infer.add_argument("--seed", type=int)
    p_infer.set_defaults(fn=cmd_infer)

    p_eval = sub.add_parser("evaluate", help="metrics report for a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--paths", type=int)
    p_eval.add_argument("--cvar-grid", dest="cvar_grid")
    p_eval.add_argument("--out")
    p_eval.set_defaults(fn=cmd_evaluate)

    p_abl = sub.add_parser("ablate", help="one-factor sweep")
    _add_config_flags(p_abl)
    p_abl.add_argument("--knob", required=True)
    p_abl.add_argument("--values", help="comma-separated values")
    p_abl.add_argument("--out")
    p_abl.set_defaults(fn=cmd_ablate)

    p_sig = sub.add_parser("signature", help="log-signature coordinates of a CSV path")
    p_sig.add_argument("path")
    p_sig.add_argument("--depth", type=int, default=3)
    p_sig.add_argument("--no-time-augment", action="store_true")
    p_sig.add_argument("--out")
    p_sig.set_defaults(fn=cmd_signature)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
