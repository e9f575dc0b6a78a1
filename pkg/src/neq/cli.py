"""Command-line front end: ``neq train|sweep|plot|replay-mask|make-digits``.

Every :class:`~neq.config.TrainConfig` field has a flag (``mu_eq`` becomes
``--mu-eq``); flags override the config file.  Runs without an explicit
output directory go under ``$NEQ_OUTPUT_ROOT`` (default ``runs``).

On failure the command prints one JSON line to stderr, for example
``{"error": "ConfigError", "field": "epsilon", "message": "must be >= 0"}``,
and exits with status 2 for bad input or 1 for failures during a run.
"""

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from neq.config import ConfigError, TrainConfig, apply_overrides, dump_config, parse_config

OUTPUT_ROOT_ENV = "NEQ_OUTPUT_ROOT"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# ---------------------------------------------------------------------------
# config flags
# ---------------------------------------------------------------------------


def _flag(name):
    return "--" + name.replace("_", "-")


def _list_of(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}")
    return parse


def _divisor(text):
    parts = [float(v) for v in text.split(",")]
    return parts[0] if len(parts) == 1 else parts


def add_config_flags(parser):
    group = parser.add_argument_group("config overrides")
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        value = getattr(defaults, f.name)
        kw = {"dest": f.name, "default": None}
        if f.name == "lr_divisor":
            kw["type"] = _divisor
        elif isinstance(value, bool):
            kw["action"] = argparse.BooleanOptionalAction
        elif isinstance(value, int):
            kw["type"] = int
        elif isinstance(value, float):
            kw["type"] = float
        elif isinstance(value, list):
            kw["type"] = _list_of(int)
        else:
            kw["type"] = str
        group.add_argument(_flag(f.name), **kw)


def _overrides(args):
    return {f.name: getattr(args, f.name) for f in fields(TrainConfig)
            if getattr(args, f.name, None) is not None}


def resolve_config(args, extra=None):
    overrides = _overrides(args)
    overrides.update(extra or {})
    if args.config:
        return parse_config(args.config, overrides)
    return apply_overrides(TrainConfig(), overrides).validate()


def _default_dir(cfg, *parts):
    return output_root().joinpath(*parts, f"{cfg.policy}-seed{cfg.seed}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _run(cfg, plot=True):
    from neq.metrics import emit_plots
    from neq.train import run_training

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(cfg))
    result = run_training(cfg)
    if plot:
        emit_plots(result.metrics, out / "plot.svg", title=f"{cfg.arch} {cfg.policy} seed {cfg.seed}")
    return result


def _summary(result):
    last = result.metrics[-1]
    flops = float(np.mean(result.iteration_flops))
    return {
        "final_accuracy": last.test_accuracy,
        "mean_bprop_flops": flops,
        "flops_ratio": flops / result.baseline_flops if result.baseline_flops else float("nan"),
        "mean_updated_fraction": float(np.mean([r.updated_fraction for r in result.metrics])),
    }


def cmd_train(args):
    cfg = resolve_config(args)
    if not cfg.output_dir:
        cfg.output_dir = str(_default_dir(cfg))
    result = _run(cfg, plot=not args.no_plot)
    print(json.dumps({"output_dir": cfg.output_dir, **_summary(result)}))
    return 0


def _grid_value(text):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_grid(items):
    grid = {}
    known = {f.name for f in fields(TrainConfig)}
    for item in items:
        key, sep, values = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not values:
            raise UsageError(f"grid entry {item!r} is not key=v1,v2,...")
        if key not in known:
            raise ConfigError(key, "unknown key")
        grid[key] = [_grid_value(v.strip()) for v in values.split(",")]
    return grid


SWEEP_HEADER = ["runs", "final_accuracy_mean", "final_accuracy_std", "mean_bprop_flops_mean",
                "mean_bprop_flops_std", "flops_ratio_mean", "mean_updated_fraction_mean"]


def cmd_sweep(args):
    grid = parse_grid(args.grid)
    seeds = args.seeds
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    base = resolve_config(args)
    root = Path(base.output_dir) if base.output_dir else output_root() / "sweep"
    keys = list(grid)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, combo))
        tag = "_".join(f"{k}={v}" for k, v in point.items()) or "base"
        summaries = []
        for seed in seeds:
            cfg = apply_overrides(base, {**point, "seed": seed}).validate()
            cfg.output_dir = str(root / tag / f"seed{seed}")
            summaries.append(_summary(_run(cfg, plot=not args.no_plot)))
        acc = np.array([s["final_accuracy"] for s in summaries])
        flops = np.array([s["mean_bprop_flops"] for s in summaries])
        rows.append([*combo, len(seeds), acc.mean(), acc.std(), flops.mean(), flops.std(),
                     np.mean([s["flops_ratio"] for s in summaries]),
                     np.mean([s["mean_updated_fraction"] for s in summaries])])
        print(f"{tag}: accuracy {100 * acc.mean():.2f} +- {100 * acc.std():.2f}  "
              f"flops {flops.mean():.4g} +- {flops.std():.3g}")
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys + SWEEP_HEADER)
        for row in rows:
            w.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in row])
    print(json.dumps({"summary": str(root / "summary.csv"), "points": len(rows)}))
    return 0


def cmd_plot(args):
    from neq.metrics import emit_plots, read_metrics

    log = read_metrics(args.metrics)
    out = Path(args.out) if args.out else Path(args.metrics).with_name("plot.svg")
    milestones = args.milestones if args.milestones is not None else None
    emit_plots(log, out, milestones=milestones, title=args.title)
    print(json.dumps({"plot": str(out)}))
    return 0


def cmd_replay(args):
    cfg = resolve_config(args, {"policy": "replay", "replay_file": str(Path(args.masks).resolve())})
    if not cfg.output_dir:
        cfg.output_dir = str(_default_dir(cfg))
    _run(cfg, plot=not args.no_plot)
    report = {"output_dir": cfg.output_dir}
    if args.compare:
        same = Path(args.compare).read_bytes() == (Path(cfg.output_dir) / "metrics.csv").read_bytes()
        report["identical"] = same
        print(json.dumps(report))
        return 0 if same else 3
    print(json.dumps(report))
    return 0


def cmd_make_digits(args):
    from neq.data import make_digits, write_idx_dataset

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = make_digits(args.n_train, args.n_test, args.noise, args.seed)
    write_idx_dataset(train, out / "train-images.idx", out / "train-labels.idx")
    write_idx_dataset(test, out / "test-images.idx", out / "test-labels.idx")
    print(json.dumps({"output_dir": str(out), "train": len(train), "test": len(test)}))
    return 0


def build_parser():
    parser = _Parser(prog="neq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log one line per epoch")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--no-plot", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid over config fields and seeds")
    p.add_argument("--config")
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="repeatable, e.g. --grid epsilon=0.0001,0.001")
    p.add_argument("--seeds", type=_list_of(int), default=[0], help="comma-separated seeds")
    p.add_argument("--no-plot", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render a metrics CSV")
    p.add_argument("metrics")
    p.add_argument("--out")
    p.add_argument("--title")
    p.add_argument("--milestones", type=_list_of(int))
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("replay-mask", help="retrain under a recorded mask file")
    p.add_argument("--config")
    p.add_argument("--masks", required=True, help="masks.txt written by a previous run")
    p.add_argument("--compare", help="metrics.csv that the replay must reproduce byte for byte")
    p.add_argument("--no-plot", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("make-digits", help="write the augmented digits IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=8000)
    p.add_argument("--n-test", type=int, default=2000)
    p.set_defaults(func=cmd_make_digits)
    return parser


def _fail(exc, status):
    payload = {"error": type(exc).__name__}
    if isinstance(exc, ConfigError):
        payload["field"] = exc.field
        payload["message"] = exc.message
    else:
        payload["message"] = str(exc)
    print(json.dumps(payload), file=sys.stderr)
    return status


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(exc, 2)
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
