"""Command-line front end for dataset generation, training, evaluation,
mismatch/latency studies and plotting."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .bench import (ExperimentConfig, VARIANTS, plot_metrics, run_cell, run_experiment,
                    run_latency, run_mismatch, get_dataset, train_variant)
from .datasets import save_dataset


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", choices=("pendulum", "lorenz"), default="pendulum")
    parser.add_argument("--noise-level", type=float, action="append", default=None,
                        help="benchmark noise-level axis value; repeatable")
    parser.add_argument("--variant", action="append", default=None, choices=VARIANTS,
                        help="tracking variant; repeatable, default all")
    parser.add_argument("--trajectories", type=int, default=200,
                        help="dataset size D")
    parser.add_argument("--t-train", type=int, default=100)
    parser.add_argument("--t-test", type=int, default=None)
    parser.add_argument("--taylor-j", type=int, default=5,
                        help="Taylor order used by filters and pipelines")
    parser.add_argument("--decimate", type=int, default=1,
                        help="dense-simulation subsampling ratio (1 = off)")
    parser.add_argument("--seed", type=int, action="append", default=None,
                        help="experiment seed; repeatable")
    parser.add_argument("--out", default="out")
    parser.add_argument("--full-scale", action="store_true",
                        help="paper-scale data and epochs instead of desk scale")
    parser.add_argument("-v", "--verbose", action="store_true")


def _config(args) -> ExperimentConfig:
    return ExperimentConfig(
        model=args.model,
        noise_levels=tuple(args.noise_level) if args.noise_level else (),
        variants=tuple(args.variant) if args.variant else VARIANTS,
        d=args.trajectories,
        t_train=args.t_train,
        t_test=args.t_test,
        taylor_j_train=args.taylor_j,
        decimation_ratio=args.decimate,
        seeds=tuple(args.seed) if args.seed else (0, 1, 2),
        out_dir=args.out,
        full_scale=args.full_scale,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="latentkf",
                                     description="latent-space learned Kalman filtering benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="generate and store datasets")
    _add_common(p_gen)

    p_train = sub.add_parser("train", help="train variants into the checkpoint cache")
    _add_common(p_train)

    p_eval = sub.add_parser("evaluate", help="train/load variants, write metrics.csv and plots")
    _add_common(p_eval)

    p_mis = sub.add_parser("mismatch", help="taylor/decimation robustness study")
    _add_common(p_mis)
    p_mis.add_argument("--kind", choices=("taylor", "decimation"), required=True)

    p_lat = sub.add_parser("latency", help="per-step inference latency comparison")
    _add_common(p_lat)

    p_plot = sub.add_parser("plot", help="render an MSE-vs-noise plot from a metrics CSV")
    p_plot.add_argument("csv", help="path to a metrics.csv file")
    p_plot.add_argument("--out", default=None, help="output image path")
    p_plot.add_argument("-v", "--verbose", action="store_true")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "plot":
        out = plot_metrics(args.csv, args.out)
        if out:
            print(out)
        return 0

    cfg = _config(args)
    if args.command == "generate":
        for level in cfg.noise_levels:
            for seed in cfg.seeds:
                ds = get_dataset(cfg, level, seed)
                path = os.path.join(cfg.out_dir, f"dataset_{cfg.model}_l{level}_s{seed}")
                save_dataset(ds, path)
                print(path)
        return 0
    if args.command == "train":
        for level in cfg.noise_levels:
            for variant in cfg.variants:
                for seed in cfg.seeds:
                    train_variant(cfg, level, seed, variant)
                    print(f"trained {variant} level={level} seed={seed}")
        return 0
    if args.command == "evaluate":
        records = run_experiment(cfg)
        for rec in records:
            print(f"{rec.variant:32s} level={rec.noise_level:<6g} seed={rec.seed} "
                  f"mse={rec.mse_db:+.2f} dB (+/- {rec.std_db:.2f})")
        print(os.path.join(cfg.out_dir, "metrics.csv"))
        return 0
    if args.command == "mismatch":
        records = run_mismatch(args.kind, cfg)
        for rec in records:
            print(f"{rec.variant:32s} level={rec.noise_level:<6g} seed={rec.seed} "
                  f"mse={rec.mse_db:+.2f} dB")
        return 0
    if args.command == "latency":
        rows = run_latency(cfg)
        for row in rows:
            print(f"{row['variant']:40s} {row['us_per_step']:10.1f} us/step "
                  f"params={row['param_count']} ops={row['op_count']}")
        return 0
    parser.error(f"unhandled command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
