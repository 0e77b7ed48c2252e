#!/usr/bin/env python3
"""Lorenz attractor studies: full-information accuracy, length
generalization, Taylor-order and decimation mismatch, and latency."""
import argparse
import logging

from latentkf.bench import ExperimentConfig, run_experiment, run_latency, run_mismatch

parser = argparse.ArgumentParser()
parser.add_argument("study", choices=("full", "length", "taylor", "decimation", "latency"))
parser.add_argument("--out", default="out/lorenz")
parser.add_argument("--full-scale", action="store_true")
parser.add_argument("--noise-level", type=float, action="append")
parser.add_argument("--seed", type=int, action="append")
args = parser.parse_args()

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
base = dict(
    model="lorenz",
    noise_levels=tuple(args.noise_level) if args.noise_level else (),
    seeds=tuple(args.seed) if args.seed else (0, 1, 2),
    out_dir=f"{args.out}/{args.study}",
    full_scale=args.full_scale,
)

if args.study == "full":
    records = run_experiment(ExperimentConfig(**base))
elif args.study == "length":
    # train-length checkpoints reused, evaluation on ten-fold longer runs
    records = run_experiment(ExperimentConfig(**base, t_test=1000))
elif args.study == "taylor":
    records = run_mismatch("taylor", ExperimentConfig(**base))
elif args.study == "decimation":
    records = run_mismatch("decimation", ExperimentConfig(**base))
else:
    rows = run_latency(ExperimentConfig(**base))
    for row in rows:
        print(f"{row['variant']:42s} {row['us_per_step']:9.1f} us/step  "
              f"params={row['param_count']}  ops={row['op_count']}")
    raise SystemExit(0)

for rec in records:
    print(f"{rec.variant:32s} level={rec.noise_level:<6g} seed={rec.seed} "
          f"{rec.mse_db:+7.2f} dB (+/- {rec.std_db:.2f})")
