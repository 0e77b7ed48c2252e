#!/usr/bin/env python3
"""Pendulum design-steps study: how much each stage of the tracker buys.

Desk scale by default (D=200, T=100, two noise levels, three seeds);
pass --full-scale for the paper-sized configuration.
"""
import argparse
import logging

from latentkf.bench import ExperimentConfig, run_experiment

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="out/design_steps")
parser.add_argument("--full-scale", action="store_true")
parser.add_argument("--noise-level", type=float, action="append")
parser.add_argument("--seed", type=int, action="append")
args = parser.parse_args()

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
cfg = ExperimentConfig(
    model="pendulum",
    noise_levels=tuple(args.noise_level) if args.noise_level else (),
    seeds=tuple(args.seed) if args.seed else (0, 1, 2),
    out_dir=args.out,
    full_scale=args.full_scale,
)
records = run_experiment(cfg)
for rec in records:
    print(f"{rec.variant:24s} level={rec.noise_level:<6g} seed={rec.seed} "
          f"{rec.mse_db:+7.2f} dB (+/- {rec.std_db:.2f})")
