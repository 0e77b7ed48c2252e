"""Dev run: desk-scale pendulum study, one seed, all variants."""
import logging
import sys
import time

from latentkf.bench import ExperimentConfig, run_cell

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = ExperimentConfig(model="pendulum", noise_levels=(23.0,), d=200, t_train=100,
                       seeds=(seed,), out_dir="/root/devout/pendulum")
for variant in ("encoder", "encoder+prior", "encoder+prior+ekf", "latent-kalmannet"):
    t0 = time.time()
    rec = run_cell(cfg, 23.0, seed, variant)
    print(f"{variant:24s} seed={seed} {rec.mse_db:+.2f} dB (std {rec.std_db:.2f}) "
          f"[{time.time()-t0:.0f}s]", flush=True)
