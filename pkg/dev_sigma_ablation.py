"""Dev ablation: prior-noise magnitude and training length for the pendulum
prior-fed encoder, scored by closed-loop and filtered validation MSE."""
import sys
import time

import numpy as np

from latentkf.bench import ExperimentConfig, get_dataset
from latentkf.datasets import initial_estimates
from latentkf.encoder import (Encoder, EncoderConfig, PriorMode, flatten_split, train_encoder)
from latentkf.filters import latent_ekf_run, tune_q2
from latentkf.nnet import OptimizerConfig
from latentkf.pipeline import prior_encoder_track
from latentkf.ssmodels import pendulum_model

cfg = ExperimentConfig(model="pendulum", noise_levels=(23.0,), d=200, t_train=100,
                       seeds=(0,), out_dir="/root/devout/pendulum")
ds = get_dataset(cfg, 23.0, 0)
spec = pendulum_model(noise_level=23.0)
tr_f, tr_s = flatten_split(ds, "train")
va_f, va_s = flatten_split(ds, "val")
val_idx = ds.split_indices("val")
x0s = initial_estimates(ds, val_idx)


def closed_loop_mse(enc):
    errs = []
    for row, i in enumerate(val_idx):
        est = prior_encoder_track(enc, spec, ds.frames[i].astype(np.float64), x0s[row])
        errs.append(np.mean((est[1:, 0] - ds.states[i, 1:, 0].astype(np.float64)) ** 2))
    return float(np.mean(errs))


def ekf_mse(enc, r_hat):
    def evaluate(q2):
        errs = []
        for row, i in enumerate(val_idx):
            est = latent_ekf_run(lambda fr, pr: enc.infer(fr, pr), spec.dynamics,
                                 spec.selection, q2, r_hat,
                                 ds.frames[i].astype(np.float64), x0s[row])
            errs.append(np.mean((est[1:, 0] - ds.states[i, 1:, 0].astype(np.float64)) ** 2))
        return float(np.mean(errs))
    best, table = tune_q2(evaluate)
    return min(t[1] for t in table), best


sigma = float(sys.argv[1])
epochs = int(sys.argv[2])
t0 = time.time()
enc = Encoder(EncoderConfig(out_dim=1, prior_dim=2, input_scale=1.0), np.random.default_rng(1))
r_hat, log = train_encoder(enc, tr_f, tr_s, va_f, va_s, spec.selection,
                           OptimizerConfig(lr=0.002, weight_decay=1e-5, batch_size=128,
                                           epochs=epochs),
                           PriorMode.noisy_ground_truth(sigma), seed=0)
cl = closed_loop_mse(enc)
ek, q2b = ekf_mse(enc, r_hat)
print(f"sigma={sigma} epochs={epochs}: val_resid={log.val_mse[-1]:.4f} "
      f"closed_loop={cl:.3f} ({10*np.log10(cl):+.2f} dB) "
      f"ekf={ek:.3f} ({10*np.log10(ek):+.2f} dB, q2={q2b}) [{time.time()-t0:.0f}s]",
      flush=True)
