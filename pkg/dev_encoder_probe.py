"""Dev probe: longer encoder training on both systems, watching val MSE."""
import time

import numpy as np

from latentkf.datasets import generate_dataset
from latentkf.encoder import (Encoder, EncoderConfig, PriorMode, default_sigma_prior,
                              flatten_split, train_encoder)
from latentkf.nnet import OptimizerConfig
from latentkf.ssmodels import lorenz_model, pendulum_model

for name, spec, scale in (("pendulum", pendulum_model(noise_level=23.0), 1.0),
                          ("lorenz", lorenz_model(noise_level=2.0), 0.1)):
    ds = generate_dataset(spec, 200, 100, seed=0)
    tr_f, tr_s = flatten_split(ds, "train")
    va_f, va_s = flatten_split(ds, "val")
    for prior in (False, True):
        enc = Encoder(EncoderConfig(out_dim=spec.p, prior_dim=spec.m if prior else None,
                                    input_scale=scale), np.random.default_rng(1))
        t0 = time.time()
        mode = PriorMode.noisy_ground_truth(default_sigma_prior(spec.q2)) if prior else PriorMode.none()
        r_hat, log = train_encoder(enc, tr_f, tr_s, va_f, va_s, spec.selection,
                                   OptimizerConfig(lr=0.002, weight_decay=1e-5,
                                                   batch_size=128, epochs=25),
                                   mode, seed=0, log_every=5)
        print(f"{name} prior={prior}: val trace {[f'{v:.3f}' for v in log.val_mse]} "
              f"final train {log.train_loss[-1]:.4f} ({time.time()-t0:.0f}s)", flush=True)
