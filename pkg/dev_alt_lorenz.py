"""Dev probe: alternating recipes for the Lorenz tracker."""
import sys
import time

import numpy as np

from latentkf.bench import ExperimentConfig, get_dataset, train_variant
from latentkf.datasets import initial_estimates
from latentkf.metrics import mse_db
from latentkf.pipeline import LatentKalmanNet, TrainSchedule
from latentkf.ssmodels import lorenz_model

alt_epochs = int(sys.argv[1])
enc_lr = float(sys.argv[2])
gain_lr = float(sys.argv[3])
window = None if sys.argv[4] == "full" else int(sys.argv[4])
label = f"alt={alt_epochs} enc_lr={enc_lr} gain_lr={gain_lr} w={sys.argv[4]}"

cfg = ExperimentConfig(model="lorenz", noise_levels=(2.0,), d=200, t_train=100,
                       seeds=(0,), out_dir="/root/devout/lorenz")
ds = get_dataset(cfg, 2.0, 0)
spec = lorenz_model(noise_level=2.0)
warm = train_variant(cfg, 2.0, 0, "encoder+prior", ds)

kn = LatentKalmanNet.build(spec, seed=0)
kn.encoder.load_state(warm.encoder.state_arrays())
schedule = TrainSchedule(warm_epochs=0, alt_epochs=alt_epochs, traj_batch=20,
                         gain_lr=gain_lr, enc_lr=enc_lr,
                         sigma_prior=3 * np.sqrt(0.005),
                         bptt_window=window, clip_norm=10.0)
t0 = time.time()
log = kn.train(ds, schedule, seed=0)
for epoch in range(0, alt_epochs, max(1, alt_epochs // 10)):
    entries = [(p, l) for e, p, l in log.alt_loss if e == epoch]
    print(f"  epoch {epoch:3d}: " + "  ".join(f"{p}={l:8.3f}" for p, l in entries), flush=True)
gn = np.asarray(log.grad_norms)
print(f"  grad norms: med={np.median(gn):.2f} p90={np.percentile(gn, 90):.2f} max={gn.max():.2f}")

idx = ds.split_indices("test")
x0s = initial_estimates(ds, idx)
ests = np.stack([kn.infer_trajectory(ds.frames[i].astype(np.float64), x0s[row],
                                     batch_trunk=True)
                 for row, i in enumerate(idx)])
overall, spread = mse_db(ests, ds.states[idx].astype(np.float64))
print(f"{label}: test {overall:+.2f} dB (std {spread:.2f}) [{time.time()-t0:.0f}s]", flush=True)
