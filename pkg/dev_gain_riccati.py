"""Dev probe: train GainNet alone on a scalar linear-Gaussian SS model and
compare the late-rollout gains against the steady-state Riccati gain."""
import time

import numpy as np

from latentkf import autodiff as ad
from latentkf.autodiff import Value
from latentkf.filters import riccati_steady_state
from latentkf.gainnet import GainNet, GainNetConfig, GainNetState
from latentkf.nnet import OptimizerConfig, SGD, clip_grad_norm

rng = np.random.default_rng(42)

# scalar model: x' = 0.9 x + e, z = x + v
F, H, q2, r2 = 0.9, 1.0, 0.1, 0.5
cov_prior, k_inf = riccati_steady_state(F, H, q2, r2)
print("steady-state gain:", k_inf.ravel()[0], "prior var:", cov_prior.ravel()[0])

D, T = 60, 60
xs = np.zeros((D, T))
zs = np.zeros((D, T))
for d in range(D):
    x = rng.normal() * 1.0
    xs[d, 0] = x
    zs[d, 0] = x + np.sqrt(r2) * rng.normal()
    for t in range(1, T):
        x = F * x + np.sqrt(q2) * rng.normal()
        xs[d, t] = x
        zs[d, t] = x + np.sqrt(r2) * rng.normal()

gn = GainNet(GainNetConfig.for_dims(1, 1), np.random.default_rng(7))
opt = SGD(gn.params, OptimizerConfig(lr=5e-3, weight_decay=1e-6))

B = 20
t0 = time.time()
for epoch in range(150):
    order = rng.permutation(D)
    tot = 0.0
    for s in range(0, D, B):
        idx = order[s: s + B]
        x0 = xs[idx, 0:1] + 0.1 * rng.standard_normal((len(idx), 1))
        x_prev = Value(x0.astype(np.float32))
        gstate = gn.state_to_graph(gn.reset(x0, x0))
        total = None
        for t in range(1, T):
            x_pred = x_prev * np.float32(F)
            z_pred = x_pred
            z_t = Value(zs[idx, t: t + 1].astype(np.float32))
            gain, gstate = gn.step(gstate, z_t, z_pred, x_pred, x_prev)
            x_t = x_pred + ad.matmul(gain, (z_t - z_pred).reshape((len(idx), 1, 1))).reshape((len(idx), 1))
            err = x_t - Value(xs[idx, t: t + 1].astype(np.float32))
            sl = ad.square(err).sum()
            total = sl if total is None else total + sl
            x_prev = x_t
        loss = total * np.float32(1.0 / (len(idx) * (T - 1)))
        ad.backward(loss)
        clip_grad_norm(gn.params, 10.0)
        opt.step()
        tot += float(loss.data)
    if epoch % 25 == 0:
        print(f"epoch {epoch}: loss {tot / (D // B):.4f}  ({time.time()-t0:.1f}s)")

# rollout once more, inspect late gains
x0 = xs[:1, 0:1]
gstate = gn.reset(x0, x0)
x_prev = x0.astype(np.float32)
late_gains = []
for t in range(1, T):
    x_pred = (F * x_prev).astype(np.float32)
    z_t = zs[:1, t: t + 1].astype(np.float32)
    gain, gstate = gn.infer_step(gstate, z_t, x_pred, x_pred, x_prev)
    x_prev = x_pred + gain[:, :, 0] * (z_t - x_pred)
    if t > 50:
        late_gains.append(gain.ravel()[0])
print("late gains:", np.round(late_gains, 4))
print("riccati gain:", k_inf.ravel()[0])
rel = abs(np.mean(late_gains) - k_inf.ravel()[0]) / abs(k_inf.ravel()[0])
print("relative gap:", rel)
