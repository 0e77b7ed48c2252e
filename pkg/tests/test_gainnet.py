"""Gain-network architecture, state handling and learning behavior."""

import math

import numpy as np
import pytest

from latentkf import autodiff as ad
from latentkf.autodiff import Value
from latentkf.encoder import Encoder, EncoderConfig
from latentkf.filters import riccati_steady_state
from latentkf.gainnet import GainNet, GainNetConfig
from latentkf.nnet import OptimizerConfig, SGD, clip_grad_norm


def make_net(m=2, p=1, seed=0, dtype=np.float32):
    return GainNet(GainNetConfig.for_dims(m, p), np.random.default_rng(seed), dtype=dtype)


def test_output_reshapes_to_gain_matrix():
    gn = make_net(3, 3)
    st = gn.reset(np.zeros((4, 3)), np.zeros((4, 3)))
    z = np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32)
    gain, _ = gn.infer_step(st, z, z * 0.5, z * 0.2, z * 0.1)
    assert gain.shape == (4, 3, 3)


def test_parameter_count_near_reference_and_below_encoder():
    gn = make_net(3, 3)
    assert 2712 * 0.75 <= gn.num_params() <= 2712 * 1.25
    enc = Encoder(EncoderConfig(out_dim=3, prior_dim=3), np.random.default_rng(1))
    assert gn.num_params() < enc.num_params()
    assert gn.flop_estimate() < enc.flop_estimate()


def test_reset_is_idempotent_and_seeds_caches():
    gn = make_net()
    x0 = np.array([[0.5, -0.1]])
    z0 = np.array([[0.5]])
    a = gn.reset(x0, z0)
    b = gn.reset(x0, z0)
    for field in ("h_q", "h_sigma", "h_s", "prev_z", "prev_prior"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    np.testing.assert_allclose(a.prev_z, z0, rtol=1e-6)
    np.testing.assert_allclose(a.prev_prior, x0, rtol=1e-6)
    assert not np.any(a.h_q)


def test_run_reset_run_reproduces_bitwise():
    gn = make_net()
    rng = np.random.default_rng(2)
    x0 = np.zeros((1, 2), dtype=np.float32)
    z_seq = rng.normal(size=(10, 1, 1)).astype(np.float32)

    def run():
        st = gn.reset(x0, x0[:, :1])
        gains = []
        x_prev = x0
        for t in range(10):
            x_pred = x_prev * 1.1
            gain, st = gn.infer_step(st, z_seq[t], x_pred[:, :1], x_pred, x_prev)
            x_prev = x_pred
            gains.append(gain.copy())
        return np.asarray(gains)

    np.testing.assert_array_equal(run(), run())


def test_zero_head_emits_zero_gain():
    gn = make_net()
    gn.head.w.data = np.zeros_like(gn.head.w.data)
    gn.head.b.data = np.zeros_like(gn.head.b.data)
    st = gn.reset(np.zeros((2, 2)), np.zeros((2, 1)))
    z = np.random.default_rng(3).normal(size=(2, 1)).astype(np.float32)
    gain, _ = gn.infer_step(st, z, z * 0.0, np.ones((2, 2), dtype=np.float32),
                            np.zeros((2, 2), dtype=np.float32))
    np.testing.assert_array_equal(gain, 0.0)


def test_innovation_feature_vanishes_when_prediction_matches():
    gn = make_net()
    st = gn.reset(np.zeros((1, 2)), np.zeros((1, 1)))
    z = np.array([[0.7]], dtype=np.float32)
    f1, f2, f3, f4 = gn.features_np(st, z, z, np.ones((1, 2), dtype=np.float32),
                                    np.zeros((1, 2), dtype=np.float32))
    np.testing.assert_allclose(f2[:, :-1], 0.0, atol=1e-7)  # direction part
    assert f2[0, -1] == pytest.approx(0.0, abs=1e-5)        # appended norm


def test_gain_depends_on_inputs_only_through_features():
    gn = make_net(2, 1)
    rng = np.random.default_rng(4)
    z = rng.normal(size=(1, 1)).astype(np.float32)
    z_pred = rng.normal(size=(1, 1)).astype(np.float32)
    x_pred = rng.normal(size=(1, 2)).astype(np.float32)
    x_prev = rng.normal(size=(1, 2)).astype(np.float32)
    st = gn.reset(x_prev, z * 0.5)

    gain_a, _ = gn.infer_step(st, z, z_pred, x_pred, x_prev)
    # shift every latent quantity by c and every state quantity by d:
    # all four difference features are unchanged
    c = np.float32(2.5)
    d = np.asarray([[1.5, -0.5]], dtype=np.float32)
    st2 = gn.reset(x_prev + d, z * 0.5 + c)
    gain_b, _ = gn.infer_step(st2, z + c, z_pred + c, x_pred + d, x_prev + d)
    np.testing.assert_allclose(gain_a, gain_b, atol=1e-6)


def test_unrolled_gradcheck_five_steps():
    gn = make_net(2, 1, dtype=np.float64)
    rng = np.random.default_rng(5)
    z_seq = rng.normal(size=(5, 3, 1))
    x0 = rng.normal(size=(3, 2))

    def build():
        st = gn.state_to_graph(gn.reset(x0, x0[:, :1]))
        x_prev = Value(x0)
        total = None
        for t in range(5):
            x_pred = x_prev * 1.05
            z_pred = x_pred[:, :1]
            z_t = Value(z_seq[t])
            gain, st = gn.step(st, z_t, z_pred, x_pred, x_prev)
            x_t = x_pred + ad.matmul(gain, (z_t - z_pred).reshape((3, 1, 1))).reshape((3, 2))
            sl = ad.square(x_t).sum()
            total = sl if total is None else total + sl
            x_prev = x_t
        return total

    err = ad.finite_difference_check(build, list(gn.params.values()), max_entries=6)
    assert err < 1e-4


def test_hidden_norm_bounded_on_long_rollout():
    gn = make_net(2, 1)
    rng = np.random.default_rng(6)
    st = gn.reset(np.zeros((1, 2)), np.zeros((1, 1)))
    x_prev = np.zeros((1, 2), dtype=np.float32)
    worst = 0.0
    for t in range(2000):
        x_pred = 0.99 * x_prev
        z = rng.normal(size=(1, 1)).astype(np.float32)
        gain, st = gn.infer_step(st, z, x_pred[:, :1], x_pred, x_prev)
        x_prev = x_pred + (gain[:, :, 0] * (z - x_pred[:, :1]))
        worst = max(worst, gn.hidden_norm(st))
    assert worst < 1e3


def test_non_finite_feature_rejected():
    gn = make_net()
    st = gn.reset(np.zeros((1, 2)), np.zeros((1, 1)))
    with pytest.raises(FloatingPointError):
        gn.infer_step(st, np.array([[np.nan]], dtype=np.float32),
                      np.zeros((1, 1), dtype=np.float32),
                      np.zeros((1, 2), dtype=np.float32),
                      np.zeros((1, 2), dtype=np.float32))


@pytest.mark.slow
def test_trained_gain_approaches_riccati_fixed_point():
    # scalar linear-Gaussian system: the learned gain should settle near the
    # steady-state Kalman gain once the rollout passes its transient
    f_coef, q2, r2 = 0.9, 0.1, 0.5
    _, k_inf = riccati_steady_state(f_coef, 1.0, q2, r2)
    k_inf = float(k_inf[0, 0])

    rng = np.random.default_rng(42)
    d_traj, t_len = 60, 60
    xs = np.zeros((d_traj, t_len))
    zs = np.zeros((d_traj, t_len))
    for d in range(d_traj):
        x = rng.normal()
        xs[d, 0] = x
        zs[d, 0] = x + math.sqrt(r2) * rng.normal()
        for t in range(1, t_len):
            x = f_coef * x + math.sqrt(q2) * rng.normal()
            xs[d, t] = x
            zs[d, t] = x + math.sqrt(r2) * rng.normal()

    gn = GainNet(GainNetConfig.for_dims(1, 1), np.random.default_rng(7))
    opt = SGD(gn.params, OptimizerConfig(lr=5e-3, weight_decay=1e-6))
    batch = 20
    for epoch in range(120):
        order = rng.permutation(d_traj)
        for s in range(0, d_traj, batch):
            idx = order[s: s + batch]
            x_prev = Value(xs[idx, 0:1].astype(np.float32))
            st = gn.state_to_graph(gn.reset(xs[idx, 0:1], xs[idx, 0:1]))
            total = None
            for t in range(1, t_len):
                x_pred = x_prev * np.float32(f_coef)
                z_t = Value(zs[idx, t: t + 1].astype(np.float32))
                gain, st = gn.step(st, z_t, x_pred, x_pred, x_prev)
                x_t = x_pred + ad.matmul(gain, (z_t - x_pred).reshape((len(idx), 1, 1))
                                         ).reshape((len(idx), 1))
                sl = ad.square(x_t - Value(xs[idx, t: t + 1].astype(np.float32))).sum()
                total = sl if total is None else total + sl
                x_prev = x_t
            loss = total * np.float32(1.0 / (len(idx) * (t_len - 1)))
            ad.backward(loss)
            clip_grad_norm(gn.params, 10.0)
            opt.step()

    st = gn.reset(xs[:1, 0:1], xs[:1, 0:1])
    x_prev = xs[:1, 0:1].astype(np.float32)
    late = []
    for t in range(1, t_len):
        x_pred = (f_coef * x_prev).astype(np.float32)
        z_t = zs[:1, t: t + 1].astype(np.float32)
        gain, st = gn.infer_step(st, z_t, x_pred, x_pred, x_prev)
        x_prev = x_pred + gain[:, :, 0] * (z_t - x_pred)
        if t > 50:
            late.append(float(gain.ravel()[0]))
    assert abs(np.mean(late) - k_inf) < 0.1 * abs(k_inf)
