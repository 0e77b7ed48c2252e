"""Recurrent Kalman-gain network.

Replaces the covariance recursion of the extended Kalman filter with three
small gated-recurrent cells mirroring the process-noise / state-covariance /
innovation-covariance flow, fed by per-step difference features and emitting
the m x p gain matrix. The prediction and update equations stay model-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .nnet import Dense, GRUCell, ParamSet, load_checkpoint, save_checkpoint

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class GainNetConfig:
    m: int
    p: int
    hidden_q: int
    hidden_sigma: int
    hidden_s: int
    expand: int

    @classmethod
    def for_dims(cls, m: int, p: int) -> "GainNetConfig":
        # widths track the covariance sizes (~1.1 * dim^2) but stay small
        # enough that the whole network remains far cheaper than the encoder
        hq = max(6, math.ceil(1.1 * m * m))
        hs = max(6, math.ceil(1.1 * p * p))
        return cls(m=m, p=p, hidden_q=hq, hidden_sigma=hq, hidden_s=hs, expand=hs)


@dataclass
class GainNetState:
    """Per-rollout recurrent context; arrays during inference, graph Values
    during training."""

    h_q: object
    h_sigma: object
    h_s: object
    prev_z: object       # latent feature from the previous step
    prev_prior: object   # previous one-step state prediction


def _normalize_np(f: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(f * f, axis=1, keepdims=True) + _NORM_EPS)
    return np.concatenate([f / norm, norm], axis=1)


def _normalize_graph(f: Value) -> Value:
    norm = ad.sqrt(ad.square(f).sum(axis=1, keepdims=True)
                   + np.asarray(_NORM_EPS, dtype=f.data.dtype))
    return ad.concat([f / norm, norm], axis=1)


class GainNet:
    def __init__(self, cfg: GainNetConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        m, p = cfg.m, cfg.p
        self.gru_q = GRUCell(m + 1, cfg.hidden_q, rng, dtype)
        self.gru_sigma = GRUCell(m + 1 + cfg.hidden_q, cfg.hidden_sigma, rng, dtype)
        self.expand = Dense(cfg.hidden_sigma, cfg.expand, rng, dtype)
        self.gru_s = GRUCell(2 * (p + 1) + cfg.expand, cfg.hidden_s, rng, dtype)
        self.head = Dense(cfg.hidden_sigma + cfg.hidden_s, m * p, rng, dtype)
        # start near a mild observation-trusting gain instead of dead reckoning
        self.head.w.data = (0.1 * self.head.w.data).astype(dtype)
        self.head.b.data = (0.5 * np.eye(m, p).reshape(-1)).astype(dtype)
        self.params = ParamSet()
        self.gru_q.register(self.params, "gru_q")
        self.gru_sigma.register(self.params, "gru_sigma")
        self.expand.register(self.params, "expand")
        self.gru_s.register(self.params, "gru_s")
        self.head.register(self.params, "head")

    # -- rollout state ----------------------------------------------------
    def reset(self, x0: np.ndarray, z0: np.ndarray) -> GainNetState:
        """Zero hidden state; difference caches seeded from the initial
        estimate so the first-step features are well defined."""
        x0 = np.atleast_2d(np.asarray(x0, dtype=self.dtype))
        z0 = np.atleast_2d(np.asarray(z0, dtype=self.dtype))
        bsz = x0.shape[0]
        zeros = lambda n: np.zeros((bsz, n), dtype=self.dtype)
        return GainNetState(zeros(self.cfg.hidden_q), zeros(self.cfg.hidden_sigma),
                            zeros(self.cfg.hidden_s), z0.copy(), x0.copy())

    def state_to_graph(self, st: GainNetState) -> GainNetState:
        wrap = lambda a: a if isinstance(a, Value) else Value(a)
        return GainNetState(wrap(st.h_q), wrap(st.h_sigma), wrap(st.h_s),
                            wrap(st.prev_z), wrap(st.prev_prior))

    def state_to_numpy(self, st: GainNetState) -> GainNetState:
        unwrap = lambda a: a.data if isinstance(a, Value) else a
        return GainNetState(unwrap(st.h_q), unwrap(st.h_sigma), unwrap(st.h_s),
                            unwrap(st.prev_z), unwrap(st.prev_prior))

    @staticmethod
    def features_np(st: GainNetState, z_t, z_pred, x_pred, x_prev):
        f1 = _normalize_np(z_t - st.prev_z)          # observation difference
        f2 = _normalize_np(z_t - z_pred)             # innovation
        f3 = _normalize_np(x_prev - st.prev_prior)   # forward update difference
        f4 = _normalize_np(x_pred - x_prev)          # forward evolution difference
        return f1, f2, f3, f4

    # -- graph step --------------------------------------------------------
    def step(self, st: GainNetState, z_t: Value, z_pred: Value, x_pred: Value,
             x_prev: Value) -> tuple[Value, GainNetState]:
        f1 = _normalize_graph(z_t - st.prev_z)
        f2 = _normalize_graph(z_t - z_pred)
        f3 = _normalize_graph(x_prev - st.prev_prior)
        f4 = _normalize_graph(x_pred - x_prev)
        h_q = self.gru_q(f4, st.h_q)
        h_sigma = self.gru_sigma(ad.concat([f3, h_q], axis=1), st.h_sigma)
        expanded = ad.relu(self.expand(h_sigma))
        h_s = self.gru_s(ad.concat([f1, f2, expanded], axis=1), st.h_s)
        flat = self.head(ad.concat([h_sigma, h_s], axis=1))
        bsz = z_t.data.shape[0]
        gain = flat.reshape((bsz, self.cfg.m, self.cfg.p))
        new_state = GainNetState(h_q, h_sigma, h_s, z_t, x_pred)
        return gain, new_state

    # -- numpy step ----------------------------------------------------------
    def infer_step(self, st: GainNetState, z_t: np.ndarray, z_pred: np.ndarray,
                   x_pred: np.ndarray, x_prev: np.ndarray) -> tuple[np.ndarray, GainNetState]:
        if not np.all(np.isfinite(z_t)):
            raise FloatingPointError("non-finite latent feature fed to gain network")
        f1, f2, f3, f4 = self.features_np(st, z_t, z_pred, x_pred, x_prev)
        h_q = self.gru_q.infer(f4, st.h_q)
        h_sigma = self.gru_sigma.infer(np.concatenate([f3, h_q], axis=1), st.h_sigma)
        expanded = np.maximum(self.expand.infer(h_sigma), 0)
        h_s = self.gru_s.infer(np.concatenate([f1, f2, expanded], axis=1), st.h_s)
        flat = self.head.infer(np.concatenate([h_sigma, h_s], axis=1))
        gain = flat.reshape(z_t.shape[0], self.cfg.m, self.cfg.p)
        new_state = GainNetState(h_q, h_sigma, h_s, z_t.copy(), x_pred.copy())
        return gain, new_state

    def hidden_norm(self, st: GainNetState) -> float:
        parts = [st.h_q, st.h_sigma, st.h_s]
        return math.sqrt(sum(float(np.sum(np.square(a.data if isinstance(a, Value) else a)))
                             for a in parts))

    # -- persistence ---------------------------------------------------------
    def num_params(self) -> int:
        return self.params.num_params()

    def flop_estimate(self) -> int:
        """Multiply-accumulate count of one gain evaluation."""
        total = 0
        for cell in (self.gru_q, self.gru_sigma, self.gru_s):
            n_in = cell.w_zr.data.shape[0]
            total += n_in * cell.w_zr.data.shape[1] + cell.w_n.data.shape[0] * cell.w_n.data.shape[1]
        total += self.expand.w.data.size + self.head.w.data.size
        return total

    def save(self, path: str) -> None:
        meta = {"m": self.cfg.m, "p": self.cfg.p,
                "hidden": [self.cfg.hidden_q, self.cfg.hidden_sigma, self.cfg.hidden_s],
                "expand": self.cfg.expand,
                "param_count": self.num_params()}
        save_checkpoint(path, self.params.state_dict(), meta=meta)

    def load(self, path: str) -> None:
        arrays, _ = load_checkpoint(path)
        self.params.load_state_dict(arrays)
