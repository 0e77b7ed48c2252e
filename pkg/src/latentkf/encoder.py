"""Convolutional frame encoders and their supervised training loop.

Two operating modes share one implementation: an instantaneous encoder
mapping a frame to the observable state coordinates, and a prior-fed
encoder that additionally ingests a predicted state through a small dense
branch concatenated with the flattened convolutional features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .nnet import (BatchNorm, Conv2d, Dense, OptimizerConfig, ParamSet, SGD,
                   TrainingDivergedError, clip_grad_norm, load_checkpoint, save_checkpoint)


@dataclass
class EncoderConfig:
    height: int = 28
    width: int = 28
    out_dim: int = 1                  # p of the owning model
    prior_dim: int | None = None      # m when the prior branch is attached
    channels: tuple[int, int, int] = (8, 16, 32)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    fc_hidden: int = 32
    prior_fc: int = 32
    input_scale: float = 1.0          # 1/frame peak, brings pixels into [0, ~1]

    def conv_shapes(self) -> list[tuple[int, int, int]]:
        shapes = []
        h, w = self.height, self.width
        for c in self.channels:
            h = (h + 2 * self.padding - self.kernel) // self.stride + 1
            w = (w + 2 * self.padding - self.kernel) // self.stride + 1
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_dim(self) -> int:
        c, h, w = self.conv_shapes()[-1]
        return c * h * w


class Encoder:
    """Conv stack (conv-relu-batchnorm) x3, flatten, then two dense layers;
    the optional prior branch joins between flatten and the first dense."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        chans = (1,) + cfg.channels
        self.convs = [Conv2d(chans[i], chans[i + 1], cfg.kernel, cfg.stride, cfg.padding,
                             rng, dtype) for i in range(3)]
        self.bns = [BatchNorm(c, dtype=dtype) for c in cfg.channels]
        fc_in = cfg.flat_dim + (cfg.prior_fc if cfg.prior_dim is not None else 0)
        self.prior_branch = (Dense(cfg.prior_dim, cfg.prior_fc, rng, dtype)
                             if cfg.prior_dim is not None else None)
        self.fc1 = Dense(fc_in, cfg.fc_hidden, rng, dtype)
        self.fc2 = Dense(cfg.fc_hidden, cfg.out_dim, rng, dtype)
        self.params = ParamSet()
        for i, conv in enumerate(self.convs):
            conv.register(self.params, f"conv{i}")
        for i, bn in enumerate(self.bns):
            bn.register(self.params, f"bn{i}")
        if self.prior_branch is not None:
            self.prior_branch.register(self.params, "prior_fc")
        self.fc1.register(self.params, "fc1")
        self.fc2.register(self.params, "fc2")

    # -- graph path -----------------------------------------------------
    def forward(self, frames: Value, prior: Value | None = None, training: bool = False) -> Value:
        """frames: (B, n) flattened pixels; prior: (B, m) when prior-fed."""
        cfg = self.cfg
        bsz = frames.data.shape[0]
        x = frames * np.asarray(cfg.input_scale, dtype=self.dtype)
        x = x.reshape((bsz, 1, cfg.height, cfg.width))
        for conv, bn in zip(self.convs, self.bns):
            x = bn(ad.relu(conv(x)), training)
        feat = x.reshape((bsz, cfg.flat_dim))
        return self.head(feat, prior)

    def head(self, feat: Value, prior: Value | None) -> Value:
        """Dense head on flattened conv features (B, flat_dim)."""
        if self.prior_branch is not None:
            if prior is None:
                raise ValueError("prior-fed encoder called without a prior")
            feat = ad.concat([feat, self.prior_branch(prior)], axis=1)
        hidden = ad.relu(self.fc1(feat))
        return self.fc2(hidden)

    def trunk_infer(self, frames: np.ndarray) -> np.ndarray:
        """Frozen conv features (inference batch norm), plain numpy.

        Valid whenever conv parameters do not receive updates: the features
        depend on the frames alone, so closed-loop rollouts can reuse them.
        """
        cfg = self.cfg
        frames = np.asarray(frames, dtype=self.dtype)
        x = (frames * cfg.input_scale).reshape(-1, 1, cfg.height, cfg.width)
        for conv, bn in zip(self.convs, self.bns):
            x = bn.infer(np.maximum(conv.infer(x), 0))
        return x.reshape(x.shape[0], cfg.flat_dim)

    # -- plain-numpy path (inference) ------------------------------------
    def infer(self, frames: np.ndarray, prior: np.ndarray | None = None) -> np.ndarray:
        frames = np.asarray(frames, dtype=self.dtype)
        single = frames.ndim == 1
        if single:
            frames = frames[None]
        feat = self.trunk_infer(frames)
        out = self.head_infer(feat, prior, single)
        return out[0] if single else out

    def head_infer(self, feat: np.ndarray, prior: np.ndarray | None,
                   single: bool = False) -> np.ndarray:
        if self.prior_branch is not None:
            prior = np.asarray(prior, dtype=self.dtype)
            if single and prior.ndim == 1:
                prior = prior[None]
            feat = np.concatenate([feat, self.prior_branch.infer(prior)], axis=1)
        return self.fc2.infer(np.maximum(self.fc1.infer(feat), 0))

    # -- persistence ------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = self.params.state_dict()
        for i, bn in enumerate(self.bns):
            arrays.update(bn.buffers(f"bn{i}"))
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.params.load_state_dict(arrays)
        for i, bn in enumerate(self.bns):
            bn.load_buffers(f"bn{i}", arrays)

    def save(self, path: str) -> None:
        meta = {"out_dim": self.cfg.out_dim, "prior_dim": self.cfg.prior_dim,
                "input_scale": self.cfg.input_scale}
        save_checkpoint(path, self.state_arrays(), meta=meta)

    def load(self, path: str) -> None:
        arrays, _ = load_checkpoint(path)
        self.load_state(arrays)

    def num_params(self) -> int:
        return self.params.num_params()

    def flop_estimate(self) -> int:
        """Multiply-accumulate count of one forward pass (one frame)."""
        cfg = self.cfg
        total = 0
        c_in, h, w = 1, cfg.height, cfg.width
        for c_out, hh, ww in cfg.conv_shapes():
            total += c_out * hh * ww * c_in * cfg.kernel ** 2
            c_in, h, w = c_out, hh, ww
        fc_in = cfg.flat_dim + (cfg.prior_fc if cfg.prior_dim is not None else 0)
        if cfg.prior_dim is not None:
            total += cfg.prior_dim * cfg.prior_fc
        total += fc_in * cfg.fc_hidden + cfg.fc_hidden * cfg.out_dim
        return total


# ---------------------------------------------------------------------------
# training


@dataclass
class PriorMode:
    """How training priors are produced: none, or ground truth plus noise."""

    kind: str = "none"            # "none" | "noisy_ground_truth"
    sigma: float = 0.0

    @classmethod
    def none(cls) -> "PriorMode":
        return cls("none", 0.0)

    @classmethod
    def noisy_ground_truth(cls, sigma: float) -> "PriorMode":
        return cls("noisy_ground_truth", sigma)


@dataclass
class EncoderTrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)


def default_sigma_prior(q2: float) -> float:
    # one-step priors carry at least the process noise; ablation default
    return 3.0 * math.sqrt(q2)


def train_encoder(encoder: Encoder, train_frames: np.ndarray, train_states: np.ndarray,
                  val_frames: np.ndarray, val_states: np.ndarray, selection,
                  opt_cfg: OptimizerConfig, prior_mode: PriorMode, seed: int = 0,
                  log_every: int | None = None, clip_norm: float | None = 100.0,
                  decay_milestones: tuple = (0.6, 0.85)
                  ) -> tuple[np.ndarray, EncoderTrainLog]:
    """Minimize the regularized feature regression loss; returns the
    residual covariance on the validation split plus the loss trace.

    Frame/state arrays are flat sample lists of shape (N, n) and (N, m).
    The step size halves at the given epoch fractions, the usual way to let
    plain SGD settle into a sharper regression.
    """
    rng = np.random.default_rng(seed)
    n_samples = train_frames.shape[0]
    targets = selection.apply(train_states).astype(encoder.dtype)
    val_targets = selection.apply(val_states).astype(encoder.dtype)
    opt = SGD(encoder.params, opt_cfg)
    log = EncoderTrainLog()
    needs_prior = encoder.cfg.prior_dim is not None
    drops = {int(frac * opt_cfg.epochs) for frac in decay_milestones}

    for epoch in range(opt_cfg.epochs):
        if epoch in drops:
            opt = SGD(encoder.params, OptimizerConfig(
                lr=opt.cfg.lr * 0.5, weight_decay=opt_cfg.weight_decay,
                momentum=opt_cfg.momentum, batch_size=opt_cfg.batch_size,
                epochs=opt_cfg.epochs))
        order = rng.permutation(n_samples)
        epoch_loss = 0.0
        for start in range(0, n_samples, opt_cfg.batch_size):
            idx = order[start: start + opt_cfg.batch_size]
            frames = Value(np.ascontiguousarray(train_frames[idx], dtype=encoder.dtype))
            prior = None
            if needs_prior:
                prior_data = train_states[idx].astype(encoder.dtype)
                if prior_mode.kind == "noisy_ground_truth" and prior_mode.sigma > 0:
                    prior_data = prior_data + rng.normal(
                        0.0, prior_mode.sigma, size=prior_data.shape).astype(encoder.dtype)
                prior = Value(prior_data)
            z = encoder.forward(frames, prior, training=True)
            err = z - Value(targets[idx])
            loss = ad.square(err).sum(axis=1).mean()
            ad.backward(loss)
            if clip_norm is not None:
                clip_grad_norm(encoder.params, clip_norm)
            epoch_loss += float(loss.data) * len(idx)
            opt.step()
        epoch_loss /= n_samples
        full_loss = epoch_loss + opt_cfg.weight_decay * encoder.params.sq_norm()
        if not math.isfinite(full_loss):
            raise TrainingDivergedError(f"encoder loss diverged at epoch {epoch}")
        log.train_loss.append(full_loss)
        if log_every and epoch % log_every == 0:
            val_z = _encode_split(encoder, val_frames, val_states, prior_mode, seed)
            log.val_mse.append(float(np.mean(np.sum((val_z - val_targets) ** 2, axis=1))))

    val_z = _encode_split(encoder, val_frames, val_states, prior_mode, seed)
    residuals = val_z.astype(np.float64) - val_targets.astype(np.float64)
    log.val_mse.append(float(np.mean(np.sum(residuals ** 2, axis=1))))
    r_hat = np.atleast_2d(np.cov(residuals, rowvar=False, bias=False))
    return r_hat, log


def _encode_split(encoder: Encoder, frames: np.ndarray, states: np.ndarray,
                  prior_mode: PriorMode, seed: int, batch: int = 512) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
    outs = []
    for start in range(0, frames.shape[0], batch):
        chunk = frames[start: start + batch]
        prior = None
        if encoder.cfg.prior_dim is not None:
            prior = states[start: start + batch].astype(encoder.dtype)
            if prior_mode.kind == "noisy_ground_truth" and prior_mode.sigma > 0:
                prior = prior + rng.normal(0.0, prior_mode.sigma, size=prior.shape).astype(encoder.dtype)
        outs.append(encoder.infer(chunk, prior))
    return np.concatenate(outs, axis=0)


def flatten_split(ds, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Dataset split -> flat (N, n) frames and (N, m) states sample arrays."""
    sub = ds.split(name)
    n = sub.frames.shape[-1]
    m = sub.states.shape[-1]
    return sub.frames.reshape(-1, n), sub.states.reshape(-1, m)
