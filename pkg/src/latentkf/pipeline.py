"""End-to-end tracking pipeline: model-based prediction, prior-fed encoding,
learned gain, and the warm-start + alternating training procedure.

Inference per step: predict the state and its observable projection from the
previous estimate, encode the frame with that prediction as a prior, ask the
gain network for K_t, then correct the prediction with the latent innovation.
Training warms up the encoder on noisy ground-truth priors, then alternates
full passes that update the gain network with the encoder frozen and vice
versa, backpropagating through the closed-loop rollout.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .datasets import Dataset, initial_estimates
from .encoder import Encoder, EncoderConfig, PriorMode, default_sigma_prior, flatten_split, train_encoder
from .gainnet import GainNet, GainNetConfig, GainNetState
from .nnet import OptimizerConfig, ParamSet, SGD, TrainingDivergedError, clip_grad_norm
from .ssmodels import SSModelSpec


@dataclass
class PipelineState:
    x_prev: np.ndarray
    gain_state: GainNetState


@dataclass
class TrainSchedule:
    """Knobs of the two-phase procedure; recorded next to every checkpoint."""

    warm_epochs: int = 100
    warm_lr: float = 0.002
    warm_batch: int = 128
    warm_weight_decay: float = 1e-5
    alt_epochs: int = 60
    traj_batch: int = 20
    gain_lr: float = 2e-3
    enc_lr: float = 1e-3
    lam1: float = 1e-6   # gain-network weight decay
    lam2: float = 1e-6   # encoder weight decay
    sigma_prior: float | None = None  # None -> 3*sqrt(q2) of the model
    clip_norm: float = 10.0
    bptt_window: int | None = 25      # None -> full unroll
    init_std2: float = 0.1

    def __post_init__(self):
        if self.warm_epochs < 0 or self.alt_epochs < 0:
            raise ValueError("epoch counts must be non-negative")


@dataclass
class TrainLog:
    warm_loss: list[float] = field(default_factory=list)
    alt_loss: list[tuple[int, str, float]] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def select_graph(x: Value, selection) -> Value:
    if selection.p == selection.m and selection.indices == tuple(range(selection.m)):
        return x
    return x[:, list(selection.indices)]


class LatentKalmanNet:
    """Composed tracker; owns one encoder (prior-fed) and one gain network."""

    def __init__(self, spec: SSModelSpec, encoder: Encoder, gain: GainNet):
        if encoder.cfg.prior_dim != spec.m:
            raise ValueError("encoder prior branch must match the state dimension")
        if encoder.cfg.out_dim != spec.p or gain.cfg.p != spec.p or gain.cfg.m != spec.m:
            raise ValueError("encoder/gain dimensions do not match the model")
        self.spec = spec
        self.encoder = encoder
        self.gain = gain
        self.selection = spec.selection

    @classmethod
    def build(cls, spec: SSModelSpec, seed: int = 0) -> "LatentKalmanNet":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11C)))
        enc_cfg = EncoderConfig(height=spec.height, width=spec.width, out_dim=spec.p,
                                prior_dim=spec.m, input_scale=1.0 / spec.frame_peak)
        encoder = Encoder(enc_cfg, rng)
        gain = GainNet(GainNetConfig.for_dims(spec.m, spec.p), rng)
        return cls(spec, encoder, gain)

    # -- inference ---------------------------------------------------------
    def init_state(self, x0: np.ndarray) -> PipelineState:
        x0 = np.asarray(x0, dtype=np.float64)
        z0 = self.selection.apply(x0)
        return PipelineState(x0.copy(), self.gain.reset(x0, z0))

    def infer_step(self, ps: PipelineState, frame: np.ndarray) -> tuple[np.ndarray, PipelineState]:
        x_prev = ps.x_prev[None, :]
        x_pred = np.asarray(self.spec.dynamics(ps.x_prev), dtype=np.float64)[None, :]
        z_pred = self.selection.apply(x_pred)
        z = self.encoder.infer(frame, x_pred[0])[None, :].astype(np.float64)
        gain, gstate = self.gain.infer_step(
            ps.gain_state, z.astype(self.gain.dtype), z_pred.astype(self.gain.dtype),
            x_pred.astype(self.gain.dtype), x_prev.astype(self.gain.dtype))
        x_new = x_pred[0] + gain[0].astype(np.float64) @ (z[0] - z_pred[0])
        return x_new, PipelineState(x_new, gstate)

    def infer_trajectory(self, frames: np.ndarray, x0: np.ndarray,
                         track_hidden: bool = False, batch_trunk: bool = False):
        """Fold infer_step over a (T, n) frame sequence; output[0] echoes x0.

        batch_trunk precomputes the conv features for the whole sequence,
        faster for offline scoring; latency measurements keep the honest
        one-frame-at-a-time path.
        """
        t_len = frames.shape[0]
        out = np.empty((t_len, self.spec.m))
        out[0] = x0
        ps = self.init_state(x0)
        max_hidden = 0.0
        trunk = self.encoder.trunk_infer(frames) if batch_trunk else None
        for t in range(1, t_len):
            if trunk is not None:
                est, ps = self._infer_step_feat(ps, trunk[t])
            else:
                est, ps = self.infer_step(ps, frames[t])
            out[t] = est
            if track_hidden:
                max_hidden = max(max_hidden, self.gain.hidden_norm(ps.gain_state))
        if track_hidden:
            return out, max_hidden
        return out

    def _infer_step_feat(self, ps: PipelineState, feat: np.ndarray):
        x_prev = ps.x_prev[None, :]
        x_pred = np.asarray(self.spec.dynamics(ps.x_prev), dtype=np.float64)[None, :]
        z_pred = self.selection.apply(x_pred)
        z = self.encoder.head_infer(feat[None, :], x_pred.astype(self.encoder.dtype)
                                    ).astype(np.float64)
        gain, gstate = self.gain.infer_step(
            ps.gain_state, z.astype(self.gain.dtype), z_pred.astype(self.gain.dtype),
            x_pred.astype(self.gain.dtype), x_prev.astype(self.gain.dtype))
        x_new = x_pred[0] + gain[0].astype(np.float64) @ (z[0] - z_pred[0])
        return x_new, PipelineState(x_new, gstate)

    # -- training rollout ----------------------------------------------------
    def rollout_loss(self, frames: np.ndarray, states: np.ndarray, x0: np.ndarray,
                     phase: str, bptt_window: int | None = None) -> Value:
        """Mean per-step squared state error of a closed-loop batched rollout.

        frames: (B, T, n), states: (B, T, m), x0: (B, m). `phase` selects
        which module is being trained; encoder batch-norm runs with batch
        statistics only while the encoder itself updates. While the encoder
        is frozen its conv features depend on the frames alone, so the gain
        phase precomputes them outside the graph and only the dense head
        (which mixes in the rolled prior) stays differentiable.
        """
        dtype = self.encoder.dtype
        bsz, t_len = frames.shape[0], frames.shape[1]
        enc_training = phase == "encoder"
        trunk = None
        if phase == "gain":
            flat = np.ascontiguousarray(frames[:, 1:], dtype=dtype).reshape(
                bsz * (t_len - 1), -1)
            trunk = self.encoder.trunk_infer(flat).reshape(bsz, t_len - 1, -1)
        x_prev = Value(x0.astype(dtype))
        gstate = self.gain.state_to_graph(self.gain.reset(x0, self.selection.apply(x0)))
        total = None
        for t in range(1, t_len):
            x_pred = self.spec.dynamics.evolve_graph(x_prev)
            z_pred = select_graph(x_pred, self.selection)
            if trunk is not None:
                z = self.encoder.head(Value(np.ascontiguousarray(trunk[:, t - 1])), x_pred)
            else:
                frame_t = Value(np.ascontiguousarray(frames[:, t], dtype=dtype))
                z = self.encoder.forward(frame_t, prior=x_pred, training=enc_training)
            gain, gstate = self.gain.step(gstate, z, z_pred, x_pred, x_prev)
            innov = (z - z_pred).reshape((bsz, self.spec.p, 1))
            x_t = x_pred + ad.matmul(gain, innov).reshape((bsz, self.spec.m))
            err = x_t - Value(states[:, t].astype(dtype))
            step_loss = ad.square(err).sum()
            total = step_loss if total is None else total + step_loss
            x_prev = x_t
            if bptt_window and t % bptt_window == 0:
                x_prev = x_prev.detach()
                gstate = GainNetState(gstate.h_q.detach(), gstate.h_sigma.detach(),
                                      gstate.h_s.detach(), gstate.prev_z.detach(),
                                      gstate.prev_prior.detach())
        return total * np.asarray(1.0 / (bsz * (t_len - 1)), dtype=dtype)

    # -- Algorithm 2 -----------------------------------------------------------
    def train(self, ds: Dataset, schedule: TrainSchedule, seed: int = 0) -> TrainLog:
        log = TrainLog()
        sigma = schedule.sigma_prior
        if sigma is None:
            sigma = default_sigma_prior(self.spec.q2)
        # warm start: supervised encoder on noisy ground-truth priors
        if schedule.warm_epochs > 0:
            tr_frames, tr_states = flatten_split(ds, "train")
            va_frames, va_states = flatten_split(ds, "val")
            opt_cfg = OptimizerConfig(lr=schedule.warm_lr, weight_decay=schedule.warm_weight_decay,
                                      batch_size=schedule.warm_batch, epochs=schedule.warm_epochs)
            _, enc_log = train_encoder(self.encoder, tr_frames, tr_states, va_frames, va_states,
                                       self.selection, opt_cfg,
                                       PriorMode.noisy_ground_truth(sigma), seed=seed)
            log.warm_loss = enc_log.train_loss

        # alternating minimization over closed-loop rollouts
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA17)))
        train_idx = ds.split_indices("train")
        gain_opt = SGD(self.gain.params, OptimizerConfig(
            lr=schedule.gain_lr, weight_decay=schedule.lam1, epochs=1))
        enc_opt = SGD(self.encoder.params, OptimizerConfig(
            lr=schedule.enc_lr, weight_decay=schedule.lam2, epochs=1))
        first_epoch_loss = None
        bad_epochs = 0
        for epoch in range(schedule.alt_epochs):
            order = rng.permutation(train_idx)
            batches = [order[i: i + schedule.traj_batch]
                       for i in range(0, len(order), schedule.traj_batch)]
            epoch_losses = []
            for phase, opt, params in (("gain", gain_opt, self.gain.params),
                                       ("encoder", enc_opt, self.encoder.params)):
                phase_loss = 0.0
                count = 0
                for batch in batches:
                    x0 = ds.states[batch, 0].astype(np.float64) + \
                        math.sqrt(schedule.init_std2) * rng.standard_normal((len(batch), self.spec.m))
                    loss = self.rollout_loss(ds.frames[batch], ds.states[batch], x0,
                                             phase, schedule.bptt_window)
                    ad.backward(loss)
                    norm = clip_grad_norm(params, schedule.clip_norm)
                    log.grad_norms.append(norm)
                    opt.step()
                    self.gain.params.zero_grads()
                    self.encoder.params.zero_grads()
                    phase_loss += float(loss.data) * len(batch)
                    count += len(batch)
                phase_loss /= count
                reg = schedule.lam1 * self.gain.params.sq_norm() \
                    + schedule.lam2 * self.encoder.params.sq_norm()
                log.alt_loss.append((epoch, phase, phase_loss + reg))
                epoch_losses.append(phase_loss)
            mean_loss = float(np.mean(epoch_losses))
            if not math.isfinite(mean_loss):
                raise TrainingDivergedError(f"rollout loss non-finite at epoch {epoch}")
            if first_epoch_loss is None:
                first_epoch_loss = mean_loss
            bad_epochs = bad_epochs + 1 if mean_loss > 10.0 * first_epoch_loss else 0
            if bad_epochs >= 3:
                raise TrainingDivergedError(
                    f"rollout loss exceeded 10x the initial level for 3 epochs (epoch {epoch})")
        return log

    # -- persistence -------------------------------------------------------------
    def save(self, path: str, schedule: TrainSchedule | None = None, extra: dict | None = None) -> None:
        os.makedirs(path, exist_ok=True)
        self.encoder.save(os.path.join(path, "encoder"))
        self.gain.save(os.path.join(path, "gainnet"))
        record = {"model": self.spec.name}
        if schedule is not None:
            record["schedule"] = asdict(schedule)
        if extra:
            record.update(extra)
        with open(os.path.join(path, "schedule.json"), "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=1, sort_keys=True)

    def load(self, path: str) -> None:
        self.encoder.load(os.path.join(path, "encoder"))
        self.gain.load(os.path.join(path, "gainnet"))


# ---------------------------------------------------------------------------
# closed-loop tracker built from the prior-fed encoder alone: observable
# coordinates come from the feature, the rest ride the model prediction


def prior_encoder_track(encoder: Encoder, spec: SSModelSpec, frames: np.ndarray,
                        x0: np.ndarray) -> np.ndarray:
    p_mat = spec.selection.matrix()
    t_len = frames.shape[0]
    out = np.empty((t_len, spec.m))
    out[0] = x0
    x_prev = np.asarray(x0, dtype=np.float64)
    for t in range(1, t_len):
        x_pred = np.asarray(spec.dynamics(x_prev), dtype=np.float64)
        z = encoder.infer(frames[t], x_pred).astype(np.float64)
        x_new = x_pred + p_mat.T @ (z - p_mat @ x_pred)
        out[t] = x_new
        x_prev = x_new
    return out


def instant_encoder_track(encoder: Encoder, spec: SSModelSpec, frames: np.ndarray) -> np.ndarray:
    """Instantaneous feature estimates lifted to state space (unobservable
    coordinates stay at zero; they never enter restricted error metrics)."""
    z = encoder.infer(frames).astype(np.float64)
    p_mat = spec.selection.matrix()
    return z @ p_mat
