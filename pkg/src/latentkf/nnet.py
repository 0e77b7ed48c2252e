"""Trainable layers, parameter registry, optimizers and checkpoint I/O.

Layers are thin parameter holders whose __call__ builds autodiff graph nodes;
each also offers a pure-numpy `infer` path mirroring the graph math exactly,
used on latency-sensitive inference loops where no gradients are wanted.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Param, Value, concat, conv2d, matmul, mul, relu, sigmoid, tanh

CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss or gradients went non-finite during training."""


class CheckpointError(ValueError):
    """Checkpoint files are missing, malformed or inconsistent."""


class ParamSet:
    """Ordered mapping of unique names to trainable Params."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, param: Param) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = param
        return param

    def merge(self, other: "ParamSet", prefix: str = "") -> None:
        for name, p in other.items():
            self.add(prefix + name, p)

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self):
        return list(self._params)

    def num_params(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def l2_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.data * p.data)) for p in self._params.values()))

    def sq_norm(self) -> float:
        return sum(float(np.sum(p.data * p.data)) for p in self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None
            p._consumed = False

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.data) for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self._params.items():
            if k not in state:
                raise CheckpointError(f"missing parameter {k!r} in state")
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {k!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoint files: manifest.json (names, shapes) + params.f32 flat payload


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    entries = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    manifest = {"format_version": CHECKPOINT_VERSION, "params": entries}
    if meta:
        manifest["meta"] = meta
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in arrays.values())
    with open(os.path.join(path, "params.f32"), "wb") as fh:
        fh.write(payload)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as err:
        raise CheckpointError(f"no manifest.json under {path}") from err
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    raw = np.fromfile(os.path.join(path, "params.f32"), dtype="<f4")
    arrays = {}
    offset = 0
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if offset + size > raw.size:
            raise CheckpointError(f"params.f32 truncated at entry {entry['name']!r}")
        arrays[entry["name"]] = raw[offset: offset + size].reshape(entry["shape"]).astype(np.float32)
        offset += size
    if offset != raw.size:
        raise CheckpointError(f"params.f32 has {raw.size - offset} trailing floats")
    return arrays, manifest.get("meta", {})


# ---------------------------------------------------------------------------
# layers


def _uniform(rng: np.random.Generator, shape, scale, dtype):
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        scale = 1.0 / math.sqrt(n_in)
        self.w = Param(_uniform(rng, (n_in, n_out), scale, dtype))
        self.b = Param(_uniform(rng, (n_out,), scale, dtype))

    def __call__(self, x: Value) -> Value:
        return matmul(x, self.w) + self.b

    def infer(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.data + self.b.data

    def register(self, params: ParamSet, prefix: str) -> None:
        params.add(prefix + ".w", self.w)
        params.add(prefix + ".b", self.b)


class Conv2d:
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator, dtype=np.float32):
        scale = 1.0 / math.sqrt(c_in * kernel * kernel)
        self.w = Param(_uniform(rng, (c_out, c_in, kernel, kernel), scale, dtype))
        self.b = Param(_uniform(rng, (c_out,), scale, dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Value) -> Value:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def infer(self, x: np.ndarray) -> np.ndarray:
        return conv2d(Value(x), self.w.detach(), self.b.detach(),
                      stride=self.stride, padding=self.padding).data

    def register(self, params: ParamSet, prefix: str) -> None:
        params.add(prefix + ".w", self.w)
        params.add(prefix + ".b", self.b)


class BatchNorm:
    """Per-channel batch normalization for (B,C) or (B,C,H,W) inputs.

    Training mode normalizes with batch statistics (differentiable through
    them) and updates running statistics; inference mode applies the frozen
    running statistics as constants.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def _param_shape(self, ndim: int):
        return (1, -1) + (1,) * (ndim - 2)

    def __call__(self, x: Value, training: bool) -> Value:
        ndim = x.data.ndim
        axes = (0,) if ndim == 2 else (0, 2, 3)
        pshape = self._param_shape(ndim)
        gamma = self.gamma.reshape(pshape)
        beta = self.beta.reshape(pshape)
        if training:
            mu = x.mean(axis=axes, keepdims=True)
            xc = x - mu
            var = mul(xc, xc).mean(axis=axes, keepdims=True)
            count = int(np.prod([x.data.shape[a] for a in axes]))
            bessel = count / max(count - 1, 1)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean
                                 + m * mu.data.reshape(-1).astype(self.running_mean.dtype))
            self.running_var = ((1 - m) * self.running_var
                                + m * (var.data.reshape(-1) * bessel).astype(self.running_var.dtype))
            inv = 1.0 / (var + np.asarray(self.eps, dtype=x.data.dtype)).sqrt()
            return mul(xc, inv) * gamma + beta
        dtype = x.data.dtype
        rm = Value(self.running_mean.reshape(pshape).astype(dtype))
        inv = Value((1.0 / np.sqrt(self.running_var + self.eps)).reshape(pshape).astype(dtype))
        return mul(x - rm, inv) * gamma + beta

    def infer(self, x: np.ndarray) -> np.ndarray:
        pshape = self._param_shape(x.ndim)
        scale = (self.gamma.data / np.sqrt(self.running_var + self.eps)).reshape(pshape)
        shift = (self.beta.data - self.running_mean * scale.reshape(-1)).reshape(pshape)
        return x * scale + shift

    def register(self, params: ParamSet, prefix: str) -> None:
        params.add(prefix + ".gamma", self.gamma)
        params.add(prefix + ".beta", self.beta)

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {prefix + ".running_mean": self.running_mean,
                prefix + ".running_var": self.running_var}

    def load_buffers(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.running_mean = np.asarray(arrays[prefix + ".running_mean"], dtype=self.running_mean.dtype)
        self.running_var = np.asarray(arrays[prefix + ".running_var"], dtype=self.running_var.dtype)


def gru_cell(x: Value, h: Value, w_zr: Value, b_zr: Value, w_n: Value, b_n: Value,
             hidden: int) -> Value:
    """One gated-recurrent step; update gate mixes candidate against carry.

    h' = z * n + (1 - z) * h, so saturating both gates open (large positive
    pre-activations) degenerates into a plain dense-tanh recurrence.
    """
    xh = concat([x, h], axis=1)
    zr = sigmoid(matmul(xh, w_zr) + b_zr)
    z = zr[:, :hidden]
    r = zr[:, hidden:]
    xn = concat([x, mul(r, h)], axis=1)
    n = tanh(matmul(xn, w_n) + b_n)
    return h + mul(z, n - h)


class GRUCell:
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        scale = 1.0 / math.sqrt(n_in + hidden)
        self.hidden = hidden
        self.w_zr = Param(_uniform(rng, (n_in + hidden, 2 * hidden), scale, dtype))
        self.b_zr = Param(_uniform(rng, (2 * hidden,), scale, dtype))
        self.w_n = Param(_uniform(rng, (n_in + hidden, hidden), scale, dtype))
        self.b_n = Param(_uniform(rng, (hidden,), scale, dtype))

    def __call__(self, x: Value, h: Value) -> Value:
        return gru_cell(x, h, self.w_zr, self.b_zr, self.w_n, self.b_n, self.hidden)

    def infer(self, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        xh = np.concatenate([x, h], axis=1)
        pre = xh @ self.w_zr.data + self.b_zr.data
        zexp = np.exp(-np.abs(pre))
        zr = np.where(pre >= 0, 1.0 / (1.0 + zexp), zexp / (1.0 + zexp))
        z, r = zr[:, : self.hidden], zr[:, self.hidden:]
        xn = np.concatenate([x, r * h], axis=1)
        n = np.tanh(xn @ self.w_n.data + self.b_n.data)
        return h + z * (n - h)

    def register(self, params: ParamSet, prefix: str) -> None:
        params.add(prefix + ".w_zr", self.w_zr)
        params.add(prefix + ".b_zr", self.b_zr)
        params.add(prefix + ".w_n", self.w_n)
        params.add(prefix + ".b_n", self.b_n)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerConfig:
    """Gradient-step hyperparameters; weight decay realizes the L2 penalty."""

    lr: float
    weight_decay: float = 0.0
    momentum: float = 0.0
    batch_size: int = 64
    epochs: int = 20

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must not be negative")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


class SGD:
    """theta <- theta - lr * (grad + 2 * weight_decay * theta), grads cleared."""

    def __init__(self, params: ParamSet, cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self._velocity = {name: np.zeros_like(p.data) for name, p in params.items()} \
            if cfg.momentum else None

    def step(self) -> None:
        lr = self.cfg.lr
        wd = self.cfg.weight_decay
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient in {name!r}")
            if wd:
                g = g + (2.0 * wd) * p.data
            if self._velocity is not None:
                v = self._velocity[name]
                v *= self.cfg.momentum
                v += g
                g = v
            p.data = p.data - lr * g.astype(p.data.dtype)
        self.params.zero_grads()


class Adam:
    """Adaptive variant; offered for experimentation, benchmarks use SGD."""

    def __init__(self, params: ParamSet, cfg: OptimizerConfig,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.cfg = cfg
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._t = 0

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient in {name!r}")
            if self.cfg.weight_decay:
                g = g + (2.0 * self.cfg.weight_decay) * p.data
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self._t)
            vhat = v / (1 - b2 ** self._t)
            p.data = p.data - self.cfg.lr * (mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
        self.params.zero_grads()


def global_grad_norm(params: ParamSet) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
