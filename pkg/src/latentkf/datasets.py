"""Trajectory dataset generation, on-disk layout and loading.

A dataset is a directory holding manifest.json plus two flat little-endian
float32 arrays, states.f32 with shape (D, T, m) and frames.f32 with shape
(D, T, n). Trajectories draw from independent child RNG streams of a single
seed, so generation is reproducible bit-for-bit and trivially parallel.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .ssmodels import GaussianNoise, SSModelSpec, SaltPepperNoise

FORMAT_VERSION = 1
DEFAULT_SPLIT = (0.8, 0.1, 0.1)


class DatasetFormatError(ValueError):
    """Stored dataset files are missing, truncated or malformed."""


class DatasetConsistencyError(DatasetFormatError):
    """Manifest counts disagree with the arrays on disk."""


@dataclass
class DatasetManifest:
    model: str
    m: int
    n: int
    p: int
    D: int
    T: int
    seed: int
    q2: float
    dt: float
    noise: dict
    taylor_order: int | None = None
    decimation_ratio: int = 1
    dense_dt: float | None = None
    split_sizes: tuple[int, int, int] = (0, 0, 0)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        version = raw.get("format_version")
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported dataset format_version {version}")
        raw["split_sizes"] = tuple(raw["split_sizes"])
        return cls(**raw)


def _noise_to_dict(noise) -> dict:
    if isinstance(noise, GaussianNoise):
        return {"kind": "gaussian", "r2": noise.r2}
    if isinstance(noise, SaltPepperNoise):
        return {"kind": "salt_pepper", "p_r": noise.p_r, "amplitude": noise.amplitude}
    raise ValueError(f"unknown noise model {noise!r}")


def split_sizes(d: int, fractions=DEFAULT_SPLIT) -> tuple[int, int, int]:
    """Contiguous train/validation/test counts; validation and test get at
    least one trajectory each whenever d >= 3."""
    n_val = max(1, int(round(d * fractions[1]))) if d >= 3 else 0
    n_test = max(1, int(round(d * fractions[2]))) if d >= 3 else 0
    n_train = d - n_val - n_test
    return n_train, n_val, n_test


@dataclass
class Dataset:
    states: np.ndarray  # (D, T, m) float32
    frames: np.ndarray  # (D, T, n) float32
    manifest: DatasetManifest

    @property
    def D(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        return self.states.shape[1]

    def _split_range(self, name: str) -> slice:
        n_train, n_val, n_test = self.manifest.split_sizes
        if name == "train":
            return slice(0, n_train)
        if name == "val":
            return slice(n_train, n_train + n_val)
        if name == "test":
            return slice(n_train + n_val, n_train + n_val + n_test)
        raise ValueError(f"unknown split {name!r}")

    def split(self, name: str) -> "Dataset":
        sl = self._split_range(name)
        sub = Dataset(self.states[sl], self.frames[sl], self.manifest)
        return sub

    def split_indices(self, name: str) -> list[int]:
        sl = self._split_range(name)
        return list(range(*sl.indices(self.D)))


def _simulate_trajectory(spec: SSModelSpec, steps: int, q2_step: float,
                         rng: np.random.Generator, keep_every: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Run the state recursion and render noisy frames at the kept steps."""
    m = spec.m
    q = math.sqrt(q2_step)
    x = spec.x0_sampler(rng)
    kept_states = [x]
    state = x
    for _ in range(steps - 1):
        noise = q * rng.normal(size=m) if q > 0 else 0.0
        state = spec.dynamics(state) + noise
        kept_states.append(state)
    states = np.asarray(kept_states)[::keep_every]
    frames = np.empty((states.shape[0], spec.n))
    for t in range(states.shape[0]):
        clean = spec.sense(states[t])
        frames[t] = spec.obs_noise.apply(clean, rng)
    return states, frames


def generate_dataset(spec: SSModelSpec, d: int, t: int, seed: int,
                     taylor_order: int | None = None) -> Dataset:
    """D independent trajectories of length T from the given model."""
    if d < 1 or t < 1:
        raise ValueError("need at least one trajectory and one step")
    streams = np.random.SeedSequence(seed).spawn(d)
    states = np.empty((d, t, spec.m), dtype=np.float32)
    frames = np.empty((d, t, spec.n), dtype=np.float32)
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        s, f = _simulate_trajectory(spec, t, spec.q2, rng)
        states[i] = s
        frames[i] = f
    manifest = DatasetManifest(
        model=spec.name, m=spec.m, n=spec.n, p=spec.p, D=d, T=t, seed=seed,
        q2=spec.q2, dt=getattr(spec.dynamics, "cfg", spec.dynamics).dt,
        noise=_noise_to_dict(spec.obs_noise),
        taylor_order=taylor_order,
        split_sizes=split_sizes(d),
    )
    return Dataset(states, frames, manifest)


def generate_decimated(dense_spec: SSModelSpec, ratio: int, d: int, t: int, seed: int,
                       scale_q2: bool = True, taylor_order: int | None = None) -> Dataset:
    """Simulate at the dense rate, keep every ratio-th step.

    Per-dense-step state noise is q2/ratio by default so the aggregated noise
    between kept samples stays comparable to direct generation; the mismatch
    under study is the nonlinearity of the flow, not inflated noise.
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    dense_dt = getattr(dense_spec.dynamics, "cfg", dense_spec.dynamics).dt
    q2_step = dense_spec.q2 / ratio if scale_q2 else dense_spec.q2
    streams = np.random.SeedSequence(seed).spawn(d)
    states = np.empty((d, t, dense_spec.m), dtype=np.float32)
    frames = np.empty((d, t, dense_spec.n), dtype=np.float32)
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        s, f = _simulate_trajectory(dense_spec, t * ratio - (ratio - 1), q2_step, rng,
                                    keep_every=ratio)
        states[i] = s[:t]
        frames[i] = f[:t]
    manifest = DatasetManifest(
        model=dense_spec.name, m=dense_spec.m, n=dense_spec.n, p=dense_spec.p,
        D=d, T=t, seed=seed, q2=dense_spec.q2, dt=dense_dt * ratio,
        noise=_noise_to_dict(dense_spec.obs_noise),
        taylor_order=taylor_order,
        decimation_ratio=ratio, dense_dt=dense_dt,
        split_sizes=split_sizes(d),
    )
    return Dataset(states, frames, manifest)


# ---------------------------------------------------------------------------
# storage


def save_dataset(ds: Dataset, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(ds.manifest.to_json())
    ds.states.astype("<f4").tofile(os.path.join(path, "states.f32"))
    ds.frames.astype("<f4").tofile(os.path.join(path, "frames.f32"))


def _load_array(path: str, name: str, shape: tuple[int, ...]) -> np.ndarray:
    fname = os.path.join(path, name)
    if not os.path.exists(fname):
        raise DatasetFormatError(f"missing array file {name}")
    raw = np.fromfile(fname, dtype="<f4")
    expected = int(np.prod(shape))
    if raw.size < expected:
        raise DatasetFormatError(f"array {name} truncated: {raw.size} < {expected} floats")
    if raw.size > expected:
        raise DatasetConsistencyError(
            f"array {name} holds {raw.size} floats but manifest implies {expected}")
    return raw.reshape(shape)


def load_dataset(path: str) -> Dataset:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise DatasetFormatError(f"missing manifest.json under {path}")
    with open(mpath, encoding="utf-8") as fh:
        manifest = DatasetManifest.from_json(fh.read())
    states = _load_array(path, "states.f32", (manifest.D, manifest.T, manifest.m))
    frames = _load_array(path, "frames.f32", (manifest.D, manifest.T, manifest.n))
    if sum(manifest.split_sizes) > manifest.D:
        raise DatasetConsistencyError(
            f"split sizes {manifest.split_sizes} exceed D={manifest.D}")
    return Dataset(states, frames, manifest)


def initial_estimates(ds: Dataset, indices, std2: float = 0.1) -> np.ndarray:
    """Perturbed true initial states used to start every filter variant.

    The perturbation stream is keyed on (dataset seed, trajectory index), so
    all methods face the same initialization error on the same trajectory.
    """
    out = np.empty((len(indices), ds.states.shape[2]))
    for row, idx in enumerate(indices):
        rng = np.random.default_rng(np.random.SeedSequence((ds.manifest.seed, 0xC0FFEE, idx)))
        out[row] = ds.states[idx, 0].astype(np.float64) + math.sqrt(std2) * rng.normal(size=ds.states.shape[2])
    return out
