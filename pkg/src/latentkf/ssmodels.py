"""State-space benchmark systems: noisy pendulum and Lorenz attractor.

Both systems expose the same surface: a noise-free evolution map (numpy and
graph variants so rollouts can backpropagate through it), an analytic
Jacobian, an image-valued sensing function, an observation-noise model and
an initial-state sampler. States are plain float arrays; frames are
flattened H*W gray-scale images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Value


class InvalidStateError(ValueError):
    """State vector contains non-finite entries or has the wrong length."""


class DegenerateSpreadError(ValueError):
    """Point-spread variance is not strictly positive."""


def check_state(x: np.ndarray, m: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m:
        raise InvalidStateError(f"state length {x.shape[-1]} != {m}")
    if not np.all(np.isfinite(x)):
        raise InvalidStateError("state has non-finite entries")
    return x


# ---------------------------------------------------------------------------
# selection matrix


@dataclass(frozen=True)
class SelectionMatrix:
    """Binary p x m matrix picking observable state coordinates."""

    indices: tuple[int, ...]
    m: int

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("selected indices must be distinct")
        if len(self.indices) > self.m or any(i < 0 or i >= self.m for i in self.indices):
            raise ValueError(f"indices {self.indices} out of range for m={self.m}")

    @property
    def p(self) -> int:
        return len(self.indices)

    @classmethod
    def identity(cls, m: int) -> "SelectionMatrix":
        return cls(tuple(range(m)), m)

    def matrix(self, dtype=np.float64) -> np.ndarray:
        mat = np.zeros((self.p, self.m), dtype=dtype)
        for row, idx in enumerate(self.indices):
            mat[row, idx] = 1.0
        return mat

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., list(self.indices)]


# ---------------------------------------------------------------------------
# observation noise


@dataclass(frozen=True)
class GaussianNoise:
    """Additive i.i.d. pixel noise with variance r2."""

    r2: float

    def __post_init__(self):
        if self.r2 < 0:
            raise ValueError("variance must be non-negative")

    def apply(self, frame: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.r2 == 0:
            return np.array(frame, copy=True)
        return frame + rng.normal(0.0, math.sqrt(self.r2), size=frame.shape)


@dataclass(frozen=True)
class SaltPepperNoise:
    """Each pixel independently corrupted with probability p_r; corrupted
    pixels land on `amplitude` (salt) or 0 (pepper) with equal chance."""

    p_r: float
    amplitude: float = 10.0

    def __post_init__(self):
        if not 0 <= self.p_r < 1:
            raise ValueError("corruption probability must lie in [0, 1)")

    def apply(self, frame: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.p_r == 0:
            return np.array(frame, copy=True)
        corrupt = rng.random(frame.shape) < self.p_r
        salt = rng.random(frame.shape) < 0.5
        out = np.array(frame, copy=True)
        out[corrupt] = np.where(salt[corrupt], self.amplitude, 0.0)
        return out


ObservationNoise = Union[GaussianNoise, SaltPepperNoise]


def apply_noise(frame: np.ndarray, noise: ObservationNoise, rng: np.random.Generator) -> np.ndarray:
    return noise.apply(np.asarray(frame, dtype=np.float64), rng)


# noise-level axis conventions: the pendulum axis is -10*log10(r2), the
# Lorenz axis is -log10(p_r); both recover the printed benchmark grids.


def pendulum_level_to_r2(level: float) -> float:
    return 10.0 ** (-level / 10.0)


def r2_to_pendulum_level(r2: float) -> float:
    return -10.0 * math.log10(r2)


def lorenz_level_to_pr(level: float) -> float:
    return 10.0 ** (-level)


def pr_to_lorenz_level(p_r: float) -> float:
    return -math.log10(p_r)


# ---------------------------------------------------------------------------
# pendulum dynamics


def pendulum_evolve(x: np.ndarray, dt: float = 0.05, g_over_l: float = 9.81) -> np.ndarray:
    """Noise-free swing step for state [angle, angular velocity]."""
    x = check_state(x, 2)
    if dt <= 0:
        raise ValueError("dt must be positive")
    phi = x[..., 0]
    omega = x[..., 1]
    s = np.sin(phi)
    return np.stack([
        phi + dt * omega - g_over_l * (dt * dt / 2.0) * s,
        omega - g_over_l * dt * s,
    ], axis=-1)


@dataclass(frozen=True)
class PendulumDynamics:
    dt: float = 0.05
    g_over_l: float = 9.81
    m: int = 2

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return pendulum_evolve(x, self.dt, self.g_over_l)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        x = check_state(x, 2)
        c = math.cos(float(x[0]))
        return np.array([
            [1.0 - self.g_over_l * (self.dt ** 2 / 2.0) * c, self.dt],
            [-self.g_over_l * self.dt * c, 1.0],
        ])

    def evolve_graph(self, x: Value) -> Value:
        """Differentiable step for batched states (B, 2)."""
        dtype = x.data.dtype
        phi = x[:, 0:1]
        omega = x[:, 1:2]
        s = ad.sin(phi)
        half = np.asarray(self.g_over_l * self.dt * self.dt / 2.0, dtype=dtype)
        full = np.asarray(self.g_over_l * self.dt, dtype=dtype)
        dt = np.asarray(self.dt, dtype=dtype)
        new_phi = phi + omega * dt - s * half
        new_omega = omega - s * full
        return ad.concat([new_phi, new_omega], axis=1)


def pendulum_energy(x: np.ndarray, g_over_l: float = 9.81) -> np.ndarray:
    """Specific energy 0.5*omega^2 + (g/l)*(1 - cos(angle))."""
    x = np.asarray(x)
    return 0.5 * x[..., 1] ** 2 + g_over_l * (1.0 - np.cos(x[..., 0]))


# ---------------------------------------------------------------------------
# Lorenz dynamics


@dataclass(frozen=True)
class LorenzConfig:
    taylor_order: int = 5
    dt: float = 0.02

    def __post_init__(self):
        if self.taylor_order < 1:
            raise ValueError("Taylor order must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


_LORENZ_A0 = np.array([
    [-10.0, 10.0, 0.0],
    [28.0, -1.0, 0.0],
    [0.0, 0.0, -8.0 / 3.0],
])
# first-coordinate coupling: A[1,2] = -x1, A[2,1] = x1
_LORENZ_E = np.array([
    [0.0, 0.0, 0.0],
    [0.0, 0.0, -1.0],
    [0.0, 1.0, 0.0],
])


def lorenz_a(x: np.ndarray) -> np.ndarray:
    """State-dependent drift matrix A(x); batched over leading dims."""
    x = check_state(x, 3)
    x1 = x[..., 0]
    return _LORENZ_A0 + x1[..., None, None] * _LORENZ_E


def lorenz_transition_matrix(x: np.ndarray, cfg: LorenzConfig) -> np.ndarray:
    """Truncated Taylor series of expm(A(x)*dt), batched over leading dims."""
    a = lorenz_a(x) * cfg.dt
    f = np.broadcast_to(np.eye(3), a.shape).copy()
    term = np.broadcast_to(np.eye(3), a.shape).copy()
    for j in range(1, cfg.taylor_order + 1):
        term = np.matmul(term, a) / j
        f = f + term
    return f


def lorenz_evolve(x: np.ndarray, cfg: LorenzConfig) -> np.ndarray:
    f = lorenz_transition_matrix(x, cfg)
    return np.matmul(f, np.asarray(x, dtype=np.float64)[..., None])[..., 0]


@dataclass(frozen=True)
class LorenzDynamics:
    cfg: LorenzConfig = field(default_factory=LorenzConfig)
    m: int = 3

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return lorenz_evolve(x, self.cfg)

    def transition_matrix(self, x: np.ndarray) -> np.ndarray:
        return lorenz_transition_matrix(x, self.cfg)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """d/dx of F(x) x: F(x) plus the termwise series derivative in x1."""
        x = check_state(x, 3)
        dt = self.cfg.dt
        a = lorenz_a(x) * dt
        e = _LORENZ_E * dt
        # dF/dx1 = sum_j (1/j!) sum_{i<j} A^i E A^(j-1-i), with A already dt-scaled
        powers = [np.eye(3)]
        for _ in range(self.cfg.taylor_order):
            powers.append(powers[-1] @ a)
        df_dx1 = np.zeros((3, 3))
        fact = 1.0
        for j in range(1, self.cfg.taylor_order + 1):
            fact *= j
            inner = np.zeros((3, 3))
            for i in range(j):
                inner += powers[i] @ e @ powers[j - 1 - i]
            df_dx1 += inner / fact
        f = lorenz_transition_matrix(x, self.cfg)
        jac = f.copy()
        jac[:, 0] += df_dx1 @ x
        return jac

    def evolve_graph(self, x: Value) -> Value:
        """Differentiable step for batched states (B, 3)."""
        dtype = x.data.dtype
        bsz = x.data.shape[0]
        x1 = x[:, 0:1].reshape((bsz, 1, 1))
        a0 = Value(np.broadcast_to((_LORENZ_A0 * self.cfg.dt).astype(dtype), (bsz, 3, 3)))
        e = Value((_LORENZ_E * self.cfg.dt).astype(dtype))
        a = a0 + x1 * e
        eye = Value(np.broadcast_to(np.eye(3, dtype=dtype), (bsz, 3, 3)))
        f = eye + a
        term = a
        for j in range(2, self.cfg.taylor_order + 1):
            term = ad.matmul(term, a) * np.asarray(1.0 / j, dtype=dtype)
            f = f + term
        out = ad.matmul(f, x.reshape((bsz, 3, 1)))
        return out.reshape((bsz, 3))


def lorenz_rk4(x0: np.ndarray, dt: float, steps: int, substeps: int = 20) -> np.ndarray:
    """Dense Runge-Kutta integration of the continuous Lorenz flow; reference
    trajectory for validating the Taylor discretization."""

    def deriv(x):
        return lorenz_a(x) @ x

    h = dt / substeps
    out = np.empty((steps + 1, 3))
    out[0] = x0
    x = np.asarray(x0, dtype=np.float64)
    for t in range(steps):
        for _ in range(substeps):
            k1 = deriv(x)
            k2 = deriv(x + 0.5 * h * k1)
            k3 = deriv(x + 0.5 * h * k2)
            k4 = deriv(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[t + 1] = x
    return out


# ---------------------------------------------------------------------------
# image sensing


def _pixel_grid(h: int, w: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
    return rows, cols


def render_psf(x: np.ndarray, h: int = 28, w: int = 28, peak: float = 10.0) -> np.ndarray:
    """Gaussian point-spread frame: peak * exp(-|c - center|^2 / (2*spread)).

    x = [row, col, spread]; pixel coordinates run over {0..h-1} x {0..w-1}.
    """
    x = check_state(x, 3)
    if x[..., 2].min() <= 0:
        raise DegenerateSpreadError(f"spread must be positive, got {x[..., 2].min()}")
    rows, cols = _pixel_grid(h, w)
    d2 = (rows - x[..., 0, None, None]) ** 2 + (cols - x[..., 1, None, None]) ** 2
    img = peak * np.exp(-d2 / (2.0 * x[..., 2, None, None]))
    return img.reshape(x.shape[:-1] + (h * w,))


# viewport constants mapping the attractor bounding box (+-25 in x1, +-30 in
# x2) into the [2, 25] pixel band; the third coordinate sets the spread after
# a sign-protecting affine shift.
LORENZ_VIEW_SCALE = (23.0 / 50.0, 23.0 / 60.0)
LORENZ_VIEW_OFFSET = (13.5, 13.5)
LORENZ_SPREAD_SCALE = 0.15
LORENZ_SPREAD_OFFSET = 1.0


def lorenz_viewport(x: np.ndarray) -> np.ndarray:
    """Affine map from Lorenz state to PSF render coordinates [row, col, spread]."""
    x = np.asarray(x, dtype=np.float64)
    row = LORENZ_VIEW_SCALE[0] * x[..., 0] + LORENZ_VIEW_OFFSET[0]
    col = LORENZ_VIEW_SCALE[1] * x[..., 1] + LORENZ_VIEW_OFFSET[1]
    spread = LORENZ_SPREAD_SCALE * np.abs(x[..., 2]) + LORENZ_SPREAD_OFFSET
    return np.stack([row, col, spread], axis=-1)


def render_lorenz(x: np.ndarray, h: int = 28, w: int = 28) -> np.ndarray:
    return render_psf(lorenz_viewport(x), h, w)


# pendulum rod renderer: pivot near the top-center, Gaussian falloff around
# the rod segment, unit peak intensity; injective in the angle and mirror
# symmetric about the vertical axis through the pivot.
PENDULUM_ROD_SIGMA = 1.0
PENDULUM_PEAK = 1.0


def render_pendulum(x: np.ndarray, h: int = 28, w: int = 28) -> np.ndarray:
    """Gray-scale rod image for state [angle, angular velocity]; only the
    angle is visible, which is what makes the system partially observable."""
    x = check_state(x, 2)
    phi = float(x[0]) if x.ndim == 1 else x[..., 0]
    pivot_r = h / 4.0
    pivot_c = (w - 1) / 2.0
    length = 0.8 * (w / 2.0)
    rows, cols = _pixel_grid(h, w)
    phi_arr = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    end_r = pivot_r + length * np.cos(phi_arr)
    end_c = pivot_c + length * np.sin(phi_arr)
    # distance from each pixel to the rod segment
    vr = end_r - pivot_r
    vc = end_c - pivot_c
    wr = rows[None] - pivot_r
    wc = cols[None] - pivot_c
    t = (wr * vr[:, None, None] + wc * vc[:, None, None]) / (length * length)
    t = np.clip(t, 0.0, 1.0)
    dr = wr - t * vr[:, None, None]
    dc = wc - t * vc[:, None, None]
    d2 = dr * dr + dc * dc
    img = PENDULUM_PEAK * np.exp(-d2 / (2.0 * PENDULUM_ROD_SIGMA ** 2))
    img = img.reshape(phi_arr.shape + (h * w,))
    if x.ndim == 1:
        return img[0]
    return img


# ---------------------------------------------------------------------------
# assembled model specs


@dataclass(frozen=True)
class SSModelSpec:
    """Everything a filter or data generator needs to know about a system."""

    name: str
    m: int
    n: int
    p: int
    dynamics: object  # callable state map with .jacobian and .evolve_graph
    sense: Callable[[np.ndarray], np.ndarray]
    selection: SelectionMatrix
    q2: float
    obs_noise: ObservationNoise
    x0_sampler: Callable[[np.random.Generator], np.ndarray]
    height: int = 28
    width: int = 28
    frame_peak: float = 10.0


def _pendulum_x0(rng: np.random.Generator) -> np.ndarray:
    # released from rest somewhere between pi/6 and pi/2
    return np.array([rng.uniform(np.pi / 6, np.pi / 2), 0.0])


def pendulum_model(noise_level: float = 23.0, dt: float = 0.05, g_over_l: float = 9.81,
                   q2: float = 0.1, h: int = 28, w: int = 28) -> SSModelSpec:
    dyn = PendulumDynamics(dt=dt, g_over_l=g_over_l)
    return SSModelSpec(
        name="pendulum",
        m=2, n=h * w, p=1,
        dynamics=dyn,
        sense=lambda x: render_pendulum(x, h, w),
        selection=SelectionMatrix((0,), 2),
        q2=q2,
        obs_noise=GaussianNoise(pendulum_level_to_r2(noise_level)),
        x0_sampler=_pendulum_x0,
        height=h, width=w,
        frame_peak=PENDULUM_PEAK,
    )


def _lorenz_x0_factory(cfg: LorenzConfig, q2: float, burn_in: int = 50):
    dyn = LorenzDynamics(cfg=cfg)

    def sample(rng: np.random.Generator) -> np.ndarray:
        x = np.array([1.0, 1.0, 1.0]) + rng.normal(size=3)
        q = math.sqrt(q2)
        for _ in range(burn_in):
            x = dyn(x) + q * rng.normal(size=3)
        return x

    return sample


def lorenz_model(noise_level: float = 2.0, taylor_order: int = 5, dt: float = 0.02,
                 q2: float = 0.005, h: int = 28, w: int = 28) -> SSModelSpec:
    cfg = LorenzConfig(taylor_order=taylor_order, dt=dt)
    dyn = LorenzDynamics(cfg=cfg)
    return SSModelSpec(
        name="lorenz",
        m=3, n=h * w, p=3,
        dynamics=dyn,
        sense=lambda x: render_lorenz(x, h, w),
        selection=SelectionMatrix.identity(3),
        q2=q2,
        obs_noise=SaltPepperNoise(lorenz_level_to_pr(noise_level)),
        x0_sampler=_lorenz_x0_factory(cfg, q2),
        height=h, width=w,
        frame_peak=10.0,
    )


def make_model(name: str, noise_level: float, taylor_order: int = 5, dt: float | None = None,
               **kwargs) -> SSModelSpec:
    if name == "pendulum":
        return pendulum_model(noise_level, dt=dt or 0.05, **kwargs)
    if name == "lorenz":
        return lorenz_model(noise_level, taylor_order=taylor_order, dt=dt or 0.02, **kwargs)
    raise ValueError(f"unknown model {name!r}")
