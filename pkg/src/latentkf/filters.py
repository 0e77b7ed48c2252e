"""Model-based filtering: extended Kalman recursion and its latent-space use.

The generic predict/update pair works for any state map with a Jacobian
(analytic or the central-difference fallback). The latent-space runner
cascades a trained frame encoder in front of the update, treating encoder
outputs as surrogate observations with measurement matrix P.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class EKFState:
    x: np.ndarray  # (m,)
    cov: np.ndarray  # (m, m), kept symmetric PSD


def numeric_jacobian(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of f at x."""
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    cols = []
    for i in range(m):
        hi = x.copy()
        lo = x.copy()
        hi[i] += eps
        lo[i] -= eps
        cols.append((np.asarray(f(hi)) - np.asarray(f(lo))) / (2 * eps))
    return np.stack(cols, axis=1)


def _symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + cov.T)


def ekf_predict(state: EKFState, f, q_cov: np.ndarray, jacobian=None) -> EKFState:
    """Time update: propagate the estimate and linearized covariance."""
    if jacobian is None:
        jacobian = getattr(f, "jacobian", None)
    fmat = jacobian(state.x) if jacobian is not None else numeric_jacobian(f, state.x)
    if not np.all(np.isfinite(fmat)):
        raise FloatingPointError("non-finite Jacobian in EKF prediction")
    x_pred = np.asarray(f(state.x), dtype=np.float64)
    cov_pred = _symmetrize(fmat @ state.cov @ fmat.T + q_cov)
    return EKFState(x_pred, cov_pred)


def ekf_update(pred: EKFState, z: np.ndarray, h_mat: np.ndarray, r_cov: np.ndarray,
               joseph: bool = True) -> tuple[EKFState, np.ndarray]:
    """Measurement update; returns the new state and the gain actually used.

    A singular innovation covariance gets one ridge-regularized retry; if
    that also fails the update is skipped and the prediction returned.
    """
    z = np.asarray(z, dtype=np.float64)
    p = h_mat.shape[0]
    s = h_mat @ pred.cov @ h_mat.T + r_cov
    try:
        gain = np.linalg.solve(s.T, (pred.cov @ h_mat.T).T).T
    except np.linalg.LinAlgError:
        ridge = 1e-9 * np.trace(s) / p
        logger.warning("singular innovation covariance, retrying with ridge %.3e", ridge)
        try:
            gain = np.linalg.solve((s + ridge * np.eye(p)).T, (pred.cov @ h_mat.T).T).T
        except np.linalg.LinAlgError:
            logger.warning("innovation covariance unrecoverable, keeping prediction")
            return EKFState(pred.x.copy(), pred.cov.copy()), np.zeros((pred.x.shape[0], p))
    innovation = z - h_mat @ pred.x
    x_new = pred.x + gain @ innovation
    eye = np.eye(pred.x.shape[0])
    if joseph:
        a = eye - gain @ h_mat
        cov_new = a @ pred.cov @ a.T + gain @ r_cov @ gain.T
    else:
        cov_new = (eye - gain @ h_mat) @ pred.cov
    return EKFState(x_new, _symmetrize(cov_new)), gain


def ekf_run(f, q_cov: np.ndarray, h_mat: np.ndarray, r_cov: np.ndarray,
            observations: np.ndarray, x0: np.ndarray, cov0: np.ndarray,
            jacobian=None) -> tuple[np.ndarray, np.ndarray]:
    """Filter a (T, p) observation sequence; index 0 of the output echoes x0."""
    t_len = observations.shape[0]
    m = x0.shape[0]
    estimates = np.empty((t_len, m))
    gains = np.empty((t_len, m, h_mat.shape[0]))
    estimates[0] = x0
    gains[0] = 0.0
    state = EKFState(np.asarray(x0, dtype=np.float64), np.asarray(cov0, dtype=np.float64))
    for t in range(1, t_len):
        pred = ekf_predict(state, f, q_cov, jacobian=jacobian)
        state, gains[t] = ekf_update(pred, observations[t], h_mat, r_cov)
        estimates[t] = state.x
    return estimates, gains


def latent_ekf_run(encode, f, selection, q2_latent: float, r_hat: np.ndarray,
                   frames: np.ndarray, x0: np.ndarray, cov0: np.ndarray | None = None,
                   jacobian=None) -> np.ndarray:
    """EKF over encoder features: z_t = encode(y_t, x_pred), H = P.

    `encode` maps (frame, prior_state) -> feature vector of length p. The
    prior handed to the encoder is the model prediction, closing the loop
    between tracking and encoding.
    """
    m = x0.shape[0]
    p = selection.p
    h_mat = selection.matrix()
    q_cov = q2_latent * np.eye(m)
    r_cov = np.asarray(r_hat, dtype=np.float64).reshape(p, p)
    state = EKFState(np.asarray(x0, dtype=np.float64),
                     np.eye(m) if cov0 is None else np.asarray(cov0, dtype=np.float64))
    t_len = frames.shape[0]
    estimates = np.empty((t_len, m))
    estimates[0] = x0
    for t in range(1, t_len):
        pred = ekf_predict(state, f, q_cov, jacobian=jacobian)
        z = np.asarray(encode(frames[t], pred.x), dtype=np.float64)
        state, _ = ekf_update(pred, z, h_mat, r_cov)
        estimates[t] = state.x
    return estimates


DEFAULT_Q2_GRID = tuple(10.0 ** k for k in range(-4, 2))


def tune_q2(evaluate, candidates=DEFAULT_Q2_GRID) -> tuple[float, list[tuple[float, float]]]:
    """Grid search over latent process-noise variances.

    `evaluate` maps a candidate variance to a validation MSE. Ties and exact
    equals resolve toward the smaller variance. Returns the winner and the
    full (candidate, score) table.
    """
    candidates = sorted(candidates)
    if not candidates:
        raise ValueError("need at least one candidate variance")
    table = []
    best = None
    best_score = math.inf
    for q2 in candidates:
        score = float(evaluate(q2))
        table.append((q2, score))
        if score < best_score:
            best, best_score = q2, score
    return best, table


def riccati_steady_state(f_mat: np.ndarray, h_mat: np.ndarray, q_cov: np.ndarray,
                         r_cov: np.ndarray, iters: int = 10000, tol: float = 1e-14
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Fixed point of the discrete Riccati recursion.

    Returns the steady-state prior covariance and the corresponding gain.
    """
    f_mat = np.atleast_2d(np.asarray(f_mat, dtype=np.float64))
    h_mat = np.atleast_2d(np.asarray(h_mat, dtype=np.float64))
    q_cov = np.atleast_2d(np.asarray(q_cov, dtype=np.float64))
    r_cov = np.atleast_2d(np.asarray(r_cov, dtype=np.float64))
    m = f_mat.shape[0]
    cov_prior = np.eye(m)
    for _ in range(iters):
        s = h_mat @ cov_prior @ h_mat.T + r_cov
        gain = np.linalg.solve(s.T, (cov_prior @ h_mat.T).T).T
        cov_post = (np.eye(m) - gain @ h_mat) @ cov_prior
        nxt = f_mat @ cov_post @ f_mat.T + q_cov
        if np.max(np.abs(nxt - cov_prior)) < tol:
            cov_prior = nxt
            break
        cov_prior = nxt
    s = h_mat @ cov_prior @ h_mat.T + r_cov
    gain = np.linalg.solve(s.T, (cov_prior @ h_mat.T).T).T
    return cov_prior, gain
