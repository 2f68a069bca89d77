"""Kalman, extended Kalman, stochastic ensemble Kalman and bootstrap particle filters.

All filters accept leading batch axes so many observation sequences can be
filtered at once: a belief mean is ``(..., d)``, a particle cloud is
``(..., M, d)`` and an observation is ``(..., d')``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .models import ObservationModel, SdeModel, log_likelihood
from .sim import em_step

logger = logging.getLogger(__name__)


class FilterError(RuntimeError):
    pass


def _symmetrize(P):
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _note(events, **info):
    logger.debug("filter event: %s", info)
    if events is not None:
        events.append(info)


def logsumexp(a, axis=-1, keepdims=False):
    """Max-shifted log-sum-exp; rows that are all ``-inf`` give ``-inf`` without warnings."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


# ---------------------------------------------------------------------------
# Gaussian filters
# ---------------------------------------------------------------------------


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.copy(), self.cov.copy())


def _rk4_moments(model: SdeModel, m, P, dt, substeps):
    h = dt / substeps
    # constant diffusion and linear drift are hoisted out of the loop
    a_const = None if model.sigma_const is None else model.sigma_const @ model.sigma_const.T
    A = model.drift_matrix

    def rhs(m, P):
        J = model.drift_jacobian(m) if A is None else A
        JP = J @ P
        a = model.diffusion_cov(m) if a_const is None else a_const
        drift = model.drift(m) if A is None else m @ A.T
        return drift, JP + np.swapaxes(JP, -1, -2) + a

    for _ in range(substeps):
        k1m, k1P = rhs(m, P)
        k2m, k2P = rhs(m + 0.5 * h * k1m, P + 0.5 * h * k1P)
        k3m, k3P = rhs(m + 0.5 * h * k2m, P + 0.5 * h * k2P)
        k4m, k4P = rhs(m + h * k3m, P + h * k3P)
        m = m + h / 6.0 * (k1m + 2 * k2m + 2 * k3m + k4m)
        P = P + h / 6.0 * (k1P + 2 * k2P + 2 * k3P + k4P)
    return m, _symmetrize(P)


def kalman_update(mean, cov, o, h_mean, H, R) -> GaussianBelief:
    """Gain update with innovation ``o - h_mean`` and observation Jacobian ``H``."""
    HP = H @ cov
    S = HP @ np.swapaxes(H, -1, -2) + R
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise FilterError("singular innovation covariance") from exc
    # K^T = S^{-1} H P
    Kt = np.linalg.solve(np.swapaxes(L, -1, -2), np.linalg.solve(L, HP))
    K = np.swapaxes(Kt, -1, -2)
    innov = np.asarray(o, dtype=float) - h_mean
    mean = mean + np.einsum("...ij,...j->...i", K, innov)
    cov = _symmetrize(cov - K @ HP)
    return GaussianBelief(mean, cov)


def kf_predict(belief: GaussianBelief, model: SdeModel, dt: float, substeps: int = 128) -> GaussianBelief:
    m, P = _rk4_moments(model, belief.mean, belief.cov, dt, substeps)
    return GaussianBelief(m, P)


def kf_step(
    belief: GaussianBelief,
    model: SdeModel,
    obsmodel: ObservationModel,
    dt: float,
    o,
    substeps: int = 128,
) -> GaussianBelief:
    """Exact Kalman filter step for a linear model with constant diffusion.

    The moment ODEs are integrated with fixed-step RK4, which for linear
    dynamics agrees with the matrix-exponential solution to ~1e-12.
    """
    if not model.is_linear or obsmodel.H is None:
        raise FilterError("the Kalman filter needs linear dynamics and a linear observation map")
    pred = kf_predict(belief, model, dt, substeps)
    H = obsmodel.H
    return kalman_update(pred.mean, pred.cov, o, pred.mean @ H.T, H, obsmodel.R)


def ekf_predict(belief, model, dt, substeps=128) -> GaussianBelief:
    m, P = _rk4_moments(model, belief.mean, belief.cov, dt, substeps)
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(P))):
        raise FilterError("EKF moments became non-finite")
    return GaussianBelief(m, P)


def ekf_step(
    belief: GaussianBelief,
    model: SdeModel,
    obsmodel: ObservationModel,
    dt: float,
    o,
    substeps: int = 128,
) -> GaussianBelief:
    pred = ekf_predict(belief, model, dt, substeps)
    H = obsmodel.jacobian_h(pred.mean)
    return kalman_update(pred.mean, pred.cov, o, obsmodel.h(pred.mean), H, obsmodel.R)


def run_gaussian_filter(step, belief, model, obsmodel, dt, obs, substeps=128):
    """Run ``step`` over an observation array ``(..., K, d')``; returns per-step beliefs."""
    out = []
    for k in range(obs.shape[-2]):
        belief = step(belief, model, obsmodel, dt, obs[..., k, :], substeps)
        out.append(belief)
    return out


def initial_belief(init, batch_shape=()) -> GaussianBelief:
    m = np.broadcast_to(init.mean(), batch_shape + (init.dim,)).copy()
    P = np.broadcast_to(init.cov(), batch_shape + (init.dim, init.dim)).copy()
    return GaussianBelief(m, P)


# ---------------------------------------------------------------------------
# Ensemble Kalman filter
# ---------------------------------------------------------------------------


@dataclass
class Ensemble:
    members: np.ndarray  # (..., M, d)


def propagate(model: SdeModel, x, dt: float, substeps: int, rng: np.random.Generator):
    h = dt / substeps
    sq = np.sqrt(h)
    for _ in range(substeps):
        x = em_step(model, x, h, sq * rng.standard_normal(x.shape[:-1] + (model.noise_dim,)))
    return x


def _solve_spd(A, B, events=None):
    """Solve ``A X = B`` for SPD ``A`` via Cholesky with jitter escalation."""
    d = A.shape[-1]
    scale = np.trace(A, axis1=-2, axis2=-1)[..., None, None] / d
    scale = np.where(scale > 0, scale, 1.0)
    eye = np.eye(d)
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            L = np.linalg.cholesky(A + jitter * scale * eye)
        except np.linalg.LinAlgError:
            continue
        if jitter > 0:
            _note(events, kind="jitter", value=jitter)
        return np.linalg.solve(np.swapaxes(L, -1, -2), np.linalg.solve(L, B))
    raise FilterError("matrix not positive definite even with jitter 1e-6")


def enkf_step(
    ens: Ensemble,
    model: SdeModel,
    obsmodel: ObservationModel,
    dt: float,
    o,
    rng: np.random.Generator,
    substeps: int = 1,
    events: Optional[list] = None,
) -> Ensemble:
    """Stochastic (perturbed-observation) EnKF forecast and analysis."""
    X = ens.members
    M = X.shape[-2]
    if M < 2:
        raise ValueError("EnKF needs at least two members")
    X = propagate(model, X, dt, substeps, rng)
    hx = obsmodel.h(X)
    Y = hx + rng.standard_normal(hx.shape) @ obsmodel.chol_R.T
    Xc = X - X.mean(axis=-2, keepdims=True)
    Yc = Y - Y.mean(axis=-2, keepdims=True)
    Pxy = np.swapaxes(Xc, -1, -2) @ Yc / (M - 1)
    Pyy = np.swapaxes(Yc, -1, -2) @ Yc / (M - 1)
    Kt = _solve_spd(Pyy, np.swapaxes(Pxy, -1, -2), events)  # (..., d', d)
    innov = np.asarray(o, dtype=float)[..., None, :] - Y
    return Ensemble(X + innov @ Kt)


def ensemble_moments(ens: Ensemble):
    X = ens.members
    M = X.shape[-2]
    m = X.mean(axis=-2)
    Xc = X - m[..., None, :]
    return m, np.swapaxes(Xc, -1, -2) @ Xc / (M - 1)


# ---------------------------------------------------------------------------
# Bootstrap particle filter
# ---------------------------------------------------------------------------


@dataclass
class ParticleCloud:
    particles: np.ndarray  # (..., M, d)
    log_weights: np.ndarray  # (..., M)
    collapsed: np.ndarray = field(default=None)  # (...,) bool, sequences aborted by weight collapse

    def __post_init__(self):
        if self.collapsed is None:
            self.collapsed = np.zeros(self.log_weights.shape[:-1], dtype=bool)

    @classmethod
    def from_prior(cls, init, M: int, rng: np.random.Generator, batch_shape=()) -> "ParticleCloud":
        n = int(np.prod(batch_shape, dtype=int)) * M
        x = init.sample(rng, n).reshape(batch_shape + (M, init.dim))
        return cls(x, np.full(batch_shape + (M,), -np.log(M)))

    def normalized_weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights, axis=-1, keepdims=True))


def search_rows(cdf, u):
    """Row-wise ``searchsorted(cdf[r], u[r], side='right')`` for 2-D arrays."""
    rows, M = cdf.shape
    offset = np.arange(rows)[:, None] * 2.0
    flat = np.searchsorted((cdf + offset).ravel(), (u + offset).ravel(), side="right")
    idx = flat.reshape(u.shape) - np.arange(rows)[:, None] * M
    return np.minimum(idx, M - 1)


def resample_indices(weights: np.ndarray, rng: np.random.Generator, scheme: str = "systematic") -> np.ndarray:
    """Ancestor indices for normalized ``weights`` of shape ``(..., M)``."""
    batch, M = weights.shape[:-1], weights.shape[-1]
    w = weights.reshape(-1, M)
    cdf = np.cumsum(w, axis=-1)
    cdf[:, -1] = 1.0
    if scheme == "systematic":
        u = (rng.uniform(size=(w.shape[0], 1)) + np.arange(M)) / M
    elif scheme == "multinomial":
        u = rng.uniform(size=(w.shape[0], M))
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return search_rows(cdf, u).reshape(batch + (M,))


def pf_step(
    cloud: ParticleCloud,
    model: SdeModel,
    obsmodel: ObservationModel,
    dt: float,
    o,
    rng: np.random.Generator,
    substeps: int = 1,
    resample: str = "systematic",
    events: Optional[list] = None,
) -> ParticleCloud:
    """Propagate, weight by the likelihood, normalize and resample.

    Sequences whose weights all vanish are marked ``collapsed``; their
    particles become NaN and stay so.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        X = propagate(model, cloud.particles, dt, substeps, rng)
        loglik = log_likelihood(obsmodel, np.asarray(o, dtype=float)[..., None, :], X)
    loglik = np.where(np.isnan(loglik), -np.inf, loglik)
    lw = cloud.log_weights + loglik
    lse = logsumexp(lw, axis=-1, keepdims=True)
    collapsed = cloud.collapsed | ~np.isfinite(lse[..., 0])
    if np.any(collapsed & ~cloud.collapsed):
        _note(events, kind="weight collapse", count=int(np.sum(collapsed & ~cloud.collapsed)))
    lw = np.where(collapsed[..., None], -np.log(lw.shape[-1]), lw - np.where(np.isfinite(lse), lse, 0.0))
    w = np.exp(lw)
    idx = resample_indices(w, rng, resample)
    X = np.take_along_axis(X, idx[..., None], axis=-2)
    X = np.where(collapsed[..., None, None], np.nan, X)
    M = X.shape[-2]
    return ParticleCloud(X, np.full(lw.shape, -np.log(M)), collapsed)


def cloud_moments(cloud: ParticleCloud):
    """Weighted mean and covariance; uniform weights give the 1/(M-1) estimator."""
    w = cloud.normalized_weights()
    X = cloud.particles
    m = np.einsum("...i,...ij->...j", w, X)
    Xc = X - m[..., None, :]
    S = np.einsum("...i,...ij,...ik->...jk", w, Xc, Xc)
    denom = 1.0 - (w**2).sum(axis=-1)
    denom = np.where(denom > 0, denom, 1.0)
    return m, S / denom[..., None, None]
