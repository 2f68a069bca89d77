"""State and observation models for the benchmark systems.

Every coefficient function is vectorized over leading axes: a state array of
shape ``(..., d)`` maps to drift ``(..., d)``, diffusion ``(..., d, m)`` and
scalar fields ``(...)``.  The filtering equations need the first and second
derivatives of ``a = sigma sigma^T``, so each model supplies them analytically.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class SchloglDomainWarning(RuntimeWarning):
    """A Schlögl reaction rate went negative and was clamped at zero."""


# ---------------------------------------------------------------------------
# SDE models
# ---------------------------------------------------------------------------


class SdeModel:
    """Base class for ``dS = mu(S) dt + sigma(S) dB``.

    Subclasses implement :meth:`drift`, :meth:`diffusion` and the derivative
    fields.  Constant-diffusion models set ``sigma_const`` so simulation can
    skip building per-point diffusion matrices.
    """

    name = "sde"
    state_dim: int
    noise_dim: int
    sigma_const: Optional[np.ndarray] = None
    drift_matrix: Optional[np.ndarray] = None

    def drift(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diffusion(self, x: np.ndarray) -> np.ndarray:
        if self.sigma_const is not None:
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(self.sigma_const, x.shape[:-1] + self.sigma_const.shape)
        raise NotImplementedError

    def drift_jacobian(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def div_drift(self, x: np.ndarray) -> np.ndarray:
        return np.trace(self.drift_jacobian(x), axis1=-2, axis2=-1)

    def grad_div_a(self, x: np.ndarray) -> np.ndarray:
        """Vector with j-th entry ``sum_i d a_ij / d x_i``."""
        if self.sigma_const is not None:
            x = np.asarray(x, dtype=float)
            return np.zeros(x.shape[:-1] + (self.state_dim,))
        raise NotImplementedError

    def lap_a(self, x: np.ndarray) -> np.ndarray:
        """``sum_ij d^2 a_ij / dx_i dx_j``."""
        if self.sigma_const is not None:
            x = np.asarray(x, dtype=float)
            return np.zeros(x.shape[:-1])
        raise NotImplementedError

    def diffusion_cov(self, x: np.ndarray) -> np.ndarray:
        s = self.diffusion(x)
        return s @ np.swapaxes(s, -1, -2)

    def apply_diffusion(self, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """``sigma(x) @ dw`` for batched ``x`` and noise ``dw`` of shape (..., m)."""
        if self.sigma_const is not None:
            return dw @ self.sigma_const.T
        return np.einsum("...ij,...j->...i", self.diffusion(x), dw)

    def apply_diffusion_T(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """``sigma(x)^T @ w``."""
        if self.sigma_const is not None:
            return w @ self.sigma_const
        return np.einsum("...ij,...i->...j", self.diffusion(x), w)

    @property
    def is_linear(self) -> bool:
        return self.drift_matrix is not None and self.sigma_const is not None

    def to_dict(self) -> dict:
        return {"name": self.name, "state_dim": self.state_dim, "noise_dim": self.noise_dim}


class LinearSde(SdeModel):
    """Linear drift ``mu(x) = A x`` with constant diffusion."""

    name = "linear"

    def __init__(self, A, sigma, name: str = "linear"):
        self.drift_matrix = np.array(A, dtype=float)
        self.sigma_const = np.array(sigma, dtype=float)
        self.state_dim = self.drift_matrix.shape[0]
        self.noise_dim = self.sigma_const.shape[1]
        self.name = name
        if self.drift_matrix.shape != (self.state_dim, self.state_dim):
            raise ValueError("drift matrix must be square")
        if self.sigma_const.shape[0] != self.state_dim:
            raise ValueError("diffusion must have d rows")

    def drift(self, x):
        return np.asarray(x, dtype=float) @ self.drift_matrix.T

    def drift_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.drift_matrix, x.shape[:-1] + self.drift_matrix.shape)

    def div_drift(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], np.trace(self.drift_matrix))


class BistableSde(SdeModel):
    """Cubic drift ``mu(x) = drift_sign * (2/5)(5x - x^3)`` with unit noise.

    ``drift_sign=-1`` is the printed drift, which has a single stable well
    at 0 and lets paths escape past ``±sqrt(5)`` to infinity in finite time.
    ``drift_sign=+1`` is the double-well potential with wells at ``±sqrt(5)``.
    """

    name = "bistable"
    state_dim = 1
    noise_dim = 1

    def __init__(self, drift_sign: int = -1):
        if drift_sign not in (1, -1):
            raise ValueError("drift_sign must be +1 or -1")
        self.drift_sign = drift_sign
        self.sigma_const = np.ones((1, 1))

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        return self.drift_sign * 0.4 * (5.0 * x - x**3)

    def drift_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return (self.drift_sign * (2.0 - 1.2 * x**2))[..., None]

    def div_drift(self, x):
        x = np.asarray(x, dtype=float)
        return self.drift_sign * (2.0 - 1.2 * x[..., 0] ** 2)

    def to_dict(self):
        d = super().to_dict()
        d.update(drift_sign=self.drift_sign)
        return d


class SchloglSde(SdeModel):
    """Chemical Langevin approximation of the Schlögl reaction network.

    The four channel noises are merged into one scalar Brownian motion with
    ``sigma(x)^2 = b1 + b2 + b3 + b4``.  Negative rates (small or negative
    copy numbers) are clamped at zero.  ``b4_sign`` selects the sign of the
    ``b4`` term in the drift; ``+1`` reproduces the printed drift.
    """

    name = "schlogl"
    state_dim = 1
    noise_dim = 1

    def __init__(self, theta=(3e-7, 1e-4, 1e-3, 3.5), A=1e5, B=2e5, b4_sign: int = 1):
        if b4_sign not in (1, -1):
            raise ValueError("b4_sign must be +1 or -1")
        self.theta = tuple(float(t) for t in theta)
        self.A = float(A)
        self.B = float(B)
        self.b4_sign = b4_sign

    # each rate returns (value, first derivative, second derivative)
    def _rates(self, x):
        t1, t2, t3, t4 = self.theta
        c1 = t1 * self.A / 2.0
        c2 = t2 / 6.0
        b1 = c1 * x * (x - 1.0)
        db1 = c1 * (2.0 * x - 1.0)
        d2b1 = np.full_like(x, 2.0 * c1)
        b2 = c2 * x * (x - 1.0) * (x - 2.0)
        db2 = c2 * (3.0 * x**2 - 6.0 * x + 2.0)
        d2b2 = c2 * (6.0 * x - 6.0)
        b3 = np.full_like(x, t3 * self.B)
        zero = np.zeros_like(x)
        b4 = t4 * x
        db4 = np.full_like(x, t4)
        out = []
        clamped = False
        for b, db, d2b in ((b1, db1, d2b1), (b2, db2, d2b2), (b3, zero, zero), (b4, db4, zero)):
            neg = b < 0
            if np.any(neg):
                clamped = True
                b = np.where(neg, 0.0, b)
                db = np.where(neg, 0.0, db)
                d2b = np.where(neg, 0.0, d2b)
            out.append((b, db, d2b))
        if clamped:
            warnings.warn("Schlögl rate clamped at zero", SchloglDomainWarning, stacklevel=3)
        return out

    def rates(self, x) -> np.ndarray:
        """The four channel rates ``(b1, b2, b3, b4)`` after clamping, shape (..., 4)."""
        x = np.asarray(x, dtype=float)[..., 0]
        return np.stack([r[0] for r in self._rates(x)], axis=-1)

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        (b1, _, _), (b2, _, _), (b3, _, _), (b4, _, _) = self._rates(x[..., 0])
        return (b1 - b2 + b3 + self.b4_sign * b4)[..., None]

    def drift_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        (_, d1, _), (_, d2, _), (_, d3, _), (_, d4, _) = self._rates(x[..., 0])
        return (d1 - d2 + d3 + self.b4_sign * d4)[..., None, None]

    def diffusion(self, x):
        x = np.asarray(x, dtype=float)
        total = sum(r[0] for r in self._rates(x[..., 0]))
        return np.sqrt(total)[..., None, None]

    def diffusion_cov(self, x):
        x = np.asarray(x, dtype=float)
        total = sum(r[0] for r in self._rates(x[..., 0]))
        return total[..., None, None]

    def grad_div_a(self, x):
        x = np.asarray(x, dtype=float)
        return sum(r[1] for r in self._rates(x[..., 0]))[..., None]

    def lap_a(self, x):
        x = np.asarray(x, dtype=float)
        return sum(r[2] for r in self._rates(x[..., 0]))

    def to_dict(self):
        d = super().to_dict()
        d.update(theta=list(self.theta), A=self.A, B=self.B, b4_sign=self.b4_sign)
        return d


class Lorenz96Sde(SdeModel):
    """Stochastic Lorenz-96 with additive noise ``sigma * I``.

    ``mu(x)_i = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`` with cyclic indices.
    """

    name = "l96"

    def __init__(self, d: int, F: float = 8.0, sigma: float = 1.0):
        if d < 4:
            raise ValueError("Lorenz-96 needs d >= 4")
        self.state_dim = self.noise_dim = d
        self.F = float(F)
        self.sigma = float(sigma)
        self.sigma_const = self.sigma * np.eye(d)

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        xp1 = np.roll(x, -1, axis=-1)
        xm1 = np.roll(x, 1, axis=-1)
        xm2 = np.roll(x, 2, axis=-1)
        return (xp1 - xm2) * xm1 - x + self.F

    def drift_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        d = self.state_dim
        J = np.zeros(x.shape + (d,))
        i = np.arange(d)
        xp1 = np.roll(x, -1, axis=-1)
        xm1 = np.roll(x, 1, axis=-1)
        xm2 = np.roll(x, 2, axis=-1)
        J[..., i, i] = -1.0
        J[..., i, (i + 1) % d] = xm1
        J[..., i, (i - 2) % d] = -xm1
        J[..., i, (i - 1) % d] = xp1 - xm2
        return J

    def div_drift(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], -float(self.state_dim))

    def to_dict(self):
        d = super().to_dict()
        d.update(F=self.F, sigma=self.sigma)
        return d


class FunctionalSde(SdeModel):
    """User-supplied drift/diffusion with finite-difference derivative fallback.

    Derivatives use central differences with step ``eps`` (default 1e-5);
    expect roughly 1e-6 relative accuracy for smooth coefficients and
    1e-4 for the second-derivative field ``lap_a``.
    """

    name = "functional"

    def __init__(self, drift, diffusion, state_dim: int, noise_dim: int, eps: float = 1e-5):
        self._drift = drift
        self._diffusion = diffusion
        self.state_dim = state_dim
        self.noise_dim = noise_dim
        self.eps = eps

    def drift(self, x):
        return self._drift(np.asarray(x, dtype=float))

    def diffusion(self, x):
        return self._diffusion(np.asarray(x, dtype=float))

    def drift_jacobian(self, x):
        return fd_jacobian(self.drift, x, self.eps)

    def grad_div_a(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for i in range(self.state_dim):
            e = np.zeros(self.state_dim)
            e[i] = self.eps
            da = (self.diffusion_cov(x + e) - self.diffusion_cov(x - e)) / (2 * self.eps)
            out += da[..., i, :]
        return out

    def lap_a(self, x):
        x = np.asarray(x, dtype=float)
        h = 1e-3 if self.eps < 1e-3 else self.eps
        d = self.state_dim
        out = np.zeros(x.shape[:-1])
        for i in range(d):
            for j in range(d):
                ei = np.zeros(d)
                ej = np.zeros(d)
                ei[i] = h
                ej[j] = h
                f = lambda y: self.diffusion_cov(y)[..., i, j]  # noqa: E731
                out += (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
        return out


def fd_jacobian(fun: Callable, x, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference Jacobian of a vectorized map ``(..., d) -> (..., p)``."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        cols.append((fun(x + e) - fun(x - e)) / (2 * eps))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# Observation model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationModel:
    """``O = h(S) + V`` with ``V ~ N(0, R)``."""

    h: Callable[[np.ndarray], np.ndarray]
    jacobian_h: Callable[[np.ndarray], np.ndarray]
    R: np.ndarray
    H: Optional[np.ndarray] = None  # set for linear maps
    name: str = "obs"
    chol_R: np.ndarray = field(init=False, repr=False)
    R_inv: np.ndarray = field(init=False, repr=False)
    logdet_R: float = field(init=False, repr=False)

    def __post_init__(self):
        R = np.atleast_2d(np.array(self.R, dtype=float))
        if not np.allclose(R, R.T):
            raise ValueError("R must be symmetric")
        try:
            L = np.linalg.cholesky(R)
        except np.linalg.LinAlgError as exc:
            raise ValueError("R must be positive definite") from exc
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "chol_R", L)
        object.__setattr__(self, "R_inv", np.linalg.inv(R))
        object.__setattr__(self, "logdet_R", float(2.0 * np.log(np.diag(L)).sum()))

    @property
    def obs_dim(self) -> int:
        return self.R.shape[0]

    @classmethod
    def linear(cls, H, R, name: str = "linear") -> "ObservationModel":
        H = np.atleast_2d(np.array(H, dtype=float))
        return cls(
            h=lambda x: np.asarray(x, dtype=float) @ H.T,
            jacobian_h=lambda x: np.broadcast_to(H, np.shape(x)[:-1] + H.shape),
            R=R,
            H=H,
            name=name,
        )

    def sample(self, x, rng: np.random.Generator) -> np.ndarray:
        hx = self.h(x)
        z = rng.standard_normal(hx.shape)
        return hx + z @ self.chol_R.T

    def grad_log_likelihood(self, o, x) -> np.ndarray:
        """``nabla_x log L(o, x) = Dh(x)^T R^{-1} (o - h(x))``."""
        r = np.asarray(o, dtype=float) - self.h(x)
        J = self.jacobian_h(x)
        return np.einsum("...ij,...i->...j", J, r @ self.R_inv)


def log_likelihood(obs: ObservationModel, o, x) -> np.ndarray:
    """``log N(o | h(x), R)`` including the normalization constant."""
    r = np.asarray(o, dtype=float) - obs.h(x)
    quad = np.einsum("...i,ij,...j->...", r, obs.R_inv, r)
    return -0.5 * quad - 0.5 * obs.obs_dim * LOG_2PI - 0.5 * obs.logdet_R


# ---------------------------------------------------------------------------
# Initial distributions
# ---------------------------------------------------------------------------


class InitialDistribution:
    """Finite Gaussian mixture; a single component gives a Gaussian."""

    def __init__(self, weights, means, covs):
        self.weights = np.atleast_1d(np.array(weights, dtype=float))
        self.means = np.atleast_2d(np.array(means, dtype=float))
        covs = np.array(covs, dtype=float)
        if covs.ndim == 2:
            covs = covs[None]
        self.covs = covs
        n, d = self.means.shape
        if self.weights.shape != (n,) or self.covs.shape != (n, d, d):
            raise ValueError("inconsistent mixture shapes")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("mixture weights must be a probability vector")
        for c in self.covs:
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() < -1e-12:
                raise ValueError("covariances must be symmetric positive semidefinite")
        self.dim = d
        # sampling factor tolerates zero covariance
        self._sqrt = np.stack([_psd_sqrt(c) for c in self.covs])
        self._chol = None

    @classmethod
    def gaussian(cls, mean, cov) -> "InitialDistribution":
        mean = np.atleast_1d(np.array(mean, dtype=float))
        cov = np.atleast_2d(np.array(cov, dtype=float))
        return cls([1.0], [mean], [cov])

    def _cholesky(self):
        if self._chol is None:
            try:
                self._chol = np.stack([np.linalg.cholesky(c) for c in self.covs])
            except np.linalg.LinAlgError as exc:
                raise ValueError("density undefined for a singular covariance") from exc
        return self._chol

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights) if len(self.weights) > 1 else np.zeros(n, int)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self._sqrt[comp], z)

    def _component_logpdf(self, x):
        L = self._cholesky()
        x = np.asarray(x, dtype=float)
        out = []
        for w, m, Lc in zip(self.weights, self.means, L):
            diff = x - m
            z = np.linalg.solve(Lc, diff.reshape(-1, self.dim).T).T.reshape(diff.shape)
            lp = -0.5 * (z**2).sum(-1) - 0.5 * self.dim * LOG_2PI - np.log(np.diag(Lc)).sum()
            out.append(np.log(w) + lp if w > 0 else np.full(lp.shape, -np.inf))
        return np.stack(out, axis=-1)

    def logpdf(self, x) -> np.ndarray:
        return _logsumexp(self._component_logpdf(x), axis=-1)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def grad_logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        comp = self._component_logpdf(x)
        resp = np.exp(comp - _logsumexp(comp, axis=-1)[..., None])
        g = np.zeros(x.shape)
        for j, (m, c) in enumerate(zip(self.means, self.covs)):
            g -= resp[..., j, None] * np.linalg.solve(c, (x - m).reshape(-1, self.dim).T).T.reshape(x.shape)
        return g

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        m = self.mean()
        dev = self.means - m
        return np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum("k,ki,kj->ij", self.weights, dev, dev)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covs": self.covs.tolist()}


def _psd_sqrt(c):
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(c)
        return V * np.sqrt(np.clip(w, 0.0, None))


def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)


# ---------------------------------------------------------------------------
# The model zoo
# ---------------------------------------------------------------------------


@dataclass
class FilteringProblem:
    """Bundle of signal model, observation model, prior and training prior."""

    model: SdeModel
    obs: ObservationModel
    init: InitialDistribution
    q0: InitialDistribution
    name: str
    params: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``model, obs, init = ou_model(1)``
        return iter((self.model, self.obs, self.init))


def ou_model(d: int = 1) -> FilteringProblem:
    if d < 1:
        raise ValueError("d must be >= 1")
    model = LinearSde(-np.eye(d), np.eye(d), name="ou")
    obs = ObservationModel.linear(np.eye(d), np.eye(d), name="identity")
    init = InitialDistribution.gaussian(np.zeros(d), np.eye(d))
    return FilteringProblem(model, obs, init, init, "ou", {"d": d})


def bistable_model(drift_sign: int = -1) -> FilteringProblem:
    init = InitialDistribution.gaussian([0.0], [[1.0]])
    obs = ObservationModel.linear([[1.0]], [[1.0]], name="identity")
    return FilteringProblem(BistableSde(drift_sign), obs, init, init, "bistable", {"drift_sign": drift_sign})


def spring_mass_matrices(m, k, c) -> np.ndarray:
    """Drift matrix of a damped spring-mass chain with ``r`` masses.

    ``k`` and ``c`` have ``r + 1`` entries.
    """
    m, k, c = (np.asarray(v, dtype=float) for v in (m, k, c))
    r = len(m)
    if len(k) != r + 1 or len(c) != r + 1:
        raise ValueError("need r+1 spring and damping constants")
    A21 = np.zeros((r, r))
    A22 = np.zeros((r, r))
    for i in range(r):
        A21[i, i] = -(k[i] + k[i + 1]) / m[i]
        A22[i, i] = -(c[i] + c[i + 1]) / m[i]
        if i + 1 < r:
            A21[i, i + 1] = k[i + 1] / m[i]
            A21[i + 1, i] = k[i + 1] / m[i + 1]
    A = np.zeros((2 * r, 2 * r))
    A[:r, r:] = np.eye(r)
    A[r:, :r] = A21
    A[r:, r:] = A22
    return A


def spring_mass_model(r: int, seed: int = 0, params: Optional[dict] = None) -> FilteringProblem:
    """Linear spring-mass chain with ``d = 2r``; positions are observed.

    ``params`` (keys ``m``, ``k``, ``c``) overrides the seeded draw, e.g. when
    reloading a sidecar written by :func:`save_spring_mass_params`.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    if params is None:
        rng = np.random.default_rng(seed)
        params = {
            "m": rng.uniform(0.8, 1.2, r).tolist(),
            "k": rng.uniform(0.8, 1.2, r + 1).tolist(),
            "c": rng.uniform(0.15, 0.25, r + 1).tolist(),
        }
    A = spring_mass_matrices(params["m"], params["k"], params["c"])
    d = 2 * r
    model = LinearSde(A, np.eye(d), name="lsm")
    H = np.hstack([np.eye(r), np.zeros((r, r))])
    obs = ObservationModel.linear(H, np.eye(r), name="positions")
    init = InitialDistribution.gaussian(np.zeros(d), np.eye(d))
    return FilteringProblem(model, obs, init, init, "lsm", {"r": r, "seed": seed, **params})


def save_spring_mass_params(problem: FilteringProblem, path) -> None:
    keys = ("r", "seed", "m", "k", "c")
    Path(path).write_text(json.dumps({k: problem.params[k] for k in keys}, indent=2))


def load_spring_mass_model(path) -> FilteringProblem:
    p = json.loads(Path(path).read_text())
    return spring_mass_model(p["r"], p["seed"], {k: p[k] for k in ("m", "k", "c")})


def schlogl_model(b4_sign: int = 1) -> FilteringProblem:
    model = SchloglSde(b4_sign=b4_sign)
    obs = ObservationModel(
        h=lambda x: np.log1p(np.maximum(np.asarray(x, dtype=float), 0.0)),
        jacobian_h=lambda x: (
            np.where(np.asarray(x) > 0, 1.0 / (1.0 + np.maximum(np.asarray(x, dtype=float), 0.0)), 0.0)
        )[..., None],
        R=[[0.5]],
        name="log1p",
    )
    init = InitialDistribution([0.5, 0.5], [[150.0], [350.0]], [[[100.0]], [[100.0]]])
    q0 = InitialDistribution([0.5, 0.5], [[150.0], [375.0]], [[[625.0]], [[3600.0]]])
    return FilteringProblem(model, obs, init, q0, "schlogl", {"b4_sign": b4_sign})


def lorenz96_obs_indices(d: int, d_prime: int) -> np.ndarray:
    """0-based indices of observed coordinates (every ``d/d'``-th, 1-based ``x_{s i}``)."""
    if d % d_prime != 0:
        raise ValueError(f"stride d/d' = {d}/{d_prime} is not an integer")
    s = d // d_prime
    return s * np.arange(1, d_prime + 1) - 1


def lorenz96_model(d: int = 4, d_prime: Optional[int] = None, F: float = 8.0, sigma: float = 1.0) -> FilteringProblem:
    d_prime = d if d_prime is None else d_prime
    idx = lorenz96_obs_indices(d, d_prime)
    H = np.zeros((d_prime, d))
    H[np.arange(d_prime), idx] = 1.0
    model = Lorenz96Sde(d, F, sigma)
    obs = ObservationModel.linear(H, 2.0 * np.eye(d_prime), name="stride")
    init = InitialDistribution.gaussian(np.full(d, F), np.eye(d))
    return FilteringProblem(model, obs, init, init, "l96", {"d": d, "d_prime": d_prime, "F": F, "sigma": sigma})


MODEL_REGISTRY: dict[str, Callable[..., FilteringProblem]] = {
    "ou": ou_model,
    "bistable": bistable_model,
    "lsm": spring_mass_model,
    "schlogl": schlogl_model,
    "l96": lorenz96_model,
}


def make_problem(name: str, **kwargs) -> FilteringProblem:
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}") from None
    return factory(**kwargs)


def problem_from_dict(name: str, params: dict) -> FilteringProblem:
    """Rebuild a problem from its ``name`` and ``params`` (as stored in checkpoints)."""
    params = dict(params)
    if name == "lsm":
        drawn = {k: params[k] for k in ("m", "k", "c") if k in params}
        return spring_mass_model(params["r"], params.get("seed", 0), drawn or None)
    return make_problem(name, **params)
