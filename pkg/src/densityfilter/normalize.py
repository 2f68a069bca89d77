"""Normalizing constants of unnormalized (log-)densities.

Two estimators are provided: a midpoint Riemann sum for one-dimensional
states and importance sampling with a Gaussian proposal.  Everything is kept
in the log domain; exponentials are only taken after a max shift.

Log-density callables take points ``x`` of shape ``(..., I, d)`` and return
``(..., I)``; leading axes index observation sequences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .classical import FilterError, GaussianBelief, ekf_step, initial_belief, logsumexp
from .models import LOG_2PI, InitialDistribution, ObservationModel, SdeModel
from .sim import TimeGrid, _simulate_paths

logger = logging.getLogger(__name__)

LogDensity = Callable[[np.ndarray], np.ndarray]


class NormalizationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def quad_points(l: float, r: float, I: int) -> np.ndarray:
    """Cell midpoints of ``I`` equal cells on ``[l, r]``, shape ``(I, 1)``."""
    if not l < r:
        raise ValueError("need l < r")
    if I < 2:
        raise ValueError("need at least two quadrature points")
    h = (r - l) / I
    return (l + h * (np.arange(I) + 0.5))[:, None]


def log_quad_normalize(logdensity: LogDensity, l, r, I: int) -> np.ndarray:
    """Log of the midpoint-rule integral; ``l`` and ``r`` may be per-sequence arrays."""
    l = np.asarray(l, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(l >= r):
        raise ValueError("need l < r")
    if I < 2:
        raise ValueError("need at least two quadrature points")
    u = (np.arange(I) + 0.5) / I
    x = (l[..., None] + (r - l)[..., None] * u)[..., None]
    lp = logdensity(x)
    out = logsumexp(lp, axis=-1) + np.log((r - l) / I)
    if not np.all(np.isfinite(out)):
        raise NormalizationError("quadrature gave a non-finite normalizing constant")
    return out


def quad_normalize(logdensity: LogDensity, l, r, I: int):
    """Midpoint Riemann estimate of ``int exp(logdensity)`` over ``[l, r]``."""
    return np.exp(log_quad_normalize(logdensity, l, r, I))


# ---------------------------------------------------------------------------
# importance sampling
# ---------------------------------------------------------------------------


@dataclass
class Proposal:
    """Gaussian proposal ``N(mean, inflation * base_cov)``.

    ``mean`` is ``(..., d)`` and ``base_cov`` ``(..., d, d)``; leading axes
    index observation sequences for EKF proposals.  A wide proposal may carry
    a fixed sample set that every sequence reuses.
    """

    kind: str
    mean: np.ndarray
    base_cov: np.ndarray
    inflation: float = 1.0
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("ekf_based", "wide_gaussian"):
            raise ValueError(f"unknown proposal kind {self.kind!r}")
        if self.inflation < 1:
            raise ValueError("inflation must be >= 1")
        self.mean = np.asarray(self.mean, dtype=float)
        self.base_cov = np.asarray(self.base_cov, dtype=float)
        self._chol = np.linalg.cholesky(self.cov)

    @property
    def cov(self) -> np.ndarray:
        return self.inflation * self.base_cov

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, rng: np.random.Generator, I: int) -> np.ndarray:
        """Draw ``(..., I, d)`` samples; reuses the cached set when present."""
        if self.samples is not None and self.samples.shape[-2] == I:
            return self.samples
        z = rng.standard_normal(self.mean.shape[:-1] + (I, self.dim))
        return self.mean[..., None, :] + z @ np.swapaxes(self._chol, -1, -2)

    def logpdf(self, x) -> np.ndarray:
        diff = np.asarray(x, dtype=float) - self.mean[..., None, :]
        # solve L z = diff^T, batched over leading axes
        L = np.broadcast_to(self._chol, diff.shape[:-2] + self._chol.shape[-2:])
        z = np.linalg.solve(L, np.swapaxes(diff, -1, -2))
        logdet = np.log(np.diagonal(self._chol, axis1=-2, axis2=-1)).sum(-1)
        return -0.5 * (z**2).sum(-2) - 0.5 * self.dim * LOG_2PI - np.asarray(logdet)[..., None]


@dataclass
class ImportanceResult:
    log_z: np.ndarray
    ess: np.ndarray
    x: np.ndarray
    log_w: np.ndarray

    @property
    def z(self):
        return np.exp(self.log_z)

    def mean(self) -> np.ndarray:
        """Self-normalized estimate of the target mean."""
        w = np.exp(self.log_w - logsumexp(self.log_w, axis=-1, keepdims=True))
        return np.einsum("...i,...ij->...j", w, self.x)


def log_is_normalize(
    logdensity: LogDensity,
    proposal: Proposal,
    I: int,
    rng: np.random.Generator,
    ess_floor: float = 10.0,
    events: Optional[list] = None,
) -> ImportanceResult:
    if I < 1:
        raise ValueError("need at least one sample")
    x = proposal.sample(rng, I)
    log_w = logdensity(x) - proposal.logpdf(x)
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    lse = logsumexp(log_w, axis=-1)
    if np.any(~np.isfinite(lse)):
        raise NormalizationError("proposal mismatch: all importance weights are zero")
    w = np.exp(log_w - lse[..., None])
    ess = 1.0 / (w**2).sum(-1)
    if np.any(ess < ess_floor):
        low = int(np.sum(ess < ess_floor))
        logger.warning("importance ESS below %g for %d sequence(s)", ess_floor, low)
        if events is not None:
            events.append({"kind": "low ess", "count": low, "min_ess": float(np.min(ess))})
    return ImportanceResult(lse - np.log(I), ess, x, log_w)


def is_normalize(logdensity: LogDensity, proposal: Proposal, I: int, rng, ess_floor: float = 10.0):
    """Importance estimate ``(Z_hat, ESS)`` of ``int exp(logdensity)``."""
    res = log_is_normalize(logdensity, proposal, I, rng, ess_floor)
    return res.z, res.ess


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------


class UnconditionalMoments:
    """Mean and covariance of the signal at ``t_0..t_K`` from simulated paths.

    Simulated once on first use; also caches the wide-proposal sample sets,
    so every observation sequence sees bitwise identical samples.
    """

    def __init__(
        self,
        model: SdeModel,
        init: InitialDistribution,
        grid: TimeGrid,
        n_paths: int = 10_000,
        seed: int = 0,
        substeps: int = 128,
    ):
        self.model, self.init, self.grid = model, init, grid
        self.n_paths = n_paths
        # coarse filter grids make Euler unstable on chaotic drifts
        self.substeps = max(int(substeps), grid.N)
        self.seed = seed
        self._mean = None
        self._cov = None
        self._samples: dict = {}

    def _compute(self):
        from .sim import make_rng

        rng = make_rng(self.seed, "unconditional")
        g = self.grid
        x = self.init.sample(rng, self.n_paths)
        means, covs = [x.mean(0)], [np.atleast_2d(np.cov(x.T))]
        for _ in range(g.K):
            x = _simulate_paths(self.model, x, self.substeps, g.T / (g.K * self.substeps), rng, keep=False)
            means.append(x.mean(0))
            covs.append(np.atleast_2d(np.cov(x.T)))
        self._mean = np.stack(means)
        self._cov = np.stack(covs)

    def mean(self, k: int) -> np.ndarray:
        if self._mean is None:
            self._compute()
        return self._mean[k]

    def cov(self, k: int) -> np.ndarray:
        if self._cov is None:
            self._compute()
        return self._cov[k]

    def domain(self, k: int, width: float = 8.0) -> tuple[float, float]:
        """``mean -/+ width * sd`` at ``t_k`` for one-dimensional states."""
        m, s = float(self.mean(k)[0]), float(np.sqrt(self.cov(k)[0, 0]))
        return m - width * s, m + width * s

    def samples(self, k: int, I: int, inflation: float, proposal: Proposal) -> np.ndarray:
        from .sim import make_rng

        key = (k, I, float(inflation))
        if key not in self._samples:
            self._samples[key] = proposal.sample(make_rng(self.seed, "wide", k, I), I)
            self._samples[key].setflags(write=False)
        return self._samples[key]


def build_wide_proposal(model, grid, k: int, inflation: float = 3.0, cache: UnconditionalMoments = None, I=None):
    """Observation-independent Gaussian around the unconditional law at ``t_k``."""
    if cache is None:
        raise ValueError("a moments cache is required")
    q = Proposal("wide_gaussian", cache.mean(k), cache.cov(k), inflation)
    if I is not None:
        q.samples = cache.samples(k, I, inflation, q)
    return q


def ekf_beliefs(model, obsmodel, init, obs, grid: TimeGrid, substeps: int = 128) -> list[GaussianBelief]:
    """EKF posteriors at ``t_1..t_K`` for observation arrays ``(..., K, d')``."""
    belief = initial_belief(init, obs.shape[:-2])
    out = []
    for k in range(obs.shape[-2]):
        belief = ekf_step(belief, model, obsmodel, grid.T / grid.K, obs[..., k, :], substeps)
        out.append(belief)
    return out


def _usable(cov) -> bool:
    if not np.all(np.isfinite(cov)):
        return False
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return False
    return True


def build_ekf_proposal(
    model: SdeModel,
    obsmodel: ObservationModel,
    init: InitialDistribution,
    obs: np.ndarray,
    grid: TimeGrid,
    k: int,
    inflation: float = 2.0,
    fallback: Optional[UnconditionalMoments] = None,
    fallback_inflation: float = 3.0,
    events: Optional[list] = None,
    beliefs: Optional[list] = None,
) -> Proposal:
    """Gaussian proposal from the EKF posterior at ``t_k`` (1-based) per sequence.

    Sequences where the EKF diverges or loses positive definiteness get the
    wide Gaussian instead; each such event is logged.
    """
    obs = np.asarray(obs, dtype=float)
    batch = obs.shape[:-2]
    d = init.dim
    mean = np.empty(batch + (d,))
    cov = np.empty(batch + (d, d))
    flat_obs = obs.reshape((-1,) + obs.shape[-2:])
    mean_f = mean.reshape(-1, d)
    cov_f = cov.reshape(-1, d, d)
    ok = False
    if beliefs is not None:
        b = beliefs[k - 1]
        mean_f[:] = b.mean.reshape(-1, d)
        cov_f[:] = b.cov.reshape(-1, d, d)
        ok = _usable(cov_f)
    else:
        try:
            b = ekf_beliefs(model, obsmodel, init, flat_obs[:, :k], grid)[k - 1]
            mean_f[:], cov_f[:] = b.mean, b.cov
            ok = _usable(cov_f)
        except FilterError:
            ok = False
    if not ok:
        # redo sequence by sequence so one bad chain does not spoil the rest
        for s in range(flat_obs.shape[0]):
            try:
                b = ekf_beliefs(model, obsmodel, init, flat_obs[s, :k], grid)[k - 1]
                good = _usable(b.cov) and np.all(np.isfinite(b.mean))
            except FilterError:
                good = False
            if good:
                mean_f[s], cov_f[s] = b.mean, b.cov
                continue
            if fallback is None:
                raise NormalizationError("EKF proposal failed and no fallback is available")
            logger.info("EKF proposal failed for sequence %d at k=%d, using wide Gaussian", s, k)
            if events is not None:
                events.append({"kind": "ekf fallback", "sequence": s, "k": k})
            mean_f[s] = fallback.mean(k)
            cov_f[s] = fallback.cov(k) * (fallback_inflation / inflation)
    return Proposal("ekf_based", mean, cov, inflation)
