"""Error metrics for filtering densities and Gaussian kernel density estimates.

Arrays follow the benchmark layout: leading axis over evaluation sequences
``m = 1..M``, last axis over state coordinates.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .classical import logsumexp
from .models import LOG_2PI

logger = logging.getLogger(__name__)

#: ``-log(1e-200)``, the cap on per-point negative log-likelihoods
NLL_CLIP = -math.log(1e-200)

METRICS = ("fme", "mae", "rmae", "kld", "nll")
CSV_HEADER = ("example", "method", "seed", "t_k", "metric", "value")


def fme(ref_means, est_means) -> float:
    """First-moment error: mean Euclidean distance between posterior means."""
    diff = np.asarray(est_means, dtype=float) - np.asarray(ref_means, dtype=float)
    return float(np.mean(np.linalg.norm(np.atleast_2d(diff), axis=-1)))


def mae(states, est_means) -> float:
    """Mean Euclidean distance between true states and point estimates."""
    diff = np.asarray(est_means, dtype=float) - np.asarray(states, dtype=float)
    return float(np.mean(np.linalg.norm(np.atleast_2d(diff), axis=-1)))


def rmae(mae_hat: float, mae_ref: float) -> float:
    """Relative MAE as a fraction; 0 for the optimal estimator."""
    if mae_ref == 0:
        raise ZeroDivisionError("reference MAE is zero")
    return (mae_hat - mae_ref) / mae_ref


def kld_terms(ref_logp, approx_logp) -> np.ndarray:
    """Pointwise ``log p - log p_hat`` with ``-inf`` approximations capped at ``NLL_CLIP``."""
    ref_logp = np.asarray(ref_logp, dtype=float)
    approx_logp = np.asarray(approx_logp, dtype=float)
    with np.errstate(invalid="ignore"):
        terms = ref_logp - approx_logp
    return np.where(np.isneginf(approx_logp) | np.isnan(approx_logp), NLL_CLIP, terms)


def kld_mc(ref_logp, approx_logp, return_se: bool = False):
    """Nested Monte Carlo forward KL divergence.

    Both arrays have shape ``(M, J)``: ``J`` samples drawn from the reference
    filter of each of ``M`` sequences, evaluated under the reference and the
    (normalized) approximate log-densities.
    """
    terms = kld_terms(ref_logp, approx_logp)
    est = float(terms.mean())
    if not return_se:
        return est
    per_seq = terms.reshape(terms.shape[0], -1).mean(-1) if terms.ndim > 1 else terms
    n = per_seq.size
    se = float(per_seq.std(ddof=1) / np.sqrt(n)) if n > 1 else float(terms.std(ddof=1) / np.sqrt(terms.size))
    return est, se


def kld_sampled(sample_ref, logpdf_ref, logpdf_approx, J: int, rng, return_se: bool = False):
    """KLD from a reference sampler ``sample_ref(rng, J) -> (M, J, d)``."""
    z = sample_ref(rng, J)
    return kld_mc(logpdf_ref(z), logpdf_approx(z), return_se)


def nll_terms(logp_at_states, log_z=0.0) -> np.ndarray:
    lp = np.asarray(logp_at_states, dtype=float) - np.asarray(log_z, dtype=float)
    lp = np.where(np.isnan(lp), -np.inf, lp)
    return np.minimum(-lp, NLL_CLIP)


def nll(logp_at_states, log_z=0.0) -> float:
    """Mean clipped negative log-likelihood of the true states.

    ``logp_at_states`` holds unnormalized log-densities, one per sequence,
    and ``log_z`` the matching log normalizing constants.
    """
    return float(np.mean(nll_terms(logp_at_states, log_z)))


# ---------------------------------------------------------------------------
# kernel density estimation
# ---------------------------------------------------------------------------


def scott_factor(n_eff, d: int) -> float:
    return float(np.asarray(n_eff) ** (-1.0 / (d + 4)))


class Kde:
    """Gaussian KDE with Scott bandwidth ``H = n_eff^{-2/(d+4)} cov``.

    ``points`` is ``(..., M, d)``; leading axes index independent estimates
    (one per observation sequence).  ``cov`` is the weighted sample
    covariance with the unbiased correction, and ``n_eff`` the Kish effective
    sample size, so unweighted input gives ``n_eff = M``.
    """

    def __init__(self, points, weights=None, events: Optional[list] = None):
        X = np.asarray(points, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        M, d = X.shape[-2:]
        if M < 2:
            raise ValueError("KDE needs at least two points")
        if weights is None:
            w = np.full(X.shape[:-1], 1.0 / M)
        else:
            w = np.asarray(weights, dtype=float)
            w = w / w.sum(-1, keepdims=True)
        self.points, self.weights, self.dim = X, w, d
        self.log_weights = np.log(np.where(w > 0, w, 1.0)) + np.where(w > 0, 0.0, -np.inf)
        self.n_eff = 1.0 / (w**2).sum(-1)
        mean = np.einsum("...i,...ij->...j", w, X)
        Xc = X - mean[..., None, :]
        denom = 1.0 - (w**2).sum(-1)
        cov = np.einsum("...i,...ij,...ik->...jk", w, Xc, Xc) / np.where(denom > 0, denom, 1.0)[..., None, None]
        self.data_cov = cov
        self.factor = np.asarray(self.n_eff) ** (-1.0 / (d + 4))
        self.bandwidth = cov * (self.factor**2)[..., None, None]
        self.chol = self._factor(events)
        self.inv_chol = np.linalg.inv(self.chol)
        self.log_norm = -np.log(np.diagonal(self.chol, axis1=-2, axis2=-1)).sum(-1) - 0.5 * d * LOG_2PI
        # whitened kernel centres, reused by every evaluation
        self._pw = np.einsum("...ij,...mj->...mi", self.inv_chol, X)

    def _factor(self, events):
        H = self.bandwidth
        try:
            return np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            pass
        d = self.dim
        tr = np.trace(H, axis1=-2, axis2=-1) / d
        scale = np.where(tr > 0, tr, 1.0)
        logger.info("singular KDE covariance, adding jitter")
        if events is not None:
            events.append({"kind": "kde jitter"})
        self.bandwidth = H + 1e-9 * scale[..., None, None] * np.eye(d)
        return np.linalg.cholesky(self.bandwidth)

    def logpdf(self, x, chunk: int = 2**22) -> np.ndarray:
        """Log-density at ``x`` of shape ``(..., P, d)``; returns ``(..., P)``."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.dim == 1 else x[None]
        xw = np.einsum("...ij,...pj->...pi", self.inv_chol, x)
        pw = self._pw
        lw = self.log_weights
        P, M = xw.shape[-2], pw.shape[-2]
        lead = np.broadcast_shapes(xw.shape[:-2], pw.shape[:-2])
        rows = int(np.prod(lead, dtype=int)) if lead else 1
        step = max(1, chunk // max(1, rows * M))
        pn = (pw**2).sum(-1)
        out = []
        for s in range(0, P, step):
            xs = xw[..., s : s + step, :]
            sq = (xs**2).sum(-1)[..., :, None] + pn[..., None, :] - 2.0 * xs @ np.swapaxes(pw, -1, -2)
            np.maximum(sq, 0.0, out=sq)
            out.append(logsumexp(lw[..., None, :] - 0.5 * sq, axis=-1))
        return np.concatenate(out, axis=-1) + np.asarray(self.log_norm)[..., None]

    def __call__(self, x):
        return np.exp(self.logpdf(x))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``(..., n, d)`` points from the mixture."""
        lead = self.weights.shape[:-1]
        rows = int(np.prod(lead, dtype=int)) if lead else 1
        w = self.weights.reshape(rows, -1)
        cdf = np.cumsum(w, axis=-1)
        cdf[:, -1] = 1.0
        u = rng.uniform(size=(rows, n))
        idx = np.stack([np.searchsorted(cdf[r], u[r], side="right") for r in range(rows)])
        idx = np.minimum(idx, w.shape[1] - 1).reshape(lead + (n,))
        centres = np.take_along_axis(self.points, idx[..., None], axis=-2)
        z = rng.standard_normal(centres.shape)
        return centres + np.einsum("...ij,...nj->...ni", self.chol, z)


def kde(points, weights=None) -> Kde:
    return Kde(points, weights)


def kde_logpdf(density: Kde, x) -> np.ndarray:
    return density.logpdf(x)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRecord:
    example: str
    method: str
    seed: int
    t_k: float
    metric: str
    value: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.metric == "nll" and self.value > NLL_CLIP + 1e-9:
            raise ValueError("NLL above the clip constant")

    def row(self) -> list:
        return [self.example, self.method, str(self.seed), repr(float(self.t_k)), self.metric, repr(float(self.value))]


def format_metrics_csv(records: Iterable[MetricRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow(r.row())
    return buf.getvalue()


def write_metrics_csv(records: Iterable[MetricRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_metrics_csv(records))


def read_metrics_csv(path) -> list[MetricRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricRecord(r["example"], r["method"], int(r["seed"]), float(r["t_k"]), r["metric"], float(r["value"]))
        for r in rows
    ]
