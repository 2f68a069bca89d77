"""Config-driven experiments: simulate, filter, compare against a reference.

An experiment walks through the evaluation sequences in chunks and, for each
observation time, asks every method (and the reference) for its posterior:
a mean, a normalized log-density and, for the reference, a sampler.  The five
metrics are then folded over sequences in a fixed order, so a given config
and seed always produce the same CSV bytes.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .classical import (
    Ensemble,
    FilterError,
    ParticleCloud,
    cloud_moments,
    ekf_step,
    enkf_step,
    ensemble_moments,
    initial_belief,
    kf_step,
    pf_step,
    search_rows,
)
from .deep import DeepConfig, DensityFilter, TrainingDivergence, train_filter
from .metrics import Kde, MetricRecord, kld_terms, nll_terms, rmae
from .models import LOG_2PI, FilteringProblem, problem_from_dict
from .normalize import (
    NormalizationError,
    UnconditionalMoments,
    build_ekf_proposal,
    build_wide_proposal,
    ekf_beliefs,
    log_is_normalize,
    log_quad_normalize,
    quad_points,
)
from .sim import SimulationError, TimeGrid, make_rng, simulate_pair

logger = logging.getLogger(__name__)

CLASSICAL = ("kf", "ekf", "enkf", "pf")
DEEP = ("dsf", "logdsf", "bsdef", "logbsdef")
METHOD_REGISTRY = CLASSICAL + DEEP
DIVERGENCES = (TrainingDivergence, FilterError, NormalizationError, SimulationError, FloatingPointError)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """One experiment: an example, its grid, methods and evaluation setup.

    ``methods`` entries are dicts with a ``method`` key from
    :data:`METHOD_REGISTRY`, an optional ``label`` and method parameters
    (``particles``, ``members``, ``substeps`` or a ``config`` block of deep
    hyperparameters).  ``evaluation`` holds ``M``, ``normalization``
    (``method``, ``samples``, ``inflation``), ``reference`` (``kind`` =
    ``kf``/``pf``/``none``, ``particles``, ``substeps``), ``kld_samples``,
    ``sim_substeps`` and ``chunk``.
    """

    example: str
    problem: dict = field(default_factory=dict)
    grid: dict = field(default_factory=lambda: {"T": 1.0, "K": 10})
    methods: list = field(default_factory=list)
    evaluation: dict = field(default_factory=dict)
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.methods:
            raise ConfigError("no methods configured")
        labels = set()
        for m in self.methods:
            if m.get("method") not in METHOD_REGISTRY:
                raise ConfigError(f"unknown method {m.get('method')!r}; known: {METHOD_REGISTRY}")
            lab = method_label(m)
            if lab in labels:
                raise ConfigError(f"duplicate method label {lab!r}")
            labels.add(lab)
            if m["method"] in DEEP:
                try:
                    DeepConfig.from_dict({**m.get("config", {}), "method": m["method"]})
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"method {lab!r}: {exc}") from None
        ref = self.evaluation.get("reference", {"kind": "kf"})
        if ref.get("kind") not in ("kf", "pf", "none"):
            raise ConfigError(f"invalid reference kind {ref.get('kind')!r}")
        if ref.get("kind") == "pf" and int(ref.get("particles", 0)) < 2:
            raise ConfigError("PF reference needs a particle count >= 2")
        norm = self.evaluation.get("normalization", {"method": "quad"})
        if norm.get("method") not in ("quad", "i-ekf", "i-g"):
            raise ConfigError(f"invalid normalization method {norm.get('method')!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"example", "problem", "grid", "methods", "evaluation", "seed", "name"}
        extra = set(d) - known - {"comment"}
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        d = {k: copy.deepcopy(v) for k, v in d.items() if k in known}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "example": self.example,
            "problem": self.problem,
            "grid": self.grid,
            "methods": self.methods,
            "evaluation": self.evaluation,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def make_problem(self) -> FilteringProblem:
        return problem_from_dict(self.example, self.problem)

    def time_grid(self, N: int = 1) -> TimeGrid:
        return TimeGrid(float(self.grid["T"]), int(self.grid["K"]), N)


def method_label(entry: dict) -> str:
    return entry.get("label", entry["method"])


@dataclass
class RunManifest:
    config_hash: str
    version: str
    seed: int
    timings: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    failed: dict = field(default_factory=dict)
    state_dim: int = 0
    sequences: int = 0

    def add_time(self, method: str, phase: str, seconds: float) -> None:
        self.timings.setdefault(method, {}).setdefault(phase, 0.0)
        self.timings[method][phase] += seconds

    def event(self, **info) -> None:
        self.events.append(info)

    def event_counts(self) -> dict:
        counts: dict = {}
        for e in self.events:
            key = f"{e.get('method', '-')}:{e.get('kind', '?')}"
            counts[key] = counts.get(key, 0) + 1
        return counts

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "version": self.version,
            "seed": self.seed,
            "state_dim": self.state_dim,
            "sequences": self.sequences,
            "timings": self.timings,
            "events": self.events,
            "event_counts": self.event_counts(),
            "failed": self.failed,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=float))

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        d.pop("event_counts", None)
        return cls(**d)


# ---------------------------------------------------------------------------
# posteriors at one observation time, for a chunk of sequences
# ---------------------------------------------------------------------------


class GaussianPosterior:
    def __init__(self, mean, cov):
        self.mean = mean
        self.cov = cov
        self._chol = np.linalg.cholesky(cov)

    def logpdf(self, x) -> np.ndarray:
        diff = np.asarray(x, dtype=float) - self.mean[:, None, :]
        z = np.linalg.solve(self._chol, np.swapaxes(diff, -1, -2))
        logdet = np.log(np.diagonal(self._chol, axis1=-2, axis2=-1)).sum(-1)
        return -0.5 * (z**2).sum(-2) - 0.5 * self.mean.shape[-1] * LOG_2PI - logdet[:, None]

    def sample(self, rng, J: int) -> np.ndarray:
        z = rng.standard_normal(self.mean.shape[:-1] + (J, self.mean.shape[-1]))
        return self.mean[:, None, :] + z @ np.swapaxes(self._chol, -1, -2)


class ParticlePosterior:
    """Empirical particle law: KDE log-density, sampling by weighted resampling."""

    def __init__(self, particles, weights=None, mean=None, events=None):
        self.particles = particles
        self.weights = weights
        self.valid = np.all(np.isfinite(particles), axis=(-2, -1))
        safe = np.where(self.valid[:, None, None], particles, 0.0)
        if not np.all(self.valid):
            # collapsed sequences get a dummy cloud; their values are masked below
            safe = safe + np.where(self.valid[:, None, None], 0.0, np.arange(particles.shape[-2])[None, :, None] * 1e-3)
        self.kde = Kde(safe, weights, events)
        self.mean = mean

    def logpdf(self, x) -> np.ndarray:
        lp = self.kde.logpdf(x)
        return np.where(self.valid[:, None], lp, -np.inf)

    def sample(self, rng, J: int) -> np.ndarray:
        M = self.particles.shape[-2]
        if self.weights is None:
            idx = rng.integers(0, M, size=self.particles.shape[:-2] + (J,))
        else:
            cdf = np.cumsum(self.weights, axis=-1)
            cdf[:, -1] = 1.0
            idx = search_rows(cdf, rng.uniform(size=(cdf.shape[0], J)))
        return np.take_along_axis(self.particles, idx[..., None], axis=-2)


class DeepPosterior:
    def __init__(self, filt: DensityFilter, k: int, obs, log_z, mean):
        self.filt, self.k, self.obs = filt, k, obs
        self.log_z = log_z
        self.mean = mean

    def logpdf(self, x) -> np.ndarray:
        return self.filt.log_density(self.k, x, self.obs) - self.log_z[:, None]


# ---------------------------------------------------------------------------
# method runners
# ---------------------------------------------------------------------------


class Runner:
    """Steps one method through the observations of a chunk of sequences."""

    label: str

    def prepare(self, problem, grid, rng, manifest) -> None:
        pass

    def start(self, obs, rng) -> None:
        raise NotImplementedError

    def step(self, k: int):
        raise NotImplementedError


class KalmanRunner(Runner):
    def __init__(self, label, problem, grid, extended: bool, substeps: int = 128):
        self.label, self.problem, self.grid = label, problem, grid
        self.extended = extended
        self.substeps = substeps
        if not extended and not (problem.model.is_linear and problem.obs.H is not None):
            raise ConfigError("kf requires a linear model; use ekf or a PF reference")

    def start(self, obs, rng):
        self.obs = obs
        self.belief = initial_belief(self.problem.init, obs.shape[:1])

    def step(self, k):
        stepper = ekf_step if self.extended else kf_step
        dt = self.grid.T / self.grid.K
        self.belief = stepper(self.belief, self.problem.model, self.problem.obs, dt, self.obs[:, k - 1], self.substeps)
        return GaussianPosterior(self.belief.mean, self.belief.cov)


class EnkfRunner(Runner):
    def __init__(self, label, problem, grid, members: int, substeps: int = 1, events=None):
        self.label, self.problem, self.grid = label, problem, grid
        self.members, self.substeps = members, substeps
        self.events = events

    def start(self, obs, rng):
        self.obs, self.rng = obs, rng
        C = obs.shape[0]
        x = self.problem.init.sample(rng, C * self.members).reshape(C, self.members, -1)
        self.ens = Ensemble(x)

    def step(self, k):
        dt = self.grid.T / self.grid.K
        self.ens = enkf_step(
            self.ens, self.problem.model, self.problem.obs, dt, self.obs[:, k - 1], self.rng, self.substeps, self.events
        )
        if not np.all(np.isfinite(self.ens.members)):
            raise FilterError("EnKF ensemble became non-finite")
        mean, _ = ensemble_moments(self.ens)
        return ParticlePosterior(self.ens.members, None, mean, self.events)


class PfRunner(Runner):
    def __init__(self, label, problem, grid, particles: int, substeps: int = 1, resample="systematic", events=None):
        self.label, self.problem, self.grid = label, problem, grid
        self.particles, self.substeps, self.resample = int(particles), int(substeps), resample
        self.events = events

    def start(self, obs, rng):
        self.obs, self.rng = obs, rng
        self.cloud = ParticleCloud.from_prior(self.problem.init, self.particles, rng, obs.shape[:1])

    def step(self, k):
        dt = self.grid.T / self.grid.K
        ev = []
        self.cloud = pf_step(
            self.cloud, self.problem.model, self.problem.obs, dt, self.obs[:, k - 1], self.rng,
            self.substeps, self.resample, ev,
        )
        if self.events is not None:
            for e in ev:
                self.events.append({**e, "k": k})
        with np.errstate(invalid="ignore"):
            mean, _ = cloud_moments(self.cloud)
        return ParticlePosterior(self.cloud.particles, None, mean, self.events)


class DeepRunner(Runner):
    """Evaluates a trained deep filter with the configured normalization."""

    def __init__(self, label, problem, grid, entry: dict, norm: dict, moments: UnconditionalMoments, out_dir=None):
        self.label, self.problem, self.grid = label, problem, grid
        self.entry = entry
        self.norm = norm
        self.moments = moments
        self.out_dir = out_dir
        self.filter: Optional[DensityFilter] = None
        self.events: list = []

    def prepare(self, problem, grid, rng, manifest):
        ckpt = self.entry.get("checkpoint")
        if ckpt and (Path(ckpt) / "filter.bin").exists():
            self.filter = DensityFilter.load(ckpt)
            return
        cfg = DeepConfig.from_dict({**self.entry.get("config", {}), "method": self.entry["method"]})
        t0 = time.perf_counter()
        self.filter = train_filter(problem, grid, cfg, rng)
        manifest.add_time(self.label, "train", time.perf_counter() - t0)
        if self.out_dir is not None:
            self.filter.save(Path(self.out_dir) / "checkpoints" / self.label)

    def start(self, obs, rng):
        self.obs, self.rng = obs, rng
        self.beliefs = None
        if self.norm["method"] == "i-ekf":
            try:
                self.beliefs = ekf_beliefs(self.problem.model, self.problem.obs, self.problem.init, obs, self.grid)
            except FilterError:
                self.beliefs = None

    def step(self, k):
        filt, obs = self.filter, self.obs
        method = self.norm["method"]
        I = int(self.norm.get("samples", 1000))
        logdens = lambda x: filt.log_density(k, x, obs)  # noqa: E731
        if method == "quad":
            if filt.state_dim != 1:
                raise ConfigError("quadrature normalization needs d = 1")
            l, r = self.moments.domain(k, float(self.norm.get("width", 8.0)))
            xs = quad_points(l, r, I)
            lp = logdens(xs)
            lz = log_quad_normalize(logdens, l, r, I)
            w = np.exp(lp - lz[:, None]) * (r - l) / I
            mean = (w[..., None] * xs[None]).sum(1)
        else:
            if method == "i-ekf":
                q = build_ekf_proposal(
                    self.problem.model, self.problem.obs, self.problem.init, obs, self.grid, k,
                    float(self.norm.get("inflation", 2.0)), fallback=self.moments, events=self.events,
                    beliefs=self.beliefs,
                )
            else:
                q = build_wide_proposal(
                    self.problem.model, self.grid, k, float(self.norm.get("inflation", 3.0)), self.moments, I=I
                )
            res = log_is_normalize(logdens, q, I, self.rng, events=self.events)
            lz, mean = res.log_z, res.mean()
        if not (np.all(np.isfinite(lz)) and np.all(np.isfinite(mean))):
            raise NormalizationError(f"non-finite normalization for {self.label} at k={k}")
        return DeepPosterior(filt, k, obs, lz, mean)


def make_runner(entry: dict, problem, grid, evaluation: dict, moments, manifest, out_dir=None) -> Runner:
    kind = entry["method"]
    label = method_label(entry)
    if kind in ("kf", "ekf"):
        return KalmanRunner(label, problem, grid, kind == "ekf", int(entry.get("substeps", 128)))
    if kind == "enkf":
        return EnkfRunner(label, problem, grid, int(entry.get("members", 1000)), int(entry.get("substeps", 1)), manifest.events)
    if kind == "pf":
        return PfRunner(
            label, problem, grid, int(entry.get("particles", 10_000)), int(entry.get("substeps", 1)),
            entry.get("resample", "systematic"), manifest.events,
        )
    norm = evaluation.get("normalization", {"method": "quad"})
    return DeepRunner(label, problem, grid, entry, norm, moments, out_dir)


def make_reference(problem: FilteringProblem, grid: TimeGrid, spec: dict, manifest=None) -> Optional[Runner]:
    """Reference filter handle: exact KF, a fine particle filter, or ``None``."""
    kind = spec.get("kind", "kf")
    if kind == "none":
        return None
    if kind == "kf":
        if not (problem.model.is_linear and problem.obs.H is not None):
            raise ConfigError("a KF reference needs a linear-Gaussian example")
        return KalmanRunner("reference", problem, grid, extended=False, substeps=int(spec.get("substeps", 128)))
    if kind == "pf":
        events = manifest.events if manifest is not None else None
        return PfRunner("reference", problem, grid, int(spec.get("particles", 100_000)), int(spec.get("substeps", 128)),
                        "systematic", events)
    raise ConfigError(f"invalid reference kind {kind!r}")


# ---------------------------------------------------------------------------
# the experiment loop
# ---------------------------------------------------------------------------


@dataclass
class _Accum:
    """Per-sequence quantities for one method, one array per observation time."""

    means: list
    nll: list
    kld: list


def run_experiment(config: ExperimentConfig, out_dir=None, progress=None):
    """Run all methods of ``config``; returns ``(records, manifest)``."""
    ev = config.evaluation
    seed = int(config.seed)
    problem = config.make_problem()
    grid = config.time_grid(1)
    manifest = RunManifest(config.config_hash(), __version__, seed, state_dim=problem.model.state_dim)
    M = int(ev.get("M", 100))
    manifest.sequences = M
    J = int(ev.get("kld_samples", 10))
    ref_spec = ev.get("reference", {"kind": "kf"})
    sim_grid = grid.with_substeps(int(ev.get("sim_substeps", 128)))

    t0 = time.perf_counter()
    traj, seqs = simulate_pair(problem.model, problem.obs, problem.init, sim_grid, make_rng(seed, "eval"), n_paths=M)
    states, obs = traj.at_obs_times(), seqs.obs
    manifest.add_time("all", "simulate", time.perf_counter() - t0)
    moments = UnconditionalMoments(problem.model, problem.init, grid, int(ev.get("moment_paths", 10_000)), seed, sim_grid.N)

    reference = make_reference(problem, grid, ref_spec, manifest)
    runners = []
    for entry in config.methods:
        label = method_label(entry)
        try:
            r = make_runner(entry, problem, grid, ev, moments, manifest, out_dir)
            r.prepare(problem, grid, make_rng(seed, "train", label), manifest)
            runners.append(r)
        except DIVERGENCES as exc:
            logger.warning("method %s failed during training: %s", label, exc)
            manifest.failed[label] = f"train: {exc}"
            manifest.event(method=label, kind="divergence", phase="train", message=str(exc))

    K = grid.K
    chunk = int(ev.get("chunk", _default_chunk(ref_spec, config.methods, M)))
    acc = {r.label: _Accum([[] for _ in range(K)], [[] for _ in range(K)], [[] for _ in range(K)]) for r in runners}
    ref_means = [[] for _ in range(K)]
    alive = {r.label: True for r in runners}

    for ci, s0 in enumerate(range(0, M, chunk)):
        sl = slice(s0, min(M, s0 + chunk))
        o_c, x_c = obs[sl], states[sl]
        if reference is not None:
            t0 = time.perf_counter()
            reference.start(o_c, make_rng(seed, "reference", ci))
            manifest.add_time("reference", "filter", time.perf_counter() - t0)
        for r in runners:
            if alive[r.label]:
                t0 = time.perf_counter()
                r.start(o_c, make_rng(seed, "method", r.label, ci))
                manifest.add_time(r.label, "filter", time.perf_counter() - t0)
        for k in range(1, K + 1):
            ref_post, z, ref_lp = None, None, None
            if reference is not None:
                t0 = time.perf_counter()
                ref_post = reference.step(k)
                manifest.add_time("reference", "filter", time.perf_counter() - t0)
                ref_means[k - 1].append(ref_post.mean)
                z = ref_post.sample(make_rng(seed, "kld", ci, k), J)
                ref_lp = ref_post.logpdf(z)
            for r in runners:
                if not alive[r.label]:
                    continue
                try:
                    t0 = time.perf_counter()
                    with np.errstate(over="ignore", under="ignore"):
                        post = r.step(k)
                    manifest.add_time(r.label, "filter", time.perf_counter() - t0)
                    if ci == 0 and k in (1, K) and not isinstance(r, DeepRunner):
                        _time_posterior_density(r.label, post, k, problem.model.state_dim, manifest)
                    a = acc[r.label]
                    a.means[k - 1].append(post.mean)
                    a.nll[k - 1].append(nll_terms(post.logpdf(x_c[:, k - 1][:, None, :])[:, 0]))
                    if ref_post is not None:
                        a.kld[k - 1].append(kld_terms(ref_lp, post.logpdf(z)).mean(-1))
                except DIVERGENCES as exc:
                    logger.warning("method %s failed at k=%d: %s", r.label, k, exc)
                    alive[r.label] = False
                    manifest.failed[r.label] = f"k={k}: {exc}"
                    manifest.event(method=r.label, kind="divergence", phase="filter", k=k, message=str(exc))
        if progress:
            progress(sl.stop, M)

    _time_density(runners, alive, obs, grid, manifest)
    for r in runners:
        if isinstance(r, DeepRunner):
            for e in r.events:
                manifest.event(method=r.label, **e)
    records = _fold_metrics(config, runners, alive, acc, ref_means, states, grid, reference is not None)
    return records, manifest


def _default_chunk(ref_spec, methods, M) -> int:
    biggest = 1
    if ref_spec.get("kind") == "pf":
        biggest = max(biggest, int(ref_spec.get("particles", 100_000)))
    for m in methods:
        biggest = max(biggest, int(m.get("particles", 1)), int(m.get("members", 1)))
    return int(max(1, min(M, 2_000_000 // biggest)))


DENSITY_POINTS = 1000


def _best_time(fn, repeats: int = 3) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _time_posterior_density(label, post, k, d, manifest) -> None:
    """Seconds to build and evaluate one sequence's density at 1000 points."""
    x = np.zeros((1, DENSITY_POINTS, d))
    if isinstance(post, GaussianPosterior):
        fn = lambda: GaussianPosterior(post.mean[:1], post.cov[:1]).logpdf(x)  # noqa: E731
    else:
        w = None if post.weights is None else post.weights[:1]
        fn = lambda: ParticlePosterior(post.particles[:1], w).logpdf(x)  # noqa: E731
    manifest.timings.setdefault(label, {})[f"density_k{k}"] = _best_time(fn)


def _time_density(runners, alive, obs, grid, manifest) -> None:
    """Seconds to evaluate each trained deep filter's density at 1000 points."""
    for r in runners:
        if not (alive[r.label] and isinstance(r, DeepRunner)):
            continue
        x = np.zeros((DENSITY_POINTS, r.filter.state_dim))
        for k in (1, grid.K):
            sec = _best_time(lambda: r.filter.log_density(k, x, obs[:1]), repeats=5)
            manifest.timings.setdefault(r.label, {})[f"density_k{k}"] = sec


def _fold_metrics(config, runners, alive, acc, ref_means, states, grid, have_ref) -> list[MetricRecord]:
    records = []
    seed = int(config.seed)
    K = grid.K
    if have_ref:
        ref_mean_all = [np.concatenate(ref_means[k]) for k in range(K)]
        mae_ref = [float(np.mean(np.linalg.norm(states[:, k] - ref_mean_all[k], axis=-1))) for k in range(K)]
    for entry in config.methods:
        label = method_label(entry)
        r = next((r for r in runners if r.label == label), None)
        if r is None or not alive[label]:
            continue
        a = acc[label]
        for k in range(K):
            t_k = grid.t_k(k + 1)
            mean = np.concatenate(a.means[k])
            ok = np.all(np.isfinite(mean), axis=-1)
            err_true = np.linalg.norm(states[:, k] - mean, axis=-1)
            mae_hat = float(np.mean(err_true[ok])) if np.any(ok) else float("nan")
            vals = {}
            if have_ref:
                vals["fme"] = float(np.mean(np.linalg.norm(mean - ref_mean_all[k], axis=-1)[ok])) if np.any(ok) else np.nan
            vals["mae"] = mae_hat
            if have_ref:
                vals["rmae"] = rmae(mae_hat, mae_ref[k])
                vals["kld"] = float(np.mean(np.concatenate(a.kld[k])[ok])) if np.any(ok) else np.nan
            vals["nll"] = float(np.mean(np.concatenate(a.nll[k])))
            for metric in ("fme", "mae", "rmae", "kld", "nll"):
                if metric in vals and np.isfinite(vals[metric]):
                    records.append(MetricRecord(config.example, label, seed, t_k, metric, vals[metric]))
    return records


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


TIMING_HEADER = ("method", "d", "phase", "seconds")


def timing_rows(manifests) -> list[tuple]:
    """``(method, d, phase, seconds)``; filter time is per trajectory."""
    rows = []
    for man in manifests:
        for method, phases in sorted(man.timings.items()):
            for phase, sec in sorted(phases.items()):
                if phase == "filter" and man.sequences:
                    rows.append((method, man.state_dim, "filter_per_trajectory", sec / man.sequences))
                else:
                    rows.append((method, man.state_dim, phase, sec))
    return rows


def timing_report(manifests, path=None) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_HEADER)
    for row in timing_rows(manifests):
        w.writerow([row[0], row[1], row[2], repr(float(row[3]))])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def summarize(records) -> dict:
    """Time-averaged value per ``(method, metric)``."""
    out: dict = {}
    for r in records:
        out.setdefault((r.method, r.metric), []).append(r.value)
    return {k: float(np.mean(v)) for k, v in out.items()}


# ---------------------------------------------------------------------------
# checked-in configs
# ---------------------------------------------------------------------------


def config_dir() -> Path:
    return Path(__file__).parent / "configs"


def list_configs() -> list[str]:
    return sorted(p.stem for p in config_dir().glob("*.json"))


def load_named_config(name: str) -> ExperimentConfig:
    path = Path(name)
    if not path.exists():
        path = config_dir() / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"no config {name!r}; available: {list_configs()}")
    return ExperimentConfig.load(path)
