"""Deep splitting and deep BSDE density filters, plain and logarithmic.

Both schemes approximate the predicted density on each observation interval
with networks ``phi`` taking ``[x, o_1, ..., o_k, 0, ..., 0]`` as input.  The
filtering density at ``t_k`` is then ``phi_{k-1}(x) L(o_k, x)``, up to a
normalizing constant.

Log variants model ``v = -log p`` instead of ``p``; their networks have a
linear output and evaluation reports ``-v``.  Plain variants use an
exponential output, so their pre-activation is the log-density.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .models import FilteringProblem, SdeModel, log_likelihood, problem_from_dict
from .nn import Mlp, TrainState, warm_start
from .sim import TimeGrid, read_blob, simulate_training_batch, write_blob

logger = logging.getLogger(__name__)

MODES = ("dsf", "logdsf", "bsdef", "logbsdef")


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite loss or rollout value."""

    def __init__(self, message, k=None, n=None):
        super().__init__(message)
        self.k, self.n = k, n


def is_log_mode(mode: str) -> bool:
    return mode.startswith("log")


def is_bsde_mode(mode: str) -> bool:
    return mode.endswith("bsdef")


# ---------------------------------------------------------------------------
# PDE coefficients
# ---------------------------------------------------------------------------


def f_coefficients(model: SdeModel, x):
    """``(c, b)`` with ``f(x, u, v) = c u + b . v``."""
    c = 0.5 * model.lap_a(x) - model.div_drift(x)
    b = model.grad_div_a(x) - 2.0 * model.drift(x)
    return c, b


def eval_f(model: SdeModel, x, u, v):
    """First-order correction term of the Fokker-Planck operator.

    ``f(x, u, v) = sum_j (div a)_j v_j + (lap a / 2) u - (div mu) u - 2 mu . v``.
    """
    c, b = f_coefficients(model, x)
    return c * u + (b * v).sum(-1)


def eval_f_log(model: SdeModel, x, u, w):
    """Correction term of the log-transformed equation; ``u`` is unused."""
    sw = model.apply_diffusion_T(x, w)
    return -0.5 * (sw**2).sum(-1) - eval_f(model, x, 1.0, -np.asarray(w))


def g_tau(value_and_grad: Callable, x, tau: float, model: SdeModel, log: bool):
    """``(G^tau phi)(x) = phi(x) + tau f(x, phi(x), grad phi(x))``.

    ``value_and_grad`` maps points ``(..., d)`` to ``(value, gradient)``.
    """
    val, grad = value_and_grad(x)
    if tau == 0:
        return val
    corr = eval_f_log(model, x, val, grad) if log else eval_f(model, x, val, grad)
    return val + tau * corr


# ---------------------------------------------------------------------------
# network inputs
# ---------------------------------------------------------------------------


def pad_observations(obs, k: int, K: int) -> np.ndarray:
    """Flatten ``o_1..o_k`` and zero-fill to width ``d' (K-1)``."""
    obs = np.asarray(obs, dtype=float)
    if not 0 <= k <= K - 1:
        raise ValueError(f"can condition on at most K-1={K - 1} observations, got {k}")
    dp = obs.shape[-1]
    out = np.zeros(obs.shape[:-2] + (dp * (K - 1),))
    if k > 0:
        out[..., : dp * k] = obs[..., :k, :].reshape(obs.shape[:-2] + (dp * k,))
    return out


def net_input(x, opad) -> np.ndarray:
    """Concatenate states with padded observations, broadcasting leading axes."""
    x = np.asarray(x, dtype=float)
    lead = np.broadcast_shapes(x.shape[:-1], opad.shape[:-1])
    return np.concatenate(
        [np.broadcast_to(x, lead + x.shape[-1:]), np.broadcast_to(opad, lead + opad.shape[-1:])], axis=-1
    )


def _net_value_grad(net: Mlp, opad, d: int):
    def vg(x):
        inp = net_input(x, opad)
        val, g = net.value_and_grad_input(inp.reshape(-1, inp.shape[-1]))
        return val.reshape(inp.shape[:-1]), g[:, :d].reshape(inp.shape[:-1] + (d,))

    return vg


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class DeepConfig:
    """Training hyperparameters of one deep filter.

    ``max_iters`` bounds BSDE iterations per observation step;
    ``n_batches``/``epochs_*`` set the pre-generated splitting dataset.
    ``train_norm`` optionally normalizes Bayes-updated targets during
    training, e.g. ``{"method": "quad", "count": 64, "samples": 64}``.
    """

    method: str = "logbsdef"
    N: int = 64
    width_phi: int = 128
    width_v: int = 32
    depth: int = 3
    batch: int = 512
    lr_max: float = 1e-4
    lr_min: Optional[float] = None
    schedule: str = "const"
    patience: int = 50
    cycle: int = 80
    window: int = 200
    max_iters: int = 2000
    n_batches: int = 200
    epochs_update: int = 100
    epochs_predict: int = 10
    train_norm: Optional[dict] = None

    def __post_init__(self):
        if self.method not in MODES:
            raise ValueError(f"unknown method {self.method!r}; expected one of {MODES}")
        if self.N < 1 or self.batch < 1 or self.depth < 1:
            raise ValueError("N, batch and depth must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "DeepConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown deep-filter config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# the filter object
# ---------------------------------------------------------------------------


class DensityFilter:
    """Trained deep density filter.

    ``phi[k]`` (k = 0..K-1) approximates the predicted density on
    ``[t_k, t_{k+1}]`` given ``o_{1:k}``; for splitting filters it is the last
    substep network ``phi_{k,N}`` and ``phi_sub[k]`` holds all of them.
    """

    def __init__(
        self,
        mode: str,
        problem: FilteringProblem,
        grid: TimeGrid,
        config: DeepConfig,
        phi: Optional[list] = None,
        vbar: Optional[list] = None,
        phi_sub: Optional[list] = None,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.problem = problem
        self.grid = grid
        self.config = config
        self.phi = list(phi or [])
        self.vbar = list(vbar or [])
        self.phi_sub = list(phi_sub or [])
        self.history: list[dict] = []
        self._norm_cache: dict = {}

    @property
    def log(self) -> bool:
        return is_log_mode(self.mode)

    @property
    def K(self) -> int:
        return self.grid.K

    @property
    def state_dim(self) -> int:
        return self.problem.model.state_dim

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.problem.obs.obs_dim * (self.K - 1)

    @property
    def trained_steps(self) -> int:
        return len(self.phi)

    def invalidate_cache(self) -> None:
        self._norm_cache.clear()

    def phi_log_value(self, j: int, x, obs) -> np.ndarray:
        """Log of the density represented by ``phi_j`` at ``x`` given ``o_{1:j}``."""
        net = self.phi[j]
        opad = pad_observations(obs, j, self.K)
        inp = net_input(x, opad[..., None, :] if np.ndim(x) >= 2 else opad)
        raw = net.raw(inp.reshape(-1, inp.shape[-1])).reshape(inp.shape[:-1])
        return -raw if self.log else raw

    def log_density(self, k: int, x, obs) -> np.ndarray:
        """Unnormalized log filtering density at ``t_k`` (``k`` in ``1..K``).

        ``x`` has shape ``(..., P, d)`` and ``obs`` ``(..., >=k, d')``; leading
        axes broadcast, so one point set can be shared by many sequences.
        """
        if not 1 <= k <= self.K:
            raise ValueError(f"k must be in 1..{self.K}")
        if k > self.trained_steps:
            raise RuntimeError(f"filter step {k} is untrained ({self.trained_steps} trained)")
        obs = np.asarray(obs, dtype=float)
        x = np.asarray(x, dtype=float)
        lp = self.phi_log_value(k - 1, x, obs)
        ll = log_likelihood(self.problem.obs, obs[..., k - 1, None, :], x)
        return lp + ll

    def density(self, k: int, x, obs) -> np.ndarray:
        return np.exp(self.log_density(k, x, obs))

    # -- normalization -----------------------------------------------------

    def log_normalizer(self, k: int, obs, compute: Callable, key: str = "") -> np.ndarray:
        """``log Z`` per sequence, cached on (observations, k, key)."""
        obs = np.ascontiguousarray(obs, dtype=float)
        h = hashlib.sha1(obs[..., :k, :].tobytes()).hexdigest()
        ck = (h, obs.shape[:-2], k, key)
        if ck not in self._norm_cache:
            self._norm_cache[ck] = np.asarray(compute(lambda x: self.log_density(k, x, obs)))
        return self._norm_cache[ck]

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        arrays = {}
        arch = {}
        for j, net in enumerate(self.phi):
            arrays[f"phi_{j}"] = net.params
            arch[f"phi_{j}"] = net.architecture()
        for j, net in enumerate(self.vbar):
            arrays[f"vbar_{j}"] = net.params
            arch[f"vbar_{j}"] = net.architecture()
        for j, nets in enumerate(self.phi_sub):
            for n, net in enumerate(nets):
                arrays[f"phisub_{j}_{n}"] = net.params
                arch[f"phisub_{j}_{n}"] = net.architecture()
        header = {
            "mode": self.mode,
            "problem": {"name": self.problem.name, "params": self.problem.params},
            "grid": {"T": self.grid.T, "K": self.grid.K, "N": self.grid.N},
            "config": self.config.to_dict(),
            "architectures": arch,
            "history": self.history,
            "counts": {"phi": len(self.phi), "vbar": len(self.vbar), "phi_sub": [len(s) for s in self.phi_sub]},
        }
        write_blob(path / "filter.bin", header, arrays)

    @classmethod
    def load(cls, path) -> "DensityFilter":
        header, arrays = read_blob(Path(path) / "filter.bin")

        def net(name):
            a = header["architectures"][name]
            return Mlp(a["input_dim"], a["hidden"], a["output_dim"], a["output_activation"], a["stack"], params=arrays[name])

        problem = problem_from_dict(header["problem"]["name"], header["problem"]["params"])
        g = header["grid"]
        c = header["counts"]
        filt = cls(
            header["mode"],
            problem,
            TimeGrid(g["T"], g["K"], g["N"]),
            DeepConfig.from_dict(header["config"]),
            phi=[net(f"phi_{j}") for j in range(c["phi"])],
            vbar=[net(f"vbar_{j}") for j in range(c["vbar"])],
            phi_sub=[[net(f"phisub_{j}_{n}") for n in range(m)] for j, m in enumerate(c["phi_sub"])],
        )
        filt.history = header["history"]
        return filt


def eval_filter_logdensity(filt: DensityFilter, k: int, x, obs) -> np.ndarray:
    return filt.log_density(k, x, obs)


def filter_moments(filt: DensityFilter, k: int, obs, proposal, I: int, rng, events=None):
    """Importance estimates of the posterior mean and of ``Z_hat`` at ``t_k``."""
    from .normalize import log_is_normalize

    res = log_is_normalize(lambda x: filt.log_density(k, x, obs), proposal, I, rng, events=events)
    return res.mean(), res.z


# ---------------------------------------------------------------------------
# shared training pieces
# ---------------------------------------------------------------------------


def _new_phi(filt: DensityFilter, rng) -> Mlp:
    c = filt.config
    act = "linear" if filt.log else "exp"
    return Mlp(filt.input_dim, [c.width_phi] * c.depth, 1, act, rng=rng)


def _train_state(config: DeepConfig, sizes) -> TrainState:
    return TrainState(
        sizes,
        lr_max=config.lr_max,
        lr_min=config.lr_min,
        schedule=config.schedule,
        patience=config.patience,
        cycle=config.cycle,
        window=config.window,
    )


def _prior_log_target(filt: DensityFilter, x):
    """Log of the k=0 terminal density ``pi_0`` with its gradient."""
    init = filt.problem.init
    return init.logpdf(x), init.grad_logpdf(x)


def updated_log_density(filt: DensityFilter, k: int, x, obs, with_grad: bool = False):
    """Log of the Bayes-updated density ``phi_{k-1} L(o_k, .)`` (or ``pi_0`` at k=0).

    ``x`` and ``obs`` are paired along the leading axis (training layout).
    """
    if k == 0:
        lp, g = _prior_log_target(filt, x)
        return (lp, g) if with_grad else lp
    obsmodel = filt.problem.obs
    opad = pad_observations(obs, k - 1, filt.K)
    ll = log_likelihood(obsmodel, obs[..., k - 1, :], x)
    if not with_grad:
        inp = net_input(x, opad)
        raw = filt.phi[k - 1].raw(inp)[..., 0]
        return (-raw if filt.log else raw) + ll
    val, g = _net_value_grad(filt.phi[k - 1], opad, filt.state_dim)(x)
    if filt.log:
        lp, glp = -val, -g
    else:
        lp, glp = np.log(val), g / val[..., None]
    return lp + ll, glp + obsmodel.grad_log_likelihood(obs[..., k - 1, :], x)


def _training_log_norm(filt: DensityFilter, k: int, obs_unique, cache, rng) -> np.ndarray:
    """Per-sequence ``log Z`` of the k-th Bayes-updated density (train_norm)."""
    from .normalize import build_wide_proposal, log_is_normalize, log_quad_normalize

    spec = filt.config.train_norm
    I = int(spec.get("samples", 64))

    def logdens(x):
        # x: (..., I, d) shared grid or per-sequence samples; obs_unique: (S, K, d')
        S = obs_unique.shape[0]
        xb = np.broadcast_to(x, (S,) + x.shape[-2:])
        ob = np.broadcast_to(obs_unique[:, None], (S, xb.shape[1]) + obs_unique.shape[1:])
        return updated_log_density(filt, k, xb.reshape(-1, xb.shape[-1]), ob.reshape((-1,) + ob.shape[2:])).reshape(
            S, -1
        )

    if spec.get("method", "quad") == "quad":
        if filt.state_dim != 1:
            raise ValueError("quadrature training normalization needs d = 1")
        l, r = cache.domain(k)
        return log_quad_normalize(logdens, l, r, I)
    q = build_wide_proposal(filt.problem.model, filt.grid, k, float(spec.get("inflation", 3.0)), cache, I=I)
    return log_is_normalize(logdens, q, I, rng).log_z


def _norm_cache(filt: DensityFilter, seed: int):
    from .normalize import UnconditionalMoments

    p = filt.problem
    return UnconditionalMoments(p.model, p.init, filt.grid, seed=seed)


def _batch_obs(filt, batch: int, obs, rng):
    """With train_norm, reuse ``count`` sequences across the batch."""
    spec = filt.config.train_norm
    if not spec:
        return obs, None
    count = max(1, min(int(spec.get("count", 64)), batch))
    reps = -(-batch // count)
    uniq = obs[:count]
    return np.repeat(uniq, reps, axis=0)[:batch], uniq


# ---------------------------------------------------------------------------
# deep splitting
# ---------------------------------------------------------------------------


def ds_target(filt: DensityFilter, k: int, n: int, x_next, obs, tau: Optional[float] = None) -> np.ndarray:
    """Regression target ``G^tau g_{k,n}`` at ``x_next`` with paired observations.

    ``g_{k,n}`` is ``phi_{k,n}`` for ``n >= 1``; at ``n = 0`` it is the
    Bayes-updated density (``pi_0`` when ``k = 0``), or minus its log in log
    mode.
    """
    model = filt.problem.model
    tau = filt.grid.tau if tau is None else tau
    d = filt.state_dim
    if n >= 1:
        opad = pad_observations(obs, k, filt.K)
        vg = _net_value_grad(filt.phi_sub[k][n - 1], opad, d)
    else:

        def vg(x):
            lp, g = updated_log_density(filt, k, x, obs, with_grad=True)
            if filt.log:
                return -lp, -g
            p = np.exp(lp)
            return p, p[..., None] * g

    return g_tau(vg, x_next, tau, model, filt.log)


def _fit_regression(net: Mlp, inputs, targets, state: TrainState, epochs: int, batch: int, rng, where: tuple):
    """Mean-squared regression of ``net`` over pre-generated mini-batches."""
    n_total = inputs.shape[0]
    n_b = max(1, n_total // batch)
    it = 0
    for _ in range(epochs):
        for j in rng.permutation(n_b):
            sl = slice(j * batch, (j + 1) * batch)
            x, t = inputs[sl], targets[sl]
            raw, out, cache = net.forward(x, keep=True)
            resid = out[:, 0] - t
            loss = float(np.mean(resid**2))
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at (k, n) = {where}", *where)
            d_out = (2.0 / len(t)) * resid[:, None]
            d_raw = d_out * out if net.output_activation == "exp" else d_out
            grads, _ = net.backward(cache, d_raw)
            state.apply(net.params, grads)
            it += 1
            if state.record(loss):
                return it
    return it


def train_dsf(problem: FilteringProblem, grid: TimeGrid, config: DeepConfig, rng, progress=None) -> DensityFilter:
    """Train a (log) deep splitting filter.

    For every observation step a dataset of ``n_batches`` mini-batches of
    auxiliary paths is generated; the ``N`` substep networks are then fit one
    after another, each warm-started from its predecessor.
    """
    if is_bsde_mode(config.method):
        raise ValueError("train_dsf expects method 'dsf' or 'logdsf'")
    grid = grid.with_substeps(config.N)
    filt = DensityFilter(config.method, problem, grid, config)
    model, obsmodel = problem.model, problem.obs
    prev = None
    ncache = _norm_cache(filt, int(rng.integers(2**31))) if config.train_norm else None
    for k in range(grid.K):
        t0 = time.perf_counter()
        size = config.n_batches * config.batch
        data = simulate_training_batch(
            model, obsmodel, problem.q0, grid, size, rng, init=problem.init, n_intervals=k + 1, n_obs=k, keep_from=k
        )
        X, obs = data.x, data.obs
        log_shift = np.zeros(size)
        if config.train_norm and k > 0:
            # normalize the updated density per distinct sequence
            count = max(1, min(int(config.train_norm.get("count", 64)), size))
            group = np.arange(size) % count
            obs = obs[group]
            lz = _training_log_norm(filt, k, obs[:count], ncache, rng)
            log_shift = lz[group]
        opad = pad_observations(obs, k, grid.K)
        nets = []
        filt.phi_sub.append(nets)
        for n in range(grid.N):
            target = ds_target(filt, k, n, X[:, n + 1], obs)
            if n == 0 and config.train_norm and k > 0:
                target = target + log_shift if filt.log else target * np.exp(-log_shift)
            if prev is None:
                net = _new_phi(filt, rng)
            else:
                net = warm_start(prev)
            state = _train_state(config, net.n_params)
            epochs = config.epochs_update if n == 0 else config.epochs_predict
            inputs = net_input(X[:, n], opad)
            iters = _fit_regression(net, inputs, target, state, epochs, config.batch, rng, (k, n))
            nets.append(net)
            prev = net
            filt.history.append(
                {
                    "k": k,
                    "n": n + 1,
                    "iterations": iters,
                    "best_window": state.best if np.isfinite(state.best) else None,
                    "stopped_early": state.stopped,
                }
            )
        filt.phi.append(nets[-1])
        filt.history[-1]["seconds_step"] = time.perf_counter() - t0
        if progress:
            progress(k, filt.history[-1])
    filt.invalidate_cache()
    return filt


# ---------------------------------------------------------------------------
# deep BSDE
# ---------------------------------------------------------------------------


@dataclass
class RolloutResult:
    y_final: np.ndarray
    y0: np.ndarray
    dyN_dy0: np.ndarray
    dyN_dv: np.ndarray
    caches: tuple = field(repr=False, default=None)


def bsde_rollout(phi: Mlp, vbar: Mlp, X, dW, opad, model: SdeModel, tau: float, log: bool, keep: bool = False):
    """Discrete BSDE rollout along auxiliary paths.

    ``Y_0 = phi(X_0)`` and ``Y_{n+1} = Y_n - tau f(X_n, Y_n, v_n) + v_n . sigma(X_n) dW_n``
    with ``v_n = vbar_n(X_n)``.  ``X`` is ``(B, N+1, d)``, ``dW`` ``(B, N, m)``.
    Also returns the sensitivities of ``Y_N`` needed for back-propagation.
    """
    X = np.asarray(X, dtype=float)
    B, N1, d = X.shape
    N = N1 - 1
    raw0, out0, cache0 = phi.forward(net_input(X[:, 0], opad), keep=keep)
    y0 = out0[:, 0]
    Xn = np.swapaxes(X[:, :N], 0, 1)  # (N, B, d)
    _, V, cacheV = vbar.forward(net_input(Xn, opad[None]), keep=keep)
    c, b = f_coefficients(model, Xn)
    sdw = model.apply_diffusion(Xn, np.swapaxes(dW, 0, 1))
    mart = (V * sdw).sum(-1)
    if log:
        sV = model.apply_diffusion_T(Xn, V)
        flog = -0.5 * (sV**2).sum(-1) + (b * V).sum(-1) - c
        incr = -tau * flog + mart
        y = y0 + incr.sum(0)
        if not np.all(np.isfinite(y)):
            steps = np.cumsum(incr, axis=0) + y0
            bad = int(np.argmax(~np.all(np.isfinite(steps), axis=1)))
            raise TrainingDivergence(f"non-finite BSDE value at substep {bad + 1}", n=bad + 1)
        dyN_dy0 = np.ones(B)
        aV = model.apply_diffusion(Xn, sV)
        dyN_dv = tau * aV - tau * b + sdw
    else:
        r = 1.0 - tau * c  # (N, B)
        y = y0
        drive = -tau * (b * V).sum(-1) + mart
        for n in range(N):
            y = y * r[n] + drive[n]
            if not np.all(np.isfinite(y)):
                raise TrainingDivergence(f"non-finite BSDE value at substep {n + 1}", n=n + 1)
        # G_next[n] = prod_{m > n} r_m
        G = np.ones((N + 1, B))
        G[:N] = np.cumprod(r[::-1], axis=0)[::-1]
        G_next = G[1:]
        dyN_dy0 = G[0]
        dyN_dv = G_next[..., None] * (-tau * b + sdw)
    return RolloutResult(y, y0, dyN_dy0, dyN_dv, (cache0, cacheV, out0) if keep else None)


def bsde_loss_and_grads(phi: Mlp, vbar: Mlp, X, dW, opad, target, model, tau, log):
    """Loss ``mean |Y_N - target|^2`` and flat gradients for ``phi`` and ``vbar``."""
    res = bsde_rollout(phi, vbar, X, dW, opad, model, tau, log, keep=True)
    cache0, cacheV, out0 = res.caches
    resid = res.y_final - target
    loss = float(np.mean(resid**2))
    gy = (2.0 / resid.size) * resid
    d0 = (gy * res.dyN_dy0)[:, None]
    if phi.output_activation == "exp":
        d0 = d0 * out0
    g_phi, _ = phi.backward(cache0, d0)
    g_v, _ = vbar.backward(cacheV, gy[None, :, None] * res.dyN_dv)
    return loss, g_phi, g_v, res


def bsde_terminal(filt: DensityFilter, k: int, x_final, obs) -> np.ndarray:
    """Terminal condition: the Bayes-updated density (plain) or minus its log."""
    lp = updated_log_density(filt, k, x_final, obs)
    return -lp if filt.log else np.exp(lp)


def train_bsdef(problem: FilteringProblem, grid: TimeGrid, config: DeepConfig, rng, progress=None) -> DensityFilter:
    """Train a (log) deep BSDE filter with freshly simulated mini-batches."""
    if not is_bsde_mode(config.method):
        raise ValueError("train_bsdef expects method 'bsdef' or 'logbsdef'")
    grid = grid.with_substeps(config.N)
    filt = DensityFilter(config.method, problem, grid, config)
    model, obsmodel = problem.model, problem.obs
    d = model.state_dim
    ncache = _norm_cache(filt, int(rng.integers(2**31))) if config.train_norm else None
    phi = vbar = None
    for k in range(grid.K):
        t0 = time.perf_counter()
        phi = _new_phi(filt, rng) if phi is None else warm_start(phi)
        if vbar is None:
            vbar = Mlp(filt.input_dim, [config.width_v] * config.depth, d, "linear", stack=grid.N, rng=rng)
        else:
            vbar = warm_start(vbar)
        state = _train_state(config, [phi.n_params, vbar.n_params])
        it = 0
        for it in range(1, config.max_iters + 1):
            data = simulate_training_batch(
                model,
                obsmodel,
                problem.q0,
                grid,
                config.batch,
                rng,
                init=problem.init,
                n_intervals=k + 1,
                n_obs=k,
                keep_from=k,
            )
            obs, uniq = _batch_obs(filt, config.batch, data.obs, rng)
            target = bsde_terminal(filt, k, data.x[:, -1], obs)
            if uniq is not None and k > 0:
                lz = np.repeat(_training_log_norm(filt, k, uniq, ncache, rng), -(-config.batch // len(uniq)))
                lz = lz[: config.batch]
                target = target + lz if filt.log else target * np.exp(-lz)
            opad = pad_observations(obs, k, grid.K)
            try:
                loss, g_phi, g_v, _ = bsde_loss_and_grads(phi, vbar, data.x, data.dw, opad, target, model, grid.tau, filt.log)
            except TrainingDivergence as exc:
                raise TrainingDivergence(f"{exc} (k={k}, iteration {it})", k=k, n=exc.n) from None
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at k={k}, iteration {it}", k=k)
            state.apply([phi.params, vbar.params], [g_phi, g_v])
            if state.record(loss):
                break
        filt.phi.append(phi)
        filt.vbar.append(vbar)
        filt.history.append(
            {
                "k": k,
                "iterations": it,
                "best_window": state.best if np.isfinite(state.best) else None,
                "last_window": state.window_means[-1] if state.window_means else None,
                "stopped_early": state.stopped,
                "seconds": time.perf_counter() - t0,
            }
        )
        logger.info("trained %s step %d: %s", filt.mode, k, filt.history[-1])
        if progress:
            progress(k, filt.history[-1])
    filt.invalidate_cache()
    return filt


def train_filter(problem, grid, config: DeepConfig, rng, progress=None) -> DensityFilter:
    if is_bsde_mode(config.method):
        return train_bsdef(problem, grid, config, rng, progress)
    return train_dsf(problem, grid, config, rng, progress)
