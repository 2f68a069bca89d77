"""Euler–Maruyama simulation of signal paths, observations and training paths."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .models import InitialDistribution, ObservationModel, SdeModel


class SimulationError(RuntimeError):
    """A simulated path produced a non-finite value."""


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Independent Philox stream for ``(seed, *tags)``.

    Tags may be ints or strings; strings are hashed with CRC32 so the stream
    does not depend on Python's per-process hash salt.
    """
    key = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        key.append(zlib.crc32(t.encode()) if isinstance(t, str) else int(t) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@dataclass(frozen=True)
class TimeGrid:
    T: float
    K: int
    N: int

    def __post_init__(self):
        if self.T <= 0 or self.K < 1 or self.N < 1:
            raise ValueError("need T > 0, K >= 1, N >= 1")

    @property
    def tau(self) -> float:
        return self.T / (self.K * self.N)

    @property
    def n_steps(self) -> int:
        return self.K * self.N

    def t_k(self, k: int) -> float:
        return self.T * k / self.K

    def t_kn(self, k: int, n: int) -> float:
        return self.T * (k * self.N + n) / (self.K * self.N)

    def with_substeps(self, N: int) -> "TimeGrid":
        return TimeGrid(self.T, self.K, N)

    def obs_times(self) -> np.ndarray:
        return np.array([self.t_k(k) for k in range(1, self.K + 1)])


@dataclass
class Trajectory:
    """States on the fine grid, shape ``(..., K*N + 1, d)``."""

    states: np.ndarray
    grid: TimeGrid

    def at_obs_times(self) -> np.ndarray:
        """States at ``t_1..t_K``, shape ``(..., K, d)``."""
        return self.states[..., self.grid.N :: self.grid.N, :]


@dataclass
class ObservationSequence:
    obs: np.ndarray  # (..., K, d')


def em_step(model: SdeModel, x, dt: float, dw) -> np.ndarray:
    return x + model.drift(x) * dt + model.apply_diffusion(x, dw)


def _simulate_paths(model, x0, n_steps, dt, rng, keep=True, return_noise=False):
    x = np.array(x0, dtype=float)
    sq = np.sqrt(dt)
    states = [x] if keep else None
    noise = []
    for step in range(n_steps):
        dw = sq * rng.standard_normal(x.shape[:-1] + (model.noise_dim,))
        x = em_step(model, x, dt, dw)
        if not np.isfinite(x.sum()) and not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state in model {model.name!r} at step {step + 1}")
        if keep:
            states.append(x)
        if return_noise:
            noise.append(dw)
    out = np.stack(states, axis=-2) if keep else x
    if return_noise:
        return out, np.stack(noise, axis=-2)
    return out


def simulate_pair(
    model: SdeModel,
    obsmodel: ObservationModel,
    init: InitialDistribution,
    grid: TimeGrid,
    rng: np.random.Generator,
    n_paths: Optional[int] = None,
) -> tuple[Trajectory, ObservationSequence]:
    """Simulate a signal path and its observations ``O_k = h(S_{t_k}) + V_k``.

    With ``n_paths`` the outputs gain a leading batch axis.
    """
    n = 1 if n_paths is None else n_paths
    x0 = init.sample(rng, n)
    states = _simulate_paths(model, x0, grid.n_steps, grid.tau, rng)
    traj = Trajectory(states, grid)
    obs = obsmodel.sample(traj.at_obs_times(), rng)
    if n_paths is None:
        return Trajectory(states[0], grid), ObservationSequence(obs[0])
    return traj, ObservationSequence(obs)


@dataclass
class TrainingBatch:
    """Auxiliary X-paths with their Brownian increments plus independent observations.

    ``x``: (B, n_intervals*N + 1, d); ``dw``: (B, n_intervals*N, m);
    ``obs``: (B, K, d') with entries after ``n_obs`` set to zero.
    """

    x: np.ndarray
    dw: np.ndarray
    obs: np.ndarray
    n_obs: int


def simulate_training_batch(
    model: SdeModel,
    obsmodel: ObservationModel,
    q0: InitialDistribution,
    grid: TimeGrid,
    batch: int,
    rng: np.random.Generator,
    init: Optional[InitialDistribution] = None,
    n_intervals: Optional[int] = None,
    n_obs: Optional[int] = None,
    keep_from: int = 0,
) -> TrainingBatch:
    """X-paths from ``q0`` paired with observation sequences of independent signal paths.

    ``init`` is the signal prior (defaults to ``q0``).  ``n_intervals`` limits
    the X-path to ``[0, t_{n_intervals}]`` and ``n_obs`` limits how many
    observations are generated; both default to ``K``.  With ``keep_from``
    the returned path and increments start at ``t_{keep_from}`` instead of 0.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    init = q0 if init is None else init
    n_intervals = grid.K if n_intervals is None else n_intervals
    n_obs = grid.K if n_obs is None else n_obs
    if not 0 <= keep_from <= n_intervals:
        raise ValueError("keep_from must lie in [0, n_intervals]")
    x0 = q0.sample(rng, batch)
    if keep_from > 0:
        x0 = _simulate_paths(model, x0, keep_from * grid.N, grid.tau, rng, keep=False)
    x, dw = _simulate_paths(model, x0, (n_intervals - keep_from) * grid.N, grid.tau, rng, return_noise=True)
    obs = np.zeros((batch, grid.K, obsmodel.obs_dim))
    if n_obs > 0:
        s = init.sample(rng, batch)
        for k in range(n_obs):
            s = _simulate_paths(model, s, grid.N, grid.tau, rng, keep=False)
            obs[:, k] = obsmodel.sample(s, rng)
    return TrainingBatch(x, dw, obs, n_obs)


# ---------------------------------------------------------------------------
# binary dumps: 8-byte little-endian header length, JSON header, float64 blob
# ---------------------------------------------------------------------------


def write_blob(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_blob(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8 : 8 + n].decode())
    offset = 8 + n
    arrays = {}
    for spec in header["arrays"]:
        size = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(spec["shape"]).copy()
        offset += 8 * size
    return header, arrays


def save_dataset(path, model_name: str, grid: TimeGrid, seed: int, states, obs) -> None:
    header = {
        "model": model_name,
        "grid": {"T": grid.T, "K": grid.K, "N": grid.N},
        "seed": seed,
        "batch_count": int(states.shape[0]) if states.ndim == 3 else 1,
    }
    write_blob(path, header, {"states": states, "obs": obs})


def load_dataset(path) -> tuple[dict, np.ndarray, np.ndarray]:
    header, arrays = read_blob(path)
    return header, arrays["states"], arrays["obs"]
