"""
Deterministic and stochastic path generation.

The unperturbed system ``x' = b(t, x)`` is integrated with explicit Euler or RK4; the
perturbed system ``dX = b dt + eps sigma dW`` with Euler-Maruyama, a tamed variant
(drift increment ``h b / (1 + h |b|)``) or on a truncated field. Coefficients are
evaluated at the left end of each step.

Ensembles are simulated in fixed-size chunks of consecutive stream ids. The chunk
size does not depend on the number of worker threads and every per-path quantity
is a function of its stream id only, so results are bit-identical for any
``workers`` value.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path as FilePath
from typing import Callable, Sequence

import numpy as np

from . import rng
from .errors import ConfigurationError
from .model import CoefficientField, truncate

SCHEMES = ("euler", "tamed")
ODE_METHODS = ("euler", "rk4")
BLOWUP_THRESHOLD = 1e12
DEFAULT_CHUNK = 4096
DEFAULT_CAP_FACTOR = 2 ** 20
# resolution of the dyadic lattice carrying Brownian increments, relative to sqrt(h)
_LATTICE_BITS = 44


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k h`` on ``[0, T]`` with ``t_n = T`` exactly."""
    T: float
    n_steps: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigurationError(f"grid horizon must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be a positive integer, got {self.n_steps}")

    @classmethod
    def from_step(cls, T: float, h: float) -> "TimeGrid":
        n = int(round(T / h))
        if n < 1 or not math.isclose(n * h, T, rel_tol=1e-9):
            raise ConfigurationError(f"step {h} does not divide horizon {T}")
        return cls(T, n)

    @property
    def h(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.h
        t[-1] = self.T
        return t

    def refine(self, levels: int = 1) -> "TimeGrid":
        return TimeGrid(self.T, self.n_steps * 2 ** levels)

    def index_of(self, t: float) -> int:
        """Grid index of a time that lies on the grid (within 1e-9 h)."""
        k = int(round(t / self.h))
        if not (0 <= k <= self.n_steps) or abs(k * self.h - t) > 1e-9 * self.h:
            raise ConfigurationError(f"time {t} is not a point of the grid (h={self.h})")
        return k


@dataclass(frozen=True)
class BrownianDriver:
    """
    Reproducible Brownian increments on ``grid`` refined ``level`` times.

    Increments on the base grid are ``sqrt(h) Z`` with ``Z`` standard normal from
    the counter-based generator. Each refinement splits an increment ``D`` over a
    step of length ``s`` into ``D/2 + sqrt(s)/2 Z'`` and the remainder, i.e. the
    Brownian bridge midpoint. All increments live on a dyadic lattice, so the two
    halves sum back to the coarse increment exactly.
    """
    seed: int
    l: int
    grid: TimeGrid
    level: int = 0

    def __post_init__(self):
        if self.l < 1:
            raise ConfigurationError("noise dimension must be >= 1")
        if not 0 <= self.level <= 20:
            raise ConfigurationError("refinement level must be in [0, 20]")

    @property
    def fine_grid(self) -> TimeGrid:
        return self.grid.refine(self.level)

    @property
    def quantum(self) -> float:
        return 2.0 ** (math.ceil(math.log2(math.sqrt(self.grid.h))) - _LATTICE_BITS)

    def refined(self, levels: int = 1) -> "BrownianDriver":
        return BrownianDriver(self.seed, self.l, self.grid, self.level + levels)

    def _snap(self, v: np.ndarray) -> np.ndarray:
        q = self.quantum
        return np.round(v / q) * q

    def block(self, stream_ids, j: int) -> np.ndarray:
        """Fine increments inside base step ``j``: shape ``(streams, 2**level, l)``."""
        streams = np.atleast_1d(np.asarray(stream_ids, dtype=np.uint64))
        h = self.grid.h
        nodes = self._snap(math.sqrt(h) * rng.normals(self.seed, streams, j, self.l))[:, None, :]
        for lev in range(1, self.level + 1):
            width = 2 ** (lev - 1)
            s = h / width
            parents = j * width + np.arange(width)
            z = np.stack([rng.normals(self.seed, streams, int(p), self.l, level=lev)
                          for p in parents], axis=1)
            left = self._snap(0.5 * nodes + 0.5 * math.sqrt(s) * z)
            right = nodes - left
            nodes = np.stack([left, right], axis=2).reshape(streams.size, 2 * width, self.l)
        return nodes

    def increments(self, stream_ids) -> np.ndarray:
        """All fine increments, shape ``(streams, n_fine, l)``."""
        return np.concatenate([self.block(stream_ids, j) for j in range(self.grid.n_steps)], axis=1)

    def path_increments(self, stream_id: int) -> np.ndarray:
        """Increments of a single stream, shape ``(n_fine, l)``."""
        return self.increments([stream_id])[0]


class InitialSampler:
    """Random initial state drawn from its own stream domain, independent of ``W``."""

    r: int

    def sample(self, seed: int, stream_ids) -> np.ndarray:
        raise NotImplementedError

    def second_moment(self) -> float:
        """``E|x0|^2``."""
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianInitial(InitialSampler):
    mean: tuple
    std: tuple

    @property
    def r(self) -> int:
        return len(self.mean)

    def sample(self, seed, stream_ids):
        z = rng.normals(seed, stream_ids, 0, self.r, domain=rng.DOMAIN_INITIAL)
        return np.asarray(self.mean) + np.asarray(self.std) * z

    def second_moment(self):
        return float(np.sum(np.square(self.mean)) + np.sum(np.square(self.std)))


@dataclass(frozen=True)
class UniformInitial(InitialSampler):
    low: tuple
    high: tuple

    @property
    def r(self) -> int:
        return len(self.low)

    def sample(self, seed, stream_ids):
        u = rng.uniforms(seed, stream_ids, 0, self.r, domain=rng.DOMAIN_INITIAL)
        lo, hi = np.asarray(self.low), np.asarray(self.high)
        return lo + (hi - lo) * u

    def second_moment(self):
        lo, hi = np.asarray(self.low), np.asarray(self.high)
        return float(np.sum((lo * lo + lo * hi + hi * hi) / 3.0))


@dataclass
class Path:
    """
    One trajectory on a grid.

    ``exit_time`` is the first grid time with ``|X| > radius`` (``inf`` if never or
    if no radius was tracked). ``blowup_step`` is the first step producing a
    non-finite state or one with norm above ``1e12``; values from then on are NaN.
    """
    times: np.ndarray
    values: np.ndarray
    exit_time: float = math.inf
    blew_up: bool = False
    blowup_step: int = -1
    scheme: str = "euler"
    radius: float | None = None
    radius_history: list = dc_field(default_factory=list)
    exit_history: list = dc_field(default_factory=list)
    escaped: bool = False

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def to_csv(self, path) -> None:
        write_path_csv(path, self.times, self.values)


def write_path_csv(path, times: np.ndarray, values: np.ndarray) -> None:
    r = values.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x{i + 1}" for i in range(r)])
        for t, row in zip(times, values):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def _check_scheme(scheme: str):
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def _drift_increment(field: CoefficientField, scheme: str, t: float, X: np.ndarray, h: float):
    b = field.drift(t, X)
    if scheme == "tamed":
        nb = np.sqrt(np.sum(b * b, axis=-1, keepdims=True))
        return X + h * b / (1.0 + h * nb)
    return X + b * h


def _noise(field: CoefficientField, t: float, X: np.ndarray, dW: np.ndarray) -> np.ndarray:
    s = field.diffusion(t, X)
    out = s[..., 0] * dW[..., None, 0]
    for j in range(1, field.l):
        out = out + s[..., j] * dW[..., None, j]
    return out


def _blown(X: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", over="ignore"):
        finite = np.all(np.isfinite(X), axis=-1)
        big = np.sqrt(np.sum(X * X, axis=-1)) > BLOWUP_THRESHOLD
    return ~finite | big


def _march(field: CoefficientField, X0: np.ndarray, driver: BrownianDriver | None,
           streams: np.ndarray, eps: float, scheme: str, grid: TimeGrid):
    """Integrate a batch; returns values (B, n+1, r), blowup step (B,) with -1 = none."""
    fine = driver.fine_grid if driver is not None else grid
    times = fine.times
    h = fine.h
    per_block = 2 ** driver.level if driver is not None else 1
    B = X0.shape[0]
    values = np.empty((B, fine.n_steps + 1, field.r))
    values[:, 0] = X0
    blow = np.full(B, -1, dtype=np.int64)
    alive = ~_blown(X0)
    blow[~alive] = 0
    X = np.where(alive[:, None], X0, np.nan)
    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(fine.n_steps // per_block):
            dW = driver.block(streams, j) if (eps != 0.0 and driver is not None) else None
            for i in range(per_block):
                t = times[k]
                Xn = _drift_increment(field, scheme, t, X, h)
                if dW is not None:
                    Xn = Xn + eps * _noise(field, t, X, dW[:, i])
                bad = _blown(Xn) & alive
                if np.any(bad):
                    blow[bad] = k + 1
                    alive &= ~bad
                    Xn = np.where(alive[:, None], Xn, np.nan)
                k += 1
                values[:, k] = Xn
                X = Xn
    return values, blow


def _exit_times(values: np.ndarray, times: np.ndarray, radius: float) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(np.sum(values * values, axis=-1)) > radius
    hit = np.any(out, axis=1)
    first = np.argmax(out, axis=1)
    return np.where(hit, times[first], np.inf)


def _as_batch(x0, r: int) -> np.ndarray:
    x = np.asarray(x0, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != r:
        raise ConfigurationError(f"initial state must have dimension {r}, got shape {np.shape(x0)}")
    return x


def _rk4_values(field: CoefficientField, X0: np.ndarray, grid: TimeGrid) -> np.ndarray:
    times = grid.times
    h = grid.h
    values = np.empty((X0.shape[0], grid.n_steps + 1, field.r))
    values[:, 0] = X0
    X = X0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.n_steps):
            t = times[k]
            k1 = field.drift(t, X)
            k2 = field.drift(t + 0.5 * h, X + 0.5 * h * k1)
            k3 = field.drift(t + 0.5 * h, X + 0.5 * h * k2)
            k4 = field.drift(t + h, X + h * k3)
            X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            values[:, k + 1] = X
    return values


def ode_values(field: CoefficientField, x0, grid: TimeGrid, method: str = "rk4",
               scheme: str = "euler") -> np.ndarray:
    """Deterministic trajectories for a batch of initial states, shape (B, n+1, r)."""
    X0 = _as_batch(x0, field.r)
    if method == "rk4":
        return _rk4_values(field, X0, grid)
    if method == "euler":
        _check_scheme(scheme)
        values, _ = _march(field, X0, None, np.zeros(0, np.uint64), 0.0, scheme, grid)
        return values
    raise ConfigurationError(f"unknown ODE method {method!r}; expected one of {ODE_METHODS}")


def _first_blowup(values: np.ndarray) -> int:
    bad = _blown(values)
    return int(np.argmax(bad)) if np.any(bad) else -1


def solve_ode(field: CoefficientField, x0, grid: TimeGrid, method: str = "rk4") -> Path:
    """
    Integrate ``x' = b(t, x), x(0) = x0``.

    ``method="euler"`` performs exactly the floating-point operations of
    :func:`euler_maruyama` with ``eps=0``; ``"rk4"`` is the accurate reference.
    Non-finite states are reported on the returned path (``blew_up``, ``blowup_step``).
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1:
        raise ConfigurationError("solve_ode takes a single initial state")
    values = ode_values(field, x0, grid, method)[0]
    step = _first_blowup(values)
    if step >= 0:
        values[step + 1:] = np.nan
    return Path(grid.times, values, blew_up=step >= 0, blowup_step=step, scheme=method)


def _single(field, x0, driver: BrownianDriver, eps: float, scheme: str, stream_id: int) -> Path:
    if eps < 0:
        raise ConfigurationError(f"eps must be >= 0, got {eps}")
    _check_scheme(scheme)
    X0 = _as_batch(x0, field.r)
    if X0.shape[0] != 1:
        raise ConfigurationError("a single path takes a single initial state")
    if driver.l != field.l:
        raise ConfigurationError(f"driver noise dimension {driver.l} != field l={field.l}")
    streams = np.array([stream_id], dtype=np.uint64)
    values, blow = _march(field, X0, driver, streams, float(eps), scheme, driver.grid)
    return Path(driver.fine_grid.times, values[0], blew_up=bool(blow[0] >= 0),
                blowup_step=int(blow[0]), scheme=scheme)


def euler_maruyama(field: CoefficientField, x0, grid: TimeGrid, eps: float,
                   driver: BrownianDriver, stream_id: int = 0) -> Path:
    """
    ``X_{k+1} = X_k + b(t_k, X_k) h + eps sigma(t_k, X_k) dW_k`` on the driver's grid.

    ``grid`` must equal ``driver.fine_grid``. Blow-up is recorded on the path, not
    raised.
    """
    _check_grid(grid, driver)
    return _single(field, x0, driver, eps, "euler", stream_id)


def step_tamed(field: CoefficientField, x0, grid: TimeGrid, eps: float,
               driver: BrownianDriver, stream_id: int = 0) -> Path:
    """Tamed Euler: the drift increment ``h b`` is replaced by ``h b / (1 + h |b|)``."""
    _check_grid(grid, driver)
    return _single(field, x0, driver, eps, "tamed", stream_id)


def _check_grid(grid: TimeGrid, driver: BrownianDriver):
    if grid != driver.fine_grid:
        raise ConfigurationError(f"grid {grid} does not match driver grid {driver.fine_grid}")


@dataclass(frozen=True)
class FixedRadius:
    N: float


@dataclass(frozen=True)
class DoublingRadius:
    N0: float
    cap_factor: float = DEFAULT_CAP_FACTOR

    @property
    def cap(self) -> float:
        return self.N0 * self.cap_factor


def simulate_truncated(field: CoefficientField, x0, grid: TimeGrid, eps: float,
                       driver: BrownianDriver, policy: FixedRadius | DoublingRadius,
                       stream_id: int = 0, scheme: str = "euler") -> Path:
    """
    Integrate the field truncated at radius ``N``.

    Under :class:`DoublingRadius` a path that leaves the ball before ``T`` is re-run on
    the same driver with ``N`` doubled, until it stays inside or ``N`` would exceed
    the cap; the latter is recorded as an escape (``escaped=True``).
    """
    _check_grid(grid, driver)
    N = policy.N if isinstance(policy, FixedRadius) else policy.N0
    x0 = np.asarray(x0, dtype=float)
    if not np.linalg.norm(x0) < N:
        raise ConfigurationError(f"initial radius {np.linalg.norm(x0)} must be below N={N}")
    radii, exits = [], []
    while True:
        path = _single(truncate(field, N), x0, driver, eps, scheme, stream_id)
        tau = float(_exit_times(path.values[None], path.times, N)[0])
        radii.append(N)
        exits.append(tau)
        if isinstance(policy, FixedRadius) or math.isinf(tau):
            break
        if 2 * N > policy.cap:
            path.escaped = True
            break
        N *= 2
    path.radius = N
    path.exit_time = tau
    path.radius_history = radii
    path.exit_history = exits
    if isinstance(policy, FixedRadius):
        path.escaped = not math.isinf(tau)
    return path


@dataclass
class Ensemble:
    """
    ``M`` paths sharing grid, scheme and coefficient field.

    Full trajectories are kept only when requested; otherwise the per-path outputs of
    the reducer (``stats``) and the per-time moment sums are retained.
    """
    grid: TimeGrid
    scheme: str
    eps: float
    seed: int
    stream_ids: np.ndarray
    field_fingerprint: str
    blowup_step: np.ndarray
    exit_time: np.ndarray | None = None
    radius: float | None = None
    stats: dict = dc_field(default_factory=dict)
    paths: np.ndarray | None = None
    moment_count: np.ndarray | None = None
    moment_sum: np.ndarray | None = None
    moment_sum_sq: np.ndarray | None = None

    @property
    def M(self) -> int:
        return int(self.stream_ids.size)

    @property
    def blew_up(self) -> np.ndarray:
        return self.blowup_step >= 0

    @property
    def blowup_count(self) -> int:
        return int(np.count_nonzero(self.blew_up))

    @property
    def blowup_fraction(self) -> float:
        return self.blowup_count / self.M

    @property
    def escape_count(self) -> int:
        if self.exit_time is None:
            return 0
        return int(np.count_nonzero(np.isfinite(self.exit_time)))

    def summary_rows(self) -> list[list[float]]:
        """Rows ``t, mean_1..r, second_moment_1..r`` over non-blown paths."""
        if self.moment_sum is None:
            raise ConfigurationError("ensemble was simulated without moment accumulation")
        n = np.maximum(self.moment_count, 1)[:, None]
        mean = self.moment_sum / n
        second = self.moment_sum_sq / n
        return [[float(t)] + list(map(float, m)) + list(map(float, s))
                for t, m, s in zip(self.grid.times, mean, second)]

    def write_summary_csv(self, path) -> None:
        r = self.moment_sum.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"mean_x{i + 1}" for i in range(r)]
                       + [f"second_moment_x{i + 1}" for i in range(r)])
            for row in self.summary_rows():
                w.writerow([repr(v) for v in row])

    def write_path_csvs(self, directory, limit: int | None = None) -> list[FilePath]:
        if self.paths is None:
            raise ConfigurationError("ensemble was simulated without store_paths=True")
        directory = FilePath(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = []
        for i in range(self.M if limit is None else min(limit, self.M)):
            p = directory / f"path_{int(self.stream_ids[i]):06d}.csv"
            write_path_csv(p, self.grid.times, self.paths[i])
            out.append(p)
        return out


Reducer = Callable[[np.ndarray, np.ndarray, np.ndarray], dict]


def simulate_ensemble(field: CoefficientField, x0, grid: TimeGrid, eps: float, M: int,
                      seed: int, scheme: str = "euler", *, level: int = 0,
                      radius: float | None = None, reducer: Reducer | None = None,
                      store_paths: bool = False, moments: bool = False,
                      workers: int = 1, chunk_size: int = DEFAULT_CHUNK,
                      first_stream: int = 0) -> Ensemble:
    """
    Simulate ``M`` paths with stream ids ``first_stream .. first_stream + M - 1``.

    Parameters
    ----------
    x0 : array_like or InitialSampler
        Deterministic initial state, or a sampler drawing from its own stream domain.
    level : int
        Driver refinement level; the simulation grid is ``grid.refine(level)``.
    radius : float, optional
        Truncate the field at this radius and record exit times ``tau_N``.
    reducer : callable, optional
        ``reducer(values, times, blowup_step) -> dict`` of per-path arrays, applied to
        each chunk; outputs are concatenated in stream order into ``Ensemble.stats``.
    workers : int
        Threads used to process chunks. Does not affect results.
    """
    if M < 1:
        raise ConfigurationError(f"path count must be >= 1, got {M}")
    if eps < 0:
        raise ConfigurationError(f"eps must be >= 0, got {eps}")
    _check_scheme(scheme)
    if chunk_size < 1:
        raise ConfigurationError("chunk size must be positive")
    sim_field = truncate(field, radius) if radius is not None else field
    driver = BrownianDriver(seed, field.l, grid, level)
    fine = driver.fine_grid
    times = fine.times
    streams = np.arange(first_stream, first_stream + M, dtype=np.uint64)
    sampler = x0 if isinstance(x0, InitialSampler) else None
    if sampler is None:
        fixed = _as_batch(x0, field.r)
        if fixed.shape[0] != 1:
            raise ConfigurationError("deterministic x0 must be a single state")
        if radius is not None and not np.linalg.norm(fixed[0]) < radius:
            raise ConfigurationError(f"initial radius must be below N={radius}")

    def run(lo: int):
        ids = streams[lo:lo + chunk_size]
        X0 = sampler.sample(seed, ids) if sampler else np.repeat(fixed, ids.size, axis=0)
        values, blow = _march(sim_field, X0, driver, ids, float(eps), scheme, grid)
        out = {"blow": blow}
        if radius is not None:
            out["exit"] = _exit_times(values, times, radius)
        if reducer is not None:
            out["stats"] = reducer(values, times, blow)
        if moments:
            ok = (blow < 0)
            v = values[ok]
            out["mom"] = (np.full(len(times), ok.sum()), v.sum(axis=0), (v * v).sum(axis=0))
        if store_paths:
            out["paths"] = values
        return out

    starts = range(0, M, chunk_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run, starts))
    else:
        chunks = [run(lo) for lo in starts]

    ens = Ensemble(fine, scheme, float(eps), seed, streams, field.fingerprint,
                   np.concatenate([c["blow"] for c in chunks]), radius=radius)
    if radius is not None:
        ens.exit_time = np.concatenate([c["exit"] for c in chunks])
    if reducer is not None:
        keys = chunks[0]["stats"].keys()
        ens.stats = {k: np.concatenate([c["stats"][k] for c in chunks]) for k in keys}
    if moments:
        cnt = np.zeros(len(times))
        s1 = np.zeros((len(times), field.r))
        s2 = np.zeros((len(times), field.r))
        for c in chunks:
            cnt = cnt + c["mom"][0]
            s1 = s1 + c["mom"][1]
            s2 = s2 + c["mom"][2]
        ens.moment_count, ens.moment_sum, ens.moment_sum_sq = cnt, s1, s2
    if store_paths:
        ens.paths = np.concatenate([c["paths"] for c in chunks])
    return ens


@dataclass(frozen=True)
class EscapeEstimate:
    radius: float
    M: int
    escapes: int

    @property
    def frequency(self) -> float:
        return self.escapes / self.M

    @property
    def se(self) -> float:
        p = self.frequency
        return math.sqrt(p * (1.0 - p) / self.M)


def escape_frequencies(field: CoefficientField, x0, grid: TimeGrid, eps: float,
                       radii: Sequence[float], M: int, seed: int, *, workers: int = 1,
                       scheme: str = "euler") -> list[EscapeEstimate]:
    """Empirical ``P{sup_t |X_N(t)| > N}`` for each radius on common drivers."""
    out = []
    for N in radii:
        ens = simulate_ensemble(field, x0, grid, eps, M, seed, scheme, radius=N, workers=workers)
        out.append(EscapeEstimate(float(N), M, ens.escape_count))
    return out
