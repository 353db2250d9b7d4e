"""
Monte Carlo solution of the small-parameter Cauchy problem

    dv/dt = (eps^2/2) sum a^{ij} d_i d_j v + sum b^i d_i v + c v + g,   v(0, x) = f(x)

through its probabilistic representation

    v(t, x) = E[ f(X(t)) exp(int_0^t c(X)) + int_0^t g(X(s)) exp(int_0^s c(X)) ds ]

with ``X`` started at ``x``. Along simulated paths the time integrals use the left
rectangle rule on the simulation grid. The ``eps = 0`` limit ``v0`` is the same
functional on the characteristic ``x' = b(t, x)``, integrated with RK4 and Simpson's
rule.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
from scipy.integrate import cumulative_simpson, simpson

from .errors import BlowUpError, ConfigurationError, InsufficientDataError
from .model import CoefficientField, PointSampler, ScalarField, check_ellipticity
from .paths import TimeGrid, ode_values, simulate_ensemble
from .stats import DEFAULT_BLOCKS, block_jackknife
from .zeroth_order import BLOWUP_LIMIT, _csv_text, dumps, fit_order

GATE_SE = 5.0


@dataclass(frozen=True)
class CauchyProblem:
    """
    Coefficients and data of the Cauchy problem.

    ``k`` is the declared ellipticity constant; when given, :meth:`check` samples
    ``sigma sigma^*`` and warns (does not fail) if the declaration is violated.
    """
    field: CoefficientField
    scalar: ScalarField
    k: float | None = None
    scheme: str = "euler"

    def __post_init__(self):
        if self.scalar.c_bound is None:
            raise ConfigurationError("c must be declared bounded")

    def check_ellipticity(self, radius: float = 4.0, seed: int = 0) -> bool | None:
        """Sampled ellipticity check; emits a warning when it fails."""
        if self.k is None:
            return None
        est = check_ellipticity(self.field, PointSampler(radius, self.field.T, seed=seed), self.k)
        if not est.certified:
            warnings.warn(f"ellipticity with k={self.k} violated at {est.violation_count} "
                          f"sampled points; estimates remain defined", stacklevel=2)
        return est.certified

    def a_priori_bound(self, t: float) -> float | None:
        """``(B_f + t B_g) e^{B_c t}`` or ``None`` when ``f`` or ``g`` has no declared bound."""
        s = self.scalar
        g_bound = 0.0 if s.g_zero else s.g_bound
        if s.f_bound is None or g_bound is None:
            return None
        return (s.f_bound + t * g_bound) * math.exp(s.c_bound * t)


@dataclass
class FeynmanKacEstimate:
    """Monte Carlo estimate of ``v^eps(t, x)``; ``status`` is ``ok``, ``blowup`` or ``gate``."""
    t: float
    x: np.ndarray
    eps: float
    v_eps: float
    se: float
    M: int
    blowups: int
    status: str
    bound: float | None = None
    samples: np.ndarray | None = dc_field(default=None, repr=False)

    @property
    def valid(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {"t": self.t, "x": np.asarray(self.x).tolist(), "eps": self.eps,
                "v_eps": self.v_eps, "se": self.se, "M": self.M, "blowups": self.blowups,
                "status": self.status, "a_priori_bound": self.bound}


@dataclass
class LimitSolution:
    """``v0(t, x)`` with the characteristic it was evaluated on."""
    t: float
    x: np.ndarray
    v0: float
    times: np.ndarray
    characteristic: np.ndarray


def _point(problem: CauchyProblem, point) -> tuple[float, np.ndarray]:
    t, x = point
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (problem.field.r,):
        raise ConfigurationError(f"evaluation point must have dimension {problem.field.r}")
    if not t > 0:
        raise ConfigurationError(f"evaluation time must be positive, got {t}")
    return float(t), x


def _check_grid(grid: TimeGrid, t: float):
    if not math.isclose(grid.T, t, rel_tol=1e-12):
        raise ConfigurationError(f"grid horizon {grid.T} must equal the evaluation time {t}")


def _functional_reducer(scalar: ScalarField):
    def reducer(values, times, blow):
        h = times[1] - times[0]
        n = values.shape[1] - 1
        with np.errstate(over="ignore", invalid="ignore"):
            c = np.zeros(values.shape[:2]) if scalar.c_zero else np.broadcast_to(
                np.asarray(scalar.c(values), float), values.shape[:2])
            # left rectangle: I_c(k) = h sum_{j<k} c(X_j)
            Ic = np.concatenate([np.zeros((values.shape[0], 1)),
                                 np.cumsum(c[:, :n] * h, axis=1)], axis=1)
            w = np.exp(Ic)
            f = np.broadcast_to(np.asarray(scalar.f(values[:, n]), float), (values.shape[0],))
            out = f * w[:, n]
            if not scalar.g_zero:
                g = np.broadcast_to(np.asarray(scalar.g(values[:, :n]), float), (values.shape[0], n))
                out = out + np.sum(g * w[:, :n], axis=1) * h
        return {"v": out}
    return reducer


def estimate_v_eps(problem: CauchyProblem, point, eps: float, M: int, seed: int,
                   grid: TimeGrid, *, workers: int = 1, blocks: int = DEFAULT_BLOCKS,
                   keep_samples: bool = False) -> FeynmanKacEstimate:
    """
    Monte Carlo ``v^eps(t, x)`` from ``M`` paths started at ``x``.

    Parameters
    ----------
    point : (t, x)
        Evaluation point; ``grid.T`` must equal ``t``.
    keep_samples : bool
        Keep per-path functional values (NaN for blown paths) for paired statistics.

    Notes
    -----
    The estimate is flagged ``blowup`` when more than 1% of paths blow up, and
    ``gate`` when it violates ``|v| <= (B_f + t B_g) e^{B_c t} (1 + 5 SE)``.
    """
    t, x = _point(problem, point)
    _check_grid(grid, t)
    ens = simulate_ensemble(problem.field, x, grid, eps, M, seed, problem.scheme,
                            reducer=_functional_reducer(problem.scalar), workers=workers)
    v = ens.stats["v"]
    ok = ~ens.blew_up & np.isfinite(v)
    blowups = int(M - np.count_nonzero(ok))
    if np.any(ok):
        mean, se = block_jackknife(v[ok], blocks)
        mean, se = float(mean), float(se)
    else:
        mean, se = math.nan, math.nan
    bound = problem.a_priori_bound(t)
    status = "ok"
    if blowups > BLOWUP_LIMIT * M or not math.isfinite(mean):
        status = "blowup"
    elif bound is not None and abs(mean) > bound * (1.0 + GATE_SE * se):
        status = "gate"
    samples = np.where(ok, v, np.nan) if keep_samples else None
    return FeynmanKacEstimate(t, x, float(eps), mean, se, M, blowups, status, bound, samples)


def solve_v0(problem: CauchyProblem, point, grid: TimeGrid) -> LimitSolution:
    """
    ``v0(t, x)`` along the RK4 characteristic with Simpson quadrature.

    Raises :class:`BlowUpError` with the escape time when the characteristic becomes
    non-finite before ``t``.
    """
    t, x = _point(problem, point)
    _check_grid(grid, t)
    path = ode_values(problem.field, x, grid, "rk4")[0]
    times = grid.times
    with np.errstate(over="ignore", invalid="ignore"):
        bad = ~np.all(np.isfinite(path), axis=-1) | (np.sqrt(np.sum(path * path, axis=-1)) > 1e12)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise BlowUpError(f"characteristic from x={x.tolist()} escapes at t={times[k]}", k,
                          float(times[k]))
    s = problem.scalar
    c = np.zeros(times.size) if s.c_zero else np.broadcast_to(np.asarray(s.c(path), float), times.shape)
    Ic = cumulative_simpson(c, x=times, initial=0.0) if times.size > 2 else \
        np.concatenate([[0.0], np.cumsum(0.5 * (c[1:] + c[:-1]) * np.diff(times))])
    v0 = float(np.asarray(s.f(path[-1]), float)) * math.exp(Ic[-1])
    if not s.g_zero:
        g = np.broadcast_to(np.asarray(s.g(path), float), times.shape)
        v0 += float(simpson(g * np.exp(Ic), x=times))
    return LimitSolution(t, x, v0, times, path)


def transport_estimate(field: CoefficientField, f, point, eps: float, M: int, seed: int,
                       grid: TimeGrid, *, f_bound: float | None = None, scheme: str = "euler",
                       workers: int = 1, blocks: int = DEFAULT_BLOCKS,
                       keep_samples: bool = False) -> FeynmanKacEstimate:
    """
    ``v^eps(t, x) = E f(X^{eps,x}(t))``: the ``c = g = 0`` case of :func:`estimate_v_eps`.

    ``f`` is a callable of the state or a :class:`ScalarField` whose ``c`` and ``g`` are
    identically zero.
    """
    return estimate_v_eps(transport_problem(field, f, f_bound, scheme), point, eps, M, seed, grid,
                          workers=workers, blocks=blocks, keep_samples=keep_samples)


def _zero(x):
    return np.zeros(np.shape(x)[:-1])


def transport_problem(field: CoefficientField, f, f_bound: float | None = None,
                      scheme: str = "euler") -> CauchyProblem:
    if isinstance(f, ScalarField):
        if not (f.c_zero and f.g_zero):
            raise ConfigurationError("transport problems require c = 0 and g = 0")
        scalar = f
    else:
        scalar = ScalarField(_zero, _zero, f, 0.0, f_bound, 0.0, c_zero=True, g_zero=True,
                             name="transport")
    return CauchyProblem(field, scalar, scheme=scheme)


@dataclass
class SweepRow:
    eps: float
    v_eps: float
    se: float
    v0: float
    gap: float
    status: str


@dataclass
class EpsilonSweep:
    """
    Gaps ``|v^eps - v0|`` on common random numbers.

    ``monotone[i]`` checks ``gap[i + 1] <= gap[i] + 3 se_diff[i]`` where ``se_diff`` is
    the jackknife error of the paired per-path difference. ``order`` is an empirical
    fit of the gap in ``eps`` (reported, not asserted).
    """
    t: float
    x: np.ndarray
    rows: list
    monotone: np.ndarray
    diff_se: np.ndarray
    order: object = None

    @property
    def monotone_passed(self) -> bool:
        return bool(np.all(self.monotone))

    @property
    def valid(self) -> bool:
        return all(r.status == "ok" for r in self.rows)

    def row(self, eps: float) -> SweepRow:
        for r in self.rows:
            if r.eps == eps:
                return r
        raise KeyError(eps)

    def to_csv(self) -> str:
        return _csv_text(["eps", "v_eps", "se", "v0", "gap", "status"],
                         ([r.eps, r.v_eps, r.se, r.v0, r.gap, r.status] for r in self.rows))

    def to_dict(self) -> dict:
        return {
            "t": self.t, "x": np.asarray(self.x).tolist(),
            "rows": [vars(r) for r in self.rows],
            "monotone": self.monotone, "gap_diff_se": self.diff_se,
            "monotone_passed": self.monotone_passed,
            "gap_order": None if self.order is None else self.order.to_dict(),
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())


def epsilon_sweep(problem: CauchyProblem, point, eps_grid: Sequence[float], M: int, seed: int,
                  grid: TimeGrid, *, workers: int = 1, blocks: int = DEFAULT_BLOCKS
                  ) -> EpsilonSweep:
    """
    ``v^eps`` for each ``eps`` (same seed, so common drivers) against ``v0``.

    ``eps_grid`` must be strictly decreasing and nonnegative; a final ``0`` gives the
    degenerate point where only the quadrature conventions differ.
    """
    eps = [float(e) for e in eps_grid]
    if not eps or any(e < 0 or not math.isfinite(e) for e in eps):
        raise ConfigurationError("eps values must be finite and nonnegative")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ConfigurationError("eps grid must be strictly decreasing")
    t, x = _point(problem, point)
    v0 = solve_v0(problem, (t, x), grid).v0
    ests = [estimate_v_eps(problem, (t, x), e, M, seed, grid, workers=workers, blocks=blocks,
                           keep_samples=True) for e in eps]
    rows = [SweepRow(e.eps, e.v_eps, e.se, v0, abs(e.v_eps - v0), e.status) for e in ests]
    n = len(ests)
    mono = np.ones(max(n - 1, 0), dtype=bool)
    dse = np.zeros(max(n - 1, 0))
    for i in range(n - 1):
        a, b = ests[i].samples, ests[i + 1].samples
        ok = np.isfinite(a) & np.isfinite(b)
        # the gap difference is |mean b - v0| - |mean a - v0|; use the paired mean error
        sa, sb = np.sign(ests[i].v_eps - v0) or 1.0, np.sign(ests[i + 1].v_eps - v0) or 1.0
        dse[i] = float(block_jackknife(sb * b[ok] - sa * a[ok], blocks)[1]) if np.any(ok) else math.nan
        mono[i] = rows[i + 1].gap <= rows[i].gap + 3.0 * dse[i]
    order = None
    usable = [r.status == "ok" and r.eps > 0 for r in rows]
    try:
        order = fit_order([r.eps for r in rows], [r.gap for r in rows], usable)
    except InsufficientDataError:
        pass
    return EpsilonSweep(t, x, rows, mono, dse, order)
