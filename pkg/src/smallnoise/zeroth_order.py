"""
Zeroth-order approximation studies.

The perturbed solution ``X^eps`` is compared with the unperturbed ``x`` on a common
grid, with ``x`` integrated by RK4 as reference. All ``eps`` values reuse the same
driver streams (common random numbers), which keeps the log-log slope fit stable.

Two families of explicit bounds are provided. ``variant="lipschitz"`` uses a
growth constant ``K`` and a global Lipschitz constant ``L``::

    1 + E|X(t)|^2 <= (1 + m0) exp((2K + eps^2 K^2) t)
    a(t)  = K^2 (1 + m0) e^{2Lt} (e^{alpha t} - 1) / alpha,   alpha = 2K + K^2
    a1(t) = 4 t L^2 int_0^t a(s) ds
    a2(t) = 4 K^2 (1 + m0) int_0^t e^{alpha s} ds

``variant="dissipative"`` uses the dissipativity constant ``K`` and the local
Lipschitz constant ``L = L_N``::

    1 + E|X(t)|^2 <= (1 + m0) exp((2K^2 + eps^2 K^2) t)
    a(t)  = e^{gamma t} [2 K^2 t + K^2 (1 + m0) (e^{beta t} - 1) / beta]
    gamma = 2L + 2K^2,  beta = 2K^2 + K^2

with ``a1`` and ``a2`` built as above from that ``a`` and ``beta``. Inside ``a``,
``a1`` and ``a2`` the noise level is taken as ``eps = 1``, which makes them valid
for every ``eps <= 1`` and increasing in ``t``. These are bounds derived from a proof
chain, so reports label them as such.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
from scipy.special import exprel

from .errors import ConfigurationError, InsufficientDataError, UncertifiedConstantsError
from .model import CoefficientField, Constants
from .paths import (Ensemble, InitialSampler, TimeGrid, _as_batch, ode_values,
                    simulate_ensemble)
from .stats import DEFAULT_BLOCKS, block_jackknife

VARIANTS = ("lipschitz", "dissipative")
FLOOR_FACTOR = 10.0
BLOWUP_LIMIT = 0.01
BOUND_NOTE = "proof-derived bound"


@dataclass(frozen=True)
class EpsGrid:
    """Strictly decreasing noise levels in ``(0, 1]`` (a final ``0`` if ``allow_zero``)."""
    values: tuple
    allow_zero: bool = False

    def __post_init__(self):
        v = tuple(float(e) for e in self.values)
        object.__setattr__(self, "values", v)
        if not v:
            raise ConfigurationError("eps grid is empty")
        lo = 0.0 if self.allow_zero else None
        for e in v:
            if not math.isfinite(e) or e > 1 or e < 0 or (lo is None and e == 0):
                raise ConfigurationError(
                    f"eps values must lie in {'[0, 1]' if self.allow_zero else '(0, 1]'}, got {e}")
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ConfigurationError("eps grid must be strictly decreasing")

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def asarray(self) -> np.ndarray:
        return np.array(self.values)


def _grid_of(eps, allow_zero=False) -> EpsGrid:
    if isinstance(eps, EpsGrid):
        return eps
    return EpsGrid(tuple(np.atleast_1d(eps)), allow_zero)


# -- proof-chain bounds ------------------------------------------------------------

def _E(r: float, t):
    """``(e^{rt} - 1)/r`` with the limit ``t`` at ``r = 0``."""
    t = np.asarray(t, dtype=float)
    return t * exprel(r * t)


def _F(g: float, t):
    """``int_0^t s e^{gs} ds``."""
    t = np.asarray(t, dtype=float)
    if abs(g) * np.max(t, initial=0.0) < 1e-8:
        return 0.5 * t * t
    return (np.exp(g * t) * (g * t - 1.0) + 1.0) / (g * g)


def _G(g: float, a: float, t):
    """``int_0^t e^{gs} (e^{as} - 1)/a ds``."""
    t = np.asarray(t, dtype=float)
    if a * np.max(t, initial=0.0) < 1e-6:
        return _F(g, t) + 0.5 * a * _F2(g, t)
    return (_E(g + a, t) - _E(g, t)) / a


def _F2(g: float, t):
    # int_0^t s^2 e^{gs} ds, only needed for the tiny-a expansion
    t = np.asarray(t, dtype=float)
    if abs(g) * np.max(t, initial=0.0) < 1e-8:
        return t ** 3 / 3.0
    e = np.exp(g * t)
    return (e * (g * g * t * t - 2 * g * t + 2) - 2) / g ** 3


@dataclass(frozen=True)
class ProofBounds:
    """
    Closed-form bound chain for one constant set and variant.

    All methods accept scalar or array ``t``.
    """
    K: float
    L: float
    m0: float
    T: float
    eps: float = 1.0
    variant: str = "lipschitz"
    certified: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown bound variant {self.variant!r}")
        if min(self.K, self.L, self.m0) < 0:
            raise ConfigurationError("constants and E|x0|^2 must be nonnegative")

    def _moment_rate(self, eps: float) -> float:
        K = self.K
        lead = 2 * K if self.variant == "lipschitz" else 2 * K * K
        return lead + eps * eps * K * K

    @property
    def alpha(self) -> float:
        """Moment growth rate with eps absorbed at 1."""
        return self._moment_rate(1.0)

    def moment_bound(self, t):
        """Bound on ``1 + E|X(t)|^2`` at the configured ``eps``."""
        return (1.0 + self.m0) * np.exp(self._moment_rate(self.eps) * np.asarray(t, float))

    def a(self, t):
        t = np.asarray(t, dtype=float)
        K2, c = self.K ** 2, 1.0 + self.m0
        if self.variant == "lipschitz":
            return K2 * c * np.exp(2 * self.L * t) * _E(self.alpha, t)
        g = 2 * self.L + 2 * K2
        return np.exp(g * t) * (2 * K2 * t + K2 * c * _E(self.alpha, t))

    def int_a(self, t):
        """``int_0^t a(s) ds``."""
        t = np.asarray(t, dtype=float)
        K2, c = self.K ** 2, 1.0 + self.m0
        if self.variant == "lipschitz":
            return K2 * c * _G(2 * self.L, self.alpha, t)
        g = 2 * self.L + 2 * K2
        return 2 * K2 * _F(g, t) + K2 * c * _G(g, self.alpha, t)

    def a1(self, t):
        t = np.asarray(t, dtype=float)
        return 4.0 * t * self.L ** 2 * self.int_a(t)

    def a2(self, t):
        return 4.0 * self.K ** 2 * (1.0 + self.m0) * _E(self.alpha, t)

    def mse_bound(self, t, eps):
        return eps * eps * self.a(t)

    def sup_bound(self, t, eps, delta):
        """``min(1, eps^2 delta^-2 (a1 + a2))``."""
        return np.minimum(1.0, eps * eps / (delta * delta) * (self.a1(t) + self.a2(t)))

    def curves(self, t) -> dict:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return {
            "variant": self.variant,
            "note": BOUND_NOTE,
            "t": t.tolist(),
            "a": np.atleast_1d(self.a(t)).tolist(),
            "a1": np.atleast_1d(self.a1(t)).tolist(),
            "a2": np.atleast_1d(self.a2(t)).tolist(),
            "moment_bound": np.atleast_1d(self.moment_bound(t)).tolist(),
        }


def theoretical_bounds(K_T: float, L_T: float, m0: float, T: float, eps: float = 1.0,
                       variant: str = "lipschitz", certified: bool = False) -> ProofBounds:
    """
    Bound chain ``a, a1, a2`` and the second-moment bound.

    Parameters
    ----------
    K_T : float
        Growth constant (``lipschitz``) or dissipativity constant (``dissipative``).
    L_T : float
        Global Lipschitz constant, or ``L_{N,T}`` for the dissipative variant.
    m0 : float
        ``E|x0|^2``.
    eps : float
        Noise level used in :meth:`ProofBounds.moment_bound`.
    """
    return ProofBounds(float(K_T), float(L_T), float(m0), float(T), float(eps), variant,
                       certified)


def bounds_from_constants(constants: Constants, m0: float, T: float, eps: float = 1.0,
                          variant: str = "lipschitz") -> ProofBounds:
    return theoretical_bounds(constants.K_T, constants.L_T, m0, T, eps, variant,
                              constants.certified)


# -- Gronwall ----------------------------------------------------------------------

@dataclass(frozen=True)
class GronwallCheck:
    """
    Outcome of testing ``m(t) <= C e^{alpha t}`` on samples.

    ``hypothesis_ok[k]`` records whether ``m(t_k) <= C + alpha int_0^{t_k} m`` held
    (trapezoid rule); ``consistent`` is true when the hypothesis failed wherever the
    conclusion failed, as the lemma requires.
    """
    passed: bool
    worst_ratio: float
    worst_index: int
    conclusion_ok: np.ndarray
    hypothesis_ok: np.ndarray

    @property
    def hypothesis_passed(self) -> bool:
        return bool(np.all(self.hypothesis_ok))

    @property
    def consistent(self) -> bool:
        return bool(np.all(self.conclusion_ok | ~self.hypothesis_ok))


def verify_gronwall(t, m, C: float, alpha: float, tol: float = 1e-9,
                    quad_tol: float = 1e-6) -> GronwallCheck:
    """
    Check the Gronwall conclusion and hypothesis on sampled ``m(t_k)``.

    Parameters
    ----------
    t, m : array_like
        Increasing sample times starting at 0 and nonnegative values.
    C, alpha : float
        Nonnegative constants.
    tol, quad_tol : float
        Relative slack for the conclusion and for the trapezoid hypothesis check.
    """
    t = np.asarray(t, dtype=float)
    m = np.asarray(m, dtype=float)
    if t.shape != m.shape or t.ndim != 1 or t.size == 0:
        raise ConfigurationError("t and m must be matching 1-D arrays")
    if np.any(~np.isfinite(m)) or np.any(m < 0):
        raise ConfigurationError("m must be finite and nonnegative")
    if C < 0 or alpha < 0:
        raise ConfigurationError("C and alpha must be nonnegative")
    if np.any(np.diff(t) <= 0):
        raise ConfigurationError("sample times must be increasing")
    bound = C * np.exp(alpha * t)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, m / bound, np.where(m > 0, np.inf, 0.0))
    conclusion = m <= bound * (1.0 + tol)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (m[1:] + m[:-1]) * np.diff(t))])
    hypothesis = m <= (C + alpha * integral) * (1.0 + quad_tol)
    k = int(np.argmax(ratio))
    return GronwallCheck(bool(np.all(conclusion)), float(ratio[k]), k, conclusion, hypothesis)


# -- order fit ---------------------------------------------------------------------

@dataclass(frozen=True)
class OrderFit:
    """Least squares line ``log mse = p log eps + intercept``; ``residual`` is RMS in log."""
    p: float
    intercept: float
    residual: float
    n_used: int
    floor_limited: bool = False

    def to_dict(self) -> dict:
        return {"p": self.p, "intercept": self.intercept, "residual": self.residual,
                "n_used": self.n_used, "floor_limited": self.floor_limited}


def fit_order(eps, mse, usable=None, floor: float | None = None) -> OrderFit:
    """
    Fit the order ``p`` in ``mse ~ C eps^p``.

    Points that are not ``usable``, non-positive or non-finite are dropped. With a
    ``floor`` given, ``floor_limited`` reports whether any retained point lies below
    ``10 * floor``.
    """
    e = np.asarray(eps, dtype=float)
    y = np.asarray(mse, dtype=float)
    if e.shape != y.shape:
        raise ConfigurationError("eps and mse must have the same length")
    keep = np.isfinite(y) & (y > 0) & (e > 0)
    if usable is not None:
        keep &= np.asarray(usable, dtype=bool)
    if np.count_nonzero(keep) < 3:
        raise InsufficientDataError(f"need at least 3 usable points, got {np.count_nonzero(keep)}")
    lx, ly = np.log(e[keep]), np.log(y[keep])
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (p, c), *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = float(np.sqrt(np.mean((A @ np.array([p, c]) - ly) ** 2)))
    limited = floor is not None and bool(np.any(y[keep] < FLOOR_FACTOR * floor))
    return OrderFit(float(p), float(c), res, int(np.count_nonzero(keep)), limited)


# -- simulation of deviations ------------------------------------------------------

def ode_gap(field: CoefficientField, x0, grid: TimeGrid, scheme: str = "euler") -> float:
    """``max_k |x_scheme(t_k) - x_rk4(t_k)|``: the discretisation floor of the grid."""
    if isinstance(x0, InitialSampler):
        x0 = x0.sample(0, np.arange(64))
    X0 = _as_batch(x0, field.r)
    a = ode_values(field, X0, grid, "euler", scheme)
    b = ode_values(field, X0, grid, "rk4")
    d = np.sqrt(np.sum((a - b) ** 2, axis=-1))
    if not np.all(np.isfinite(d)):
        return math.inf
    return float(np.max(d))


@dataclass
class DeviationSamples:
    """Per-path squared deviations at check times and running sup deviations."""
    eps: float
    sq: np.ndarray
    sup: np.ndarray
    blow: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.blow < 0

    @property
    def blowup_fraction(self) -> float:
        return float(np.count_nonzero(~self.ok)) / self.blow.size


def _deviation_runs(field, x0, grid, eps_values, M, seed, check_idx, sup_idx, scheme,
                    workers, level=0) -> list[DeviationSamples]:
    fine = grid.refine(level)
    sampler = isinstance(x0, InitialSampler)
    ref = None if sampler else ode_values(field, x0, fine, "rk4")[0]
    check_idx = np.asarray(check_idx, dtype=np.int64)

    def reducer(values, times, blow):
        x = ode_values(field, values[:, 0], fine, "rk4") if sampler else ref[None]
        d = values - x
        n2 = np.sum(d * d, axis=-1)
        sup = np.sqrt(np.max(n2[:, :sup_idx + 1], axis=1))
        return {"sq": n2[:, check_idx], "sup": sup}

    out = []
    for e in eps_values:
        ens = simulate_ensemble(field, x0, grid, float(e), M, seed, scheme, level=level,
                                reducer=reducer, workers=workers)
        out.append(DeviationSamples(float(e), ens.stats["sq"], ens.stats["sup"],
                                    ens.blowup_step))
    return out


def _paired_se(a: np.ndarray, b: np.ndarray, ok: np.ndarray, blocks: int) -> float:
    return float(block_jackknife((b - a)[ok], blocks)[1]) if np.any(ok) else math.nan


# -- reports -----------------------------------------------------------------------

def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def dumps(obj) -> str:
    """Deterministic JSON text (sorted keys, non-finite floats as null)."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating))
                                          else v) for v in row])
    return buf.getvalue()


@dataclass
class SupDeviation:
    """
    Frequencies of ``max_{t_k <= t} |X(t_k) - x(t_k)| > delta``.

    ``freq`` and ``se`` have shape ``(n_eps, n_delta)``. ``monotone[i, j]`` checks that
    the frequency at ``eps[i + 1]`` does not exceed the one at ``eps[i]`` by more than
    three paired standard errors.
    """
    eps: np.ndarray
    delta: np.ndarray
    t: float
    freq: np.ndarray
    se: np.ndarray
    gap: float
    bound: np.ndarray | None
    status: np.ndarray
    monotone: np.ndarray
    diff_se: np.ndarray

    @property
    def monotone_passed(self) -> bool:
        return bool(np.all(self.monotone))

    @property
    def bound_passed(self) -> bool | None:
        if self.bound is None:
            return None
        return bool(not np.any(self.status == "fail"))

    def rows(self):
        for i, e in enumerate(self.eps):
            for j, d in enumerate(self.delta):
                b = None if self.bound is None else float(self.bound[i, j])
                yield [float(e), float(d), float(self.t), float(self.freq[i, j]),
                       float(self.se[i, j]), b, str(self.status[i, j])]

    def to_csv(self) -> str:
        return _csv_text(["eps", "delta", "t", "frequency", "se", "bound", "status"], self.rows())

    def to_dict(self) -> dict:
        return {
            "eps": self.eps, "delta": self.delta, "t": self.t, "frequency": self.freq,
            "se": self.se, "ode_gap": self.gap,
            "bound": None if self.bound is None else self.bound,
            "status": self.status.tolist(), "monotone": self.monotone,
            "monotone_passed": self.monotone_passed, "bound_passed": self.bound_passed,
        }


@dataclass
class MomentCheck:
    """``1 + E|X(t)|^2`` against the second-moment bound at each checkpoint."""
    eps: float
    t: np.ndarray
    lhs: np.ndarray
    se: np.ndarray
    bound: np.ndarray
    variant: str

    @property
    def passed_at(self) -> np.ndarray:
        return self.lhs <= self.bound * (1.0 + 3.0 * self.se)

    @property
    def passed(self) -> bool:
        return bool(np.all(self.passed_at))

    def to_dict(self) -> dict:
        return {"eps": self.eps, "t": self.t, "lhs": self.lhs, "se": self.se,
                "bound": self.bound, "variant": self.variant, "passed": self.passed_at,
                "note": BOUND_NOTE}


@dataclass
class ConvergenceReport:
    """
    Mean-square deviations per ``(eps, t)`` with fits, bounds and optional extras.

    ``status`` entries: ``blowup`` (eps unusable, over 1% blown paths), ``floor``
    (mse below ten times the discretisation floor), ``pass``/``fail`` (against
    ``eps^2 a(t)`` with certified constants) or ``ok`` (no certified bound).
    """
    eps: np.ndarray
    t_checks: np.ndarray
    mse: np.ndarray
    se: np.ndarray
    n_used: np.ndarray
    blowup_fraction: np.ndarray
    gap: float
    status: np.ndarray
    fits: dict
    M: int
    seed: int
    scheme: str
    h: float
    fingerprint: str
    variant: str = "lipschitz"
    bound: np.ndarray | None = None
    bound_curves: dict = dc_field(default_factory=dict)
    constants: Constants | None = None
    sup: SupDeviation | None = None
    moments: list = dc_field(default_factory=list)
    oracle: np.ndarray | None = None

    @property
    def floor(self) -> float:
        return self.gap * self.gap

    @property
    def usable(self) -> np.ndarray:
        return self.blowup_fraction <= BLOWUP_LIMIT

    def fit_at(self, t: float) -> OrderFit | None:
        k = int(np.argmin(np.abs(self.t_checks - t)))
        return self.fits.get(k)

    def oracle_within(self, n_se: float = 3.0) -> np.ndarray | None:
        if self.oracle is None:
            return None
        return np.abs(self.mse - self.oracle) <= n_se * self.se

    def rows(self):
        for i, e in enumerate(self.eps):
            for k, t in enumerate(self.t_checks):
                b = None if self.bound is None else float(self.bound[i, k])
                yield [float(e), float(t), float(self.mse[i, k]), float(self.se[i, k]), b,
                       str(self.status[i, k])]

    def to_csv(self) -> str:
        return _csv_text(["eps", "t", "mse", "se", "bound", "status"], self.rows())

    def to_dict(self) -> dict:
        d = {
            "eps": self.eps, "t_checks": self.t_checks, "mse": self.mse, "se": self.se,
            "n_used": self.n_used, "blowup_fraction": self.blowup_fraction,
            "ode_gap": self.gap, "floor": self.floor, "status": self.status.tolist(),
            "fits": {repr(float(self.t_checks[k])): f.to_dict() for k, f in sorted(self.fits.items())},
            "M": self.M, "seed": self.seed, "scheme": self.scheme, "h": self.h,
            "field": self.fingerprint, "variant": self.variant,
            "bound": self.bound, "bound_curves": self.bound_curves,
            "constants": None if self.constants is None else {
                "K_T": self.constants.K_T, "L_T": self.constants.L_T,
                "certified": self.constants.certified, "sources": list(self.constants.sources)},
            "sup_deviation": None if self.sup is None else self.sup.to_dict(),
            "moment_checks": [m.to_dict() for m in self.moments],
            "oracle_mse": self.oracle,
        }
        return d

    def to_json(self) -> str:
        return dumps(self.to_dict())


def _check_indices(grid: TimeGrid, t_checks) -> tuple[np.ndarray, np.ndarray]:
    if t_checks is None:
        t_checks = (grid.T / 4, grid.T / 2, grid.T)
    t = np.atleast_1d(np.asarray(t_checks, dtype=float))
    idx = np.array([grid.index_of(x) for x in t], dtype=np.int64)
    return grid.times[idx], idx


def _m0(x0) -> float:
    if isinstance(x0, InitialSampler):
        return x0.second_moment()
    return float(np.sum(np.square(np.asarray(x0, dtype=float))))


def _build_mse(field, x0, grid, eps, runs, t, M, seed, scheme, gap, constants, variant,
               blocks, level) -> ConvergenceReport:
    n_e, n_t = len(eps), len(t)
    mse = np.full((n_e, n_t), np.nan)
    se = np.full((n_e, n_t), np.nan)
    used = np.zeros(n_e, dtype=np.int64)
    blowf = np.zeros(n_e)
    for i, run in enumerate(runs):
        ok = run.ok
        used[i] = np.count_nonzero(ok)
        blowf[i] = run.blowup_fraction
        if used[i]:
            m, s = block_jackknife(run.sq[ok], blocks)
            mse[i], se[i] = m, s
    floor = gap * gap
    status = np.full((n_e, n_t), "ok", dtype=object)
    bound = None
    curves = {}
    if constants is not None:
        m0 = _m0(x0)
        for v in VARIANTS:
            curves[v] = bounds_from_constants(constants, m0, grid.T, 1.0, v).curves(t)
        pb = bounds_from_constants(constants, m0, grid.T, 1.0, variant)
        bound = np.array([pb.mse_bound(t, e) for e in eps])
        if constants.certified:
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(mse > 0, se / mse, 0.0)
            ok = mse <= bound * (1.0 + 3.0 * rel)
            status[:] = np.where(ok, "pass", "fail")
    status[mse < FLOOR_FACTOR * floor] = "floor"
    status[~np.isfinite(mse)] = "blowup"
    status[blowf > BLOWUP_LIMIT, :] = "blowup"
    fits = {}
    for k in range(n_t):
        usable = ~np.isin(status[:, k], ("blowup", "floor"))
        try:
            fits[k] = fit_order(eps, mse[:, k], usable, floor)
        except InsufficientDataError:
            pass
    fine = grid.refine(level)
    return ConvergenceReport(np.asarray(eps, float), t, mse, se, used, blowf, gap, status,
                             fits, M, seed, scheme, fine.h, field.fingerprint, variant,
                             bound, curves, constants)


def mse_curve(field: CoefficientField, x0, grid: TimeGrid, eps_grid, M: int, seed: int,
              t_checks=None, *, scheme: str = "euler", constants: Constants | None = None,
              variant: str = "lipschitz", workers: int = 1, level: int = 0,
              blocks: int = DEFAULT_BLOCKS) -> ConvergenceReport:
    """
    Mean-square deviation ``E|X^eps(t) - x(t)|^2`` per ``eps`` and check time.

    Every ``eps`` is simulated with the same seed and stream ids. Standard errors use a
    block jackknife over ``blocks`` path blocks. An ``eps`` whose blow-up fraction
    exceeds 1% is flagged and excluded from the order fit, as are points within ten
    times the discretisation floor ``max_k |x_scheme - x_rk4|^2``.
    """
    eps = _grid_of(eps_grid)
    fine = grid.refine(level)
    t, idx = _check_indices(fine, t_checks)
    gap = ode_gap(field, x0, fine, scheme)
    runs = _deviation_runs(field, x0, grid, eps, M, seed, idx, int(idx.max()), scheme,
                           workers, level)
    return _build_mse(field, x0, grid, eps.asarray(), runs, t, M, seed, scheme, gap,
                      constants, variant, blocks, level)


def _default_deltas(field, x0, grid, t_idx) -> np.ndarray:
    if isinstance(x0, InitialSampler):
        scale = 0.0
    else:
        x = ode_values(field, x0, grid, "rk4")[0, :t_idx + 1]
        scale = float(np.max(np.sqrt(np.sum(x * x, axis=-1))))
    if not scale > 0 or not math.isfinite(scale):
        scale = 1.0
    return np.array([0.5, 0.2, 0.1]) * scale


def _build_sup(field, x0, grid, eps, runs, delta, t, gap, constants, variant, blocks):
    n_e, n_d = len(eps), len(delta)
    freq = np.full((n_e, n_d), np.nan)
    se = np.full((n_e, n_d), np.nan)
    ind = []
    for i, run in enumerate(runs):
        hit = (run.sup[:, None] > delta[None, :]).astype(float)
        ind.append(hit)
        ok = run.ok
        if np.any(ok):
            freq[i], se[i] = block_jackknife(hit[ok], blocks)
    status = np.full((n_e, n_d), "ok", dtype=object)
    bound = None
    if constants is not None:
        pb = bounds_from_constants(constants, _m0(x0), grid.T, 1.0, variant)
        bound = np.array([[pb.sup_bound(t, e, d) for d in delta] for e in eps], dtype=float)
        if constants.certified:
            status[:] = np.where(freq <= bound * (1.0 + 3.0 * se), "pass", "fail")
    for i, run in enumerate(runs):
        if run.blowup_fraction > BLOWUP_LIMIT:
            status[i] = "blowup"
    mono = np.ones((max(n_e - 1, 0), n_d), dtype=bool)
    dse = np.zeros((max(n_e - 1, 0), n_d))
    for i in range(n_e - 1):
        ok = runs[i].ok & runs[i + 1].ok
        for j in range(n_d):
            dse[i, j] = _paired_se(ind[i][:, j], ind[i + 1][:, j], ok, blocks)
            mono[i, j] = freq[i + 1, j] <= freq[i, j] + 3.0 * dse[i, j]
    return SupDeviation(np.asarray(eps, float), delta, float(t), freq, se, gap, bound, status,
                        mono, dse)


def _sup_setup(field, x0, fine, t, delta_grid, gap):
    t = fine.T if t is None else float(t)
    t_idx = fine.index_of(t)
    delta = (_default_deltas(field, x0, fine, t_idx) if delta_grid is None
             else np.atleast_1d(np.asarray(delta_grid, dtype=float)))
    if np.any(delta <= 0):
        raise ConfigurationError("delta values must be positive")
    if np.any(delta < FLOOR_FACTOR * gap):
        raise ConfigurationError(
            f"delta must be at least {FLOOR_FACTOR:g} times the ODE discretisation gap {gap:.3e}")
    return fine.times[t_idx], t_idx, delta


def sup_deviation(field: CoefficientField, x0, grid: TimeGrid, eps_grid, delta_grid, M: int,
                  seed: int, t: float | None = None, *, scheme: str = "euler",
                  constants: Constants | None = None, variant: str = "lipschitz",
                  workers: int = 1, level: int = 0, blocks: int = DEFAULT_BLOCKS
                  ) -> SupDeviation:
    """
    Empirical ``P{max_{t_k <= t} |X^eps(t_k) - x(t_k)| > delta}`` on common drivers.

    ``delta_grid=None`` uses ``(0.5, 0.2, 0.1) * max|x|``. Every delta must be at
    least ten times the RK4-versus-scheme ODE gap. With constants, frequencies are
    compared to ``min(1, eps^2 delta^-2 (a1(t) + a2(t)))``.
    """
    eps = _grid_of(eps_grid, allow_zero=True)
    fine = grid.refine(level)
    gap = ode_gap(field, x0, fine, scheme)
    tt, t_idx, delta = _sup_setup(field, x0, fine, t, delta_grid, gap)
    runs = _deviation_runs(field, x0, grid, eps, M, seed, [t_idx], t_idx, scheme, workers, level)
    return _build_sup(field, x0, grid, eps.asarray(), runs, delta, tt, gap, constants, variant,
                      blocks)


def convergence_study(field: CoefficientField, x0, grid: TimeGrid, eps_grid, M: int,
                      seed: int, t_checks=None, delta_grid=None, *, scheme: str = "euler",
                      constants: Constants | None = None, variant: str = "lipschitz",
                      workers: int = 1, level: int = 0, blocks: int = DEFAULT_BLOCKS
                      ) -> ConvergenceReport:
    """:func:`mse_curve` and :func:`sup_deviation` (at the last check time) from one set of runs."""
    eps = _grid_of(eps_grid)
    fine = grid.refine(level)
    t, idx = _check_indices(fine, t_checks)
    gap = ode_gap(field, x0, fine, scheme)
    tt, t_idx, delta = _sup_setup(field, x0, fine, float(t[-1]), delta_grid, gap)
    runs = _deviation_runs(field, x0, grid, eps, M, seed, idx, t_idx, scheme, workers, level)
    report = _build_mse(field, x0, grid, eps.asarray(), runs, t, M, seed, scheme, gap,
                        constants, variant, blocks, level)
    report.sup = _build_sup(field, x0, grid, eps.asarray(), runs, delta, tt, gap, constants,
                            variant, blocks)
    return report


# -- moment bound ------------------------------------------------------------------

def squared_norm_reducer(indices):
    """Reducer keeping ``|X(t_k)|^2`` at the given grid indices (key ``"sq_norm"``)."""
    idx = np.asarray(indices, dtype=np.int64)

    def reducer(values, times, blow):
        v = values[:, idx]
        return {"sq_norm": np.sum(v * v, axis=-1)}
    return reducer


def moment_ensemble(field: CoefficientField, x0, grid: TimeGrid, eps: float, M: int, seed: int,
                    t_checks, *, scheme: str = "euler", workers: int = 1) -> Ensemble:
    """Ensemble carrying ``|X(t)|^2`` samples at ``t_checks`` for :func:`moment_bound_check`."""
    _, idx = _check_indices(grid, t_checks)
    return simulate_ensemble(field, x0, grid, eps, M, seed, scheme,
                             reducer=squared_norm_reducer(idx), workers=workers)


def moment_bound_check(ensemble: Ensemble, constants: Constants, t_checks, m0: float,
                       variant: str = "lipschitz", blocks: int = DEFAULT_BLOCKS) -> MomentCheck:
    """
    Compare ``1 + E|X(t)|^2`` with ``(1 + m0) exp(rate t)`` at each checkpoint.

    The ensemble must carry ``stats["sq_norm"]`` for ``t_checks`` (see
    :func:`moment_ensemble`) or stored paths. Constants must be certified.
    """
    if not constants.certified:
        raise UncertifiedConstantsError(
            "constants are not certified; run estimate_condition on the field and build "
            "Constants.from_estimates before checking the moment bound")
    t, idx = _check_indices(ensemble.grid, t_checks)
    if "sq_norm" in ensemble.stats:
        sq = ensemble.stats["sq_norm"]
        if sq.shape[1] != idx.size:
            raise ConfigurationError("ensemble moment samples do not match t_checks")
    elif ensemble.paths is not None:
        v = ensemble.paths[:, idx]
        sq = np.sum(v * v, axis=-1)
    else:
        raise ConfigurationError("ensemble carries neither sq_norm samples nor paths")
    ok = ~ensemble.blew_up
    mean, se = block_jackknife(sq[ok], blocks)
    pb = bounds_from_constants(constants, m0, ensemble.grid.T, ensemble.eps, variant)
    return MomentCheck(ensemble.eps, t, 1.0 + mean, se, pb.moment_bound(t), variant)


def attach_moment_checks(report: ConvergenceReport, field, x0, grid, eps_values: Sequence[float],
                         M: int, seed: int, *, scheme="euler", workers=1) -> None:
    """Run :func:`moment_bound_check` for each eps and store the results on the report."""
    if report.constants is None:
        raise UncertifiedConstantsError("report has no constants; run the model validators")
    for e in eps_values:
        ens = moment_ensemble(field, x0, grid, float(e), M, seed, report.t_checks,
                              scheme=scheme, workers=workers)
        report.moments.append(moment_bound_check(ens, report.constants, report.t_checks,
                                                 _m0(x0), report.variant))
