"""
Coefficient fields and sampled certificates of their structural conditions.

A :class:`CoefficientField` bundles the drift ``b(t, x)`` with values in R^r and the
diffusion ``sigma(t, x)`` with values in R^{r x l}. Both are evaluated on batches:
``x`` has shape ``(..., r)`` and ``t`` is a scalar or broadcasts against ``x[..., 0]``.

The growth, Lipschitz, dissipativity and ellipticity inequalities are assumptions on
the coefficients. Here they can only be checked on finite point clouds, so every
check returns a :class:`ConditionEstimate` recording the sample size, the worst point
and either the smallest constant that works on the sample or the number of points
violating a candidate constant.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .coeff_expr import CompiledExpr
from .errors import CoefficientError, ConfigurationError, SmallNoiseError

SYMMETRY_TOL = 1e-12


class CoefficientField:
    """
    The pair (b, sigma) on ``[0, T] x R^r``.

    Parameters
    ----------
    drift : callable
        ``drift(t, x)`` returning an array broadcastable to ``x.shape``.
    diffusion : callable
        ``diffusion(t, x)`` returning an array broadcastable to ``x.shape + (l,)``.
    r, l : int
        State and noise dimensions.
    T : float
        Time horizon.
    name : str
        Human-readable description; also feeds :attr:`fingerprint`.
    """

    def __init__(self, drift: Callable, diffusion: Callable, r: int, l: int,
                 T: float = 1.0, name: str = ""):
        if r < 1 or l < 1:
            raise ConfigurationError(f"dimensions must be >= 1, got r={r}, l={l}")
        if not T > 0:
            raise ConfigurationError(f"horizon T must be positive, got {T}")
        self._drift = drift
        self._diffusion = diffusion
        self.r = int(r)
        self.l = int(l)
        self.T = float(T)
        self.name = name or getattr(drift, "__name__", "field")

    @classmethod
    def from_expressions(cls, drift: Sequence[str], diffusion: Sequence[str],
                         r: int, l: int, T: float = 1.0) -> "CoefficientField":
        """Build a field from component expressions; diffusion is row-major r*l."""
        if len(drift) != r:
            raise ConfigurationError(f"drift needs {r} expressions, got {len(drift)}")
        if len(diffusion) != r * l:
            raise ConfigurationError(
                f"diffusion needs {r * l} expressions (row-major {r}x{l}), got {len(diffusion)}"
            )
        b = [CompiledExpr.from_source(s, r) for s in drift]
        s = [CompiledExpr.from_source(src, r) for src in diffusion]

        def drift_fn(t, x):
            return np.stack([e(t, x) for e in b], axis=-1)

        def diffusion_fn(t, x):
            flat = np.stack([e(t, x) for e in s], axis=-1)
            return flat.reshape(flat.shape[:-1] + (r, l))

        name = f"b=[{'; '.join(drift)}] sigma=[{'; '.join(diffusion)}]"
        return cls(drift_fn, diffusion_fn, r, l, T, name)

    @property
    def fingerprint(self) -> str:
        text = f"{self.name}|r={self.r}|l={self.l}|T={self.T!r}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def _state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.r:
            raise ConfigurationError(f"state must have trailing dimension {self.r}, got {np.shape(x)}")
        return x

    def drift(self, t, x) -> np.ndarray:
        x = self._state(x)
        out = np.asarray(self._drift(t, x), dtype=float)
        try:
            return np.broadcast_to(out, np.broadcast_shapes(np.shape(t) + (1,), x.shape))
        except ValueError:
            raise ConfigurationError(
                f"drift returned shape {out.shape}, expected {x.shape}"
            ) from None

    def diffusion(self, t, x) -> np.ndarray:
        x = self._state(x)
        out = np.asarray(self._diffusion(t, x), dtype=float)
        target = np.broadcast_shapes(np.shape(t) + (1,), x.shape) + (self.l,)
        try:
            return np.broadcast_to(out, target)
        except ValueError:
            raise ConfigurationError(
                f"diffusion returned shape {out.shape}, expected {target}"
            ) from None

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, r={self.r}, l={self.l}, T={self.T})"


def radial_projection(x, N: float) -> np.ndarray:
    """
    Map points outside the closed ball of radius ``N`` onto its boundary sphere.

    Points with ``|x| <= N`` are returned unchanged (same bits). In one dimension the
    projection is exactly ``N * sign(x)``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] == 1:
        return np.where(np.abs(x) > N, N * np.sign(x), x)
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    outside = norm > N
    safe = np.where(outside, norm, 1.0)
    return np.where(outside, x / safe * N, x)


class TruncatedField(CoefficientField):
    """
    Coefficients frozen outside the ball of radius ``N``.

    ``b_N(t, x) = b(t, x)`` for ``|x| <= N`` and ``b(t, N x/|x|)`` otherwise, and the
    same for sigma. If the base is Lipschitz on the ball, the result is globally
    Lipschitz with the same constant, because the projection is 1-Lipschitz.
    """

    def __init__(self, base: CoefficientField, N: float):
        if not N > 0:
            raise ConfigurationError(f"truncation radius must be positive, got {N}")
        self.base = base
        self.N = float(N)
        super().__init__(base._drift, base._diffusion, base.r, base.l, base.T,
                         f"{base.name}|N={self.N!r}")

    def drift(self, t, x) -> np.ndarray:
        return self.base.drift(t, radial_projection(self._state(x), self.N))

    def diffusion(self, t, x) -> np.ndarray:
        return self.base.diffusion(t, radial_projection(self._state(x), self.N))


def truncate(field: CoefficientField, N: float) -> TruncatedField:
    return TruncatedField(field, N)


def diffusion_matrix(field: CoefficientField, t, x) -> np.ndarray:
    """
    ``a = sigma sigma^*`` at ``(t, x)``; shape ``x.shape[:-1] + (r, r)``.

    Raises :class:`ConfigurationError` when sigma does not have shape ``(r, l)``.
    """
    s = field.diffusion(t, x)
    if s.shape[-2:] != (field.r, field.l):
        raise ConfigurationError(f"diffusion has shape {s.shape[-2:]}, expected {(field.r, field.l)}")
    a = s @ np.swapaxes(s, -1, -2)
    # the product is symmetric in exact arithmetic; remove rounding asymmetry
    return 0.5 * (a + np.swapaxes(a, -1, -2))


@dataclass(frozen=True)
class ScalarField:
    """
    Potential ``c``, source ``g`` and initial datum ``f`` of the Cauchy problem.

    Each is a callable of ``x`` with shape ``(..., r)`` returning shape ``(...)``.
    ``c_bound`` is the declared bound on ``|c|`` and is required; ``f_bound`` and
    ``g_bound`` are optional and only feed a sanity gate on estimates.
    """
    c: Callable
    g: Callable
    f: Callable
    c_bound: float
    f_bound: float | None = None
    g_bound: float | None = None
    c_zero: bool = False
    g_zero: bool = False
    name: str = ""

    def __post_init__(self):
        if self.c_bound is None or not np.isfinite(self.c_bound) or self.c_bound < 0:
            raise ConfigurationError("the potential c must be declared bounded (finite c_bound >= 0)")

    @classmethod
    def from_expressions(cls, c: str, g: str, f: str, r: int, *, c_bound: float,
                         f_bound: float | None = None, g_bound: float | None = None):
        from .coeff_expr import constant_value

        ce, ge, fe = (CompiledExpr.from_source(s, r) for s in (c, g, f))
        return cls(
            _state_only(ce), _state_only(ge), _state_only(fe), c_bound, f_bound, g_bound,
            c_zero=constant_value(ce.tree) == 0.0, g_zero=constant_value(ge.tree) == 0.0,
            name=f"c={c}; g={g}; f={f}",
        )

    def spot_check(self, points: np.ndarray) -> int:
        """Number of sample points where ``|c| > c_bound``; raises on non-finite values."""
        vals = np.asarray(self.c(points), dtype=float)
        bad = ~np.isfinite(vals)
        if np.any(bad):
            i = int(np.flatnonzero(bad.ravel())[0])
            raise CoefficientError("c is not finite", (points.reshape(-1, points.shape[-1])[i],))
        return int(np.count_nonzero(np.abs(vals) > self.c_bound))


def _state_only(expr: CompiledExpr) -> Callable:
    def fn(x):
        return expr(0.0, x)
    fn.__name__ = expr.source
    return fn


# -- sampled certificates --------------------------------------------------------

class ConditionKind(str, enum.Enum):
    LINEAR_GROWTH = "linear-growth"
    LIPSCHITZ = "lipschitz"
    LOCAL_LIPSCHITZ = "local-lipschitz"
    DISSIPATIVITY = "dissipativity"
    DISSIPATIVITY_DIFFERENCES = "dissipativity-differences"
    ELLIPTICITY = "ellipticity"

    @property
    def needs_pairs(self) -> bool:
        return self in (ConditionKind.LIPSCHITZ, ConditionKind.LOCAL_LIPSCHITZ,
                        ConditionKind.DISSIPATIVITY_DIFFERENCES)


@dataclass(frozen=True)
class ConditionEstimate:
    """
    Result of checking one inequality on a point cloud.

    ``value`` is the constant in the form it multiplies the right-hand side:
    ``K_T**2`` for growth and both dissipativity forms, ``L_T**2`` for the squared
    global Lipschitz form, ``L_{N,T}`` for the local Lipschitz form and ``k`` for
    ellipticity. Without a candidate it is the smallest constant satisfied by every
    sample point (so ``violation_count == 0``); with one it echoes the candidate.
    """
    kind: ConditionKind
    value: float
    sample_count: int
    violation_count: int
    worst_witness: tuple
    worst_ratio: float = float("nan")
    candidate: float | None = None

    @property
    def certified(self) -> bool:
        return self.violation_count == 0

    @property
    def constant(self) -> float:
        """The unsquared constant (``K_T``, ``L_T``, ``L_{N,T}`` or ``k``)."""
        if self.kind in (ConditionKind.LOCAL_LIPSCHITZ, ConditionKind.ELLIPTICITY):
            return self.value
        return float(np.sqrt(self.value))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "value": self.value,
            "constant": self.constant,
            "sample_count": self.sample_count,
            "violation_count": self.violation_count,
            "certified": self.certified,
            "worst_ratio": self.worst_ratio,
            "worst_witness": [np.asarray(w).tolist() for w in self.worst_witness],
            "candidate": self.candidate,
        }


@dataclass(frozen=True)
class PointSampler:
    """
    Point cloud over ``[0, T] x B(radius)``.

    Times are a uniform grid of ``n_t`` points; states are ``n_x`` scrambled Sobol
    points mapped onto the ball (the centre is always included). Pair conditions use
    ``n_x`` pairs: half independent, half at distance ``near * radius``.
    """
    radius: float
    T: float = 1.0
    n_t: int = 33
    n_x: int = 4096
    seed: int = 0
    near: float = 1e-3

    def times(self) -> np.ndarray:
        if self.n_t < 1:
            raise ConfigurationError("sampler needs at least one time point")
        if self.n_t == 1:
            return np.zeros(1)
        return np.linspace(0.0, self.T, self.n_t)

    def _cube(self, dim: int, n: int) -> np.ndarray:
        if n < 1:
            raise ConfigurationError("empty sample: n_x must be >= 1")
        sobol = qmc.Sobol(d=dim, scramble=True, seed=self.seed)
        m = int(np.ceil(np.log2(max(n, 2))))
        return 2.0 * sobol.random_base2(m)[:n] - 1.0

    def _to_ball(self, z: np.ndarray) -> np.ndarray:
        # cube [-1,1]^r onto the ball: rescale each ray so the cube surface hits the sphere
        norm = np.sqrt(np.sum(z * z, axis=-1, keepdims=True))
        sup = np.max(np.abs(z), axis=-1, keepdims=True)
        scale = np.divide(sup, norm, out=np.zeros_like(norm), where=norm > 0)
        return self.radius * z * scale

    def states(self, r: int) -> np.ndarray:
        x = self._to_ball(self._cube(r, self.n_x))
        x[0] = 0.0
        return x

    def pairs(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        z = self._cube(2 * r, self.n_x)
        x = self._to_ball(z[:, :r])
        y = self._to_ball(z[:, r:])
        half = self.n_x // 2
        # near pairs approximate the local derivative
        d = z[half:, r:]
        dn = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
        dn[dn == 0] = 1.0
        y_near = x[half:] + self.near * self.radius * d / dn
        y_near = _clip_to_ball(y_near, self.radius)
        y[half:] = y_near
        return x, y


def _clip_to_ball(x: np.ndarray, radius: float) -> np.ndarray:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return np.where(norm > radius, x / np.where(norm > 0, norm, 1.0) * radius, x)


def _sq(v: np.ndarray, axes) -> np.ndarray:
    return np.sum(v * v, axis=axes)


def _check_finite(name: str, values: np.ndarray, t: np.ndarray, *points: np.ndarray):
    bad = ~np.isfinite(values)
    if np.any(bad):
        idx = np.unravel_index(int(np.flatnonzero(bad)[0]), bad.shape)
        witness = (float(t[idx[0]]),) + tuple(p[idx[1]].copy() for p in points)
        raise CoefficientError(f"{name} is not finite at t={witness[0]}, x={witness[1:]}", witness)


def _condition_ratios(field: CoefficientField, kind: ConditionKind, sampler: PointSampler):
    """Per-point ratios lhs/rhs (shape (n_t, n_points)) and the matching witnesses."""
    t = sampler.times()
    tt = t[:, None]
    if kind.needs_pairs:
        x, y = sampler.pairs(field.r)
        diff = x - y
        dist2 = _sq(diff, -1)
        keep = dist2 > 0
        x, y, diff, dist2 = x[keep], y[keep], diff[keep], dist2[keep]
        if x.shape[0] == 0:
            raise ConfigurationError("empty sample: no distinct point pairs")
        bx, by = field.drift(tt, x[None]), field.drift(tt, y[None])
        _check_finite("drift", bx, t, x, y)
        _check_finite("drift", by, t, y, x)
        if kind is ConditionKind.DISSIPATIVITY_DIFFERENCES:
            lhs = np.sum(diff[None] * (bx - by), axis=-1)
            ratio = lhs / (1.0 + dist2[None])
        else:
            sx, sy = field.diffusion(tt, x[None]), field.diffusion(tt, y[None])
            _check_finite("diffusion", sx, t, x, y)
            _check_finite("diffusion", sy, t, y, x)
            db2 = _sq(bx - by, -1)
            ds2 = _sq(sx - sy, (-2, -1))
            if kind is ConditionKind.LIPSCHITZ:
                ratio = (db2 + ds2) / dist2[None]
            else:
                ratio = (np.sqrt(db2) + np.sqrt(ds2)) / np.sqrt(dist2)[None]
        return ratio, t, (x, y)
    x = sampler.states(field.r)
    if x.shape[0] == 0:
        raise ConfigurationError("empty sample")
    b = field.drift(tt, x[None])
    s = field.diffusion(tt, x[None])
    _check_finite("drift", b, t, x)
    _check_finite("diffusion", s, t, x)
    x2 = _sq(x, -1)[None]
    s2 = _sq(s, (-2, -1))
    if kind is ConditionKind.LINEAR_GROWTH:
        lhs = _sq(b, -1) + s2
    elif kind is ConditionKind.DISSIPATIVITY:
        lhs = np.sum(x[None] * b, axis=-1) + s2
    else:
        raise ValueError(f"unsupported condition kind {kind}")
    return lhs / (1.0 + x2), t, (x,)


def estimate_condition(field: CoefficientField, kind: ConditionKind | str,
                       sampler: PointSampler, candidate_constant: float | None = None
                       ) -> ConditionEstimate:
    """
    Certify one of the structural inequalities on a point cloud.

    Without ``candidate_constant`` the smallest constant that holds on every sample
    point is returned (clipped at zero). With it, points whose ratio exceeds the
    candidate are counted. Ratios, not cross-multiplied sides, are compared, so a
    value returned by one call is always certified by the next on the same sample.
    """
    kind = ConditionKind(kind)
    if kind is ConditionKind.ELLIPTICITY:
        if candidate_constant is None:
            return _ellipticity(field, sampler, None)
        return check_ellipticity(field, sampler, candidate_constant)
    ratio, t, pts = _condition_ratios(field, kind, sampler)
    flat = int(np.argmax(ratio))
    ti, pi = np.unravel_index(flat, ratio.shape)
    worst = float(ratio[ti, pi])
    witness = (float(t[ti]),) + tuple(p[pi].copy() for p in pts)
    if candidate_constant is None:
        value = max(worst, 0.0)
        violations = int(np.count_nonzero(ratio > value))
    else:
        value = float(candidate_constant)
        violations = int(np.count_nonzero(ratio > value))
    return ConditionEstimate(kind, value, int(ratio.size), violations, witness, worst,
                             None if candidate_constant is None else float(candidate_constant))


def _ellipticity(field: CoefficientField, sampler: PointSampler, k: float | None) -> ConditionEstimate:
    t = sampler.times()
    x = sampler.states(field.r)
    s = field.diffusion(t[:, None], x[None])
    _check_finite("diffusion", s, t, x)
    a = s @ np.swapaxes(s, -1, -2)
    asym = np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0)
    if asym > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(a), initial=0.0))):
        raise SmallNoiseError(f"diffusion matrix not symmetric (residual {asym:.3e})")
    eig = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))
    lo, hi = eig[..., 0], eig[..., -1]
    # smallest k with k^-2 <= lo and hi <= k^2
    with np.errstate(divide="ignore"):
        need = np.maximum(np.sqrt(np.maximum(hi, 0.0)),
                          np.where(lo > 0, 1.0 / np.sqrt(np.where(lo > 0, lo, 1.0)), np.inf))
    need = np.maximum(need, 1.0)
    ti, pi = np.unravel_index(int(np.argmax(need)), need.shape)
    witness = (float(t[ti]), x[pi].copy())
    worst = float(need[ti, pi])
    if k is None:
        return ConditionEstimate(ConditionKind.ELLIPTICITY, worst, int(need.size),
                                 int(np.count_nonzero(need > worst)), witness, worst)
    violations = int(np.count_nonzero((lo < k ** -2) | (hi > k ** 2)))
    return ConditionEstimate(ConditionKind.ELLIPTICITY, float(k), int(need.size), violations,
                             witness, worst, float(k))


def check_ellipticity(field: CoefficientField, sampler: PointSampler, k: float) -> ConditionEstimate:
    """Check that every eigenvalue of ``sigma sigma^*`` lies in ``[k^-2, k^2]`` on the sample."""
    if not k >= 1:
        raise ConfigurationError(f"ellipticity constant must be >= 1, got {k}")
    return _ellipticity(field, sampler, k)


@dataclass(frozen=True)
class Constants:
    """
    Constants feeding the proof-derived bounds.

    ``K_T`` is the growth (or dissipativity) constant and ``L_T`` the Lipschitz
    constant (``L_{N,T}`` for the dissipative variant). ``certified`` is true only
    when both came from validator runs without violations.
    """
    K_T: float
    L_T: float
    certified: bool = False
    sources: tuple = field(default_factory=tuple)

    @classmethod
    def from_estimates(cls, growth: ConditionEstimate, lipschitz: ConditionEstimate,
                       *extra: ConditionEstimate) -> "Constants":
        K = max([growth.constant] + [e.constant for e in extra])
        ok = growth.certified and lipschitz.certified and all(e.certified for e in extra)
        return cls(K, lipschitz.constant, ok,
                   tuple(e.kind.value for e in (growth, lipschitz) + extra))


GLOBAL_KINDS = (ConditionKind.LINEAR_GROWTH, ConditionKind.LIPSCHITZ,
                ConditionKind.DISSIPATIVITY, ConditionKind.DISSIPATIVITY_DIFFERENCES)
REQUIRED_KINDS = {
    "lipschitz": (ConditionKind.LINEAR_GROWTH, ConditionKind.LIPSCHITZ),
    "dissipative": (ConditionKind.DISSIPATIVITY, ConditionKind.DISSIPATIVITY_DIFFERENCES),
}
# relative slack when re-checking a sampled constant on the doubled ball
EXTRAPOLATION_SLACK = 1e-9


@dataclass(frozen=True)
class Certificate:
    """
    A sampled constant and its re-check on the ball of twice the radius.

    Global inequalities (growth, Lipschitz, dissipativity) hold for all ``x``, so a
    constant that only works on the sampled ball is not accepted: the value found
    on radius ``R`` must also hold on radius ``2R``. The local Lipschitz constant is
    by definition tied to its ball and is not extrapolated.
    """
    estimate: ConditionEstimate
    extrapolation: ConditionEstimate | None

    @property
    def kind(self) -> ConditionKind:
        return self.estimate.kind

    @property
    def certified(self) -> bool:
        ext_ok = self.extrapolation is None or self.extrapolation.certified
        return self.estimate.certified and ext_ok

    def to_dict(self) -> dict:
        d = self.estimate.to_dict()
        d["extrapolation_violations"] = (None if self.extrapolation is None
                                         else self.extrapolation.violation_count)
        d["certified"] = self.certified
        return d


def certify(field: CoefficientField, kind: ConditionKind | str, sampler: PointSampler) -> Certificate:
    """Sampled constant for ``kind`` plus, for global kinds, the re-check on ``2R``."""
    kind = ConditionKind(kind)
    est = estimate_condition(field, kind, sampler)
    ext = None
    if kind in GLOBAL_KINDS:
        wide = PointSampler(2 * sampler.radius, sampler.T, sampler.n_t, sampler.n_x,
                            sampler.seed + 1, sampler.near)
        ext = estimate_condition(field, kind, wide, est.value * (1.0 + EXTRAPOLATION_SLACK))
    return Certificate(est, ext)


def certify_constants(field: CoefficientField, variant: str, sampler: PointSampler
                      ) -> tuple[Constants, list[Certificate]]:
    """
    Constants for the bound chain of ``variant`` from sampled certificates.

    ``lipschitz``: ``K_T`` from linear growth, ``L_T`` from the global Lipschitz form.
    ``dissipative``: ``K_T`` from both dissipativity forms, ``L`` the local Lipschitz
    constant on the sampler's ball. ``certified`` requires every global certificate
    involved to hold on the doubled ball.
    """
    if variant == "lipschitz":
        growth = certify(field, ConditionKind.LINEAR_GROWTH, sampler)
        lip = certify(field, ConditionKind.LIPSCHITZ, sampler)
        certs = [growth, lip]
        K, L = growth.estimate.constant, lip.estimate.constant
    elif variant == "dissipative":
        diss = certify(field, ConditionKind.DISSIPATIVITY, sampler)
        diff = certify(field, ConditionKind.DISSIPATIVITY_DIFFERENCES, sampler)
        loc = certify(field, ConditionKind.LOCAL_LIPSCHITZ, sampler)
        certs = [diss, diff, loc]
        K = max(diss.estimate.constant, diff.estimate.constant)
        L = loc.estimate.constant
    else:
        raise ConfigurationError(f"unknown bound variant {variant!r}")
    ok = all(c.certified for c in certs)
    return Constants(K, L, ok, tuple(c.kind.value for c in certs)), certs
