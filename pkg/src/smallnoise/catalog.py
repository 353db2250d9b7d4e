"""
Benchmark problems with closed-form oracles.

Each entry carries expression sources (so it can be echoed into configs), a default
initial state, scheme and bound variant, and whichever oracles are known in closed
form. Oracles take ``(t, x0, eps)`` with ``x0`` a state vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .errors import ConfigurationError
from .model import CoefficientField, ScalarField


@dataclass(frozen=True)
class CatalogEntry:
    """
    A named problem.

    ``oracles`` may contain ``mean``, ``covariance``, ``mse`` (``E|X(t) - x(t)|^2``),
    ``sup_prob`` (``P{max_{s<=t} |X(s) - x(s)| > delta}`` for continuous time,
    signature ``(t, eps, delta)``) and ``v_eps`` (the Feynman-Kac value for the
    default scalar data, signature ``(t, x, eps)``).
    """
    name: str
    description: str
    r: int
    l: int
    drift: tuple
    diffusion: tuple
    x0: tuple
    scalar: dict
    scheme: str = "euler"
    variant: str = "lipschitz"
    conditions: tuple = ()
    oracles: dict = dc_field(default_factory=dict)

    def field(self, T: float = 1.0) -> CoefficientField:
        return CoefficientField.from_expressions(list(self.drift), list(self.diffusion),
                                                 self.r, self.l, T)

    def scalar_field(self) -> ScalarField:
        s = self.scalar
        return ScalarField.from_expressions(s["c"], s["g"], s["f"], self.r, c_bound=s["c_bound"],
                                            f_bound=s.get("f_bound"), g_bound=s.get("g_bound"))

    def to_dict(self) -> dict:
        return {"name": self.name, "description": self.description, "r": self.r, "l": self.l,
                "drift": list(self.drift), "diffusion": list(self.diffusion),
                "x0": list(self.x0), "scalar": dict(self.scalar), "scheme": self.scheme,
                "variant": self.variant, "conditions": list(self.conditions),
                "oracles": sorted(self.oracles)}


def _ou_var(t, eps):
    return eps * eps * (1.0 - np.exp(-2.0 * np.asarray(t, float))) / 2.0


def _ou_v(t, x, eps):
    x = np.asarray(x, float)
    return float(np.sum(x * x)) * math.exp(-2.0 * t) + float(_ou_var(t, eps))


def brownian_sup_prob(t: float, eps: float, delta: float, terms: int = 200) -> float:
    """
    ``P{max_{s<=t} |eps W_s| > delta}`` for one-dimensional ``W`` (continuous time).

    Uses the series for the exit time of Brownian motion from ``(-a, a)``.
    """
    if eps == 0:
        return 0.0
    a = delta / eps
    k = np.arange(terms)
    odd = 2 * k + 1
    inside = 4.0 / math.pi * np.sum((-1.0) ** k / odd * np.exp(-odd ** 2 * math.pi ** 2 * t / (8 * a * a)))
    return float(min(1.0, max(0.0, 1.0 - inside)))


def _gauss_expect(fn: Callable, mean: float, std: float, n: int = 80) -> float:
    z, w = hermegauss(n)
    return float(np.sum(w * fn(mean + std * z)) / math.sqrt(2.0 * math.pi))


def _rot(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s], [s, c]])


def _l2d_mean(t, x0, eps=0.0):
    return math.exp(-0.5 * t) * _rot(t) @ np.asarray(x0, float)


ENTRIES: dict[str, CatalogEntry] = {}


def _add(e: CatalogEntry):
    ENTRIES[e.name] = e


_add(CatalogEntry(
    "ou", "Ornstein-Uhlenbeck: b = -x, sigma = 1", 1, 1, ("-x1",), ("1",), (1.0,),
    {"c": "0", "g": "0", "f": "x1^2", "c_bound": 0.0},
    conditions=("linear-growth", "lipschitz"),
    oracles={
        "mean": lambda t, x0, eps: np.asarray(x0, float) * math.exp(-t),
        "covariance": lambda t, x0, eps: np.array([[float(_ou_var(t, eps))]]),
        "mse": lambda t, x0, eps: float(_ou_var(t, eps)),
        "v_eps": _ou_v,
    }))

_add(CatalogEntry(
    "pure-noise", "Scaled Brownian motion: b = 0, sigma = 1", 1, 1, ("0",), ("1",), (0.0,),
    {"c": "0", "g": "0", "f": "x1^2", "c_bound": 0.0},
    conditions=("linear-growth", "lipschitz"),
    oracles={
        "mean": lambda t, x0, eps: np.asarray(x0, float),
        "covariance": lambda t, x0, eps: np.array([[eps * eps * t]]),
        "mse": lambda t, x0, eps: eps * eps * t,
        "sup_prob": brownian_sup_prob,
        "v_eps": lambda t, x, eps: float(np.sum(np.square(x))) + eps * eps * t,
    }))

_add(CatalogEntry(
    "constant-drift", "Constant drift: b = 1, sigma = 1", 1, 1, ("1",), ("1",), (0.0,),
    {"c": "0", "g": "0", "f": "tanh(x1)", "c_bound": 0.0, "f_bound": 1.0},
    conditions=("linear-growth", "lipschitz"),
    oracles={
        "mean": lambda t, x0, eps: np.asarray(x0, float) + t,
        "covariance": lambda t, x0, eps: np.array([[eps * eps * t]]),
        "mse": lambda t, x0, eps: eps * eps * t,
        "v_eps": lambda t, x, eps: _gauss_expect(np.tanh, float(np.asarray(x).ravel()[0]) + t,
                                                 eps * math.sqrt(t)),
    }))

_add(CatalogEntry(
    "cubic", "Dissipative cubic: b = -x^3 + sin(t), sigma = 1", 1, 1, ("-x1^3 + sin(t)",), ("1",),
    (0.5,), {"c": "0", "g": "0", "f": "tanh(x1)", "c_bound": 0.0, "f_bound": 1.0},
    scheme="tamed", variant="dissipative",
    conditions=("dissipativity", "dissipativity-differences", "local-lipschitz")))

_add(CatalogEntry(
    "linear-2d", "Damped rotation: b = (-x1/2 - x2, x1 - x2/2), sigma = I", 2, 2,
    ("-0.5*x1 - x2", "x1 - 0.5*x2"), ("1", "0", "0", "1"), (1.0, 0.0),
    {"c": "0", "g": "0", "f": "x1^2 + x2^2", "c_bound": 0.0},
    conditions=("linear-growth", "lipschitz"),
    oracles={
        "mean": _l2d_mean,
        "covariance": lambda t, x0, eps: eps * eps * (1.0 - math.exp(-t)) * np.eye(2),
        "mse": lambda t, x0, eps: 2.0 * eps * eps * (1.0 - math.exp(-t)),
        "v_eps": lambda t, x, eps: float(np.sum(np.square(x))) * math.exp(-t)
        + 2.0 * eps * eps * (1.0 - math.exp(-t)),
    }))


def get(name: str) -> CatalogEntry:
    try:
        return ENTRIES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown catalog problem {name!r}; available: {', '.join(sorted(ENTRIES))}") from None


def names() -> list[str]:
    return sorted(ENTRIES)
