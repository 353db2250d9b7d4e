"""
JSON run configuration.

A configuration is validated in two passes: the JSON schema (structure, types,
unknown keys) and semantic checks (expressions parse for the declared dimension,
eps strictly decreasing, scheme allowed for the declared conditions). All problems
are collected and raised together in one :class:`ConfigurationError` whose
``errors`` are ``(json_pointer, message)`` pairs.

Defaults are filled before validation; the filled document is the *effective*
configuration, which is echoed into reports and reloads to an equal configuration.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import catalog
from .coeff_expr import ExprSyntaxError, parse
from .errors import ConfigurationError
from .model import CoefficientField, ScalarField
from .paths import GaussianInitial, TimeGrid, UniformInitial

SCHEMA_VERSION = 1
STUDIES = ("simulate", "validate", "converge", "feynman-kac", "transport")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_vec = {"type": "array", "items": _num, "minItems": 1}
_exprs = {"type": "array", "items": {"type": "string"}, "minItems": 1}
_points = {
    "type": "array", "minItems": 1,
    "items": {"type": "object", "additionalProperties": False, "required": ["t", "x"],
              "properties": {"t": _pos, "x": _vec}},
}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props,
            "required": list(required)}


SCHEMA = _obj({
    "schema_version": {"const": SCHEMA_VERSION},
    "problem": _obj({
        "catalog": {"type": "string"},
        "r": {"type": "integer", "minimum": 1},
        "l": {"type": "integer", "minimum": 1},
        "drift": _exprs,
        "diffusion": _exprs,
        "variant": {"enum": ["lipschitz", "dissipative"]},
        "constants": {"anyOf": [{"type": "null"}, _obj({"K_T": _nonneg, "L_T": _nonneg},
                                                      ["K_T", "L_T"])]},
    }),
    "scalar": _obj({
        "c": {"type": "string"}, "g": {"type": "string"}, "f": {"type": "string"},
        "c_bound": _nonneg,
        "f_bound": {"anyOf": [{"type": "null"}, _nonneg]},
        "g_bound": {"anyOf": [{"type": "null"}, _nonneg]},
    }, ["c", "g", "f", "c_bound"]),
    "x0": {"anyOf": [
        _vec,
        _obj({"gaussian": _obj({"mean": _vec, "std": _vec}, ["mean", "std"])}, ["gaussian"]),
        _obj({"uniform": _obj({"low": _vec, "high": _vec}, ["low", "high"])}, ["uniform"]),
    ]},
    "grid": _obj({"T": _pos, "n_steps": {"type": "integer", "minimum": 1}}, ["T", "n_steps"]),
    "eps_grid": _vec,
    "M": {"type": "integer", "minimum": 1},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
    "scheme": {"enum": ["euler", "tamed"]},
    "truncation": _obj({
        "policy": {"enum": ["none", "fixed", "doubling"]},
        "N": {"anyOf": [{"type": "null"}, _pos]},
        "cap_factor": {"type": "number", "minimum": 1},
    }, ["policy"]),
    "converge": _obj({
        "t_checks": _vec,
        "delta_grid": {"anyOf": [{"type": "null"}, _vec]},
        "order_range": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        "moment_eps": {"type": "array", "items": _pos},
        "validator_radius": _pos,
    }),
    "validate": _obj({
        "radius": _pos,
        "n_t": {"type": "integer", "minimum": 1},
        "n_x": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "ellipticity_k": {"anyOf": [{"type": "null"}, {"type": "number", "minimum": 1}]},
    }),
    "feynman_kac": _obj({
        "points": _points,
        "k": {"anyOf": [{"type": "null"}, {"type": "number", "minimum": 1}]},
        "include_zero": {"type": "boolean"},
    }),
    "transport": _obj({
        "points": _points,
        "gap_tol": _pos,
        "include_zero": {"type": "boolean"},
    }),
    "simulate": _obj({"dump_paths": {"type": "integer", "minimum": 0}}),
}, ["problem"])

DEFAULT_EPS = [0.4, 0.2, 0.1, 0.05]
ORDER_RANGE = {"lipschitz": [1.85, 2.15], "dissipative": [1.8, 2.2]}


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def _catalog_entry(doc: dict):
    name = doc.get("problem", {}).get("catalog") if isinstance(doc.get("problem"), dict) else None
    if name is None:
        return None
    return catalog.ENTRIES.get(name)


def fill_defaults(raw: dict) -> dict:
    """Effective configuration: ``raw`` with every optional key filled in."""
    doc = copy.deepcopy(raw)
    if not isinstance(doc, dict) or not isinstance(doc.get("problem"), dict):
        return doc
    entry = _catalog_entry(doc)
    prob = doc["problem"]
    doc.setdefault("schema_version", SCHEMA_VERSION)
    if entry is not None:
        prob.setdefault("variant", entry.variant)
    else:
        prob.setdefault("variant", "lipschitz")
    prob.setdefault("constants", None)
    r = entry.r if entry is not None else prob.get("r", 1)
    r = r if isinstance(r, int) and 0 < r < 10_000 else 1
    default_scalar = dict(entry.scalar) if entry is not None else {"c": "0", "g": "0", "f": "1",
                                                                    "c_bound": 0.0}
    doc.setdefault("scalar", default_scalar)
    if isinstance(doc["scalar"], dict):
        doc["scalar"].setdefault("f_bound", None)
        doc["scalar"].setdefault("g_bound", None)
    doc.setdefault("x0", list(entry.x0) if entry is not None else [0.0] * int(r))
    doc.setdefault("grid", {"T": 1.0, "n_steps": 1000})
    doc.setdefault("eps_grid", list(DEFAULT_EPS))
    doc.setdefault("M", 10000)
    doc.setdefault("seed", 0)
    doc.setdefault("scheme", entry.scheme if entry is not None else "euler")
    doc.setdefault("truncation", {"policy": "none"})
    if isinstance(doc["truncation"], dict):
        doc["truncation"].setdefault("N", None)
        doc["truncation"].setdefault("cap_factor", float(2 ** 20))
    T = doc["grid"].get("T", 1.0) if isinstance(doc["grid"], dict) else 1.0
    variant = prob.get("variant", "lipschitz")
    conv = doc.setdefault("converge", {})
    if isinstance(conv, dict):
        n = doc["grid"].get("n_steps") if isinstance(doc["grid"], dict) else None
        if isinstance(n, int) and n > 0 and isinstance(T, (int, float)):
            # nearest grid points to T/4, T/2, T
            ks = sorted({max(1, round(n / 4)), max(1, round(n / 2)), n})
            conv.setdefault("t_checks", [T if k == n else k * (T / n) for k in ks])
        else:
            conv.setdefault("t_checks", [T / 4, T / 2, T])
        conv.setdefault("delta_grid", None)
        conv.setdefault("order_range", list(ORDER_RANGE.get(variant, ORDER_RANGE["lipschitz"])))
        conv.setdefault("moment_eps", [0.5, 1.0])
        conv.setdefault("validator_radius", 4.0)
    val = doc.setdefault("validate", {})
    if isinstance(val, dict):
        val.setdefault("radius", 4.0)
        val.setdefault("n_t", 33)
        val.setdefault("n_x", 4096)
        val.setdefault("seed", 0)
        val.setdefault("ellipticity_k", None)
    x_pt = doc["x0"] if isinstance(doc["x0"], list) else [0.0] * int(r)
    fk = doc.setdefault("feynman_kac", {})
    if isinstance(fk, dict):
        fk.setdefault("points", [{"t": T, "x": list(x_pt)}])
        fk.setdefault("k", None)
        fk.setdefault("include_zero", False)
    tr = doc.setdefault("transport", {})
    if isinstance(tr, dict):
        tr.setdefault("points", [{"t": T, "x": list(x_pt)}])
        tr.setdefault("gap_tol", 0.01)
        tr.setdefault("include_zero", False)
    sim = doc.setdefault("simulate", {})
    if isinstance(sim, dict):
        sim.setdefault("dump_paths", 0)
    return doc


def _check_exprs(exprs, r: int, base: str, errors: list):
    for i, src in enumerate(exprs):
        try:
            parse(src, r)
        except ExprSyntaxError as e:
            errors.append((f"{base}/{i}", str(e)))


def _semantic_errors(doc: dict) -> list[tuple[str, str]]:
    errors: list[tuple[str, str]] = []
    prob = doc["problem"]
    entry = None
    if "catalog" in prob:
        entry = catalog.ENTRIES.get(prob["catalog"])
        if entry is None:
            errors.append(("/problem/catalog", f"unknown catalog problem {prob['catalog']!r}; "
                                               f"available: {', '.join(catalog.names())}"))
        extra = {"r", "l", "drift", "diffusion"} & set(prob)
        for k in sorted(extra):
            errors.append((f"/problem/{k}", "not allowed together with 'catalog'"))
        r = entry.r if entry else 1
        l = entry.l if entry else 1
    else:
        missing = [k for k in ("r", "l", "drift", "diffusion") if k not in prob]
        for k in missing:
            errors.append(("/problem", f"missing '{k}' (or give 'catalog')"))
        if missing:
            return errors
        r, l = prob["r"], prob["l"]
        if len(prob["drift"]) != r:
            errors.append(("/problem/drift", f"expected {r} expressions, got {len(prob['drift'])}"))
        if len(prob["diffusion"]) != r * l:
            errors.append(("/problem/diffusion",
                           f"expected {r * l} expressions (row-major {r}x{l}), got {len(prob['diffusion'])}"))
        _check_exprs(prob["drift"], r, "/problem/drift", errors)
        _check_exprs(prob["diffusion"], r, "/problem/diffusion", errors)
    for key in ("c", "g", "f"):
        try:
            parse(doc["scalar"][key], r)
        except ExprSyntaxError as e:
            errors.append((f"/scalar/{key}", str(e)))
    x0 = doc["x0"]
    if isinstance(x0, list):
        if len(x0) != r:
            errors.append(("/x0", f"expected {r} components, got {len(x0)}"))
    else:
        kind, spec = next(iter(x0.items()))
        for k, v in spec.items():
            if len(v) != r:
                errors.append((f"/x0/{kind}/{k}", f"expected {r} components, got {len(v)}"))
        if kind == "gaussian" and any(s < 0 for s in spec["std"]):
            errors.append(("/x0/gaussian/std", "must be nonnegative"))
        if kind == "uniform" and any(b < a for a, b in zip(spec["low"], spec["high"])):
            errors.append(("/x0/uniform", "high must not be below low"))
    eps = doc["eps_grid"]
    for i, e in enumerate(eps):
        if not (0 < e <= 1):
            errors.append((f"/eps_grid/{i}", f"must lie in (0, 1], got {e}"))
    if any(b >= a for a, b in zip(eps, eps[1:])):
        errors.append(("/eps_grid", "must be strictly decreasing"))
    T = doc["grid"]["T"]
    h = T / doc["grid"]["n_steps"]
    for i, t in enumerate(doc["converge"]["t_checks"]):
        k = round(t / h)
        if not (0 < t <= T) or abs(k * h - t) > 1e-9 * h:
            errors.append((f"/converge/t_checks/{i}", f"{t} is not a grid time in (0, T]"))
    lo, hi = doc["converge"]["order_range"]
    if lo > hi:
        errors.append(("/converge/order_range", "lower end exceeds upper end"))
    for block in ("feynman_kac", "transport"):
        for i, p in enumerate(doc[block]["points"]):
            if len(p["x"]) != r:
                errors.append((f"/{block}/points/{i}/x", f"expected {r} components"))
            n = p["t"] / h
            if abs(n - round(n)) > 1e-9 * max(1.0, n):
                errors.append((f"/{block}/points/{i}/t", f"{p['t']} is not a multiple of the step {h}"))
    trunc = doc["truncation"]
    if trunc["policy"] != "none" and trunc.get("N") is None:
        errors.append(("/truncation/N", f"required for policy {trunc['policy']!r}"))
    if (prob.get("variant") == "dissipative" and doc["scheme"] == "euler"
            and trunc["policy"] == "none"):
        errors.append(("/scheme", "dissipative problems need scheme 'tamed' or a truncation policy; "
                                  "plain Euler diverges for superlinear drifts"))
    return errors


def validate_document(raw: dict) -> dict:
    """Fill defaults and validate; returns the effective document or raises with all errors."""
    if not isinstance(raw, dict):
        raise ConfigurationError("configuration must be a JSON object", [("", "not an object")])
    doc = fill_defaults(raw)
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(((_pointer(e.absolute_path), e.message) for e in validator.iter_errors(doc)))
    if not errors:
        errors = _semantic_errors(doc)
    if errors:
        lines = "\n".join(f"  {p or '/'}: {m}" for p, m in errors)
        raise ConfigurationError(f"invalid configuration ({len(errors)} errors):\n{lines}", errors)
    return doc


def apply_overrides(raw: dict, *, seed=None, eps=None, paths=None) -> dict:
    doc = copy.deepcopy(raw)
    if seed is not None:
        doc["seed"] = int(seed)
    if eps is not None:
        doc["eps_grid"] = [float(e) for e in eps]
    if paths is not None:
        doc["M"] = int(paths)
    return doc


@dataclass
class ProblemConfig:
    """Validated configuration with the objects it describes."""
    effective: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ProblemConfig":
        return cls(validate_document(raw))

    @property
    def entry(self):
        return _catalog_entry(self.effective)

    @property
    def name(self) -> str:
        return self.effective["problem"].get("catalog", "inline")

    @property
    def r(self) -> int:
        e = self.entry
        return e.r if e else self.effective["problem"]["r"]

    @property
    def grid(self) -> TimeGrid:
        g = self.effective["grid"]
        return TimeGrid(float(g["T"]), int(g["n_steps"]))

    def grid_to(self, t: float) -> TimeGrid:
        return TimeGrid.from_step(t, self.grid.h)

    @property
    def field(self) -> CoefficientField:
        e = self.entry
        T = float(self.effective["grid"]["T"])
        if e is not None:
            return e.field(T)
        p = self.effective["problem"]
        return CoefficientField.from_expressions(p["drift"], p["diffusion"], p["r"], p["l"], T)

    @property
    def scalar(self) -> ScalarField:
        s = self.effective["scalar"]
        return ScalarField.from_expressions(s["c"], s["g"], s["f"], self.r, c_bound=s["c_bound"],
                                            f_bound=s["f_bound"], g_bound=s["g_bound"])

    @property
    def x0(self):
        x = self.effective["x0"]
        if isinstance(x, list):
            return np.asarray(x, dtype=float)
        if "gaussian" in x:
            return GaussianInitial(tuple(x["gaussian"]["mean"]), tuple(x["gaussian"]["std"]))
        return UniformInitial(tuple(x["uniform"]["low"]), tuple(x["uniform"]["high"]))

    @property
    def variant(self) -> str:
        return self.effective["problem"]["variant"]

    def __getitem__(self, key):
        return self.effective[key]

    def digest(self) -> str:
        return config_hash(self.effective)

    def to_json(self) -> str:
        return canonical_json(self.effective)


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def config_hash(doc) -> str:
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def load_config(path, **overrides) -> ProblemConfig:
    """
    Read, fill and validate a JSON configuration file.

    ``overrides`` (``seed``, ``eps``, ``paths``) replace the corresponding scalars
    before validation.
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigurationError(f"cannot read {path}: {e}", [("", str(e))]) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        msg = f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        raise ConfigurationError(msg, [("", msg)]) from None
    return ProblemConfig.from_dict(apply_overrides(raw, **overrides))


def catalog_config(name: str, **overrides) -> ProblemConfig:
    return ProblemConfig.from_dict(apply_overrides({"problem": {"catalog": name}}, **overrides))

