from __future__ import annotations

import json

import pytest

from smallnoise import ConfigurationError
from smallnoise.config import (ProblemConfig, catalog_config, config_hash, fill_defaults,
                               load_config, validate_document)

INLINE = {"problem": {"r": 1, "l": 1, "drift": ["-x1"], "diffusion": ["1"]}, "x0": [1.0]}


def errors_of(doc):
    with pytest.raises(ConfigurationError) as info:
        validate_document(doc)
    return dict(info.value.errors)


def test_minimal_ou_config_gets_defaults(tmp_path):
    p = tmp_path / "ou.json"
    p.write_text(json.dumps({"problem": {"catalog": "ou"}}))
    cfg = load_config(p)
    e = cfg.effective
    assert e["eps_grid"] == [0.4, 0.2, 0.1, 0.05]
    assert e["M"] == 10000 and e["seed"] == 0 and e["grid"] == {"T": 1.0, "n_steps": 1000}
    assert e["converge"]["t_checks"] == [0.25, 0.5, 1.0]
    assert e["x0"] == [1.0] and e["scheme"] == "euler"


def test_inline_problem_builds_field():
    cfg = ProblemConfig.from_dict(INLINE)
    assert cfg.name == "inline" and cfg.r == 1
    assert cfg.field.drift(0.0, [2.0])[0] == -2.0


def test_drift_beyond_dimension_points_at_expression():
    doc = {"problem": {"r": 1, "l": 1, "drift": ["x2"], "diffusion": ["1"]}}
    errs = errors_of(doc)
    assert "/problem/drift/0" in errs and "x2" in errs["/problem/drift/0"]
    assert "column 1" in errs["/problem/drift/0"]


def test_eps_grid_must_decrease():
    errs = errors_of({"problem": {"catalog": "ou"}, "eps_grid": [0.1, 0.2]})
    assert errs["/eps_grid"] == "must be strictly decreasing"


def test_unknown_keys_rejected_with_pointer():
    errs = errors_of({"problem": {"catalog": "ou", "colour": 1}, "extra": True})
    assert any(p == "/problem" for p in errs) and any(p == "" for p in errs)


def test_all_errors_reported_together():
    doc = {"problem": {"r": 1, "l": 1, "drift": ["x1 +"], "diffusion": ["y"]},
           "eps_grid": [2.0, 0.5, 0.6]}
    errs = errors_of(doc)
    assert {"/problem/drift/0", "/problem/diffusion/0", "/eps_grid/0", "/eps_grid"} <= set(errs)


@pytest.mark.parametrize("patch,pointer", [
    ({"x0": [1.0, 2.0]}, "/x0"),
    ({"converge": {"t_checks": [0.3333]}}, "/converge/t_checks/0"),
    ({"truncation": {"policy": "fixed"}}, "/truncation/N"),
    ({"feynman_kac": {"points": [{"t": 1.0, "x": [0.0, 1.0]}]}}, "/feynman_kac/points/0/x"),
    ({"problem": {"catalog": "cubic"}, "scheme": "euler"}, "/scheme"),
    ({"problem": {"catalog": "nope"}}, "/problem/catalog"),
    ({"scalar": {"c": "sqrt(", "g": "0", "f": "1", "c_bound": 0}}, "/scalar/c"),
    ({"M": 0}, "/M"),
])
def test_semantic_errors(patch, pointer):
    doc = {"problem": {"catalog": "ou"}} | patch
    assert pointer in errors_of(doc)


def test_effective_config_round_trip(tmp_path):
    cfg = catalog_config("linear-2d", seed=7, eps=[0.3, 0.1, 0.05], paths=123)
    p = tmp_path / "eff.json"
    p.write_text(cfg.to_json())
    again = load_config(p)
    assert again.effective == cfg.effective
    assert again.digest() == cfg.digest()


def test_fill_defaults_idempotent():
    once = fill_defaults({"problem": {"catalog": "cubic"}})
    assert fill_defaults(once) == once
    assert once["converge"]["order_range"] == [1.8, 2.2]


def test_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError, match="line 1"):
        load_config(bad)
