from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from smallnoise import CoefficientError, ConfigurationError
from smallnoise.model import (CoefficientField, ConditionKind, Constants, PointSampler,
                              ScalarField, certify, certify_constants, check_ellipticity,
                              diffusion_matrix, estimate_condition, radial_projection, truncate)


def field(drift, diffusion, r=1, l=1, T=1.0):
    return CoefficientField.from_expressions(drift, diffusion, r, l, T)


CUBIC = field(["-x1^3"], ["1"])


# -- diffusion matrix --------------------------------------------------------------

@pytest.mark.parametrize("sigma,expected", [
    (["1", "0", "0", "1"], np.eye(2)),
    (["0", "0", "0", "0"], np.zeros((2, 2))),
    (["1", "2", "0", "1"], np.array([[5.0, 2.0], [2.0, 1.0]])),
])
def test_diffusion_matrix_examples(sigma, expected):
    f = field(["0", "0"], sigma, r=2, l=2)
    np.testing.assert_array_equal(diffusion_matrix(f, 0.3, np.array([0.1, -2.0])), expected)


def test_diffusion_matrix_non_square_sigma():
    f = field(["0", "0"], ["1", "0", "2", "1", "1", "1"], r=2, l=3)
    a = diffusion_matrix(f, 0.0, np.zeros(2))
    np.testing.assert_allclose(a, np.array([[5.0, 3.0], [3.0, 3.0]]))


def test_dimension_mismatch_is_configuration_error():
    with pytest.raises(ConfigurationError):
        field(["0"], ["1", "1"], r=1, l=1)
    with pytest.raises(ConfigurationError):
        diffusion_matrix(field(["0"], ["1"]), 0.0, np.zeros(2))


# -- truncation ----------------------------------------------------------------------

@pytest.mark.parametrize("x,expected", [(1.0, -1.0), (5.0, -8.0), (-5.0, 8.0)])
def test_truncate_cubic(x, expected):
    assert truncate(CUBIC, 2.0).drift(0.0, np.array([x]))[0] == expected


def test_truncate_radial_projection_2d():
    f = field(["-x1", "-x2"], ["1", "0", "0", "1"], r=2, l=2)
    np.testing.assert_allclose(truncate(f, 1.0).drift(0.0, np.array([3.0, 4.0])), [-0.6, -0.8])


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.floats(0.1, 20),
       st.floats(0.0, 1.0))
def test_truncation_identity_and_consistency(x, N, t):
    f = field(["-x1^3 + x2", "sin(x1) * x2"], ["1", "x1", "0", "cos(x2)"], r=2, l=2)
    x = np.asarray(x)
    tN, t2N = truncate(f, N), truncate(f, 2 * N)
    if np.linalg.norm(x) <= N:
        np.testing.assert_array_equal(tN.drift(t, x), f.drift(t, x))
        np.testing.assert_array_equal(tN.diffusion(t, x), f.diffusion(t, x))
        np.testing.assert_array_equal(tN.drift(t, x), t2N.drift(t, x))
    else:
        p = radial_projection(x, N)
        assert np.linalg.norm(p) == pytest.approx(N)
        np.testing.assert_array_equal(tN.drift(t, x), f.drift(t, p))


def test_truncated_lipschitz_matches_ball_constant():
    N = 2.0
    inner = estimate_condition(CUBIC, "local-lipschitz", PointSampler(N, seed=1)).value
    outer = estimate_condition(truncate(CUBIC, N), "local-lipschitz", PointSampler(20 * N, seed=1)).value
    assert inner == pytest.approx(3 * N * N, rel=0.02)
    assert outer <= inner * 1.02


# -- condition estimates -------------------------------------------------------------

def test_ou_dissipativity_is_one():
    est = estimate_condition(field(["-x1"], ["1"]), "dissipativity", PointSampler(5.0))
    assert est.certified and est.value == pytest.approx(1.0, abs=1e-12)


def test_cubic_dissipativity_differences_certified_on_grid():
    est = estimate_condition(CUBIC, "dissipativity-differences", PointSampler(10.0), 1.0)
    assert est.violation_count == 0
    # brute-force oracle: -(x - y)(x^3 - y^3) <= 0 on a grid of [-10, 10]^2
    g = np.linspace(-10, 10, 401)
    X, Y = np.meshgrid(g, g)
    assert np.all(-(X - Y) * (X ** 3 - Y ** 3) <= 0)


def test_linear_growth_violation_for_positive_cubic():
    f = field(["x1^3"], ["0"])
    est = estimate_condition(f, "linear-growth", PointSampler(10.0), candidate_constant=2.0)
    assert est.violation_count > 0
    assert abs(est.worst_witness[1][0]) > 9.0
    # oracle on a grid: x^6 vs 2(1 + x^2)
    g = np.linspace(-10, 10, 2001)
    assert np.any(g ** 6 > 2 * (1 + g ** 2))


@pytest.mark.parametrize("kind", [k for k in ConditionKind if k is not ConditionKind.ELLIPTICITY])
def test_estimate_idempotent(kind):
    f = field(["-x1^3 + sin(t)", "x1 - x2"], ["1", "0", "0.5", "x1"], r=2, l=2)
    s = PointSampler(3.0, n_x=512, seed=4)
    first = estimate_condition(f, kind, s)
    again = estimate_condition(f, kind, s, first.value)
    assert first.violation_count == 0
    assert again.violation_count == 0


def test_empty_sample_and_non_finite():
    with pytest.raises(ConfigurationError):
        estimate_condition(CUBIC, "lipschitz", PointSampler(1.0, n_x=0))
    bad = field(["1/x1"], ["1"])
    with pytest.raises(Exception) as info:
        estimate_condition(bad, "linear-growth", PointSampler(1.0))
    assert isinstance(info.value, (CoefficientError, ArithmeticError))
    blow = field(["exp(exp(x1))"], ["1"])
    with pytest.raises(CoefficientError) as info:
        estimate_condition(blow, "linear-growth", PointSampler(10.0))
    assert info.value.witness


# -- ellipticity ---------------------------------------------------------------------

def test_ellipticity_examples():
    s = PointSampler(2.0, n_x=256)
    eye = field(["0", "0"], ["1", "0", "0", "1"], r=2, l=2)
    assert check_ellipticity(eye, s, 1.0).certified
    diag = field(["0", "0"], ["1", "0", "0", "3"], r=2, l=2)
    assert check_ellipticity(diag, s, 3.0).certified
    assert not check_ellipticity(diag, s, 2.9).certified
    zero = field(["0"], ["0"])
    for k in (1.0, 10.0, 1e6):
        assert not check_ellipticity(zero, s, k).certified
    with pytest.raises(ConfigurationError):
        check_ellipticity(eye, s, 0.5)


# -- certificates --------------------------------------------------------------------

def test_certify_global_kinds_need_doubled_ball():
    s = PointSampler(4.0, n_x=1024)
    assert certify(field(["-x1"], ["1"]), "linear-growth", s).certified
    assert not certify(CUBIC, "linear-growth", s).certified
    assert certify(CUBIC, "dissipativity-differences", s).certified


def test_certify_constants_catalog_like():
    s = PointSampler(4.0, n_x=1024)
    c, certs = certify_constants(field(["-x1"], ["1"]), "lipschitz", s)
    assert c.certified and c.K_T == pytest.approx(1.0) and c.L_T == pytest.approx(1.0)
    c, certs = certify_constants(field(["-x1^3 + sin(t)"], ["1"]), "dissipative", s)
    assert c.certified and len(certs) == 3
    c, _ = certify_constants(CUBIC, "lipschitz", s)
    assert not c.certified


def test_constants_from_estimates():
    s = PointSampler(2.0, n_x=256)
    f = field(["-x1"], ["1"])
    g = estimate_condition(f, "linear-growth", s)
    lip = estimate_condition(f, "lipschitz", s)
    c = Constants.from_estimates(g, lip)
    assert c.certified and c.sources == ("linear-growth", "lipschitz")


# -- scalar fields -------------------------------------------------------------------

def test_scalar_field_requires_c_bound_and_spot_checks():
    with pytest.raises(ConfigurationError):
        ScalarField.from_expressions("1", "0", "x1", 1, c_bound=float("inf"))
    s = ScalarField.from_expressions("sin(x1)", "0", "x1", 1, c_bound=0.5)
    pts = np.linspace(-3, 3, 101)[:, None]
    assert s.spot_check(pts) > 0
    assert s.g_zero and not s.c_zero
