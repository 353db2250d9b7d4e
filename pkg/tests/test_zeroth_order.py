from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from smallnoise import ConfigurationError, InsufficientDataError, UncertifiedConstantsError
from smallnoise.model import CoefficientField, Constants
from smallnoise.paths import TimeGrid, ode_values, simulate_ensemble
from smallnoise.zeroth_order import (EpsGrid, convergence_study, fit_order, moment_bound_check,
                                     moment_ensemble, mse_curve, ode_gap, sup_deviation,
                                     theoretical_bounds, verify_gronwall)


def field(drift, diffusion, r=1, l=1, T=1.0):
    return CoefficientField.from_expressions(drift, diffusion, r, l, T)


OU = field(["-x1"], ["1"])
NOISE = field(["0"], ["1"])


# -- eps grid -----------------------------------------------------------------------

@pytest.mark.parametrize("values", [[0.1, 0.2], [1.5, 0.1], [0.5, 0.5], [0.2, 0.0], []])
def test_eps_grid_rejects(values):
    with pytest.raises(ConfigurationError):
        EpsGrid(tuple(values))


def test_eps_grid_allows_final_zero_when_asked():
    assert EpsGrid((0.5, 0.0), allow_zero=True).values == (0.5, 0.0)


# -- bound chain --------------------------------------------------------------------

def _oracle_lipschitz(K, L, m0, t):
    alpha = 2 * K + K * K
    a = lambda s: K * K * (1 + m0) * math.exp(2 * L * s) * quad(lambda u: math.exp(alpha * u), 0, s)[0]
    int_a = quad(a, 0, t)[0]
    a2 = 4 * K * K * (1 + m0) * quad(lambda u: math.exp(alpha * u), 0, t)[0]
    return a(t), 4 * t * L * L * int_a, a2


def _oracle_dissipative(K, L, m0, t):
    alpha, g = 3 * K * K, 2 * L + 2 * K * K
    inner = lambda s: 2 * K * K * s + K * K * (1 + m0) * quad(lambda u: math.exp(alpha * u), 0, s)[0]
    a = lambda s: math.exp(g * s) * inner(s)
    return a(t), 4 * t * L * L * quad(a, 0, t)[0], 4 * K * K * (1 + m0) * quad(
        lambda u: math.exp(alpha * u), 0, t)[0]


def test_bounds_at_zero():
    b = theoretical_bounds(1.3, 0.7, 2.0, 1.0)
    assert b.a(0.0) == 0.0 and b.a1(0.0) == 0.0 and b.a2(0.0) == 0.0
    assert b.moment_bound(0.0) == 3.0


def test_bounds_worked_example():
    b = theoretical_bounds(1.0, 1.0, 0.0, 1.0, eps=1.0)
    assert b.moment_bound(1.0) == pytest.approx(math.exp(3), rel=1e-14)
    assert b.a(1.0) == pytest.approx(math.exp(2) * (math.exp(3) - 1) / 3, rel=1e-14)


@given(st.floats(0, 3), st.floats(0, 3), st.floats(0, 4), st.floats(0.01, 2),
       st.sampled_from(["lipschitz", "dissipative"]))
def test_bounds_against_quadrature(K, L, m0, t, variant):
    b = theoretical_bounds(K, L, m0, 2.0, variant=variant)
    oracle = (_oracle_lipschitz if variant == "lipschitz" else _oracle_dissipative)(K, L, m0, t)
    got = (float(b.a(t)), float(b.a1(t)), float(b.a2(t)))
    np.testing.assert_allclose(got, oracle, rtol=1e-7, atol=1e-12)


@given(st.floats(0, 3), st.floats(0, 3), st.floats(0, 4),
       st.sampled_from(["lipschitz", "dissipative"]))
def test_bounds_monotone_in_t(K, L, m0, variant):
    b = theoretical_bounds(K, L, m0, 1.0, variant=variant)
    t = np.linspace(0, 1, 2001)
    for curve in (b.a(t), b.a1(t), b.a2(t), b.moment_bound(t)):
        assert np.all(np.diff(curve) >= 0)


def test_variants_differ_in_moment_rate():
    lip = theoretical_bounds(2.0, 1.0, 0.0, 1.0, eps=0.5)
    dis = theoretical_bounds(2.0, 1.0, 0.0, 1.0, eps=0.5, variant="dissipative")
    assert lip.moment_bound(1.0) == pytest.approx(math.exp(4 + 0.25 * 4))
    assert dis.moment_bound(1.0) == pytest.approx(math.exp(8 + 0.25 * 4))


def test_sup_bound_capped_at_one():
    b = theoretical_bounds(1.0, 1.0, 0.0, 1.0)
    assert b.sup_bound(1.0, 1.0, 0.01) == 1.0


# -- Gronwall -----------------------------------------------------------------------

T_GRID = np.linspace(0, 2, 401)


@given(st.floats(0.01, 10), st.floats(0, 3))
def test_gronwall_constant_passes(C, alpha):
    res = verify_gronwall(T_GRID, np.full_like(T_GRID, C), C, alpha)
    assert res.passed and res.hypothesis_passed


@given(st.floats(0.01, 10), st.floats(0, 3))
def test_gronwall_equality_case(C, alpha):
    res = verify_gronwall(T_GRID, C * np.exp(alpha * T_GRID), C, alpha, quad_tol=1e-3)
    assert res.passed
    assert res.worst_ratio == pytest.approx(1.0, abs=1e-12)
    assert res.hypothesis_passed


def test_gronwall_violation_is_consistent():
    res = verify_gronwall(T_GRID, np.exp(1.5 * T_GRID), 1.0, 1.0)
    assert not res.passed and not res.hypothesis_passed and res.consistent
    assert res.worst_index == T_GRID.size - 1


def test_gronwall_rejects_negative_samples():
    with pytest.raises(ConfigurationError):
        verify_gronwall([0.0, 1.0], [1.0, -1.0], 1.0, 1.0)


# -- order fit ----------------------------------------------------------------------

EPS = np.array([0.4, 0.2, 0.1, 0.05])


def test_fit_exact_square():
    fit = fit_order(EPS, 3.7 * EPS ** 2)
    assert fit.p == pytest.approx(2.0, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.7), abs=1e-12)
    assert fit.residual < 1e-12


def test_fit_with_floor():
    mse = 1e-8 * EPS ** 2 + 1e-10
    fit = fit_order(EPS, mse, floor=1e-10)
    clean = fit_order(EPS, 1e-8 * EPS ** 2)
    assert fit.p < 1.5 and fit.residual > 100 * clean.residual + 1e-3
    assert fit.floor_limited


def test_fit_needs_three_usable_points():
    with pytest.raises(InsufficientDataError):
        fit_order(EPS, [1e-2, 0.0, np.nan, 1e-4])
    with pytest.raises(InsufficientDataError):
        fit_order(EPS, EPS ** 2, usable=[True, True, False, False])


# -- Monte Carlo studies ------------------------------------------------------------

def test_zero_noise_hits_floor():
    f = field(["-x1"], ["0"])
    rep = mse_curve(f, [1.0], TimeGrid(1.0, 100), [0.4, 0.2, 0.1], 64, 0)
    assert np.all(rep.status == "floor")
    assert np.all(rep.mse == rep.mse[0])
    assert np.all(rep.mse <= rep.gap ** 2 * (1 + 1e-12))
    assert rep.fits == {}


def test_ou_mse_matches_closed_form():
    rep = mse_curve(OU, [1.0], TimeGrid(1.0, 1000), EPS, 10_000, 1)
    t = rep.t_checks
    oracle = np.outer(EPS ** 2, (1 - np.exp(-2 * t)) / 2)
    assert np.all(np.abs(rep.mse - oracle) <= 3 * rep.se)
    assert np.all(rep.se > 0)
    assert 1.85 <= rep.fit_at(1.0).p <= 2.15


def test_pure_noise_mse_is_eps2_t():
    rep = mse_curve(NOISE, [0.0], TimeGrid(1.0, 100), [0.5, 0.1], 100_000, 3, (0.5, 1.0))
    oracle = np.outer([0.25, 0.01], [0.5, 1.0])
    assert np.all(np.abs(rep.mse - oracle) <= 3 * rep.se)


def test_blowup_flags_eps():
    f = field(["-x1^3"], ["1"], T=8.0)
    rep = mse_curve(f, [0.5], TimeGrid(8.0, 12), [1.0, 0.5, 0.1], 4000, 0, (8.0,))
    assert rep.blowup_fraction[0] > 0.01 and rep.status[0, 0] == "blowup"
    # a few blown paths under the 1% limit are dropped from the mean, not flagged
    assert 0 < rep.blowup_fraction[1] <= 0.01 and rep.status[1, 0] == "ok"
    assert np.isfinite(rep.mse[1, 0]) and rep.n_used[1] < 4000
    assert rep.fits == {}


def test_certified_mse_below_bound():
    c = Constants(1.0, 1.0, certified=True)
    rep = mse_curve(OU, [1.0], TimeGrid(1.0, 500), EPS, 4000, 2, constants=c)
    assert np.all(rep.status == "pass")
    assert set(rep.bound_curves) == {"lipschitz", "dissipative"}


def test_sup_zero_noise_frequency_zero():
    s = sup_deviation(OU, [1.0], TimeGrid(1.0, 200), [0.5, 0.0], [0.3], 500, 0)
    assert s.freq[1, 0] == 0.0 and s.freq[0, 0] > 0


def test_sup_delta_floor_guard():
    with pytest.raises(ConfigurationError):
        sup_deviation(OU, [1.0], TimeGrid(1.0, 10), [0.5], [1e-3], 10, 0)


def test_sup_monotone_and_bounded_on_ou():
    c = Constants(1.0, 1.0, certified=True)
    rep = convergence_study(OU, [1.0], TimeGrid(1.0, 200), EPS, 4000, 5, constants=c)
    s = rep.sup
    assert s.monotone_passed and s.bound_passed
    assert np.all((s.freq >= 0) & (s.freq <= 1))
    lines = s.to_csv().splitlines()
    assert lines[0] == "eps,delta,t,frequency,se,bound,status" and len(lines) == 1 + 4 * 3


def test_crn_scaling_on_linear_field():
    grid = TimeGrid(1.0, 200)
    x = ode_values(OU, [1.0], grid, "euler")[0]
    devs = []
    for e in (1.0, 0.5, 0.25):
        ens = simulate_ensemble(OU, [1.0], grid, e, 300, 9, store_paths=True)
        devs.append(ens.paths - x)
    for e, d in zip((0.5, 0.25), devs[1:]):
        np.testing.assert_allclose(d, e * devs[0], rtol=1e-9, atol=1e-14)
    sups = [np.max(np.abs(d[..., 0]), axis=1) for d in devs]
    assert np.all(sups[0] >= sups[1]) and np.all(sups[1] >= sups[2])


# -- moment bound -------------------------------------------------------------------

T_CHECKS = (0.25, 0.5, 1.0)


def test_moment_trivial_without_noise():
    f = field(["0"], ["0"])
    ens = moment_ensemble(f, [2.0], TimeGrid(1.0, 100), 0.5, 64, 0, T_CHECKS)
    chk = moment_bound_check(ens, Constants(0.0, 0.0, True), T_CHECKS, 4.0)
    np.testing.assert_array_equal(chk.lhs, 5.0)
    assert chk.passed


def test_moment_ou_passes():
    ens = moment_ensemble(OU, [1.0], TimeGrid(1.0, 1000), 0.5, 100_000, 0, T_CHECKS)
    chk = moment_bound_check(ens, Constants(1.0, 1.0, True), T_CHECKS, 1.0)
    assert chk.passed
    t = np.asarray(T_CHECKS)
    oracle = 1 + np.exp(-2 * t) + 0.25 * (1 - np.exp(-2 * t)) / 2
    assert np.all(np.abs(chk.lhs - oracle) <= 3 * chk.se + 1e-3)


def test_moment_detects_shrunk_constant():
    ens = moment_ensemble(NOISE, [0.0], TimeGrid(1.0, 100), 1.0, 20_000, 0, T_CHECKS)
    assert moment_bound_check(ens, Constants(1.0, 0.0, True), T_CHECKS, 0.0).passed
    assert not moment_bound_check(ens, Constants(0.1, 0.0, True), T_CHECKS, 0.0).passed


def test_moment_refuses_uncertified():
    ens = moment_ensemble(OU, [1.0], TimeGrid(1.0, 20), 0.5, 10, 0, T_CHECKS)
    with pytest.raises(UncertifiedConstantsError, match="estimate_condition"):
        moment_bound_check(ens, Constants(1.0, 1.0, False), T_CHECKS, 1.0)


def test_ode_gap_small_for_fine_grid():
    assert ode_gap(OU, [1.0], TimeGrid(1.0, 1000)) < 2e-4
