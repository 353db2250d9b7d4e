from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smallnoise import ConfigurationError, catalog
from smallnoise.model import CoefficientField
from smallnoise.paths import (BrownianDriver, DoublingRadius, FixedRadius, GaussianInitial,
                              TimeGrid, escape_frequencies, euler_maruyama, simulate_ensemble,
                              simulate_truncated, solve_ode, step_tamed)
from smallnoise.stats import jackknife_mean


def field(drift, diffusion, r=1, l=1, T=1.0):
    return CoefficientField.from_expressions(drift, diffusion, r, l, T)


OU = field(["-x1"], ["1"])
CUBIC = catalog.get("cubic").field()


# -- grid -------------------------------------------------------------------------

@given(st.floats(1e-3, 100), st.integers(1, 5000))
def test_grid_endpoints_exact(T, n):
    t = TimeGrid(T, n).times
    assert t[0] == 0.0 and t[-1] == T and t.size == n + 1


def test_grid_errors():
    with pytest.raises(ConfigurationError):
        TimeGrid(0.0, 10)
    with pytest.raises(ConfigurationError):
        TimeGrid.from_step(1.0, 0.3)
    with pytest.raises(ConfigurationError):
        TimeGrid(1.0, 10).index_of(0.05)


# -- ODE ----------------------------------------------------------------------------

def test_solve_ode_constant_path():
    p = solve_ode(field(["0"], ["0"]), [1.0], TimeGrid(1.0, 50), "euler")
    assert np.all(p.values == 1.0)


def test_solve_ode_rk4_exponential():
    p = solve_ode(OU, [1.0], TimeGrid(1.0, 1000), "rk4")
    assert abs(p.terminal[0] - math.exp(-1)) < 1e-9


def test_solve_ode_rk4_sine():
    f = field(["sin(t)"], ["0"], T=math.pi)
    p = solve_ode(f, [0.0], TimeGrid(math.pi, 1000), "rk4")
    assert abs(p.terminal[0] - 2.0) < 1e-8


def test_solve_ode_blowup_reported():
    f = field(["x1^2"], ["0"], T=2.0)
    p = solve_ode(f, [1.0], TimeGrid(2.0, 200), "rk4")
    assert p.blew_up and 0 < p.blowup_step < 200 and np.isnan(p.terminal[0])


# -- Euler-Maruyama -----------------------------------------------------------------

@given(st.integers(0, 2**63), st.sampled_from(["euler", "tamed"]))
@settings(max_examples=20)
def test_eps_zero_coupling_bit_equal(seed, scheme):
    f = field(["-x1^3 + sin(t)", "x1 - x2"], ["1", "x2", "0", "1"], r=2, l=2)
    grid = TimeGrid(1.0, 100)
    driver = BrownianDriver(seed, 2, grid)
    ode = solve_ode(f, [0.5, -1.0], grid, "euler") if scheme == "euler" else None
    sde = (euler_maruyama if scheme == "euler" else step_tamed)(f, [0.5, -1.0], grid, 0.0, driver)
    if ode is not None:
        np.testing.assert_array_equal(sde.values, ode.values)
    from smallnoise.paths import ode_values
    np.testing.assert_array_equal(sde.values, ode_values(f, [0.5, -1.0], grid, "euler", scheme)[0])


def test_pure_noise_is_scaled_brownian_sum():
    grid = TimeGrid(1.0, 64)
    d = BrownianDriver(5, 1, grid)
    p = euler_maruyama(field(["0"], ["1"]), [0.0], grid, 0.3, d, stream_id=9)
    dW = d.path_increments(9)
    expected = np.concatenate([[0.0], np.cumsum(0.3 * dW[:, 0])])
    np.testing.assert_allclose(p.values[:, 0], expected, rtol=0, atol=1e-15)


def test_ou_variance():
    eps, grid = 0.5, TimeGrid(1.0, 500)
    ens = simulate_ensemble(OU, [1.0], grid, eps, 100_000, 2, store_paths=False,
                            reducer=lambda v, t, b: {"x": v[:, -1, 0]})
    x = ens.stats["x"]
    var = x.var(ddof=1)
    se = math.sqrt(2.0 / (x.size - 1)) * var
    assert abs(var - eps ** 2 * (1 - math.exp(-2)) / 2) < 3 * se


def test_tamed_prevents_blowup():
    f = field(["-x1^3"], ["1"])
    grid = TimeGrid(1.0, 100)
    tamed = simulate_ensemble(f, [2.0], grid, 0.1, 10_000, 0, "tamed")
    assert tamed.blowup_count == 0
    plain = simulate_ensemble(f, [20.0], grid, 0.1, 1000, 0, "euler")
    assert plain.blowup_count > 0
    assert simulate_ensemble(f, [20.0], grid, 0.1, 1000, 0, "tamed").blowup_count == 0


def test_tamed_equals_euler_for_zero_drift():
    grid = TimeGrid(1.0, 50)
    d = BrownianDriver(1, 1, grid)
    f = field(["0"], ["1 + x1^2"])
    np.testing.assert_array_equal(euler_maruyama(f, [0.1], grid, 0.5, d).values,
                                  step_tamed(f, [0.1], grid, 0.5, d).values)


def test_tamed_close_to_euler_for_linear_drift():
    grid = TimeGrid(1.0, 10_000)
    d = BrownianDriver(1, 1, grid)
    a = euler_maruyama(OU, [1.0], grid, 0.5, d).values
    b = step_tamed(OU, [1.0], grid, 0.5, d).values
    assert np.max(np.abs(a - b)) < 1e-3


def test_grid_must_match_driver():
    with pytest.raises(ConfigurationError):
        euler_maruyama(OU, [0.0], TimeGrid(1.0, 10), 1.0, BrownianDriver(0, 1, TimeGrid(1.0, 20)))


# -- Brownian driver ----------------------------------------------------------------

@given(st.integers(0, 2**63), st.integers(1, 6), st.integers(0, 10**6))
@settings(max_examples=25)
def test_driver_refinement_exact(seed, levels, stream):
    grid = TimeGrid(1.0, 8)
    coarse = BrownianDriver(seed, 2, grid)
    fine = coarse.refined(levels)
    a = coarse.path_increments(stream)
    b = fine.path_increments(stream)
    for _ in range(levels):
        b = b[0::2] + b[1::2]
    np.testing.assert_array_equal(a, b)


def test_driver_increment_distribution():
    grid = TimeGrid(1.0, 16)
    d = BrownianDriver(3, 1, grid).refined(2)
    inc = d.increments(np.arange(20_000))[..., 0]
    h = grid.h / 4
    assert abs(inc.mean()) < 4 * math.sqrt(h / inc.size)
    assert inc.var() / h == pytest.approx(1.0, abs=4 * math.sqrt(2 / inc.size))
    # adjacent fine increments are uncorrelated
    c = np.corrcoef(inc[:, 0], inc[:, 1])[0, 1]
    assert abs(c) < 4 / math.sqrt(inc.shape[0])


def test_strong_order_slope():
    """EM error against a 2^-16 reference on the same Brownian path."""
    eps, M, base = 0.5, 400, TimeGrid(1.0, 64)
    ref = simulate_ensemble(OU, [1.0], base, eps, M, 7, level=10,
                            reducer=lambda v, t, b: {"x": v[:, -1, 0]}).stats["x"]
    hs, errs = [], []
    for lev in range(5):
        ens = simulate_ensemble(OU, [1.0], base, eps, M, 7, level=lev,
                                reducer=lambda v, t, b: {"x": v[:, -1, 0]})
        hs.append(base.h / 2 ** lev)
        errs.append(math.sqrt(np.mean((ens.stats["x"] - ref) ** 2)))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope >= 0.45


# -- truncation and doubling --------------------------------------------------------

def test_truncation_inactive_equals_plain():
    grid = TimeGrid(1.0, 200)
    d = BrownianDriver(0, 1, grid)
    a = euler_maruyama(OU, [0.2], grid, 0.3, d)
    b = simulate_truncated(OU, [0.2], grid, 0.3, d, FixedRadius(1e9))
    np.testing.assert_array_equal(a.values, b.values)
    assert math.isinf(b.exit_time) and not b.escaped


def test_pasting_bit_identical_up_to_exit():
    grid = TimeGrid(1.0, 1000)
    e2 = simulate_ensemble(CUBIC, [0.5], grid, 3.0, 500, 0, radius=2.0, store_paths=True)
    e4 = simulate_ensemble(CUBIC, [0.5], grid, 3.0, 500, 0, radius=4.0, store_paths=True)
    exited = 0
    for i, tau in enumerate(e2.exit_time):
        k = grid.n_steps if math.isinf(tau) else grid.index_of(tau)
        np.testing.assert_array_equal(e2.paths[i, :k + 1], e4.paths[i, :k + 1])
        exited += not math.isinf(tau)
    assert exited > 0


def test_truncated_ensemble_matches_single_paths():
    grid = TimeGrid(1.0, 200)
    ens = simulate_ensemble(CUBIC, [0.5], grid, 3.0, 10, 5, radius=2.0, store_paths=True)
    d = BrownianDriver(5, 1, grid)
    for sid in range(10):
        p = simulate_truncated(CUBIC, [0.5], grid, 3.0, d, FixedRadius(2.0), stream_id=sid)
        np.testing.assert_array_equal(p.values, ens.paths[sid])
        assert p.exit_time == ens.exit_time[sid]


def test_exit_time_consistent_with_values():
    grid = TimeGrid(1.0, 500)
    d = BrownianDriver(2, 1, grid)
    for sid in range(10):
        p = simulate_truncated(CUBIC, [0.5], grid, 3.0, d, FixedRadius(1.5), stream_id=sid)
        norms = np.abs(p.values[:, 0])
        if math.isinf(p.exit_time):
            assert np.all(norms <= 1.5)
        else:
            k = grid.index_of(p.exit_time)
            assert norms[k] > 1.5 and np.all(norms[:k] <= 1.5)


def test_doubling_policy():
    grid = TimeGrid(1.0, 500)
    d = BrownianDriver(2, 1, grid)
    p = simulate_truncated(CUBIC, [0.5], grid, 3.0, d, DoublingRadius(1.0), stream_id=0)
    assert p.radius_history[0] == 1.0
    assert all(b == 2 * a for a, b in zip(p.radius_history, p.radius_history[1:]))
    assert math.isinf(p.exit_history[-1]) or p.escaped
    capped = simulate_truncated(field(["x1"], ["0"], T=30.0), [0.5], TimeGrid(30.0, 300), 0.0,
                                BrownianDriver(0, 1, TimeGrid(30.0, 300)),
                                DoublingRadius(1.0, cap_factor=4.0))
    assert capped.escaped and capped.radius == 4.0


def test_truncated_requires_start_inside():
    grid = TimeGrid(1.0, 10)
    with pytest.raises(ConfigurationError):
        simulate_truncated(OU, [3.0], grid, 0.1, BrownianDriver(0, 1, grid), FixedRadius(2.0))


def test_escape_frequencies_decrease_with_radius():
    grid = TimeGrid(1.0, 200)
    est = escape_frequencies(CUBIC, [0.5], grid, 3.0, [1.0, 2.0, 4.0], 2000, 0)
    freqs = [e.frequency for e in est]
    assert freqs[0] > freqs[1] > freqs[2] == 0.0


def test_blowup_monotone_in_h():
    T = 4.0
    f = catalog.get("cubic").field(T)
    for eps in (3.0, 5.0):
        freq = []
        for n in (4, 8, 16, 32, 64, 128):
            e = simulate_ensemble(f, [0.5], TimeGrid.from_step(T, 1.0 / n), eps, 10_000, 0)
            freq.append(e.blowup_fraction)
        for coarse, fine in zip(freq, freq[1:]):
            se = math.sqrt((coarse * (1 - coarse) + fine * (1 - fine)) / 10_000)
            assert fine <= coarse + 3 * se


# -- ensembles ----------------------------------------------------------------------

def test_single_path_ensemble_matches_euler_maruyama():
    grid = TimeGrid(1.0, 100)
    ens = simulate_ensemble(OU, [1.0], grid, 0.4, 1, 13, store_paths=True)
    p = euler_maruyama(OU, [1.0], grid, 0.4, BrownianDriver(13, 1, grid))
    np.testing.assert_array_equal(ens.paths[0], p.values)


@pytest.mark.parametrize("x0", [[1.0], GaussianInitial((0.5,), (0.2,))])
def test_ensemble_thread_determinism(x0):
    grid = TimeGrid(1.0, 100)
    kw = dict(store_paths=True, moments=True, chunk_size=300)
    a = simulate_ensemble(CUBIC, x0, grid, 0.7, 2000, 21, "tamed", workers=1, **kw)
    b = simulate_ensemble(CUBIC, x0, grid, 0.7, 2000, 21, "tamed", workers=8, **kw)
    np.testing.assert_array_equal(a.paths, b.paths)
    np.testing.assert_array_equal(a.moment_sum_sq, b.moment_sum_sq)


def test_chunking_does_not_change_paths():
    grid = TimeGrid(1.0, 50)
    a = simulate_ensemble(OU, [1.0], grid, 0.4, 100, 3, store_paths=True, chunk_size=7)
    b = simulate_ensemble(OU, [1.0], grid, 0.4, 100, 3, store_paths=True)
    np.testing.assert_array_equal(a.paths, b.paths)


def test_initial_sampler_independent_of_driver():
    grid = TimeGrid(1.0, 10)
    ens = simulate_ensemble(field(["0"], ["1"]), GaussianInitial((0.0,), (1.0,)), grid, 1.0,
                            20_000, 4, store_paths=True)
    x0 = ens.paths[:, 0, 0]
    w1 = ens.paths[:, -1, 0] - x0
    assert abs(np.corrcoef(x0, w1)[0, 1]) < 4 / math.sqrt(x0.size)


def test_brownian_second_moment_equals_l():
    l = 2
    f = field(["0", "0"], ["1", "0", "0", "1"], r=2, l=l)
    ens = simulate_ensemble(f, [0.0, 0.0], TimeGrid(1.0, 10), 1.0, 100_000, 0,
                            reducer=lambda v, t, b: {"sq": np.sum(v[:, -1] ** 2, axis=-1)})
    m, se = jackknife_mean(ens.stats["sq"])
    assert abs(m - l) < 3 * se


def test_csv_outputs(tmp_path):
    grid = TimeGrid(1.0, 4)
    ens = simulate_ensemble(field(["0", "0"], ["1", "0", "0", "1"], r=2, l=2), [1.0, 2.0], grid,
                            0.1, 3, 0, store_paths=True, moments=True)
    files = ens.write_path_csvs(tmp_path / "paths")
    assert len(files) == 3
    lines = files[0].read_text().splitlines()
    assert lines[0] == "t,x1,x2" and len(lines) == 6
    ens.write_summary_csv(tmp_path / "summary.csv")
    head = (tmp_path / "summary.csv").read_text().splitlines()[0]
    assert head == "t,mean_x1,mean_x2,second_moment_x1,second_moment_x2"
