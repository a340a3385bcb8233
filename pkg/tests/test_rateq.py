"""Tests for the SCC rate-equation model"""

import numpy as np
import pytest
from scipy import stats
from scipy.optimize import minimize_scalar

from nvmux.photonstats import CountStats, PoissonMixture, support
from nvmux.rateq import (
    LevelPopulations, RateModel, calibrate_rate_model, evolve, initial_populations,
    multiplex_scaling, optimal_ionization, orange_594, preset, propagate, red_637,
    scc_distributions, sigma_r_at, sigma_r_curve)


def test_generator_conserves_probability():
    Q = orange_594().generator(6e-3)
    assert np.allclose(Q.sum(axis=0), 0)
    assert np.all(Q - np.diag(np.diag(Q)) >= 0)


def test_populations_validated():
    with pytest.raises(AssertionError):
        LevelPopulations(0.5, 0.5, 0.5)
    init = initial_populations(0.7, 0.95, pi_pulse=True)
    assert init.p_minus_ms1 == pytest.approx(0.665)
    assert init.p_minus == pytest.approx(0.7)


def test_evolve_trajectory():
    init = initial_populations()
    trajectory = evolve(orange_594(), init, 6e-3, 1e-6)
    assert len(trajectory) == 101
    assert trajectory.times[-1] == 1e-6
    assert np.allclose(trajectory.populations[0], init.as_array())
    assert np.allclose(trajectory.populations.sum(axis=1), 1)
    assert np.all(trajectory.populations >= 0)
    # ionization empties NV⁻ over time
    assert trajectory.final.p_minus < init.p_minus
    with pytest.raises(ValueError):
        evolve(orange_594(), init, 6e-3, -1.0)


def test_zero_power_is_static():
    init = initial_populations()
    assert np.allclose(evolve(orange_594(), init, 0.0, 1e-6).final.as_array(), init.as_array())
    assert optimal_ionization(orange_594(), 0.0, np.geomspace(1e-8, 1e-5, 20))[1] == float('inf')


def test_scc_distributions():
    no_pi, pi = scc_distributions(orange_594(), 6e-3, 250e-9)
    assert no_pi.sum() == pytest.approx(1, abs=1e-9)
    assert pi.sum() == pytest.approx(1, abs=1e-9)
    assert CountStats.from_pmf(no_pi).mean > CountStats.from_pmf(pi).mean
    with pytest.raises(ValueError):
        scc_distributions(orange_594(), 6e-3, -1e-9)


def test_sigma_r_limits():
    model = orange_594()
    assert sigma_r_at(model, 6e-3, 0.0) > 1e3
    assert sigma_r_at(model, 6e-3, 250e-9) > 1
    with pytest.raises(ValueError):
        sigma_r_curve(model, 6e-3, [2e-7, 1e-7])


def test_orange_optimum_near_250ns():
    t_star, sigma_r = optimal_ionization(orange_594(), 6e-3)
    assert 200e-9 <= t_star <= 300e-9
    assert 10 < sigma_r < 14
    # a local minimum over a ±20% neighborhood
    for factor in (0.8, 1.2):
        assert sigma_r <= sigma_r_at(orange_594(), 6e-3, factor * t_star)


def test_optimum_shifts_with_power():
    fast, _ = optimal_ionization(orange_594(), 6e-3)
    slow, _ = optimal_ionization(orange_594(), 3e-3)
    assert slow > 2 * fast


def test_red_floor_below_orange():
    grid = np.geomspace(1e-9, 1e-5, 200)
    assert optimal_ionization(red_637(), 6e-3, grid)[1] < optimal_ionization(orange_594(), 6e-3, grid)[1]
    assert preset('red_637') == red_637()
    with pytest.raises(ValueError):
        preset('green_532')


def test_multiplex_low_power_monotone():
    rows = multiplex_scaling(orange_594(), 6e-3, [1, 2, 4, 8])
    sigma = [row.sigma_r_star for row in rows]
    assert all(a < b for a, b in zip(sigma, sigma[1:]))
    assert [row.n for row in rows] == [1, 2, 4, 8]
    assert rows[1].power_per_nv == pytest.approx(3e-3)


def test_multiplex_high_power_not_monotone():
    rows = multiplex_scaling(orange_594(), 0.2, [1, 2, 4, 8, 16, 32, 64])
    sigma = np.array([row.sigma_r_star for row in rows])
    best = int(np.argmin(sigma))
    assert 0 < best < len(sigma) - 1
    assert sigma[0] > sigma[best] < sigma[-1]


def test_calibrate_rate_model():
    calibrated = calibrate_rate_model(250e-9, 12.0, 6e-3)
    t_star, sigma_r = optimal_ionization(calibrated, 6e-3, np.geomspace(20e-9, 5e-6, 160))
    assert t_star == pytest.approx(250e-9, rel=0.05)
    assert sigma_r == pytest.approx(12.0, rel=0.05)


def test_half_steps_compose():
    model, init = orange_594(), initial_populations()
    for duration in (50e-9, 1e-6, 10e-6):
        half = propagate(model, propagate(model, init, 6e-3, duration / 2), 6e-3, duration / 2)
        full = propagate(model, init, 6e-3, duration)
        assert np.allclose(half.as_array(), full.as_array(), rtol=0, atol=1e-8)


def test_populations_conserved_over_ten_microseconds():
    for init in (initial_populations(), initial_populations(0.4, 0.8, pi_pulse=True),
                 LevelPopulations(0.0, 0.0, 1.0)):
        trajectory = evolve(red_637(), init, 12e-3, 10e-6)
        assert np.all(np.abs(trajectory.populations.sum(axis=1) - 1) <= 1e-9)
        assert np.all(trajectory.populations >= 0)


def test_full_ionization_without_recombination():
    readout = PoissonMixture(1.6, 6.7, 0.7)
    model = orange_594(k_rec=0.0)
    no_pi, pi = scc_distributions(model, 6e-3, 1e-3, readout)
    background = stats.poisson.pmf(support(readout), 1.6)
    assert np.allclose(no_pi, background, atol=1e-12)
    assert np.allclose(pi, background, atol=1e-12)
    assert sigma_r_at(model, 6e-3, 1e-3, readout) == float('inf')


def test_refined_optimum_matches_dense_grid():
    model, grid = orange_594(), np.geomspace(50e-9, 2e-6, 60)
    curve = sigma_r_curve(model, 6e-3, grid)
    i = int(np.argmin(curve))
    t_star, sigma_r = optimal_ionization(model, 6e-3, grid)
    assert grid[i - 1] <= t_star <= grid[i + 1]
    assert sigma_r <= curve[i]

    dense = minimize_scalar(lambda u: sigma_r_at(model, 6e-3, float(np.exp(u))),
                            bounds=(np.log(grid[i - 1]), np.log(grid[i + 1])),
                            method='bounded', options={'xatol': 1e-9})
    assert t_star == pytest.approx(np.exp(dense.x), rel=1e-3)
    assert sigma_r == pytest.approx(dense.fun, rel=1e-6)


@pytest.mark.parametrize('rate', ['k_ion0', 'k_rec', 'k_spin'])
@pytest.mark.parametrize('factor', [0.8, 1.2])
def test_multiplex_trends_hold_near_defaults(rate, factor):
    overrides = {rate: factor * getattr(RateModel(), rate)}
    low = [row.sigma_r_star for row in multiplex_scaling(orange_594(**overrides), 6e-3, [1, 2, 4, 8])]
    assert all(a < b for a, b in zip(low, low[1:]))

    n_list = [1, 2, 4, 8, 16, 32, 64]
    high = np.array([row.sigma_r_star for row in multiplex_scaling(orange_594(**overrides), 0.2, n_list)])
    best = int(np.argmin(high))
    assert 0 < best < len(high) - 1

    red = [row.sigma_r_star for row in multiplex_scaling(red_637(**overrides), 0.2, n_list)]
    assert min(red) < high.min()
