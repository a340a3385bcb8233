"""Tests for Poisson mixtures, charge fidelity and readout noise"""

import numpy as np
import pytest
from scipy import stats

from nvmux.core import UndefinedContrastError
from nvmux.photonstats import (
    CountStats, PoissonMixture, charge_fidelity, fit_double_poisson, histogram, mixture_pmf,
    readout_noise, sigma_r_from_samples, support)
from nvmux.utils import rng_stream


def sample_mixture(m, n, seed=0):
    rng = rng_stream(seed, 'mixture')
    minus = rng.random(n) < m.w_minus
    return rng.poisson(np.where(minus, m.lambda1, m.lambda0))


def test_mixture_pmf_normalized(charge_mixture):
    k = support(charge_mixture)
    pmf = mixture_pmf(charge_mixture, k)
    assert pmf.sum() == pytest.approx(1, abs=1e-11)
    assert CountStats.from_pmf(pmf).mean == pytest.approx(charge_mixture.mean, rel=1e-10)
    assert CountStats.from_pmf(pmf).variance == pytest.approx(charge_mixture.variance, rel=1e-9)


def test_readout_noise_matches_brute_force_moments():
    for w0, w1 in ((0.7, 0.3), (0.55, 0.45), (0.9, 0.1)):
        m0, m1 = PoissonMixture(1.6, 6.7, w0), PoissonMixture(1.6, 6.7, w1)
        k = support(m0)
        brute = readout_noise(CountStats.from_pmf(mixture_pmf(m0, k)), CountStats.from_pmf(mixture_pmf(m1, k)))
        assert readout_noise(m0.stats(), m1.stats()) == pytest.approx(brute, rel=1e-9)


def test_readout_noise_symmetries():
    s0, s1 = CountStats(2.3, 4.1), CountStats(5.9, 7.5)
    sigma_r = readout_noise(s0, s1)
    assert readout_noise(s1, s0) == sigma_r
    for shift in (-2.0, 0.7, 100.0):
        shifted = readout_noise(CountStats(s0.mean + shift, s0.variance), CountStats(s1.mean + shift, s1.variance))
        assert shifted == pytest.approx(sigma_r, rel=1e-12)


def test_all_minus_is_pure_poisson():
    k = np.arange(51)
    assert np.allclose(mixture_pmf(PoissonMixture(1.6, 6.7, 1.0), k), stats.poisson.pmf(k, 6.7), rtol=1e-9, atol=0)
    assert np.allclose(mixture_pmf(PoissonMixture(1.6, 6.7, 0.0), k), stats.poisson.pmf(k, 1.6), rtol=1e-9, atol=0)


def test_readout_noise_limits():
    assert readout_noise(CountStats(1, 0), CountStats(0, 0)) == 1.0
    assert readout_noise(CountStats(5, 1), CountStats(4, 1)) == pytest.approx(np.sqrt(5))
    with pytest.raises(UndefinedContrastError):
        readout_noise(CountStats(3, 1), CountStats(3, 2))


def test_charge_fidelity_exhaustive_scan(charge_mixture):
    fidelity, threshold = charge_fidelity(charge_mixture)
    scan = [0.5 * (stats.poisson.cdf(t, 1.6) + stats.poisson.sf(t, 6.7)) for t in range(30)]
    assert threshold == int(np.argmax(scan))
    assert fidelity == pytest.approx(max(scan), abs=1e-12)
    assert fidelity == pytest.approx(0.9112, abs=1e-4)


def test_charge_fidelity_separated_states():
    fidelities = [charge_fidelity(PoissonMixture(0.0, lam, 0.5))[0] for lam in (2, 5, 10, 20, 30)]
    assert all(a <= b for a, b in zip(fidelities, fidelities[1:]))
    assert fidelities[-1] >= 0.999
    assert charge_fidelity(PoissonMixture(0.0, 30.0, 0.5))[1] == 0


def test_charge_fidelity_conventions(charge_mixture):
    weighted, _ = charge_fidelity(charge_mixture, convention='weighted')
    assert 0.9 < weighted < 0.93
    with pytest.raises(ValueError):
        charge_fidelity(PoissonMixture(6.7, 1.6, 0.7))
    with pytest.raises(ValueError, match='convention'):
        charge_fidelity(charge_mixture, convention='median')


def test_fit_double_poisson_recovers_parameters(charge_mixture):
    counts = sample_mixture(charge_mixture, 100000)
    result = fit_double_poisson(histogram(counts))
    m = result.mixture
    assert result.converged and not result.degenerate
    assert m.lambda0 == pytest.approx(1.6, rel=0.03)
    assert m.lambda1 == pytest.approx(6.7, rel=0.03)
    assert m.w_minus == pytest.approx(0.7, rel=0.03)
    assert all(0 < e < 0.1 for e in result.stderr)
    assert charge_fidelity(m)[0] == pytest.approx(charge_fidelity(charge_mixture)[0], abs=0.01)


def test_fit_error_shrinks_with_sample_size(charge_mixture):
    truth = np.array([1.6, 6.7, 0.7])
    errors = []
    for n in (1000, 10000, 100000):
        fits = [fit_double_poisson(histogram(sample_mixture(charge_mixture, n, seed=seed))).mixture
                for seed in range(5)]
        estimates = np.array([(m.lambda0, m.lambda1, m.w_minus) for m in fits])
        errors.append(np.mean(np.abs(estimates - truth) / truth))
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 0.02


def test_fit_double_poisson_dict_histogram():
    counts = sample_mixture(PoissonMixture(1.0, 8.0, 0.4), 20000, seed=3)
    hist = histogram(counts)
    as_dict = {k: f for k, f in enumerate(hist) if f > 0}
    a = fit_double_poisson(hist).mixture
    b = fit_double_poisson(as_dict).mixture
    assert a.lambda0 == pytest.approx(b.lambda0, rel=1e-6)
    assert a.w_minus == pytest.approx(b.w_minus, rel=1e-6)


def test_fit_double_poisson_degenerate():
    counts = rng_stream(1, 'single').poisson(4.0, 20000)
    assert fit_double_poisson(histogram(counts)).degenerate

    result = fit_double_poisson(np.array([500]))
    assert result.degenerate and result.mixture.lambda1 == 0

    with pytest.raises(ValueError):
        fit_double_poisson(np.array([10, 5]))


def test_histogram():
    assert histogram([0, 2, 2, 3]).tolist() == [1, 0, 2, 1]
    with pytest.raises(ValueError):
        histogram([1, -1])


def test_sigma_r_from_samples():
    m0, m1 = PoissonMixture(1.6, 6.7, 0.55), PoissonMixture(1.6, 6.7, 0.45)
    expected = readout_noise(m0.stats(), m1.stats())
    s0 = sample_mixture(m0, 200000, seed=1)
    s1 = sample_mixture(m1, 200000, seed=2)
    sigma_r, stderr = sigma_r_from_samples(s0, s1, n_bootstrap=50)
    assert sigma_r == pytest.approx(expected, rel=0.08)
    assert 0 < stderr < 1.5
    assert sigma_r_from_samples(s0, s1, n_bootstrap=20, seed=4) == sigma_r_from_samples(s0, s1, n_bootstrap=20, seed=4)
