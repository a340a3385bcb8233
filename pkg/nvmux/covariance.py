"""Covariance magnetometry: pairwise Pearson correlators, the common-mode
background model, baseline subtraction and shot-level simulators for the
driven-spin and XY8 correlation experiments.
"""
import itertools
import warnings
import numpy as np
import networkx as nx

from dataclasses import dataclass, replace
from functools import lru_cache
from scipy.optimize import brentq

from nvmux.core import UndefinedContrastError
from nvmux.photonstats import PoissonMixture, mixture_pmf, readout_noise, support
from nvmux.spinphysics import CoherenceModel, coherence_factor, xy8_phase
from nvmux.utils import Colors, log, progress_bar, rng_stream


__all__ = names = (
    'BackgroundModel', 'CorrelationRecord', 'DrivenSequence', 'BaselineCalibration',
    'CovarianceAccumulator', 'SccReadout', 'pearson', 'background_correlation',
    'correlation_with_true', 'offset_under_true_correlation', 'simulate_background',
    'subtract_baseline', 'calibrate_baseline', 'expected_pair_correlation',
    'simulate_driven', 'simulate_spectroscopy', 'fit_driven_amplitude',
    'sigma_r_from_amplitude', 'select_coherent_sites', 'correlation_graph')

CHUNK = 250_000
MIN_SHOTS = 1000


###############
# ACCUMULATOR #
###############


class CovarianceAccumulator:
    """One-pass mean and co-moment over k channels; merges associatively."""

    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.comoment = np.zeros((dim, dim))
        self.dim = dim

    def update(self, batch):
        batch = np.asarray(batch, dtype=float)
        if batch.ndim == 1:
            batch = batch[None]
        assert batch.shape[1] == self.dim, f'Expected {self.dim} channels, got {batch.shape[1]}'
        other = CovarianceAccumulator(self.dim)
        other.n = len(batch)
        other.mean = batch.mean(axis=0)
        centered = batch - other.mean
        other.comoment = centered.T @ centered
        return self.merge(other)

    def merge(self, other):
        assert other.dim == self.dim
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.comoment = self.comoment + other.comoment + np.outer(delta, delta) * self.n * other.n / n
        self.mean = self.mean + delta * other.n / n
        self.n = n
        return self

    @property
    def covariance(self):
        if self.n < 2:
            raise ValueError('Need at least two samples for a covariance')
        return self.comoment / (self.n - 1)

    def pearson(self, i, j):
        var = self.comoment[i, i] * self.comoment[j, j]
        if var <= 0:
            raise UndefinedContrastError(f'Channel {i if self.comoment[i, i] <= 0 else j} has zero variance')
        return float(np.clip(self.comoment[i, j] / np.sqrt(var), -1.0, 1.0))

    def records(self, labels=None, sweep_value=None):
        labels = list(range(self.dim)) if labels is None else list(labels)
        records = []
        for i, j in itertools.combinations(range(self.dim), 2):
            r = self.pearson(i, j)
            records.append(CorrelationRecord(
                (labels[i], labels[j]), r, standard_error(r, self.n), n_shots=self.n,
                sweep_value=sweep_value))
        return records


###########
# RECORDS #
###########


@dataclass(frozen=True)
class CorrelationRecord:
    pair: tuple
    r: float
    stderr: float
    baseline: float = 0.0
    r_corr: float = None
    n_shots: int = 0
    sweep_value: float = None

    def __post_init__(self):
        assert abs(self.r) <= 1, f'|r| must not exceed 1: {self.r}'
        if self.r_corr is None:
            object.__setattr__(self, 'r_corr', self.r - self.baseline)

    def row(self):
        return (self.sweep_value, self.pair[0], self.pair[1], self.r, self.r_corr,
                self.stderr, self.n_shots)


COLUMNS = ('sweep_value', 'site_i', 'site_j', 'r_raw', 'r_corr', 'stderr', 'n_shots')


def standard_error(r, n):
    return (1 - r ** 2) / np.sqrt(n - 1)


def pearson(s_i, s_j, pair=(0, 1), bootstrap=0, seed=0):
    """Sample Pearson correlation of two count sequences.

    The standard error is (1 − r²)/√(n − 1), or the bootstrap spread when
    `bootstrap` resamples are requested.
    """
    s_i = np.asarray(s_i, dtype=float)
    s_j = np.asarray(s_j, dtype=float)
    if s_i.shape != s_j.shape or s_i.ndim != 1 or len(s_i) < 2:
        raise ValueError('Pearson needs two equal-length sequences of at least 2 samples')
    acc = CovarianceAccumulator(2).update(np.stack([s_i, s_j], axis=1))
    r = acc.pearson(0, 1)
    stderr = standard_error(r, len(s_i))
    if bootstrap:
        rng = rng_stream(seed, 'pearson-bootstrap')
        estimates = []
        for _ in range(bootstrap):
            index = rng.integers(0, len(s_i), len(s_i))
            try:
                estimates.append(CovarianceAccumulator(2).update(
                    np.stack([s_i[index], s_j[index]], axis=1)).pearson(0, 1))
            except UndefinedContrastError:
                continue
        stderr = float(np.std(estimates, ddof=1))
    return CorrelationRecord(tuple(pair), r, float(stderr), n_shots=len(s_i))


##############
# BACKGROUND #
##############


@dataclass(frozen=True)
class BackgroundModel:
    """Counts S = N·X with X ~ Poisson(mu) per site and a shared N ~ Normal(1, sigma_n)."""
    mu: float
    sigma_n: float

    def __post_init__(self):
        assert self.mu >= 0 and self.sigma_n >= 0, f'Invalid background model {self}'

    @property
    def in_validity_regime(self):
        return self.mu * self.sigma_n ** 2 + self.sigma_n ** 2 < 0.1


def background_correlation(bg):
    """(exact, approximate) correlation of independent sites under common gain noise.

    >>> exact, approx = background_correlation(BackgroundModel(4, 0.05))
    >>> round(exact, 6), round(approx, 6)
    (0.009877, 0.01)
    """
    if not bg.in_validity_regime:
        message = f'Background model {bg} is outside the small-noise regime'
        Colors.red(message)
        warnings.warn(message, UserWarning)
    return correlation_with_true(bg, 0.0), bg.mu * bg.sigma_n ** 2


def correlation_with_true(bg, r_true):
    """Measured correlation when the sites also share a true correlation r_true."""
    mu, var = bg.mu, bg.sigma_n ** 2
    denominator = mu ** 2 * var + mu * var + mu
    if denominator == 0:
        return 0.0
    return (mu ** 2 * var + mu * r_true * (var + 1)) / denominator


def offset_under_true_correlation(bg, r_true, exact=False):
    """Positive offset the background adds on top of r_true: ≈ (1 − r)·μσ²."""
    if abs(r_true) > 1:
        raise ValueError(f'|r_true| must not exceed 1, got {r_true}')
    mu, var = bg.mu, bg.sigma_n ** 2
    if exact:
        denominator = mu ** 2 * var + mu * var + mu
        return 0.0 if denominator == 0 else (1 - r_true) * mu ** 2 * var / denominator
    return (1 - r_true) * mu * var


def simulate_background(bg, n_shots, n_sites=2, seed=0, chunk=CHUNK):
    """Pair correlators of independent Poisson sites under shared gain noise."""
    acc = CovarianceAccumulator(n_sites)
    for c, start in enumerate(range(0, n_shots, chunk)):
        size = min(chunk, n_shots - start)
        rng = rng_stream(seed, 'background', c)
        gain = rng.normal(1.0, bg.sigma_n, size) if bg.sigma_n > 0 else np.ones(size)
        acc.update(gain[:, None] * rng.poisson(bg.mu, (size, n_sites)))
    return acc.records()


@dataclass(frozen=True)
class BaselineCalibration:
    baseline: float
    stderr: float
    n_pairs: int
    n_shots: int


def calibrate_baseline(records):
    """Uniform baseline: mean raw correlation over the calibration pairs."""
    r = np.array([record.r for record in records])
    if len(r) < 2:
        raise ValueError('Baseline calibration needs at least two pairs')
    return BaselineCalibration(float(r.mean()), float(r.std(ddof=1) / np.sqrt(len(r))),
                               len(r), int(min(record.n_shots for record in records)))


def subtract_baseline(records, baseline, baseline_stderr=0.0, per_pair=None):
    """Shift every raw r by the baseline (or its per-pair override)."""
    if not np.isfinite(baseline):
        raise ValueError(f'Baseline must be finite, got {baseline}')
    per_pair = per_pair or {}
    corrected = []
    for record in records:
        b = per_pair.get(record.pair, baseline)
        corrected.append(replace(record, baseline=b, r_corr=record.r - b,
                                 stderr=float(np.hypot(record.stderr, baseline_stderr))))
    return corrected


#################
# EXPECTATIONS #
#################


def expected_pair_correlation(chi_i, chi_j, sigma_ri, sigma_rj, phase_product):
    """r_ij = c_i c_j ⟨sin φ_i sin φ_j⟩ / (σ_Ri σ_Rj) with coherence factors c.

    >>> round(expected_pair_correlation(1, 1, 12, 12, 1) * 1e3, 3)
    6.944
    """
    assert 0 < chi_i <= 1 and 0 < chi_j <= 1, f'Coherence factors must lie in (0, 1]: {chi_i}, {chi_j}'
    assert sigma_ri >= 1 and sigma_rj >= 1, f'σ_R must be >= 1: {sigma_ri}, {sigma_rj}'
    return chi_i * chi_j * phase_product / (sigma_ri * sigma_rj)


def sigma_r_from_amplitude(amplitude):
    """Geometric-mean σ_R of a symmetric pair from its correlation amplitude.

    >>> sigma_r_from_amplitude(1 / 225)
    15.0
    """
    if not 0 < amplitude <= 1:
        raise ValueError(f'Correlation amplitude must lie in (0, 1], got {amplitude}')
    return float(1 / np.sqrt(amplitude))


def fit_driven_amplitude(thetas, r, stderr=None):
    """Least-squares A in r(θ) = A·cos²θ with its standard error."""
    basis = np.cos(np.asarray(thetas, dtype=float)) ** 2
    r = np.asarray(r, dtype=float)
    weights = np.ones_like(r) if stderr is None else 1 / np.asarray(stderr, dtype=float) ** 2
    norm = np.sum(weights * basis ** 2)
    amplitude = float(np.sum(weights * basis * r) / norm)
    if stderr is None:
        dof = max(len(r) - 1, 1)
        sigma2 = np.sum((r - amplitude * basis) ** 2) / dof
        return amplitude, float(np.sqrt(sigma2 / norm))
    return amplitude, float(1 / np.sqrt(norm))


###########
# READOUT #
###########


@dataclass(frozen=True)
class SccReadout:
    """Charge readout after SCC: NV⁻ probability per spin state, then Poisson counts."""
    lambda0: float = 1.6
    lambda1: float = 6.7
    p_minus_ms0: float = 0.55
    p_minus_ms1: float = 0.45

    def mixture(self, spin):
        return PoissonMixture(self.lambda0, self.lambda1,
                              self.p_minus_ms0 if spin == 0 else self.p_minus_ms1)

    @property
    def sigma_r(self):
        return readout_noise(self.mixture(0).stats(), self.mixture(1).stats())

    @classmethod
    def from_sigma_r(cls, sigma_r, lambda0=1.6, lambda1=6.7, p_mean=0.5):
        """Symmetric NV⁻ populations p_mean ± D/2 giving the requested σ_R."""
        def excess(d):
            s0 = PoissonMixture(lambda0, lambda1, p_mean + d / 2).stats()
            s1 = PoissonMixture(lambda0, lambda1, p_mean - d / 2).stats()
            return readout_noise(s0, s1) - sigma_r
        d_max = 2 * min(p_mean, 1 - p_mean)
        if excess(d_max) > 0:
            raise ValueError(f'σ_R = {sigma_r} is below what λ0={lambda0}, λ1={lambda1} allow')
        d = brentq(excess, 1e-9, d_max, xtol=1e-14)
        return cls(lambda0, lambda1, p_mean + d / 2, p_mean - d / 2)

    @lru_cache(maxsize=None)
    def cdfs(self):
        k = support(PoissonMixture(self.lambda0, self.lambda1, 0.5))
        return tuple(np.cumsum(mixture_pmf(self.mixture(spin), k)) for spin in (0, 1))

    def sample(self, rng, spins):
        """Counts for an array of spin outcomes (0: m_s=0, 1: m_s=±1)."""
        cdf0, cdf1 = self.cdfs()
        u = rng.random(spins.shape)
        # u past the truncated tail lands on the last support value
        k0 = np.minimum(np.searchsorted(cdf0, u), len(cdf0) - 1)
        k1 = np.minimum(np.searchsorted(cdf1, u), len(cdf1) - 1)
        return np.where(spins == 0, k0, k1)


def readouts_for(sites, **kwargs):
    return [SccReadout.from_sigma_r(site.sigma_r, site.lambda0, site.lambda1, **kwargs)
            for site in sites]


##############
# SIMULATORS #
##############


@dataclass(frozen=True)
class DrivenSequence:
    """Rotation θ on even shots and θ + π on odd shots."""
    theta: float
    opposite: tuple = ()

    def __post_init__(self):
        assert 0 <= self.theta < 2 * np.pi, f'θ must lie in [0, 2π): {self.theta}'

    def angles(self, shot_index):
        return self.theta + np.pi * (np.asarray(shot_index) % 2)


def select_coherent_sites(sites, t2_min=15e-6):
    return [site for site in sites if site.t2_xy8 >= t2_min]


def run_shots(probability, sites, readouts, n_shots, seed, keys, background=None, chunk=CHUNK):
    """Accumulate counts of shots whose m_s=±1 probabilities come from
    `probability(rng, shot_index)` -> (shots, sites)."""
    chunk += chunk % 2
    acc = CovarianceAccumulator(len(sites))
    for c, start in enumerate(range(0, n_shots, chunk)):
        size = min(chunk, n_shots - start)
        rng = rng_stream(seed, *keys, c)
        p = probability(rng, np.arange(start, start + size))
        spins = (rng.random(p.shape) < p).astype(np.int8)
        counts = np.stack([readout.sample(rng, spins[:, j]) for j, readout in enumerate(readouts)],
                          axis=1).astype(float)
        if background is not None and background.sigma_n > 0:
            counts *= rng.normal(1.0, background.sigma_n, size)[:, None]
        acc.update(counts)
    return acc


def check_simulation(sites, n_shots):
    if len(sites) < 2:
        raise ValueError('Correlation experiments need at least two sites')
    if n_shots < MIN_SHOTS:
        raise ValueError(f'Need at least {MIN_SHOTS} shots, got {n_shots}')


def simulate_driven(thetas, sites, n_shots, seed=0, baseline=0.0, baseline_stderr=0.0,
                    background=None, readouts=None, chunk=CHUNK):
    """Correlators r(θ) for all site pairs under interleaved θ / θ+π rotations.

    Sites flagged `opposite` start in m_s=±1. The m_s=±1 probability after a
    rotation α is sin²(α/2) (cos²(α/2) for opposite sites).
    """
    check_simulation(sites, n_shots)
    readouts = readouts or readouts_for(sites)
    flips = np.array([site.opposite for site in sites])
    labels = [site.id for site in sites]
    records = []
    for t, theta in enumerate(thetas):
        sequence = DrivenSequence(float(theta), tuple(flips))
        progress_bar(t, len(thetas), f'θ={theta:.3f}')

        def probability(rng, shots):
            q = np.sin(sequence.angles(shots) / 2) ** 2
            return np.where(flips[None, :], 1 - q[:, None], q[:, None])

        acc = run_shots(probability, sites, readouts, n_shots, seed, ('driven', t), background, chunk)
        records += acc.records(labels, sweep_value=float(theta))
        log('covariance.driven', theta=float(theta), n_shots=n_shots, pairs=len(labels) * (len(labels) - 1) // 2)
    return subtract_baseline(records, baseline, baseline_stderr)


def simulate_spectroscopy(sites, xy8, ac_freqs, b_ac, n_shots, seed=0, baseline=0.0,
                          baseline_stderr=0.0, exponent=2.0, background=None,
                          readouts=None, chunk=CHUNK):
    """Correlators vs AC frequency under an XY8 sequence.

    Each shot sees the AC field with a fresh uniform phase ψ shared by all
    sites; a site with coherence factor c ends in m_s=±1 with probability
    (1 ∓ c·sin φ_C(ψ))/2, the sign flipped for opposite sites.
    """
    check_simulation(sites, n_shots)
    readouts = readouts or readouts_for(sites)
    signs = np.array([1.0 if site.opposite else -1.0 for site in sites])
    coherence = np.array([coherence_factor(CoherenceModel(site.t2_xy8, exponent), xy8.total_time)
                          for site in sites])
    labels = [site.id for site in sites]
    records = []
    for i, freq in enumerate(ac_freqs):
        quadratures = (xy8_phase(xy8, b_ac, freq, 0.0), xy8_phase(xy8, b_ac, freq, np.pi / 2))
        if np.hypot(*quadratures) >= np.pi / 2:
            Colors.red(f'Peak phase {np.hypot(*quadratures):.3f} rad at {freq:g} Hz exceeds π/2')
        progress_bar(i, len(ac_freqs), f'f={freq:.4g}')

        def probability(rng, shots):
            psi = rng.uniform(0, 2 * np.pi, len(shots))
            phi = quadratures[0] * np.cos(psi) + quadratures[1] * np.sin(psi)
            return 0.5 * (1 + signs[None, :] * coherence[None, :] * np.sin(phi)[:, None])

        acc = run_shots(probability, sites, readouts, n_shots, seed, ('spectroscopy', i), background, chunk)
        records += acc.records(labels, sweep_value=float(freq))
        log('covariance.spectroscopy', freq=float(freq), n_shots=n_shots,
            phi_peak=float(np.hypot(*quadratures)))
    return subtract_baseline(records, baseline, baseline_stderr)


def correlation_graph(records, sites=()):
    """Sites as nodes, correlators as edges (one sweep value per graph)."""
    G = nx.Graph()
    for site in sites:
        G.add_node(site.id, x=site.x, y=site.y, sigma_r=site.sigma_r, opposite=site.opposite)
    for record in records:
        i, j = record.pair
        G.add_edge(i, j, r_raw=record.r, r_corr=record.r_corr, stderr=record.stderr,
                   n_shots=record.n_shots, sweep_value=record.sweep_value)
    return G
