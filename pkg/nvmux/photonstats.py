"""Poisson-mixture photon statistics for charge and spin readout."""
import warnings
import numpy as np

from dataclasses import dataclass
from scipy import stats
from scipy.special import gammaln, xlogy

from nvmux.core import UndefinedContrastError
from nvmux.utils import Colors, rng_stream


__all__ = names = (
    'PoissonMixture', 'CountStats', 'MixtureFit', 'mixture_pmf', 'support',
    'histogram', 'fit_double_poisson', 'charge_fidelity', 'readout_noise',
    'sigma_r_from_samples')

TAIL = 1e-12
MIN_TOTAL = 100
N_BOOTSTRAP = 200


@dataclass(frozen=True)
class PoissonMixture:
    lambda0: float
    lambda1: float
    w_minus: float

    def __post_init__(self):
        assert self.lambda0 >= 0 and self.lambda1 >= 0, \
            f'Poisson means must be non-negative: {self.lambda0}, {self.lambda1}'
        assert 0 <= self.w_minus <= 1, f'w_minus must lie in [0, 1]: {self.w_minus}'

    @property
    def mean(self):
        return (1 - self.w_minus) * self.lambda0 + self.w_minus * self.lambda1

    @property
    def variance(self):
        delta = self.lambda1 - self.lambda0
        return self.mean + self.w_minus * (1 - self.w_minus) * delta ** 2

    def stats(self):
        return CountStats(self.mean, self.variance, None)


@dataclass(frozen=True)
class CountStats:
    mean: float
    variance: float
    n_samples: int = None

    def __post_init__(self):
        assert self.variance >= 0, f'Variance must be non-negative: {self.variance}'

    @classmethod
    def from_samples(cls, samples):
        samples = np.asarray(samples, dtype=float)
        if samples.size < 2:
            raise ValueError(f'Need at least 2 samples for a variance, got {samples.size}')
        return cls(float(samples.mean()), float(samples.var(ddof=1)), int(samples.size))

    @classmethod
    def from_pmf(cls, pmf):
        k = np.arange(len(pmf))
        mean = float(np.dot(k, pmf))
        return cls(mean, max(float(np.dot((k - mean) ** 2, pmf)), 0.0), None)


@dataclass(frozen=True)
class MixtureFit:
    mixture: PoissonMixture
    stderr: tuple
    loglik: float
    n_iter: int
    converged: bool
    degenerate: bool

    @property
    def fit_error(self):
        return self.stderr


def poisson_logpmf(k, lam):
    return xlogy(k, lam) - lam - gammaln(k + 1)


def mixture_pmf(m, k):
    """P(k) under the two-component mixture; vectorized over k.

    >>> float(mixture_pmf(PoissonMixture(0, 0, 0.5), 0))
    1.0
    """
    k = np.asarray(k, dtype=float)
    if np.any(k < 0):
        raise ValueError('Counts must be non-negative')
    p0 = np.exp(poisson_logpmf(k, m.lambda0))
    p1 = np.exp(poisson_logpmf(k, m.lambda1))
    return (1 - m.w_minus) * p0 + m.w_minus * p1


def support(m, tail=TAIL):
    """Counts 0..k_max where the mixture's remaining tail drops below `tail`."""
    lam = max(m.lambda0, m.lambda1)
    k_max = int(stats.poisson.isf(tail, lam)) + 1 if lam > 0 else 0
    while stats.poisson.sf(k_max, lam) >= tail:
        k_max += 1
    return np.arange(k_max + 1)


def histogram(counts):
    """Frequencies of each count 0..max(counts)."""
    counts = np.asarray(counts)
    if counts.size and counts.min() < 0:
        raise ValueError('Counts must be non-negative')
    return np.bincount(counts.astype(np.int64))


def loglik(m, k, freq):
    return float(np.dot(freq, np.log(np.maximum(mixture_pmf(m, k), 1e-300))))


def moment_init(k, freq):
    n = freq.sum()
    mean = np.dot(k, freq) / n
    var = np.dot((k - mean) ** 2, freq) / n
    delta = 2 * np.sqrt(max(var - mean, 1e-3))
    lambda0 = max(mean - delta / 2, 0.0)
    return PoissonMixture(lambda0, lambda0 + delta, 0.5)


def fit_double_poisson(hist, max_iter=10000, tol=1e-8):
    """Maximum-likelihood two-component Poisson mixture by EM.

    `hist` maps count -> frequency (sequence indexed by count, or dict).
    Components are ordered so lambda0 <= lambda1.
    """
    if isinstance(hist, dict):
        k = np.array(sorted(hist), dtype=float)
        freq = np.array([hist[c] for c in sorted(hist)], dtype=float)
    else:
        freq = np.asarray(hist, dtype=float)
        k = np.arange(len(freq), dtype=float)
    if np.any(k < 0) or np.any(freq < 0):
        raise ValueError('Histogram counts and frequencies must be non-negative')
    n = freq.sum()
    if n < MIN_TOTAL:
        raise ValueError(f'Histogram needs total frequency >= {MIN_TOTAL}, got {n:g}')

    if np.dot(k, freq) == 0:
        m = PoissonMixture(0.0, 0.0, 0.0)
        return MixtureFit(m, (0.0, 0.0, 0.0), 0.0, 0, True, True)

    m = moment_init(k, freq)
    ll = loglik(m, k, freq)
    converged = False
    for it in range(1, max_iter + 1):
        p0 = (1 - m.w_minus) * np.exp(poisson_logpmf(k, m.lambda0))
        p1 = m.w_minus * np.exp(poisson_logpmf(k, m.lambda1))
        gamma = p1 / np.maximum(p0 + p1, 1e-300)
        n1 = np.dot(freq, gamma)
        n0 = n - n1
        lambda1 = np.dot(freq * gamma, k) / n1 if n1 > 0 else m.lambda1
        lambda0 = np.dot(freq * (1 - gamma), k) / n0 if n0 > 0 else m.lambda0
        m = PoissonMixture(float(lambda0), float(lambda1), float(min(max(n1 / n, 0.0), 1.0)))
        ll_new = loglik(m, k, freq)
        if abs(ll_new - ll) <= tol * abs(ll):
            ll = ll_new
            converged = True
            break
        ll = ll_new

    if m.lambda0 > m.lambda1:
        m = PoissonMixture(m.lambda1, m.lambda0, 1 - m.w_minus)
    if not converged:
        message = f'EM did not converge in {max_iter} iterations; reporting best-so-far {m}'
        Colors.red(message)
        warnings.warn(message, UserWarning)

    mean = np.dot(k, freq) / n
    ll_single = float(np.dot(freq, poisson_logpmf(k, mean)))
    statistic = 2 * (ll - ll_single)
    degenerate = bool(abs(m.lambda1 - m.lambda0) < 1e-3 * max(1.0, mean)
                      or statistic < stats.chi2.isf(1e-3, 2))
    stderr = (float('nan'),) * 3 if degenerate else standard_errors(m, k, freq)
    return MixtureFit(m, stderr, ll, it, converged, degenerate)


def standard_errors(m, k, freq):
    """Standard errors of (lambda0, lambda1, w_minus) from score outer products."""
    f0 = np.exp(poisson_logpmf(k, m.lambda0))
    f1 = np.exp(poisson_logpmf(k, m.lambda1))
    p = np.maximum((1 - m.w_minus) * f0 + m.w_minus * f1, 1e-300)
    scores = np.stack([
        (1 - m.w_minus) * f0 * (k / max(m.lambda0, 1e-12) - 1) / p,
        m.w_minus * f1 * (k / max(m.lambda1, 1e-12) - 1) / p,
        (f1 - f0) / p,
    ], axis=1)
    info = (scores * freq[:, None]).T @ scores
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        return (float('nan'),) * 3
    return tuple(float(np.sqrt(max(v, 0.0))) for v in np.diag(cov))


def charge_fidelity(m, convention='balanced'):
    """Best threshold classification accuracy of NV⁰ (k <= k*) vs NV⁻ (k > k*).

    'balanced' averages the two per-state accuracies; 'weighted' weights them
    by the mixture populations. Returns (fidelity, k*), first k* on ties.

    >>> fidelity, threshold = charge_fidelity(PoissonMixture(1.6, 6.7, 0.7))
    >>> round(fidelity, 4), threshold
    (0.9112, 3)
    """
    if not m.lambda0 < m.lambda1:
        raise ValueError(f'Charge fidelity needs lambda0 < lambda1, got {m.lambda0}, {m.lambda1}')
    k = support(m)
    correct0 = stats.poisson.cdf(k, m.lambda0)
    correct1 = stats.poisson.sf(k, m.lambda1)
    if convention == 'balanced':
        score = 0.5 * (correct0 + correct1)
    elif convention == 'weighted':
        score = (1 - m.w_minus) * correct0 + m.w_minus * correct1
    else:
        raise ValueError(f'Unknown fidelity convention {convention!r}')
    best = int(np.argmax(score))
    return float(score[best]), int(k[best])


def readout_noise(s0, s1):
    """σ_R = sqrt(1 + 2(σ0² + σ1²)/(α0 − α1)²).

    >>> round(readout_noise(CountStats(1.6, 1.6), CountStats(6.7, 6.7)), 3)
    1.28
    """
    contrast = s0.mean - s1.mean
    if contrast == 0:
        raise UndefinedContrastError(f'Equal means {s0.mean} leave σ_R undefined')
    return float(np.sqrt(1 + 2 * (s0.variance + s1.variance) / contrast ** 2))


def sigma_r_from_samples(samples0, samples1, n_bootstrap=N_BOOTSTRAP, seed=0):
    """Plug-in σ_R from two count sequences, with a bootstrap standard error."""
    samples0 = np.asarray(samples0, dtype=float)
    samples1 = np.asarray(samples1, dtype=float)
    sigma_r = readout_noise(CountStats.from_samples(samples0), CountStats.from_samples(samples1))

    rng = rng_stream(seed, 'bootstrap')
    estimates = []
    for _ in range(n_bootstrap):
        a = samples0[rng.integers(0, samples0.size, samples0.size)]
        b = samples1[rng.integers(0, samples1.size, samples1.size)]
        try:
            estimates.append(readout_noise(CountStats.from_samples(a), CountStats.from_samples(b)))
        except UndefinedContrastError:
            continue
    stderr = float(np.std(estimates, ddof=1)) if len(estimates) > 1 else float('nan')
    return sigma_r, stderr
