"""NV spin observables: ODMR, DC sensitivity, Rabi, T1 and XY8 phase pickup."""
import numpy as np

from dataclasses import dataclass, field
from scipy import stats
from scipy.optimize import curve_fit
from scipy.signal import find_peaks
from sklearn.cluster import AgglomerativeClustering

from nvmux.core import FitError, PhysConstants


__all__ = names = (
    'OdmrFit', 'XY8Config', 'CoherenceModel', 'T1Fit', 'RabiFit', 'odmr_model',
    'fit_odmr', 'dc_sensitivity', 'fit_t1', 'fit_rabi', 'xy8_phase',
    'filter_function', 'coherence_factor', 'assign_orientation_families')

HYPERFINE_SPLITTING = 2.16e6  # Hz, 14N
MIN_POINTS = 5


########
# ODMR #
########


@dataclass(frozen=True)
class OdmrFit:
    centers: tuple
    linewidths: tuple
    contrasts: tuple
    i0: float = 1.0
    stderr: dict = field(default=None, compare=False)

    def __post_init__(self):
        assert len(self.centers) == len(self.linewidths) == len(self.contrasts)
        assert all(w > 0 for w in self.linewidths), f'Linewidths must be positive: {self.linewidths}'
        assert all(0 < c < 1 for c in self.contrasts), f'Contrasts must lie in (0, 1): {self.contrasts}'
        assert self.i0 > 0, f'I0 must be positive: {self.i0}'


def lorentzian(freqs, center, linewidth, contrast):
    half = linewidth / 2
    return contrast * half ** 2 / ((freqs - center) ** 2 + half ** 2)


def odmr_model(params, freqs, hyperfine=False):
    """1 minus Lorentzian dips of FWHM Δν and depth C (split into a 14N
    triplet of depth C/3 each when `hyperfine` is set)."""
    freqs = np.asarray(freqs, dtype=float)
    spectrum = np.ones_like(freqs)
    for center, linewidth, contrast in zip(params.centers, params.linewidths, params.contrasts):
        if hyperfine:
            for shift in (-HYPERFINE_SPLITTING, 0.0, HYPERFINE_SPLITTING):
                spectrum -= lorentzian(freqs, center + shift, linewidth, contrast / 3)
        else:
            spectrum -= lorentzian(freqs, center, linewidth, contrast)
    return spectrum


def fit_odmr(freqs, signal, n_dips=None, i0=1.0, hyperfine=False):
    """Least-squares Lorentzian dips; initial centers from prominent minima."""
    freqs = np.asarray(freqs, dtype=float)
    signal = np.asarray(signal, dtype=float)
    if len(freqs) < MIN_POINTS:
        raise ValueError(f'Need at least {MIN_POINTS} points, got {len(freqs)}')
    depth = 1 - signal
    peaks, props = find_peaks(depth, prominence=max(np.ptp(depth) / 4, 1e-12))
    if len(peaks) == 0:
        raise FitError('No resonance found in the spectrum')
    order = np.argsort(props['prominences'])[::-1]
    peaks = np.sort(peaks[order[:n_dips or len(peaks)]])
    step = np.median(np.diff(freqs))
    p0 = []
    for i in peaks:
        half = depth[i] / 2
        width = max(np.count_nonzero(depth > half) * step / len(peaks), 2 * step)
        p0 += [freqs[i], width, min(max(depth[i], 1e-3), 0.9)]

    def model(f, *p):
        params = OdmrFit(tuple(p[0::3]), tuple(np.abs(p[1::3])), tuple(np.clip(p[2::3], 1e-9, 1 - 1e-9)))
        return odmr_model(params, f, hyperfine)

    try:
        p, cov = curve_fit(model, freqs, signal, p0=p0, maxfev=20000)
    except RuntimeError as e:
        raise FitError(f'ODMR fit did not converge: {e}') from None
    err = np.sqrt(np.clip(np.diag(cov), 0, None))
    try:
        fit = OdmrFit(tuple(map(float, p[0::3])), tuple(map(float, np.abs(p[1::3]))),
                      tuple(map(float, p[2::3])), float(i0))
    except AssertionError as e:
        raise FitError(f'ODMR fit left the physical range: {e}') from None
    stderr = {'centers': tuple(err[0::3]), 'linewidths': tuple(err[1::3]), 'contrasts': tuple(err[2::3])}
    return OdmrFit(fit.centers, fit.linewidths, fit.contrasts, fit.i0, stderr)


def dc_sensitivity(fit, constants=PhysConstants(), dip=0):
    """η = h/(g μB) · Δν / (C √I0) in T/√Hz.

    >>> eta = dc_sensitivity(OdmrFit((2.87e9,), (1e6,), (0.1,), 1e4))
    >>> round(eta * 1e6, 3)
    3.572
    """
    return constants.h_over_g_mu_b * fit.linewidths[dip] / (fit.contrasts[dip] * np.sqrt(fit.i0))


def assign_orientation_families(center_freqs, gap=15e6):
    """Group resonance frequencies into at most four families.

    Single-linkage clusters split wherever neighbors differ by more than
    `gap`; labels ascend with frequency.
    """
    freqs = np.asarray(center_freqs, dtype=float).reshape(-1, 1)
    if len(freqs) == 0:
        return np.array([], dtype=int)
    if len(freqs) == 1:
        return np.zeros(1, dtype=int)
    clustering = AgglomerativeClustering(
        n_clusters=None,
        distance_threshold=gap,
        linkage='single',
    ).fit(freqs)
    labels = clustering.labels_
    if labels.max() >= 4:
        raise ValueError(f'Found {labels.max() + 1} frequency groups; at most 4 orientation families exist')
    means = [freqs[labels == label].mean() for label in range(labels.max() + 1)]
    rank = np.argsort(np.argsort(means))
    return rank[labels]


##########
# DECAYS #
##########


@dataclass(frozen=True)
class T1Fit:
    t1: float
    ci: tuple
    amplitude: float
    offset: float
    stderr: float
    residual_rms: float


@dataclass(frozen=True)
class RabiFit:
    rabi_freq: float
    pi_time: float
    decay: float
    amplitude: float
    offset: float
    stderr: float
    residual_rms: float


def check_points(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or len(x) < MIN_POINTS:
        raise ValueError(f'Need at least {MIN_POINTS} matching points')
    if np.ptp(y) == 0:
        raise FitError('Constant signal: nothing to fit')
    return x, y


def exponential(t, amplitude, t1, offset):
    return offset + amplitude * np.exp(-t / t1)


def fit_t1(delays, signals, confidence=0.95):
    """Exponential relaxation offset + A·exp(−t/T1) with a t-based CI on T1."""
    delays, signals = check_points(delays, signals)
    order = np.argsort(delays)
    delays, signals = delays[order], signals[order]
    offset = signals[-1]
    amplitude = signals[0] - offset
    fraction = (signals - offset) / amplitude
    below = np.nonzero(fraction < np.exp(-1))[0]
    t1 = delays[below[0]] if len(below) and delays[below[0]] > 0 else np.median(delays)
    try:
        p, cov = curve_fit(exponential, delays, signals, p0=(amplitude, t1, offset),
                           bounds=([-np.inf, 1e-12, -np.inf], np.inf),
                           xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=10000)
    except (RuntimeError, ValueError) as e:
        raise FitError(f'T1 fit did not converge: {e}') from None
    amplitude, t1, offset = p
    err = float(np.sqrt(max(cov[1, 1], 0.0))) if np.isfinite(cov[1, 1]) else float('nan')
    if not np.isfinite(err) or abs(amplitude) <= 1e-12:
        raise FitError('Degenerate T1 fit')
    dof = max(len(delays) - 3, 1)
    half = stats.t.ppf(0.5 + confidence / 2, dof) * err
    residuals = signals - exponential(delays, *p)
    return T1Fit(float(t1), (float(t1 - half), float(t1 + half)), float(amplitude),
                 float(offset), err, float(np.sqrt(np.mean(residuals ** 2))))


def damped_cosine(t, amplitude, freq, decay, offset):
    return offset + amplitude * np.exp(-t / decay) * np.cos(2 * np.pi * freq * t)


def fit_rabi(times, signals):
    """Decaying cosine; the initial frequency is the zero-padded FFT peak."""
    times, signals = check_points(times, signals)
    order = np.argsort(times)
    times, signals = times[order], signals[order]
    step = np.median(np.diff(times))
    centered = signals - signals.mean()
    n_fft = 16 * len(times)
    spectrum = np.abs(np.fft.rfft(centered, n_fft))
    freqs = np.fft.rfftfreq(n_fft, step)
    freq = freqs[1 + np.argmax(spectrum[1:])]
    p0 = (signals[0] - signals.mean(), freq, 10 * np.ptp(times), signals.mean())
    try:
        p, cov = curve_fit(damped_cosine, times, signals, p0=p0,
                           bounds=([-np.inf, 0, 1e-15, -np.inf], np.inf),
                           xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=20000)
    except (RuntimeError, ValueError) as e:
        raise FitError(f'Rabi fit did not converge: {e}') from None
    amplitude, freq, decay, offset = p
    if freq <= 0 or abs(amplitude) <= 1e-12:
        raise FitError('Degenerate Rabi fit')
    err = float(np.sqrt(max(cov[1, 1], 0.0))) if np.isfinite(cov[1, 1]) else float('nan')
    residuals = signals - damped_cosine(times, *p)
    return RabiFit(float(freq), float(1 / (2 * freq)), float(decay), float(amplitude),
                   float(offset), err, float(np.sqrt(np.mean(residuals ** 2))))


#######
# XY8 #
#######


@dataclass(frozen=True)
class XY8Config:
    tau: float = 250e-9
    n_pulses: int = 16

    def __post_init__(self):
        assert self.tau > 0, f'tau must be positive: {self.tau}'
        assert self.n_pulses >= 8 and self.n_pulses % 8 == 0, \
            f'XY8 needs a positive multiple of 8 pulses: {self.n_pulses}'

    @property
    def total_time(self):
        return self.n_pulses * self.tau

    @property
    def resonance(self):
        return 1 / (2 * self.tau)

    def boundaries(self):
        """0, the π pulses at (k − ½)τ, and the end of the sequence."""
        pulses = (np.arange(1, self.n_pulses + 1) - 0.5) * self.tau
        return np.concatenate([[0.0], pulses, [self.total_time]])


def toggling_integral(cfg, freq, phase=0.0):
    """∫ s(t) cos(2πft + φ) dt over the sequence, exact per segment."""
    freq = np.asarray(freq, dtype=float)
    edges = cfg.boundaries()
    signs = (-1.0) ** np.arange(len(edges) - 1)
    omega = 2 * np.pi * freq[..., None]
    with np.errstate(divide='ignore', invalid='ignore'):
        antiderivative = np.where(omega == 0, edges * np.cos(phase),
                                  np.sin(omega * edges + phase) / np.where(omega == 0, 1, omega))
    return (signs * np.diff(antiderivative, axis=-1)).sum(axis=-1)


def xy8_phase(cfg, b_ac, freq, phase=0.0, constants=PhysConstants()):
    """Phase γ·B·∫ s(t) cos(2πft + φ) dt picked up under the pulse train."""
    value = constants.gamma * b_ac * toggling_integral(cfg, freq, phase)
    return float(value) if np.ndim(value) == 0 else value


def filter_function(cfg, freqs):
    """Phase-maximized response |∫ s(t) e^{2πift} dt| in s, per frequency."""
    return np.hypot(toggling_integral(cfg, freqs, 0.0), toggling_integral(cfg, freqs, np.pi / 2))


@dataclass(frozen=True)
class CoherenceModel:
    t2: float = 15e-6
    exponent: float = 2.0
    phi_c: float = 0.0

    def __post_init__(self):
        assert self.t2 > 0, f'T2 must be positive: {self.t2}'
        assert 0 < self.exponent <= 4, f'Stretch exponent must lie in (0, 4]: {self.exponent}'


def coherence_factor(model, t):
    """e^{−(t/T2)^p}.

    >>> round(coherence_factor(CoherenceModel(15e-6, 2.0), 4e-6), 4)
    0.9314
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError('Evolution time must be non-negative')
    value = np.exp(-(t / model.t2) ** model.exponent)
    return float(value) if value.ndim == 0 else value
