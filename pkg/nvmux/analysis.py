"""Per-experiment frame layouts and the analyzers that invert them.

Each class knows how its experiment lays photons out over frames (used by
`simulate-frames`) and how to turn the rendered frames back into per-site
parameters (used by `analyze`). Classes receive their settings through
`accepts_<key>` attributes and `utils.generate_kwargs`.
"""
import dataclasses
import numpy as np

from dataclasses import dataclass
from scipy.special import erf

from nvmux.core import CameraModel, FitError, FrameFormatError, NVMuxError, PSFModel
from nvmux.core import SequenceSection
from nvmux.covariance import (
    CovarianceAccumulator, SccReadout, correlation_graph, fit_driven_amplitude,
    sigma_r_from_amplitude, subtract_baseline)
from nvmux.frames import extract_counts, extract_sums, detect_blobs, fit_gaussian2d, roi_bounds
from nvmux.photonstats import PoissonMixture, charge_fidelity, fit_double_poisson, histogram
from nvmux.photonstats import sigma_r_from_samples
from nvmux.spinphysics import (
    OdmrFit, assign_orientation_families, dc_sensitivity, fit_odmr, fit_rabi, fit_t1, odmr_model)
from nvmux.utils import Colors, log, rng_stream


__all__ = names = (
    'Noop', 'Localize', 'ChargeState', 'SpinReadout', 'Odmr', 'Rabi', 'T1', 'Covariance')
keys = ('sites', 'sequence', 'camera', 'psf', 'repetitions', 'seed', 'baseline', 'baseline_stderr')

FIT_COLUMNS = ('site_id', 'param', 'value', 'stderr', 'status')
EXTRACTION_COLUMNS = ('frame_index', 'site_id', 'S', 'c_ref', 'c_norm')


def add_arguments(parser):
    parser.add_argument('--mode', choices=tuple(MODES),
                        help='Analysis to run on the frames (default: from the experiment)')


def collection_efficiency(site, psf, camera):
    """Fraction of a site's photons that land in its region and clear the
    photon-counting threshold (single-electron events, read noise ignored)."""
    n = camera.roi_n
    row0, col0 = roi_bounds(site, n, (10 ** 9, 10 ** 9))
    scale = np.sqrt(2) * psf.sigma_psf

    def inside(start, center):
        return 0.5 * (erf((start + n - 0.5 - center) / scale) - erf((start - 0.5 - center) / scale))

    threshold = np.exp(-(camera.t_pc + 0.5 - camera.bias) / camera.em_gain)
    return float(inside(col0, site.x) * inside(row0, site.y) * threshold)


@dataclass
class AnalysisResult:
    extraction: object
    rows: list
    correlators: list = None
    graph: object = None


class Noop:
    """Bright sites in every frame; nothing to fit."""

    mode = 'frames'
    accepts_sites = True
    accepts_sequence = True
    accepts_camera = True
    accepts_psf = True
    accepts_repetitions = True
    accepts_seed = True

    def __init__(self, sites=(), sequence=SequenceSection(), camera=CameraModel(),
                 psf=PSFModel(), repetitions=1, seed=0):
        self.sites = tuple(sites)
        self.sequence = sequence
        self.camera = camera
        self.psf = psf
        self.repetitions = int(repetitions)
        self.seed = seed

    @property
    def n_frames(self):
        return self.repetitions

    def layout(self):
        """Photon means of shape (n_frames, n_sites) and the per-site truth."""
        means = np.tile([site.lambda1 for site in self.sites], (self.n_frames, 1))
        return means, self.truth()

    def truth(self, **extra):
        sites = []
        for j, site in enumerate(self.sites):
            entry = dataclasses.asdict(site)
            entry.update({key: value[j] for key, value in extra.items()})
            sites.append(entry)
        return {'mode': self.mode, 'n_frames': self.n_frames, 'sites': sites}

    def check_stack(self, stack):
        if stack.n_frames != self.n_frames:
            raise FrameFormatError(
                f'{self.mode} layout expects {self.n_frames} frames, the file holds {stack.n_frames}')

    def extract(self, stack):
        return extract_counts(stack, self.sites, self.camera)

    def fit(self, site, j, extraction):
        return []

    def finish(self, rows):
        return []

    def analyze(self, stack):
        """Fit every site; a failing site yields one error row and the rest go on."""
        self.check_stack(stack)
        extraction = self.extract(stack)
        rows = []
        for j, site in enumerate(self.sites):
            try:
                for param, value, stderr in self.fit(site, j, extraction):
                    rows.append((site.id, param, float(value), float(stderr), 'ok'))
            except (NVMuxError, ValueError, RuntimeError) as e:
                status = f'{type(e).__name__}: {e}'
                Colors.red(f'Site {site.id}: {status}')
                log('analyze.site_failed', mode=self.mode, site=site.id, error=type(e).__name__)
                rows.append((site.id, 'error', float('nan'), float('nan'), status))
        rows += self.finish(rows)
        return AnalysisResult(extraction, rows)


class Localize(Noop):
    """Blob detection and Gaussian localization on the bias-subtracted mean frame."""

    mode = 'localize'

    def extract(self, stack):
        self.image = stack.pixels.mean(axis=0) - self.camera.bias
        self.blobs = detect_blobs(self.image, self.psf.sigma_psf)
        return extract_counts(stack, self.sites, self.camera)

    def fit(self, site, j, extraction):
        n = max(self.camera.roi_n, 2 * int(np.ceil(2 * self.psf.sigma_psf)) + 1)
        row0, col0 = roi_bounds(site, n, self.image.shape)
        loc = fit_gaussian2d(self.image, (col0, row0, col0 + n, row0 + n), self.psf.sigma_psf)
        detected = any(not b.ambiguous and np.hypot(b.x - site.x, b.y - site.y) < 1 for b in self.blobs)
        return [
            ('x', loc.x, np.sqrt(loc.covariance[0, 0])),
            ('y', loc.y, np.sqrt(loc.covariance[1, 1])),
            ('sigma_psf', loc.sigma, float('nan')),
            ('detected', float(detected), 0.0),
        ]


class ChargeState(Noop):
    """Each frame reads the charge state: λ1 counts for NV⁻, λ0 for NV⁰."""

    mode = 'charge'

    def layout(self):
        means = np.zeros((self.n_frames, len(self.sites)))
        w_realized, lambda0, lambda1, fidelity = [], [], [], []
        for j, site in enumerate(self.sites):
            minus = rng_stream(self.seed, 'charge', site.id).random(self.n_frames) < site.nv_minus_init
            means[:, j] = np.where(minus, site.lambda1, site.lambda0)
            eta = collection_efficiency(site, self.psf, self.camera)
            w_realized.append(float(minus.mean()))
            lambda0.append(site.lambda0 * eta)
            lambda1.append(site.lambda1 * eta)
            fidelity.append(charge_fidelity(PoissonMixture(lambda0[-1], lambda1[-1], site.nv_minus_init))[0])
        return means, self.truth(w_realized=w_realized, lambda0_detected=lambda0,
                                 lambda1_detected=lambda1, fidelity_detected=fidelity)

    def fit(self, site, j, extraction):
        result = fit_double_poisson(histogram(extraction.counts[:, j]))
        if result.degenerate:
            raise FitError('Counts are consistent with a single Poisson population')
        m = result.mixture
        fidelity, threshold = charge_fidelity(m)
        return [
            ('lambda0', m.lambda0, result.stderr[0]),
            ('lambda1', m.lambda1, result.stderr[1]),
            ('w_minus', m.w_minus, result.stderr[2]),
            ('fidelity', fidelity, float('nan')),
            ('threshold', threshold, 0.0),
        ]


class SpinReadout(Noop):
    """SCC readout: even frames prepare m_s=0, odd frames m_s=±1 (after a π pulse)."""

    mode = 'scc'

    @property
    def n_frames(self):
        return 2 * self.repetitions

    def readouts(self):
        return [SccReadout.from_sigma_r(site.sigma_r, site.lambda0, site.lambda1) for site in self.sites]

    def layout(self):
        means = np.zeros((self.n_frames, len(self.sites)))
        spins = np.arange(self.n_frames) % 2
        detected = []
        for j, (site, readout) in enumerate(zip(self.sites, self.readouts())):
            p_minus = np.where(spins == 0, readout.p_minus_ms0, readout.p_minus_ms1)
            minus = rng_stream(self.seed, 'scc', site.id).random(self.n_frames) < p_minus
            means[:, j] = np.where(minus, site.lambda1, site.lambda0)
            eta = collection_efficiency(site, self.psf, self.camera)
            detected.append(dataclasses.replace(
                readout, lambda0=site.lambda0 * eta, lambda1=site.lambda1 * eta).sigma_r)
        return means, self.truth(sigma_r_detected=detected)

    def fit(self, site, j, extraction):
        s0, s1 = extraction.counts[0::2, j], extraction.counts[1::2, j]
        sigma_r, stderr = sigma_r_from_samples(s0, s1, seed=self.seed)
        return [
            ('alpha0', s0.mean(), s0.std(ddof=1) / np.sqrt(len(s0))),
            ('alpha1', s1.mean(), s1.std(ddof=1) / np.sqrt(len(s1))),
            ('sigma_r', sigma_r, stderr),
        ]


class WideField(Noop):
    """Fluorescence sweeps: for every sweep value, `repetitions` pairs of
    (signal, reference) frames. Region sums less the bias give c_sig and c_ref."""

    mode = None

    @property
    def values(self):
        raise NotImplementedError()

    @property
    def n_frames(self):
        return 2 * len(self.values) * self.repetitions

    def curve(self, site, values):
        raise NotImplementedError()

    def layout(self):
        if len(self.values) == 0:
            raise ValueError(f'{self.mode} needs a non-empty sweep in the sequence section')
        means = np.zeros((self.n_frames, len(self.sites)))
        for j, site in enumerate(self.sites):
            photons = site.i0 * self.camera.exposure
            signal = np.repeat(self.curve(site, np.asarray(self.values, dtype=float)), self.repetitions)
            means[0::2, j] = photons * signal
            means[1::2, j] = photons
        return means, self.truth()

    def extract(self, stack):
        n = self.camera.roi_n
        index = np.arange(self.n_frames)
        return extract_sums(stack, self.sites, n, index[0::2], index[1::2],
                            offset=self.camera.bias * n * n)

    def signal(self, extraction, j):
        """Pooled c_sig / c_ref per sweep value."""
        shape = (len(self.values), self.repetitions)
        c_sig = extraction.c_sig[:, j].reshape(shape).sum(axis=1)
        c_ref = extraction.c_ref[:, j].reshape(shape).sum(axis=1)
        if np.any(c_ref <= 0):
            raise ValueError('Reference counts must be positive')
        return np.asarray(self.values, dtype=float), c_sig / c_ref


class Odmr(WideField):

    mode = 'odmr'

    @property
    def values(self):
        return self.sequence.freqs

    def curve(self, site, freqs):
        center = self.sequence.family_centers[site.orientation_family]
        params = OdmrFit((center,), (site.odmr_linewidth,), (site.odmr_contrast,))
        return odmr_model(params, freqs, self.sequence.hyperfine)

    def truth(self, **extra):
        centers = [self.sequence.family_centers[site.orientation_family] for site in self.sites]
        return super().truth(center=centers, **extra)

    def fit(self, site, j, extraction):
        freqs, signal = self.signal(extraction, j)
        fit = fit_odmr(freqs, signal, n_dips=1, i0=site.i0, hyperfine=self.sequence.hyperfine)
        return [
            ('center', fit.centers[0], fit.stderr['centers'][0]),
            ('linewidth', fit.linewidths[0], fit.stderr['linewidths'][0]),
            ('contrast', fit.contrasts[0], fit.stderr['contrasts'][0]),
            ('eta', dc_sensitivity(fit), float('nan')),
        ]

    def finish(self, rows):
        centers = {site_id: value for site_id, param, value, _, status in rows
                   if param == 'center' and status == 'ok'}
        if not centers:
            return []
        try:
            families = assign_orientation_families(list(centers.values()))
        except ValueError as e:
            Colors.red(f'Orientation families: {e}')
            return []
        return [(site_id, 'family', float(family), 0.0, 'ok')
                for site_id, family in zip(centers, families)]


class Rabi(WideField):

    mode = 'rabi'

    @property
    def values(self):
        return self.sequence.pulse_times

    def curve(self, site, times):
        return 1 - self.sequence.rabi_contrast * np.sin(np.pi * site.rabi_freq * times) ** 2

    def fit(self, site, j, extraction):
        times, signal = self.signal(extraction, j)
        fit = fit_rabi(times, signal)
        return [
            ('rabi_freq', fit.rabi_freq, fit.stderr),
            ('pi_time', fit.pi_time, fit.stderr / (2 * fit.rabi_freq ** 2)),
            ('decay', fit.decay, float('nan')),
        ]


class T1(WideField):

    mode = 't1'

    @property
    def values(self):
        return self.sequence.delays

    def curve(self, site, delays):
        return 1 - self.sequence.t1_contrast * (1 - np.exp(-delays / site.t1))

    def fit(self, site, j, extraction):
        delays, signal = self.signal(extraction, j)
        fit = fit_t1(delays, signal)
        return [
            ('t1', fit.t1, fit.stderr),
            ('t1_ci_low', fit.ci[0], float('nan')),
            ('t1_ci_high', fit.ci[1], float('nan')),
        ]


class Covariance(Noop):
    """Driven-spin correlation: for each θ, `repetitions` shots alternating
    θ and θ + π rotations. Thresholded counts are correlated per pair."""

    mode = 'covariance'
    accepts_baseline = True
    accepts_baseline_stderr = True

    def __init__(self, baseline=0.0, baseline_stderr=0.0, **kwargs):
        super().__init__(**kwargs)
        self.baseline = baseline
        self.baseline_stderr = baseline_stderr
        if self.repetitions % 2:
            raise ValueError(f'Covariance frames pair θ with θ + π; repetitions must be even, got {self.repetitions}')

    @property
    def thetas(self):
        return self.sequence.thetas

    @property
    def n_frames(self):
        return len(self.thetas) * self.repetitions

    def layout(self):
        if len(self.thetas) == 0:
            raise ValueError('covariance needs thetas in the sequence section')
        angles = np.repeat(np.asarray(self.thetas, dtype=float), self.repetitions)
        angles = angles + np.pi * (np.arange(self.n_frames) % 2)
        means = np.zeros((self.n_frames, len(self.sites)))
        readouts = [SccReadout.from_sigma_r(site.sigma_r, site.lambda0, site.lambda1) for site in self.sites]
        for j, (site, readout) in enumerate(zip(self.sites, readouts)):
            q = np.sin(angles / 2) ** 2
            q = 1 - q if site.opposite else q
            rng = rng_stream(self.seed, 'driven', site.id)
            spin = rng.random(self.n_frames) < q
            p_minus = np.where(spin, readout.p_minus_ms1, readout.p_minus_ms0)
            means[:, j] = np.where(rng.random(self.n_frames) < p_minus, site.lambda1, site.lambda0)
        return means, self.truth()

    def correlators(self, extraction):
        labels = [site.id for site in self.sites]
        records = []
        for t, theta in enumerate(self.thetas):
            block = extraction.counts[t * self.repetitions:(t + 1) * self.repetitions]
            acc = CovarianceAccumulator(len(self.sites)).update(block)
            records += acc.records(labels, sweep_value=float(theta))
        return subtract_baseline(records, self.baseline, self.baseline_stderr)

    def analyze(self, stack):
        self.check_stack(stack)
        extraction = self.extract(stack)
        records = self.correlators(extraction)
        rows = []
        for pair in sorted({record.pair for record in records}):
            pair_records = [record for record in records if record.pair == pair]
            amplitude, stderr = fit_driven_amplitude(
                [record.sweep_value for record in pair_records],
                [record.r_corr for record in pair_records])
            label = f'{pair[0]}-{pair[1]}'
            rows.append((label, 'amplitude', amplitude, stderr, 'ok'))
            try:
                rows.append((label, 'sigma_r', sigma_r_from_amplitude(abs(amplitude)), float('nan'), 'ok'))
            except ValueError as e:
                rows.append((label, 'sigma_r', float('nan'), float('nan'), f'ValueError: {e}'))
        theta0 = [record for record in records if record.sweep_value == self.thetas[0]]
        return AnalysisResult(extraction, rows, records, correlation_graph(theta0, self.sites))


MODES = {cls.mode: cls for cls in (Localize, ChargeState, SpinReadout, Odmr, Rabi, T1, Covariance)}
LAYOUTS = {
    'frames': Noop, 'charge': ChargeState, 'scc': SpinReadout, 'odmr': Odmr,
    'rabi': Rabi, 't1': T1, 'driven': Covariance,
}
DEFAULT_MODES = {
    'frames': 'localize', 'charge': 'charge', 'scc': 'scc', 'odmr': 'odmr',
    'rabi': 'rabi', 't1': 't1', 'driven': 'covariance',
}
