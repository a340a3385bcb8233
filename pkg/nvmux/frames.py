"""Synthetic EMCCD frames and the per-site extraction pipeline.

Pixel i spans [i - 0.5, i + 0.5) in both axes, so a site at (x, y) sits
inside pixel (round(y), round(x)). Random draws come from streams keyed by
(seed, frame, site) for photons and (seed, frame, 'gain' | 'read') for the
camera, so frames do not depend on site order or on which worker renders them.
"""
import numpy as np
import networkx as nx

from dataclasses import dataclass
from scipy import ndimage
from scipy.optimize import curve_fit
from scipy.special import erf

from nvmux.core import FitError, FrameStack, PSFModel
from nvmux.utils import progress_bar, rng_stream


__all__ = names = (
    'PSFModel', 'ExtractionResult', 'Blob', 'Localization', 'render_frame',
    'render_frames', 'render_expected_frame', 'roi_bounds', 'threshold_count',
    'extract_counts', 'region_sum', 'extract_sums', 'normalize_signal',
    'detect_blobs', 'fit_gaussian2d', 'gaussian2d')

UINT16_MAX = np.iinfo(np.uint16).max


def check_inside(sites, shape):
    height, width = shape
    for site in sites:
        if not (-0.5 <= site.x < width - 0.5 and -0.5 <= site.y < height - 0.5):
            raise ValueError(f'Site {site.id} at ({site.x}, {site.y}) lies outside the {width}x{height} frame')


def to_adu(electrons, camera, seed, frame_index):
    """EM register, read noise and bias for one frame of photoelectrons."""
    gain_rng = rng_stream(seed, frame_index, 'gain')
    read_rng = rng_stream(seed, frame_index, 'read')
    amplified = np.zeros(electrons.shape)
    lit = electrons > 0
    amplified[lit] = gain_rng.gamma(electrons[lit], camera.em_gain)
    read = read_rng.normal(0.0, camera.read_noise_sigma, electrons.shape) \
        if camera.read_noise_sigma > 0 else 0.0
    raw = np.round(camera.bias + amplified + read)
    return np.clip(raw, 0, UINT16_MAX).astype(np.uint16)


def render_frame(sites, photon_means, psf, camera, seed, shape, frame_index=0):
    """One EMCCD frame: Poisson photons per site spread by the PSF, EM gain
    Gamma(n_e, em_gain) per pixel, Gaussian read noise and bias.
    """
    photon_means = np.broadcast_to(np.asarray(photon_means, dtype=float), (len(sites),))
    if np.any(photon_means < 0):
        raise ValueError('Photon means must be non-negative')
    check_inside(sites, shape)
    height, width = shape
    electrons = np.zeros(shape, dtype=np.int64)
    for site, mean in zip(sites, photon_means):
        rng = rng_stream(seed, frame_index, 'site', site.id)
        n = rng.poisson(mean * psf.amplitude)
        if n == 0:
            continue
        xs = np.floor(site.x + psf.sigma_psf * rng.standard_normal(n) + 0.5).astype(np.int64)
        ys = np.floor(site.y + psf.sigma_psf * rng.standard_normal(n) + 0.5).astype(np.int64)
        inside = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
        np.add.at(electrons, (ys[inside], xs[inside]), 1)
    return to_adu(electrons, camera, seed, frame_index)


def render_frames(sites, photon_means, psf, camera, seed, shape, threads=1):
    """Stack of frames; `photon_means` has shape (n_frames, n_sites)."""
    photon_means = np.atleast_2d(np.asarray(photon_means, dtype=float))
    n_frames = len(photon_means)

    def render(i):
        progress_bar(i, n_frames, 'rendering')
        return render_frame(sites, photon_means[i], psf, camera, seed, shape, frame_index=i)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            frames = list(pool.map(render, range(n_frames)))
    else:
        frames = [render(i) for i in range(n_frames)]
    return FrameStack(np.stack(frames), camera=camera, seed=seed)


def pixel_fractions(center, sigma, n):
    edges = np.arange(n + 1) - 0.5
    cdf = 0.5 * (1 + erf((edges - center) / (np.sqrt(2) * sigma)))
    return np.diff(cdf)


def render_expected_frame(sites, photon_means, psf, camera, shape):
    """Noise-free expectation: bias plus em_gain times pixel-integrated PSF."""
    photon_means = np.broadcast_to(np.asarray(photon_means, dtype=float), (len(sites),))
    check_inside(sites, shape)
    height, width = shape
    image = np.full(shape, float(camera.bias))
    for site, mean in zip(sites, photon_means):
        fx = pixel_fractions(site.x, psf.sigma_psf, width)
        fy = pixel_fractions(site.y, psf.sigma_psf, height)
        image += camera.em_gain * mean * psf.amplitude * np.outer(fy, fx)
    return np.clip(np.round(image), 0, UINT16_MAX).astype(np.uint16)


##############
# EXTRACTION #
##############


@dataclass(frozen=True, eq=False)
class ExtractionResult:
    """Per-frame, per-site values; arrays are (n_frames, n_sites)."""
    site_ids: tuple
    counts: np.ndarray = None
    c_sig: np.ndarray = None
    c_ref: np.ndarray = None

    @property
    def c_norm(self):
        return normalize_signal(self.c_sig, self.c_ref)

    def rows(self):
        if self.counts is not None:
            for f, row in enumerate(self.counts):
                for site_id, s in zip(self.site_ids, row):
                    yield (f, site_id, int(s), None, None)
        else:
            c_norm = self.c_norm
            for f in range(len(self.c_sig)):
                for j, site_id in enumerate(self.site_ids):
                    yield (f, site_id, float(self.c_sig[f, j]), float(self.c_ref[f, j]), float(c_norm[f, j]))


def roi_bounds(site, n, shape):
    """(row0, col0) of the n×n region centered on the site."""
    col0 = int(np.floor(site.x - n / 2 + 0.5))
    row0 = int(np.floor(site.y - n / 2 + 0.5))
    height, width = shape
    if col0 < 0 or row0 < 0 or col0 + n > width or row0 + n > height:
        raise ValueError(f'The {n}x{n} region of site {site.id} is clipped by the frame edge')
    return row0, col0


def region(frame, site, n):
    row0, col0 = roi_bounds(site, n, frame.shape[-2:])
    return frame[..., row0:row0 + n, col0:col0 + n]


def threshold_count(frame, site, camera):
    """Number of pixels in the site's region above the photon-counting threshold."""
    return int(np.count_nonzero(region(frame, site, camera.roi_n) > camera.t_pc))


def extract_counts(stack, sites, camera=None):
    """Thresholded counts S for every frame and site."""
    camera = camera or stack.camera
    counts = np.stack([
        np.count_nonzero(region(stack.pixels, site, camera.roi_n) > camera.t_pc, axis=(1, 2))
        for site in sites], axis=1)
    return ExtractionResult(tuple(site.id for site in sites), counts=counts)


def region_sum(frame, site, n):
    return int(region(frame, site, n).astype(np.int64).sum())


def extract_sums(stack, sites, n, signal_frames, reference_frames, offset=0.0):
    """c_sig, c_ref region sums from paired signal and reference frames, less `offset` per frame."""
    sums = np.stack([region(stack.pixels, site, n).astype(np.int64).sum(axis=(1, 2))
                     for site in sites], axis=1).astype(float) - offset
    return ExtractionResult(tuple(site.id for site in sites),
                            c_sig=sums[list(signal_frames)], c_ref=sums[list(reference_frames)])


def normalize_signal(c_sig, c_ref):
    c_sig = np.asarray(c_sig, dtype=float)
    c_ref = np.asarray(c_ref, dtype=float)
    if np.any(c_ref == 0):
        raise ValueError('Reference counts of zero cannot normalize a signal')
    c_norm = c_sig / c_ref
    return float(c_norm) if c_norm.ndim == 0 else c_norm


###########
# BLOBS #
###########


@dataclass(frozen=True)
class Blob:
    x: float
    y: float
    strength: float
    ambiguous: bool = False


def elongation(image, x, y, radius):
    """Ratio of principal widths of the background-subtracted spot."""
    height, width = image.shape
    r0, r1 = max(int(round(y)) - radius, 0), min(int(round(y)) + radius + 1, height)
    c0, c1 = max(int(round(x)) - radius, 0), min(int(round(x)) + radius + 1, width)
    window = image[r0:r1, c0:c1]
    window = np.clip(window - np.median(image), 0, None)
    total = window.sum()
    if total <= 0:
        return 1.0
    yy, xx = np.mgrid[r0:r1, c0:c1]
    mx, my = (xx * window).sum() / total, (yy * window).sum() / total
    cov = np.cov(np.stack([xx.ravel() - mx, yy.ravel() - my]), aweights=window.ravel())
    eig = np.linalg.eigvalsh(cov)
    return float(np.sqrt(eig[-1] / max(eig[0], 1e-12)))


def detect_blobs(image, sigma_psf=1.5, k=5.0, max_elongation=1.2):
    """Candidate emitters: maxima of a difference-of-Gaussians band-pass.

    A maximum counts when it exceeds median + k robust standard deviations
    of the filtered image. Detections within 4 σ_psf of each other, or with
    an elongated footprint, are flagged ambiguous.
    """
    image = np.asarray(image, dtype=float)
    if image.size == 0:
        raise ValueError('Empty image')
    dog = ndimage.gaussian_filter(image, sigma_psf) - ndimage.gaussian_filter(image, 2 * sigma_psf)
    center = np.median(dog)
    spread = 1.4826 * np.median(np.abs(dog - center))
    if spread == 0:
        spread = dog.std()
    if spread == 0:
        return []
    size = 2 * int(np.ceil(sigma_psf)) + 1
    peaks = (dog == ndimage.maximum_filter(dog, size=size, mode='nearest')) & (dog > center + k * spread)
    rows, cols = np.nonzero(peaks)

    blobs = []
    for row, col in zip(rows, cols):
        r0, r1 = max(row - 1, 0), min(row + 2, dog.shape[0])
        c0, c1 = max(col - 1, 0), min(col + 2, dog.shape[1])
        window = np.clip(dog[r0:r1, c0:c1] - center, 0, None)
        yy, xx = np.mgrid[r0:r1, c0:c1]
        total = window.sum()
        blobs.append(((xx * window).sum() / total, (yy * window).sum() / total, float(dog[row, col])))

    G = nx.Graph()
    G.add_nodes_from(range(len(blobs)))
    for i, (xi, yi, _) in enumerate(blobs):
        for j in range(i + 1, len(blobs)):
            xj, yj, _ = blobs[j]
            if np.hypot(xi - xj, yi - yj) < 4 * sigma_psf:
                G.add_edge(i, j)
    radius = int(np.ceil(3 * sigma_psf))
    result = []
    for component in nx.connected_components(G):
        crowded = len(component) > 1
        for i in component:
            x, y, strength = blobs[i]
            ambiguous = crowded or elongation(image, x, y, radius) > max_elongation
            result.append(Blob(float(x), float(y), strength, ambiguous))
    return sorted(result, key=lambda b: (round(b.y, 6), round(b.x, 6)))


################
# LOCALIZATION #
################


@dataclass(frozen=True, eq=False)
class Localization:
    x: float
    y: float
    covariance: np.ndarray
    sigma: float
    amplitude: float
    offset: float


def gaussian2d(coords, amplitude, x0, y0, sigma, offset):
    x, y = coords
    return amplitude * np.exp(-((x - x0) ** 2 + (y - y0) ** 2) / (2 * sigma ** 2)) + offset


def fit_gaussian2d(image, roi=None, sigma_guess=1.5):
    """Least-squares isotropic Gaussian in `roi` = (col0, row0, col1, row1).

    Returns the center in full-image pixel coordinates with its covariance.
    """
    image = np.asarray(image, dtype=float)
    col0, row0, col1, row1 = roi or (0, 0, image.shape[1], image.shape[0])
    patch = image[row0:row1, col0:col1]
    if patch.size < 6:
        raise ValueError('Region too small for a 2D Gaussian fit')
    if np.ptp(patch) <= 0:
        raise FitError('Flat region: no peak to localize')

    yy, xx = np.mgrid[row0:row1, col0:col1].astype(float)
    offset = float(np.min(patch))
    weights = patch - offset
    total = weights.sum()
    p0 = (float(np.max(patch) - offset), (xx * weights).sum() / total,
          (yy * weights).sum() / total, sigma_guess, offset)
    try:
        params, cov = curve_fit(gaussian2d, (xx.ravel(), yy.ravel()), patch.ravel(),
                                p0=p0, xtol=1e-12, ftol=1e-12, maxfev=5000)
    except (RuntimeError, ValueError) as e:
        raise FitError(f'2D Gaussian fit did not converge: {e}') from None
    amplitude, x0, y0, sigma, offset = params
    if not np.all(np.isfinite(params)) or not (col0 - 0.5 <= x0 < col1 - 0.5 and row0 - 0.5 <= y0 < row1 - 0.5):
        raise FitError(f'2D Gaussian fit left the region: center ({x0}, {y0})')
    return Localization(float(x0), float(y0), cov[1:3, 1:3], float(abs(sigma)), float(amplitude), float(offset))
