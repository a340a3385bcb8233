"""Weighted Gerchberg-Saxton spot arrays for the ionization SLM.

The SLM plane is relayed to the back focal plane of a lens, so the far
field is a single centered 2D FFT (DC at pixel (H//2, W//2)). Far-field
coordinates are (x, y) = (column, row) pixels of that image.
"""
import warnings
import numpy as np
import torch

from dataclasses import dataclass
from PIL import Image
from scipy.spatial.distance import pdist

from nvmux.core import FrameFormatError, HEADER, read_header
from nvmux.utils import Colors, makeparentdirs, rng_stream


__all__ = names = (
    'PhasePattern', 'SpotTargets', 'WGSResult', 'AffineCalibration', 'propagate',
    'wgs', 'measure_spots', 'calibrate_affine', 'targets_from_sites',
    'write_phase', 'read_phase', 'write_phase_png')

TWO_PI = 2 * np.pi
MAGIC_PHASE = b'PHAS'
META = np.dtype([('wavelength', '<f8'), ('pixel_pitch', '<f8')])
SETTLE_ITERS = 5


def wrap(phase):
    phase = np.mod(phase, TWO_PI)
    phase[phase >= TWO_PI] = 0.0
    return phase


@dataclass(frozen=True, eq=False)
class PhasePattern:
    grid: np.ndarray
    wavelength: float = 594e-9
    pixel_pitch: float = 8e-6

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        assert grid.ndim == 2, f'Phase grid must be 2D, got shape {grid.shape}'
        object.__setattr__(self, 'grid', wrap(grid.copy()))

    @property
    def shape(self):
        return self.grid.shape


@dataclass(frozen=True, eq=False)
class SpotTargets:
    positions: np.ndarray
    amplitudes: np.ndarray = None

    def __post_init__(self):
        positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if positions.shape[1] != 2 or len(positions) < 1:
            raise ValueError(f'Targets must be an (n, 2) array, got shape {positions.shape}')
        amplitudes = (np.ones(len(positions)) if self.amplitudes is None
                      else np.asarray(self.amplitudes, dtype=float))
        if amplitudes.shape != (len(positions),) or np.any(amplitudes <= 0):
            raise ValueError('Target amplitudes must be positive, one per target')
        if len(np.unique(positions, axis=0)) != len(positions):
            raise ValueError('Targets must be distinct')
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'amplitudes', amplitudes)

    def __len__(self):
        return len(self.positions)

    def pixels(self):
        """Integer (row, col) indices of the far-field pixels hit by each target."""
        cols, rows = np.round(self.positions).astype(np.int64).T
        return rows, cols


@dataclass(frozen=True, eq=False)
class WGSResult:
    pattern: PhasePattern
    amplitudes: np.ndarray
    uniformity: float
    efficiency: float
    history: np.ndarray


def to_field(phase, aperture, device):
    phase = torch.as_tensor(phase, dtype=torch.float64, device=device)
    aperture = torch.as_tensor(aperture, dtype=torch.float64, device=device)
    return torch.polar(aperture, phase)


def far_field(field):
    return torch.fft.fftshift(torch.fft.fft2(field, norm='ortho'))


def near_field(far):
    return torch.fft.ifft2(torch.fft.ifftshift(far), norm='ortho')


def propagate(p, aperture=None, device='cpu'):
    """Far-field intensity |FT(aperture · e^{iφ})|², energy-preserving."""
    aperture = np.ones(p.shape) if aperture is None else np.asarray(aperture, dtype=float)
    if aperture.shape != p.shape:
        raise ValueError(f'Aperture shape {aperture.shape} does not match grid {p.shape}')
    far = far_field(to_field(p.grid, aperture, device))
    return (far.abs() ** 2).cpu().numpy()


def check_targets(targets, shape):
    rows, cols = targets.pixels()
    height, width = shape
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= height or cols.max() >= width:
        raise ValueError(f'Targets fall outside the {width}x{height} far field')
    if len(targets) > 1 and pdist(targets.positions).min() < 1:
        message = 'Targets closer than one far-field pixel overlap'
        Colors.red(message)
        warnings.warn(message, UserWarning)


def spread(spots, desired):
    achieved = spots.abs() / desired
    return achieved, float(achieved.max() / achieved.min())


def wgs(targets, shape, iters=50, weighted=True, aperture=None, seed=0,
        wavelength=594e-9, pixel_pitch=8e-6, device='cpu'):
    """Phase mask whose far field puts the requested amplitudes on `targets`.

    Each iteration propagates the current mask, reweights the targets by
    w_k <- w_k · (mean(a)/a_k)^step (skipped when `weighted` is False), imposes
    the weighted amplitudes with the far-field phases and keeps the near-field
    phase. The initial phase is uniform random from `seed`.

    From iteration `SETTLE_ITERS` on, the weighted run fixes the far-field
    phases at the targets and keeps a step only when it does not raise the
    max/min amplitude ratio; a rejected step halves `step`. `history` holds
    the ratio of the mask entering each iteration.
    """
    if iters < 1:
        raise ValueError(f'iters must be >= 1, got {iters}')
    shape = tuple(int(s) for s in shape)
    check_targets(targets, shape)
    aperture = np.ones(shape) if aperture is None else np.asarray(aperture, dtype=float)
    if aperture.shape != shape:
        raise ValueError(f'Aperture shape {aperture.shape} does not match grid {shape}')

    rows, cols = (torch.as_tensor(i, device=device) for i in targets.pixels())
    desired = torch.as_tensor(targets.amplitudes, dtype=torch.float64, device=device)
    amplitude = torch.as_tensor(aperture, dtype=torch.float64, device=device)
    phase = torch.as_tensor(
        rng_stream(seed, 'wgs').uniform(0, TWO_PI, shape), dtype=torch.float64, device=device)
    spots = far_field(torch.polar(amplitude, phase))[rows, cols]
    achieved, ratio = spread(spots, desired)
    weights = torch.ones_like(desired)
    fixed, step = None, 1.0
    history = []

    for i in range(iters):
        history.append(ratio)
        guarded = weighted and i >= SETTLE_ITERS
        if guarded and fixed is None:
            fixed = torch.angle(spots)
        proposal = weights
        if weighted:
            proposal = weights * (achieved.mean() / achieved) ** step
            proposal = proposal / proposal.mean()
        constrained = torch.zeros(shape, dtype=spots.dtype, device=device)
        constrained[rows, cols] = torch.polar(
            proposal * desired, torch.angle(spots) if fixed is None else fixed)
        candidate = torch.remainder(torch.angle(near_field(constrained)), TWO_PI)
        candidate_spots = far_field(torch.polar(amplitude, candidate))[rows, cols]
        candidate_achieved, candidate_ratio = spread(candidate_spots, desired)
        if guarded and candidate_ratio > ratio:
            step /= 2
            continue
        phase, weights, spots = candidate, proposal, candidate_spots
        achieved, ratio = candidate_achieved, candidate_ratio

    pattern = PhasePattern(phase.cpu().numpy(), wavelength, pixel_pitch)
    intensity = propagate(pattern, aperture, device)
    achieved = np.sqrt(intensity[targets.pixels()])
    normalized = achieved / targets.amplitudes
    uniformity = float(normalized.min() / normalized.max())
    efficiency = float(intensity[targets.pixels()].sum() / intensity.sum())
    return WGSResult(pattern, achieved, uniformity, efficiency, np.array(history))


def measure_spots(intensity, targets, radius=1):
    """Intensity centroid of the (2r+1)² window around each target pixel.

    A window holding no light reports the target pixel itself.
    """
    rows, cols = targets.pixels()
    height, width = intensity.shape
    found = []
    for row, col in zip(rows, cols):
        r0, r1 = max(row - radius, 0), min(row + radius + 1, height)
        c0, c1 = max(col - radius, 0), min(col + radius + 1, width)
        window = intensity[r0:r1, c0:c1]
        yy, xx = np.mgrid[r0:r1, c0:c1]
        total = window.sum()
        if not total > 0:
            found.append((float(col), float(row)))
            continue
        found.append((float((xx * window).sum() / total), float((yy * window).sum() / total)))
    return np.array(found)


@dataclass(frozen=True, eq=False)
class AffineCalibration:
    matrix: np.ndarray
    offset: np.ndarray
    residuals: np.ndarray = None

    @property
    def rms(self):
        return 0.0 if self.residuals is None else float(np.sqrt(np.mean(self.residuals ** 2)))

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.matrix.T + self.offset

    @classmethod
    def from_rows(cls, rows):
        rows = np.asarray(rows, dtype=float)
        return cls(rows[:, :2], rows[:, 2])


def calibrate_affine(commanded, measured):
    """Least-squares affine map commanded -> measured, with per-axis residuals."""
    commanded = np.asarray(commanded, dtype=float)
    measured = np.asarray(measured, dtype=float)
    if commanded.shape != measured.shape or commanded.ndim != 2 or commanded.shape[1] != 2:
        raise ValueError('Point sets must be matching (n, 2) arrays')
    if len(commanded) < 3:
        raise ValueError(f'Need at least 3 point pairs, got {len(commanded)}')
    singular = np.linalg.svd(commanded - commanded.mean(axis=0), compute_uv=False)
    if singular[1] <= 1e-9 * max(singular[0], 1e-300):
        raise ValueError('Commanded points are collinear; the affine map is undetermined')

    design = np.hstack([commanded, np.ones((len(commanded), 1))])
    solution, *_ = np.linalg.lstsq(design, measured, rcond=None)
    matrix, offset = solution[:2].T, solution[2]
    residuals = measured - (commanded @ matrix.T + offset)
    return AffineCalibration(matrix, offset, residuals)


def targets_from_sites(sites, calibration=None, amplitudes=None):
    """Far-field targets for NV sites given a camera -> far-field calibration."""
    positions = np.array([site.position for site in sites], dtype=float)
    if calibration is not None:
        positions = calibration.apply(positions)
    return SpotTargets(positions, amplitudes)


##########
# EXPORT #
##########


def write_phase(pattern, path):
    """PHAS file: NVFR-style header (one frame), wavelength and pitch as f8, then f32 phases."""
    makeparentdirs(path)
    height, width = pattern.shape
    header = np.array([(MAGIC_PHASE, width, height, 1)], dtype=HEADER)
    meta = np.array([(pattern.wavelength, pattern.pixel_pitch)], dtype=META)
    with open(path, 'wb') as f:
        f.write(header.tobytes())
        f.write(meta.tobytes())
        f.write(pattern.grid.astype('<f4').tobytes())


def read_phase(path):
    with open(path, 'rb') as f:
        data = f.read()
    width, height, n = read_header(data, MAGIC_PHASE)
    offset = HEADER.itemsize + META.itemsize
    expected = offset + 4 * width * height * n
    if n != 1 or len(data) != expected:
        raise FrameFormatError(f'Phase file holds {len(data)} bytes, expected {expected}')
    meta = np.frombuffer(data, dtype=META, count=1, offset=HEADER.itemsize)[0]
    grid = np.frombuffer(data, dtype='<f4', offset=offset).reshape(height, width)
    return PhasePattern(grid.astype(np.float64), float(meta['wavelength']), float(meta['pixel_pitch']))


def quantize(pattern, levels=256):
    """Lossy 8-bit gray levels, level = round(φ / 2π · levels) mod levels."""
    return (np.round(pattern.grid / TWO_PI * levels).astype(np.int64) % levels).astype(np.uint8)


def write_phase_png(pattern, path):
    makeparentdirs(path)
    Image.fromarray(quantize(pattern)).save(path)
