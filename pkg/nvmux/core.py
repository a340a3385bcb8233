"""Shared domain types, physical constants, run configuration and file formats."""
import json
import dataclasses
import numpy as np
import pandas as pd

from dataclasses import dataclass, field
from pathlib import Path
from scipy import constants

from nvmux.utils import makeparentdirs


__all__ = names = (
    'NVMuxError', 'ConfigError', 'FrameFormatError', 'UndefinedContrastError',
    'FitError', 'CheckpointError', 'PhysConstants', 'NVSite', 'CameraModel',
    'PSFModel', 'FrameStack', 'RunConfig', 'load_config', 'config_from_dict',
    'write_frames', 'read_frames', 'write_table', 'read_table', 'write_json')

EXPERIMENTS = (
    'frames', 'charge', 'scc', 'odmr', 'rabi', 't1', 'driven', 'spectroscopy',
    'background', 'holo', 'sweep')
SWEEPS = ('scc_opt', 'multiplex_scaling', 'wgs_bench')
PRESETS = ('orange_594', 'red_637')


##########
# ERRORS #
##########


class NVMuxError(Exception):
    pass


class ConfigError(NVMuxError, ValueError):

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class FrameFormatError(NVMuxError, ValueError):
    pass


class UndefinedContrastError(NVMuxError, ValueError):
    pass


class FitError(NVMuxError, RuntimeError):
    pass


class CheckpointError(NVMuxError, RuntimeError):
    pass


def check(condition, field, message):
    if not condition:
        raise ConfigError(f'{field}: {message}', field=field)


#############
# CONSTANTS #
#############


@dataclass(frozen=True)
class PhysConstants:
    h: float = constants.h
    g: float = 2.0
    mu_B: float = constants.physical_constants['Bohr magneton'][0]

    @property
    def h_over_g_mu_b(self):
        """Field per frequency, T·s. About 3.57e-11 for g = 2.

        >>> round(PhysConstants().h_over_g_mu_b * 1e11, 3)
        3.572
        """
        return self.h / (self.g * self.mu_B)

    @property
    def gamma(self):
        """Electron gyromagnetic ratio in rad/(s·T)."""
        return 2 * np.pi / self.h_over_g_mu_b


#########
# TYPES #
#########


@dataclass(frozen=True)
class NVSite:
    id: int
    x: float
    y: float
    orientation_family: int = 0
    lambda0: float = 1.6
    lambda1: float = 6.7
    t1: float = 1e-3
    t2_xy8: float = 15e-6
    rabi_freq: float = 5e6
    nv_minus_init: float = 0.7
    spin_init_fidelity: float = 0.95
    sigma_r: float = 12.0
    opposite: bool = False
    i0: float = 2e4
    odmr_contrast: float = 0.1
    odmr_linewidth: float = 5e6

    def __post_init__(self):
        check(int(self.id) == self.id and self.id >= 0, 'id', f'must be a non-negative integer, got {self.id}')
        check(self.orientation_family in (0, 1, 2, 3), 'orientation_family',
              f'must be one of 0..3, got {self.orientation_family}')
        check(self.lambda0 >= 0, 'lambda0', f'must be >= 0, got {self.lambda0}')
        check(self.lambda1 > self.lambda0, 'lambda0',
              f'must be below lambda1 ({self.lambda0} >= {self.lambda1})')
        for name in ('nv_minus_init', 'spin_init_fidelity'):
            value = getattr(self, name)
            check(0 <= value <= 1, name, f'must lie in [0, 1], got {value}')
        check(0 < self.odmr_contrast < 1, 'odmr_contrast', f'must lie in (0, 1), got {self.odmr_contrast}')
        for name in ('t1', 't2_xy8', 'rabi_freq', 'i0', 'odmr_linewidth'):
            value = getattr(self, name)
            check(value > 0, name, f'must be > 0, got {value}')
        check(self.sigma_r >= 1, 'sigma_r', f'must be >= 1, got {self.sigma_r}')

    @property
    def position(self):
        return (self.x, self.y)


@dataclass(frozen=True)
class CameraModel:
    em_gain: float = 1000.0
    read_noise_sigma: float = 10.0
    bias: float = 100.0
    t_pc: float = 150.0
    roi_n: int = 6
    exposure: float = 8e-3

    def __post_init__(self):
        check(self.em_gain >= 1, 'em_gain', f'must be >= 1, got {self.em_gain}')
        check(self.read_noise_sigma >= 0, 'read_noise_sigma', f'must be >= 0, got {self.read_noise_sigma}')
        check(self.t_pc > self.bias, 't_pc', f'must exceed bias ({self.t_pc} <= {self.bias})')
        check(int(self.roi_n) == self.roi_n and self.roi_n >= 1, 'roi_n', f'must be an integer >= 1, got {self.roi_n}')
        check(self.exposure > 0, 'exposure', f'must be > 0, got {self.exposure}')


@dataclass(frozen=True)
class PSFModel:
    sigma_psf: float = 1.5
    amplitude: float = 1.0

    def __post_init__(self):
        check(self.sigma_psf > 0, 'sigma_psf', f'must be > 0, got {self.sigma_psf}')
        check(self.amplitude > 0, 'amplitude', f'must be > 0, got {self.amplitude}')


@dataclass(frozen=True, eq=False)
class FrameStack:
    """Frames as a read-only (n_frames, height, width) uint16 array.

    Equality compares pixel content only; camera and seed are provenance.
    """
    pixels: np.ndarray
    camera: CameraModel = None
    seed: int = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim == 2:
            pixels = pixels[None]
        if pixels.ndim != 3:
            raise ValueError(f'Frames must be 2D or 3D, got shape {pixels.shape}')
        if pixels.shape[0] < 1:
            raise ValueError('A frame stack needs at least one frame')
        if pixels.dtype != np.uint16:
            if pixels.size and (pixels.min() < 0 or pixels.max() > np.iinfo(np.uint16).max):
                raise ValueError('Pixel values must fit in 16 bits')
            pixels = pixels.astype(np.uint16)
        pixels = np.ascontiguousarray(pixels)
        pixels.flags.writeable = False
        object.__setattr__(self, 'pixels', pixels)

    @property
    def n_frames(self):
        return self.pixels.shape[0]

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]

    def __len__(self):
        return self.n_frames

    def __getitem__(self, index):
        return self.pixels[index]

    def __eq__(self, other):
        if not isinstance(other, FrameStack):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)


##########
# CONFIG #
##########


@dataclass(frozen=True)
class OutputSection:
    dir: str = 'out'
    prefix: str = ''


@dataclass(frozen=True)
class FrameSection:
    width: int = 64
    height: int = 64

    def __post_init__(self):
        check(self.width >= 1 and self.height >= 1, 'width', 'frame dimensions must be positive')


@dataclass(frozen=True)
class SequenceSection:
    freqs: tuple = ()
    family_centers: tuple = (2.80e9, 2.83e9, 2.90e9, 2.94e9)
    pulse_times: tuple = ()
    delays: tuple = ()
    thetas: tuple = ()
    tau: float = 250e-9
    n_pulses: int = 16
    ac_freqs: tuple = ()
    b_ac: float = 3.3e-6
    t_ion: float = 250e-9
    power: float = 6e-3
    rabi_contrast: float = 0.1
    t1_contrast: float = 0.1
    hyperfine: bool = False

    def __post_init__(self):
        check(self.tau > 0, 'tau', f'must be > 0, got {self.tau}')
        check(self.n_pulses >= 8 and self.n_pulses % 8 == 0, 'n_pulses',
              f'must be a positive multiple of 8, got {self.n_pulses}')
        check(self.t_ion >= 0, 't_ion', f'must be >= 0, got {self.t_ion}')
        check(self.power >= 0, 'power', f'must be >= 0, got {self.power}')
        check(len(self.family_centers) == 4, 'family_centers', 'needs one frequency per orientation family')
        for name in ('thetas',):
            values = getattr(self, name)
            check(all(0 <= t < 2 * np.pi for t in values), name, 'angles must lie in [0, 2π)')


@dataclass(frozen=True)
class RateSection:
    preset: str = 'orange_594'
    k_ion0: float = None
    kappa: float = None
    p_sat: float = None
    k_rec: float = None
    k_spin: float = None
    p_ref: float = None
    exponent: float = None

    def __post_init__(self):
        check(self.preset in PRESETS, 'preset', f'must be one of {PRESETS}, got {self.preset}')

    def overrides(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if f.name != 'preset' and getattr(self, f.name) is not None}


@dataclass(frozen=True)
class SweepSection:
    kind: str = 'scc_opt'
    power: float = 6e-3
    total_power: float = 6e-3
    n_list: tuple = (1, 2, 4, 8)
    t_grid: tuple = ()
    spot_counts: tuple = (5, 10, 15)
    grid: tuple = (128, 128)
    iters: int = 50

    def __post_init__(self):
        check(self.kind in SWEEPS, 'kind', f'must be one of {SWEEPS}, got {self.kind}')
        check(all(int(n) == n and n >= 1 for n in self.n_list), 'n_list', 'needs positive integers')
        check(all(a < b for a, b in zip(self.t_grid, self.t_grid[1:])), 't_grid', 'must be increasing')


@dataclass(frozen=True)
class HoloSection:
    grid: tuple = (256, 256)
    iters: int = 50
    weighted: bool = True
    wavelength: float = 594e-9
    pixel_pitch: float = 8e-6
    affine: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))

    def __post_init__(self):
        check(len(self.grid) == 2 and min(self.grid) >= 2, 'grid', 'needs two dimensions >= 2')
        check(self.iters >= 1, 'iters', f'must be >= 1, got {self.iters}')
        check(np.shape(self.affine) == (2, 3), 'affine', 'must be a 2x3 matrix')


@dataclass(frozen=True)
class BackgroundSection:
    mu: float = 4.0
    sigma_n: float = 0.05

    def __post_init__(self):
        check(self.mu >= 0, 'mu', f'must be >= 0, got {self.mu}')
        check(self.sigma_n >= 0, 'sigma_n', f'must be >= 0, got {self.sigma_n}')


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    seed: int = 0
    repetitions: int = 1000
    threads: int = 1
    output: OutputSection = field(default_factory=OutputSection)
    frame: FrameSection = field(default_factory=FrameSection)
    camera: CameraModel = field(default_factory=CameraModel)
    psf: PSFModel = field(default_factory=PSFModel)
    sites: tuple = ()
    sequence: SequenceSection = field(default_factory=SequenceSection)
    rate_model: RateSection = field(default_factory=RateSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    holography: HoloSection = field(default_factory=HoloSection)
    background: BackgroundSection = field(default_factory=BackgroundSection)
    baseline: float = 0.0
    baseline_stderr: float = 0.0

    def __post_init__(self):
        check(self.experiment in EXPERIMENTS, 'experiment',
              f'must be one of {EXPERIMENTS}, got {self.experiment!r}')
        check(int(self.seed) == self.seed and self.seed >= 0, 'seed', f'must be a non-negative integer, got {self.seed}')
        check(self.repetitions >= 1, 'repetitions', f'must be >= 1, got {self.repetitions}')
        check(self.threads >= 1, 'threads', f'must be >= 1, got {self.threads}')
        ids = [site.id for site in self.sites]
        check(len(ids) == len(set(ids)), 'sites', 'site ids must be unique')
        check(np.isfinite(self.baseline), 'baseline', 'must be finite')
        check(self.baseline_stderr >= 0, 'baseline_stderr', 'must be >= 0')

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def out_dir(self):
        return Path(self.output.dir)

    def to_dict(self):
        return dataclasses.asdict(self)


SECTIONS = {
    'output': OutputSection, 'frame': FrameSection, 'camera': CameraModel,
    'psf': PSFModel, 'sequence': SequenceSection, 'rate_model': RateSection,
    'sweep': SweepSection, 'holography': HoloSection,
    'background': BackgroundSection,
}


def freeze(value):
    """Lists become tuples so configs compare and hash by value."""
    if isinstance(value, list):
        return tuple(freeze(v) for v in value)
    return value


def build(cls, data, path):
    """Construct dataclass `cls` from a JSON object, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f'{path}: expected an object, got {type(data).__name__}', field=path)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            dotted = f'{path}.{key}' if path else key
            raise ConfigError(f'{dotted}: unknown key', field=dotted)

    kwargs = {}
    for key, value in data.items():
        dotted = f'{path}.{key}' if path else key
        if cls is RunConfig and key in SECTIONS:
            value = build(SECTIONS[key], value, dotted)
        elif cls is RunConfig and key == 'sites':
            if not isinstance(value, list):
                raise ConfigError(f'{dotted}: expected a list', field=dotted)
            value = tuple(build(NVSite, site, f'{dotted}[{i}]') for i, site in enumerate(value))
        else:
            value = freeze(value)
        kwargs[key] = value

    try:
        return cls(**kwargs)
    except ConfigError as e:
        dotted = f'{path}.{e.field}' if path and e.field else (e.field or path)
        raise ConfigError(f'{path + ": " if path else ""}{e}', field=dotted) from None
    except TypeError as e:
        raise ConfigError(f'{path or "config"}: {e}', field=path) from None


def config_from_dict(data):
    return build(RunConfig, data, '')


def load_config(path):
    """Parse and validate a run configuration file."""
    path = str(path)
    with open(path) as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f'{path}:{e.lineno}:{e.colno}: {e.msg}') from None
    return config_from_dict(data)


########
# NVFR #
########


HEADER = np.dtype([
    ('magic', 'S4'), ('width', '<u4'), ('height', '<u4'), ('n_frames', '<u4')])
MAGIC_FRAMES = b'NVFR'


def write_frames(stack, path):
    makeparentdirs(path)
    header = np.array([(MAGIC_FRAMES, stack.width, stack.height, stack.n_frames)], dtype=HEADER)
    with open(path, 'wb') as f:
        f.write(header.tobytes())
        f.write(stack.pixels.astype('<u2').tobytes())


def read_header(data, magic):
    if len(data) < HEADER.itemsize:
        raise FrameFormatError(f'Truncated header: {len(data)} bytes')
    header = np.frombuffer(data, dtype=HEADER, count=1)[0]
    if header['magic'] != magic:
        raise FrameFormatError(f'Bad magic {bytes(header["magic"])!r}, expected {magic!r}')
    return int(header['width']), int(header['height']), int(header['n_frames'])


def read_frames(path, camera=None):
    with open(path, 'rb') as f:
        data = f.read()
    width, height, n_frames = read_header(data, MAGIC_FRAMES)
    if n_frames < 1 or width < 1 or height < 1:
        raise FrameFormatError(f'Invalid dimensions {width}x{height}x{n_frames}')
    expected = HEADER.itemsize + 2 * width * height * n_frames
    if len(data) < expected:
        raise FrameFormatError(f'Truncated frames: {len(data)} bytes, expected {expected}')
    if len(data) > expected:
        raise FrameFormatError(
            f'Dimension mismatch: {len(data) - expected} trailing bytes after '
            f'{width}x{height}x{n_frames} frames')
    pixels = np.frombuffer(data, dtype='<u2', offset=HEADER.itemsize)
    pixels = pixels.reshape(n_frames, height, width).astype(np.uint16)
    return FrameStack(pixels, camera=camera)


##########
# TABLES #
##########


def write_table(rows, columns, path):
    """Write rows (dicts or sequences) as CSV with a fixed column order."""
    makeparentdirs(path)
    frame = pd.DataFrame(list(rows), columns=list(columns))
    frame.to_csv(path, index=False)
    return frame


def read_table(path):
    return pd.read_csv(path)


def to_jsonable(value):
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if dataclasses.is_dataclass(value):
        return dataclasses.asdict(value)
    raise TypeError(f'Object of type {type(value).__name__} is not JSON serializable')


def write_json(obj, path):
    makeparentdirs(path)
    with open(path, 'w') as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=to_jsonable)
        f.write('\n')
