"""Three-level rate-equation model of spin-to-charge conversion.

States are NV⁻ m_s=0, NV⁻ m_s=±1 and NV⁰. Under an ionization pulse of
power P per spot (x = P / p_ref):

    ionization, m_s=0      k0 = k_ion0 · x^exponent
    ionization, m_s=±1     k1 = k0 · (1 + kappa / (1 + P / p_sat))
    recombination          r  = k_rec · x^exponent · preset scale
    spin pumping ±1 -> 0   s  = k_spin · x

Recombination returns to NV⁻ m_s=0. The default coefficients place the
orange preset's optimum near 250 ns with σ_R ≈ 12 at 6 mW per spot;
`calibrate_rate_model` reproduces that step for other targets.
"""
import numpy as np

from dataclasses import dataclass, replace
from scipy.linalg import expm
from scipy.optimize import least_squares, minimize_scalar

from nvmux.core import UndefinedContrastError
from nvmux.photonstats import CountStats, PoissonMixture, mixture_pmf, readout_noise, support
from nvmux.utils import log


__all__ = names = (
    'LevelPopulations', 'RateModel', 'Trajectory', 'MultiplexRow', 'orange_594',
    'red_637', 'preset', 'initial_populations', 'evolve', 'scc_distributions',
    'sigma_r_curve', 'optimal_ionization', 'multiplex_scaling',
    'calibrate_rate_model', 'default_t_grid')

RECOMBINATION_SCALE = {'orange_594': 1.0, 'red_637': 0.3}
N_SAMPLES = 101


@dataclass(frozen=True)
class LevelPopulations:
    p_minus_ms0: float
    p_minus_ms1: float
    p_zero: float

    def __post_init__(self):
        values = self.as_array()
        assert np.all(values >= -1e-12), f'Populations must be non-negative: {values}'
        assert abs(values.sum() - 1) <= 1e-9, f'Populations must sum to 1: {values.sum()}'

    def as_array(self):
        return np.array([self.p_minus_ms0, self.p_minus_ms1, self.p_zero])

    @classmethod
    def from_array(cls, values):
        values = np.clip(np.asarray(values, dtype=float), 0.0, None)
        return cls(*map(float, values))

    @property
    def p_minus(self):
        return self.p_minus_ms0 + self.p_minus_ms1


@dataclass(frozen=True)
class RateModel:
    k_ion0: float = 0.8e6
    kappa: float = 3.0
    p_sat: float = 30e-3
    k_rec: float = 2.5e6
    k_spin: float = 2.7e6
    p_ref: float = 6e-3
    exponent: float = 2.0
    wavelength_preset: str = 'orange_594'

    def __post_init__(self):
        for name in ('k_ion0', 'kappa', 'k_rec', 'k_spin'):
            assert getattr(self, name) >= 0, f'{name} must be non-negative'
        assert self.p_sat > 0 and self.p_ref > 0 and self.exponent > 0
        assert self.wavelength_preset in RECOMBINATION_SCALE, self.wavelength_preset

    def ionization_rate_ms0(self, power):
        return self.k_ion0 * (power / self.p_ref) ** self.exponent

    def ionization_rate_ms1(self, power):
        return self.ionization_rate_ms0(power) * (1 + self.kappa / (1 + power / self.p_sat))

    def recombination_rate(self, power):
        scale = RECOMBINATION_SCALE[self.wavelength_preset]
        return scale * self.k_rec * (power / self.p_ref) ** self.exponent

    def spin_mixing_rate(self, power):
        return self.k_spin * power / self.p_ref

    def generator(self, power):
        """Column-stochastic generator Q with dp/dt = Q p."""
        k0 = self.ionization_rate_ms0(power)
        k1 = self.ionization_rate_ms1(power)
        r = self.recombination_rate(power)
        s = self.spin_mixing_rate(power)
        return np.array([
            [-k0, s, r],
            [0.0, -(k1 + s), 0.0],
            [k0, k1, -r],
        ])


def orange_594(**overrides):
    return RateModel(wavelength_preset='orange_594', **overrides)


def red_637(**overrides):
    return RateModel(wavelength_preset='red_637', **overrides)


def preset(name, **overrides):
    if name not in RECOMBINATION_SCALE:
        raise ValueError(f'Unknown wavelength preset {name!r}')
    return RateModel(wavelength_preset=name, **overrides)


def initial_populations(nv_minus=0.7, spin_init=0.95, pi_pulse=False):
    """Populations after green initialization, optionally followed by a π pulse."""
    ms0 = nv_minus * spin_init
    ms1 = nv_minus * (1 - spin_init)
    if pi_pulse:
        ms0, ms1 = ms1, ms0
    return LevelPopulations(ms0, ms1, 1 - nv_minus)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    populations: np.ndarray

    def __len__(self):
        return len(self.times)

    def at(self, index):
        return LevelPopulations.from_array(self.populations[index])

    @property
    def final(self):
        return self.at(-1)


def propagate(model, populations, power, duration):
    p = expm(model.generator(power) * duration) @ populations.as_array()
    return LevelPopulations.from_array(p)


def evolve(model, init, power, duration, n_samples=N_SAMPLES):
    """Exact trajectory on numpy.linspace(0, duration, n_samples)."""
    if duration < 0 or power < 0:
        raise ValueError(f'duration and power must be non-negative, got {duration}, {power}')
    times = np.linspace(0.0, duration, n_samples)
    Q = model.generator(power)
    p0 = init.as_array()
    populations = np.stack([expm(Q * t) @ p0 for t in times])
    populations = np.clip(populations, 0.0, None)
    return Trajectory(times, populations)


def scc_distributions(model, power, t_ion, readout=PoissonMixture(1.6, 6.7, 0.7),
                      spin_init=0.95, k=None):
    """Photon-count PMFs after SCC for the m_s=0 and the π-pulsed preparations.

    The readout mixture supplies λ0, λ1 and the initial NV⁻ population.
    """
    if t_ion < 0:
        raise ValueError(f't_ion must be non-negative, got {t_ion}')
    k = support(readout) if k is None else k
    pmfs = []
    for pi_pulse in (False, True):
        init = initial_populations(readout.w_minus, spin_init, pi_pulse)
        final = propagate(model, init, power, t_ion)
        m = PoissonMixture(readout.lambda0, readout.lambda1, min(final.p_minus, 1.0))
        pmfs.append(mixture_pmf(m, k))
    return pmfs[0], pmfs[1]


def sigma_r_at(model, power, t_ion, readout=PoissonMixture(1.6, 6.7, 0.7), spin_init=0.95):
    """σ_R after an ionization pulse; inf when the two preparations coincide."""
    pmf_no_pi, pmf_pi = scc_distributions(model, power, t_ion, readout, spin_init)
    s0, s1 = CountStats.from_pmf(pmf_no_pi), CountStats.from_pmf(pmf_pi)
    if abs(s0.mean - s1.mean) < 1e-12:
        return float('inf')
    try:
        return readout_noise(s0, s1)
    except UndefinedContrastError:
        return float('inf')


def default_t_grid():
    return np.geomspace(1e-11, 1e-4, 500)


def sigma_r_curve(model, power, t_grid=None, **kwargs):
    t_grid = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError('t_grid must be strictly increasing')
    return np.array([sigma_r_at(model, power, t, **kwargs) for t in t_grid])


def optimal_ionization(model, power, t_grid=None, **kwargs):
    """Pulse time minimizing σ_R: grid argmin refined by golden-section search.

    Returns (t_star, sigma_r_star); (nan, inf) when no contrast is reachable.
    """
    t_grid = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=float)
    curve = sigma_r_curve(model, power, t_grid, **kwargs)
    if not np.any(np.isfinite(curve)):
        return float('nan'), float('inf')
    i = int(np.argmin(curve))
    if i == 0 or i == len(t_grid) - 1:
        return float(t_grid[i]), float(curve[i])

    # golden section in log-time over the bracketing grid points
    objective = lambda u: sigma_r_at(model, power, float(np.exp(u)), **kwargs)
    bracket = tuple(np.log(t_grid[i - 1:i + 2]))
    try:
        result = minimize_scalar(objective, bracket=bracket, method='golden',
                                 options={'xtol': 1e-6})
    except ValueError:
        return float(t_grid[i]), float(curve[i])
    if result.fun <= curve[i]:
        return float(np.exp(result.x)), float(result.fun)
    return float(t_grid[i]), float(curve[i])


@dataclass(frozen=True)
class MultiplexRow:
    n: int
    power_per_nv: float
    t_star_ns: float
    sigma_r_star: float


def multiplex_scaling(model, total_power, n_list, t_grid=None, **kwargs):
    """Optimal σ_R when `total_power` is split evenly over n spots."""
    rows = []
    for n in n_list:
        n = int(n)
        if n < 1:
            raise ValueError(f'Spot counts must be positive, got {n}')
        power = total_power / n
        t_star, sigma_r = optimal_ionization(model, power, t_grid, **kwargs)
        rows.append(MultiplexRow(n, power, t_star * 1e9, sigma_r))
        log('rateq.multiplex', preset=model.wavelength_preset, n=n,
            power_per_nv=power, t_star_ns=t_star * 1e9, sigma_r_star=sigma_r)
    return rows


def calibrate_rate_model(target_t_star=250e-9, target_sigma_r=12.0, power=6e-3,
                         model=None, t_grid=None):
    """Rescale ionization and recombination so the optimum hits the targets.

    Fits log-scale factors on (k_ion0, k_rec) with scipy least_squares; the
    remaining coefficients stay fixed.
    """
    model = model or orange_594()
    t_grid = np.geomspace(20e-9, 5e-6, 160) if t_grid is None else t_grid

    def rescaled(u):
        return replace(model, k_ion0=model.k_ion0 * np.exp(u[0]), k_rec=model.k_rec * np.exp(u[1]))

    def residuals(u):
        t_star, sigma_r = optimal_ionization(rescaled(u), power, t_grid)
        if not np.isfinite(sigma_r):
            return np.array([10.0, 10.0])
        return np.array([np.log(t_star / target_t_star), np.log(sigma_r / target_sigma_r)])

    result = least_squares(residuals, x0=np.zeros(2), diff_step=1e-3, xtol=1e-6, ftol=1e-8)
    calibrated = rescaled(result.x)
    t_star, sigma_r = optimal_ionization(calibrated, power, t_grid)
    log('rateq.calibrate', k_ion0=calibrated.k_ion0, k_rec=calibrated.k_rec,
        t_star_ns=t_star * 1e9, sigma_r=sigma_r)
    return calibrated
