"""Parameter sweeps with resumable, checksummed checkpoints.

A sweep is a list of grid points evaluated in order. After every point the
rows so far are written to a JSON checkpoint carrying a sha256 of its
content and of the run configuration; `--resume` continues from it.
"""
import os
import json
import hashlib
import numpy as np

from dataclasses import dataclass, field

from nvmux.core import CheckpointError
from nvmux.holography import SpotTargets, wgs
from nvmux.rateq import default_t_grid, optimal_ionization, preset, sigma_r_at
from nvmux.utils import Colors, log, makeparentdirs, progress_bar


__all__ = names = ('SweepResult', 'run_sweep', 'rate_model', 'benchmark_targets', 'COLUMNS')

COLUMNS = {
    'scc_opt': ('t_ion_ns', 'sigma_r'),
    'multiplex_scaling': ('n', 'power_per_nv', 't_star_ns', 'sigma_r_star'),
    'wgs_bench': ('n_spots', 'weighted', 'uniformity', 'efficiency', 'iters'),
}
SPOT_SPACING = 8


@dataclass
class SweepResult:
    kind: str
    rows: list
    complete: bool
    summary: dict = field(default_factory=dict)

    @property
    def columns(self):
        return COLUMNS[self.kind]


def rate_model(config):
    return preset(config.rate_model.preset, **config.rate_model.overrides())


def t_grid(config):
    return np.asarray(config.sweep.t_grid, dtype=float) if config.sweep.t_grid else default_t_grid()


def benchmark_targets(n, grid):
    """n spots on a square lattice, offset from the zero order."""
    height, width = grid
    side = int(np.ceil(np.sqrt(n)))
    index = np.arange(n)
    x = width // 2 + 10 + SPOT_SPACING * (index % side)
    y = height // 2 + 10 + SPOT_SPACING * (index // side)
    if x.max() >= width or y.max() >= height:
        raise ValueError(f'{n} benchmark spots do not fit a {width}x{height} grid')
    return SpotTargets(np.stack([x, y], axis=1))


##########
# POINTS #
##########


def grid_points(config):
    kind = config.sweep.kind
    if kind == 'scc_opt':
        return [float(t) for t in t_grid(config)]
    if kind == 'multiplex_scaling':
        return [int(n) for n in config.sweep.n_list]
    if kind == 'wgs_bench':
        return [[int(n), weighted] for n in config.sweep.spot_counts for weighted in (True, False)]
    raise NotImplementedError(f'Sweep kind "{kind}" not yet handled.')


def evaluate(config, point):
    kind = config.sweep.kind
    if kind == 'scc_opt':
        sigma_r = sigma_r_at(rate_model(config), config.sweep.power, point)
        return [point * 1e9, sigma_r]
    if kind == 'multiplex_scaling':
        power = config.sweep.total_power / point
        t_star, sigma_r = optimal_ionization(rate_model(config), power, t_grid(config))
        return [point, power, t_star * 1e9, sigma_r]
    n, weighted = point
    result = wgs(benchmark_targets(n, config.sweep.grid), config.sweep.grid, iters=config.sweep.iters,
                 weighted=weighted, seed=config.seed)
    return [n, weighted, result.uniformity, result.efficiency, config.sweep.iters]


def summarize_sweep(config, rows):
    if config.sweep.kind == 'scc_opt':
        t_star, sigma_r = optimal_ionization(rate_model(config), config.sweep.power, t_grid(config))
        return {'t_star_ns': t_star * 1e9, 'sigma_r_star': sigma_r, 'power': config.sweep.power,
                'preset': config.rate_model.preset}
    return {}


##############
# CHECKPOINT #
##############


def config_digest(config):
    data = config.to_dict()
    for key in ('output', 'threads'):
        data.pop(key, None)
    return hashlib.sha256(json.dumps(data, sort_keys=True, default=str).encode()).hexdigest()


def checksum(state):
    content = {key: state[key] for key in ('kind', 'config', 'rows')}
    return hashlib.sha256(json.dumps(content, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, kind, digest, rows):
    state = {'kind': kind, 'config': digest, 'rows': rows}
    state['checksum'] = checksum(state)
    makeparentdirs(path)
    tmp = f'{path}.tmp'
    with open(tmp, 'w') as f:
        json.dump(state, f)
    os.replace(tmp, path)


def load_checkpoint(path, kind, digest):
    try:
        with open(path) as f:
            state = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f'Checkpoint {path} is not valid JSON: {e}') from None
    if not isinstance(state, dict) or state.get('checksum') != checksum(
            {key: state.get(key) for key in ('kind', 'config', 'rows')}):
        raise CheckpointError(f'Checkpoint {path} failed its checksum')
    if state['kind'] != kind or state['config'] != digest:
        raise CheckpointError(f'Checkpoint {path} belongs to a different sweep configuration')
    return state['rows']


#########
# SWEEP #
#########


def run_sweep(config, checkpoint_path=None, resume=False, stop_after=None):
    """Evaluate every grid point of `config.sweep`, one row per point.

    With `stop_after`, return after that many newly evaluated points as if
    interrupted; the checkpoint then holds everything computed so far.
    """
    kind = config.sweep.kind
    points = grid_points(config)
    digest = config_digest(config)
    rows = []
    if resume and checkpoint_path:
        if not os.path.exists(checkpoint_path):
            print('==> No checkpoint found. Skipping...')
        else:
            rows = load_checkpoint(checkpoint_path, kind, digest)
            Colors.cyan(f'==> Checkpoint found with {len(rows)}/{len(points)} points at {checkpoint_path}')

    evaluated = 0
    for i in range(len(rows), len(points)):
        if stop_after is not None and evaluated >= stop_after:
            return SweepResult(kind, rows, complete=False)
        row = evaluate(config, points[i])
        rows.append(row)
        evaluated += 1
        log('sweep.point', kind=kind, **dict(zip(COLUMNS[kind], row)))
        progress_bar(i, len(points), kind)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, kind, digest, rows)

    summary = summarize_sweep(config, rows)
    if summary:
        log('sweep.summary', kind=kind, **summary)
    return SweepResult(kind, rows, complete=True, summary=summary)
