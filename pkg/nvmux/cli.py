"""Command-line entry point: simulate frames, analyze them, run sweeps,
synthesize holograms and calibrate the background baseline.

    nvmux simulate-frames --config nvmux/recipes/charge_state.json
    nvmux analyze --config nvmux/recipes/charge_state.json
    nvmux sweep --config nvmux/recipes/scc_optimum.json --resume
"""
import argparse
import dataclasses
import numpy as np

from nvmux import analysis
from nvmux.core import (
    ConfigError, NVMuxError, load_config, read_frames, read_table, write_frames, write_json,
    write_table)
from nvmux.covariance import (
    COLUMNS as CORRELATOR_COLUMNS, BackgroundModel, background_correlation, calibrate_baseline,
    correlation_graph, fit_driven_amplitude, select_coherent_sites, simulate_background,
    simulate_driven, simulate_spectroscopy)
from nvmux.frames import render_frames
from nvmux.holography import (
    AffineCalibration, measure_spots, propagate, read_phase, targets_from_sites, wgs,
    write_phase, write_phase_png)
from nvmux.spinphysics import XY8Config
from nvmux.sweep import run_sweep
from nvmux.utils import Colors, generate_fname, generate_kwargs, log, set_verbosity, write_graph


__all__ = names = (
    'main', 'get_parser', 'cmd_simulate_frames', 'cmd_analyze', 'cmd_sweep', 'cmd_holo',
    'cmd_baseline', 'cmd_correlate')

BASELINE_SITES = 15


def add_common_arguments(parser):
    parser.add_argument('--config', required=True, help='Run configuration (JSON)')
    parser.add_argument('--out', help='Overrides output.dir from the config')
    parser.add_argument('--seed', type=int, help='Overrides the config seed')
    parser.add_argument('--threads', type=int, help='Overrides the config thread count')
    parser.add_argument('--verbose', '-v', action='count', default=0,
                        help='Print progress bars')


def get_parser():
    parser = argparse.ArgumentParser(
        prog='nvmux', description='Multiplexed NV-center readout simulation and analysis')
    subparsers = parser.add_subparsers(dest='command', required=True)

    simulate = subparsers.add_parser('simulate-frames', help='Render EMCCD frames and a truth sidecar')
    add_common_arguments(simulate)

    analyze = subparsers.add_parser('analyze', help='Extract counts and fit every site')
    add_common_arguments(analyze)
    analyze.add_argument('--frames', help='NVFR file (default: the simulate-frames output)')
    analysis.add_arguments(analyze)

    sweep = subparsers.add_parser('sweep', help='Rate-equation and hologram parameter sweeps')
    add_common_arguments(sweep)
    sweep.add_argument('--resume', '-r', action='store_true', help='resume from checkpoint')

    holo = subparsers.add_parser('holo', help='Weighted Gerchberg-Saxton phase mask for the sites')
    add_common_arguments(holo)

    baseline = subparsers.add_parser('baseline', help='Background-correlation baseline calibration')
    add_common_arguments(baseline)

    correlate = subparsers.add_parser('correlate', help='Shot-level driven or XY8 correlation run')
    add_common_arguments(correlate)
    correlate.add_argument('--t2-min', type=float, default=15e-6,
                           help='Sites with a shorter XY8 coherence time are left out')
    return parser


def resolve_config(args):
    """Load the config and apply command-line overrides."""
    config = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes['seed'] = args.seed
    if args.threads is not None:
        changes['threads'] = args.threads
    if args.out is not None:
        changes['output'] = dataclasses.replace(config.output, dir=args.out)
    try:
        config = config.replace(**changes)
    except ConfigError as e:
        raise ConfigError(f'command line: {e}', field=e.field) from None
    Colors.cyan(f'==> {config.experiment} run, seed {config.seed}, output in {config.out_dir}')
    return config


def output_path(config, suffix):
    stem = generate_fname(config.experiment, prefix=config.output.prefix, seed=config.seed)
    return config.out_dir / f'{stem}.{suffix}'


def save_table(rows, columns, path):
    """Write a CSV and read it back; a row-count mismatch fails the run."""
    rows = list(rows)
    write_table(rows, columns, path)
    if len(read_table(path)) != len(rows):
        raise NVMuxError(f'{path} did not read back with {len(rows)} rows')
    Colors.green(f'==> Wrote {path}')
    log('output.written', path=str(path), rows=len(rows))


def save_json(obj, path):
    write_json(obj, path)
    Colors.green(f'==> Wrote {path}')
    log('output.written', path=str(path))


def build_analyzer(config, cls):
    kwargs = generate_kwargs(config, cls, keys=analysis.keys)
    return cls(**kwargs)


def layout_class(config):
    if config.experiment not in analysis.LAYOUTS:
        raise ConfigError(
            f'experiment: {config.experiment!r} has no frame layout; choose one of '
            f'{tuple(analysis.LAYOUTS)}', field='experiment')
    if not config.sites:
        raise ConfigError('sites: at least one site is needed', field='sites')
    return analysis.LAYOUTS[config.experiment]


############
# COMMANDS #
############


def cmd_simulate_frames(config):
    analyzer = build_analyzer(config, layout_class(config))
    means, truth = analyzer.layout()
    shape = (config.frame.height, config.frame.width)
    stack = render_frames(config.sites, means, config.psf, config.camera, config.seed, shape,
                          threads=config.threads)

    path = output_path(config, 'nvfr')
    write_frames(stack, path)
    if read_frames(path) != stack:
        raise NVMuxError(f'{path} did not read back identically')
    Colors.green(f'==> Wrote {path}')
    log('output.written', path=str(path), frames=stack.n_frames, width=stack.width, height=stack.height)

    truth.update({'experiment': config.experiment, 'seed': config.seed,
                  'camera': config.camera, 'psf': config.psf})
    save_json(truth, output_path(config, 'truth.json'))
    return stack, truth


def cmd_analyze(config, frames=None, mode=None):
    layout_class(config)
    mode = mode or analysis.DEFAULT_MODES[config.experiment]
    analyzer = build_analyzer(config, analysis.MODES[mode])
    stack = read_frames(frames or output_path(config, 'nvfr'), camera=config.camera)
    result = analyzer.analyze(stack)

    save_table(result.extraction.rows(), analysis.EXTRACTION_COLUMNS,
               output_path(config, f'{mode}.extraction.csv'))
    save_table(result.rows, analysis.FIT_COLUMNS, output_path(config, f'{mode}.fits.csv'))
    if result.correlators is not None:
        save_table((record.row() for record in result.correlators), CORRELATOR_COLUMNS,
                   output_path(config, 'correlators.csv'))
        write_graph(result.graph, output_path(config, 'graph.json'))
    failed = sum(1 for row in result.rows if row[-1] != 'ok')
    log('analyze.done', mode=mode, sites=len(config.sites), failed=failed)
    return result


def cmd_sweep(config, resume=False, stop_after=None):
    kind = config.sweep.kind
    result = run_sweep(config, output_path(config, f'{kind}.ckpt.json'), resume=resume,
                       stop_after=stop_after)
    if not result.complete:
        Colors.red(f'==> Sweep {kind} stopped after {len(result.rows)} points')
        return result
    save_table(result.rows, result.columns, output_path(config, f'{kind}.csv'))
    if result.summary:
        save_json(result.summary, output_path(config, f'{kind}.summary.json'))
    return result


def cmd_holo(config):
    if not config.sites:
        raise ConfigError('sites: at least one site is needed', field='sites')
    holo = config.holography
    calibration = AffineCalibration.from_rows(holo.affine)
    targets = targets_from_sites(config.sites, calibration)
    result = wgs(targets, holo.grid, iters=holo.iters, weighted=holo.weighted, seed=config.seed,
                 wavelength=holo.wavelength, pixel_pitch=holo.pixel_pitch)

    path = output_path(config, 'phase')
    write_phase(result.pattern, path)
    if not np.allclose(read_phase(path).grid, result.pattern.grid, atol=1e-6):
        raise NVMuxError(f'{path} did not read back')
    Colors.green(f'==> Wrote {path}')
    write_phase_png(result.pattern, output_path(config, 'phase.png'))

    measured = measure_spots(propagate(result.pattern), targets)
    rows = [(site.id, x, y, a, mx, my) for site, (x, y), a, (mx, my)
            in zip(config.sites, targets.positions, result.amplitudes, measured)]
    save_table(rows, ('site_id', 'x', 'y', 'amplitude', 'measured_x', 'measured_y'),
               output_path(config, 'spots.csv'))
    save_json({'uniformity': result.uniformity, 'efficiency': result.efficiency,
               'n_spots': len(targets), 'iters': holo.iters, 'weighted': holo.weighted,
               'history': result.history}, output_path(config, 'holo.json'))
    log('holo.done', n_spots=len(targets), uniformity=result.uniformity, efficiency=result.efficiency)
    return result


def cmd_baseline(config):
    bg = BackgroundModel(config.background.mu, config.background.sigma_n)
    exact, approx = background_correlation(bg)
    n_sites = len(config.sites) or BASELINE_SITES
    records = simulate_background(bg, config.repetitions, n_sites, config.seed)
    calibration = calibrate_baseline(records)
    log('baseline.done', baseline=calibration.baseline, stderr=calibration.stderr,
        exact=exact, approx=approx, in_validity_regime=bg.in_validity_regime)
    save_json(dataclasses.asdict(calibration), output_path(config, 'baseline.json'))
    return calibration


def cmd_correlate(config, t2_min=15e-6):
    seq = config.sequence
    if config.experiment == 'driven':
        if not len(seq.thetas):
            raise ConfigError('sequence.thetas: a driven run needs at least one angle', field='thetas')
        sites = list(config.sites)
        records = simulate_driven(seq.thetas, sites, config.repetitions, config.seed,
                                  config.baseline, config.baseline_stderr)
    elif config.experiment == 'spectroscopy':
        if not len(seq.ac_freqs):
            raise ConfigError('sequence.ac_freqs: a spectroscopy run needs at least one frequency',
                              field='ac_freqs')
        sites = select_coherent_sites(config.sites, t2_min)
        Colors.cyan(f'==> {len(sites)}/{len(config.sites)} sites with T2 >= {t2_min:g} s')
        records = simulate_spectroscopy(sites, XY8Config(seq.tau, seq.n_pulses), seq.ac_freqs,
                                        seq.b_ac, config.repetitions, config.seed,
                                        config.baseline, config.baseline_stderr)
    else:
        raise ConfigError(f'experiment: correlate runs driven or spectroscopy, got {config.experiment!r}',
                          field='experiment')

    save_table((record.row() for record in records), CORRELATOR_COLUMNS,
               output_path(config, 'correlators.csv'))
    first = [record for record in records if record.sweep_value == records[0].sweep_value]
    write_graph(correlation_graph(first, sites), output_path(config, 'graph.json'))
    if config.experiment == 'driven':
        rows = []
        for pair in sorted({record.pair for record in records}):
            pair_records = [record for record in records if record.pair == pair]
            amplitude, stderr = fit_driven_amplitude(
                [record.sweep_value for record in pair_records],
                [record.r_corr for record in pair_records],
                [record.stderr for record in pair_records])
            rows.append((pair[0], pair[1], amplitude, stderr))
        save_table(rows, ('site_i', 'site_j', 'amplitude', 'stderr'), output_path(config, 'amplitudes.csv'))
    return records


########
# MAIN #
########


def main(argv=None):
    args = get_parser().parse_args(argv)
    set_verbosity(args.verbose)
    try:
        config = resolve_config(args)
        if args.command == 'simulate-frames':
            cmd_simulate_frames(config)
        elif args.command == 'analyze':
            cmd_analyze(config, args.frames, args.mode)
        elif args.command == 'sweep':
            cmd_sweep(config, resume=args.resume)
        elif args.command == 'holo':
            cmd_holo(config)
        elif args.command == 'baseline':
            cmd_baseline(config)
        elif args.command == 'correlate':
            cmd_correlate(config, args.t2_min)
    except (NVMuxError, ValueError, OSError) as e:
        Colors.red(f'Fatal error: {e}')
        log('run.failed', command=args.command, error=type(e).__name__)
        return 1
    return 0
