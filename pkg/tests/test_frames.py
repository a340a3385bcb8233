"""Tests for synthetic EMCCD frames and per-site extraction"""

import numpy as np
import pytest
from scipy import stats

from nvmux.core import CameraModel, FitError, FrameStack, NVSite, PSFModel
from nvmux.frames import (
    ExtractionResult, detect_blobs, extract_counts, extract_sums, fit_gaussian2d, gaussian2d,
    normalize_signal, pixel_fractions, region_sum, render_expected_frame, render_frame,
    render_frames, roi_bounds, threshold_count)
from nvmux.photonstats import fit_double_poisson, histogram
from nvmux.utils import rng_stream


def test_render_frame_deterministic(four_sites, camera):
    a = render_frame(four_sites, 6.7, PSFModel(), camera, seed=3, shape=(40, 40))
    b = render_frame(four_sites, 6.7, PSFModel(), camera, seed=3, shape=(40, 40))
    c = render_frame(four_sites, 6.7, PSFModel(), camera, seed=4, shape=(40, 40))
    assert a.dtype == np.uint16
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_render_independent_of_site_order(four_sites, camera):
    means = [1.0, 2.0, 3.0, 4.0]
    a = render_frame(four_sites, means, PSFModel(), camera, seed=1, shape=(40, 40), frame_index=5)
    b = render_frame(four_sites[::-1], means[::-1], PSFModel(), camera, seed=1, shape=(40, 40), frame_index=5)
    assert np.array_equal(a, b)


def test_render_frames_independent_of_threads(four_sites, camera):
    means = np.full((6, 4), 5.0)
    serial = render_frames(four_sites, means, PSFModel(), camera, 2, (40, 40), threads=1)
    parallel = render_frames(four_sites, means, PSFModel(), camera, 2, (40, 40), threads=3)
    assert serial == parallel
    assert serial.n_frames == 6


def test_render_rejects_bad_inputs(camera):
    with pytest.raises(ValueError):
        render_frame([NVSite(0, 50, 5)], 1.0, PSFModel(), camera, 0, (40, 40))
    with pytest.raises(ValueError):
        render_frame([NVSite(0, 5, 5)], -1.0, PSFModel(), camera, 0, (40, 40))


def test_dark_frame_threshold_tail():
    camera = CameraModel(t_pc=130.0)
    stack = render_frames([], np.zeros((50, 0)), PSFModel(), camera, 0, (64, 64))
    fraction = np.mean(stack.pixels > camera.t_pc)
    expected = stats.norm.sf((camera.t_pc + 0.5 - camera.bias) / camera.read_noise_sigma)
    n = stack.pixels.size
    assert abs(fraction - expected) * n < 4 * np.sqrt(expected * n)


def test_expected_frame_matches_average():
    camera = CameraModel(em_gain=10.0, t_pc=150.0)
    psf = PSFModel(1.5)
    sites = [NVSite(0, 10.3, 9.6)]
    stack = render_frames(sites, np.full((400, 1), 200.0), psf, camera, 7, (20, 20))
    expected = render_expected_frame(sites, 200.0, psf, camera, (20, 20)).astype(float)
    assert np.allclose(stack.pixels.mean(axis=0), expected, atol=15)
    assert expected.max() > 200


def test_roi_bounds():
    assert roi_bounds(NVSite(0, 12, 12), 6, (40, 40)) == (9, 9)
    assert roi_bounds(NVSite(0, 12.6, 12.4), 6, (40, 40)) == (9, 10)
    with pytest.raises(ValueError):
        roi_bounds(NVSite(0, 1, 1), 6, (40, 40))


def test_threshold_count(camera):
    frame = np.full((20, 20), 100, dtype=np.uint16)
    site = NVSite(0, 10, 10)
    assert threshold_count(frame, site, camera) == 0
    frame[10, 10] = frame[8, 11] = 5000
    frame[0, 0] = 5000
    assert threshold_count(frame, site, camera) == 2


def test_threshold_count_monotone_in_threshold(four_sites):
    frame = render_frame(four_sites, 6.7, PSFModel(2.0), CameraModel(), seed=5, shape=(40, 40))
    counts = [threshold_count(frame, site, CameraModel(t_pc=t_pc))
              for site in four_sites for t_pc in (101, 120, 150, 300, 1000, 5000)]
    for site_counts in np.reshape(counts, (4, 6)):
        assert np.all(np.diff(site_counts) <= 0)


def counted_pixels_oracle(mean, site, psf, camera, shape, trials, seed):
    """Mean thresholded count from independent per-pixel photon draws."""
    rng = rng_stream(seed, 'oracle')
    height, width = shape
    n = camera.roi_n
    row0, col0 = roi_bounds(site, n, shape)
    mu = mean * psf.amplitude * np.outer(pixel_fractions(site.y, psf.sigma_psf, height),
                                          pixel_fractions(site.x, psf.sigma_psf, width))
    mu = mu[row0:row0 + n, col0:col0 + n].ravel()
    electrons = rng.poisson(mu, (trials, mu.size))
    amplified = np.where(electrons > 0, rng.gamma(np.maximum(electrons, 1), camera.em_gain), 0.0)
    raw = np.round(camera.bias + amplified + rng.normal(0, camera.read_noise_sigma, electrons.shape))
    return np.count_nonzero(raw > camera.t_pc, axis=1).mean()


def test_mean_count_matches_photon_oracle():
    camera, psf, site = CameraModel(), PSFModel(1.5), NVSite(0, 8, 8)
    stack = render_frames([site], np.full((10000, 1), 6.7), psf, camera, 13, (16, 16))
    mean_s = extract_counts(stack, [site]).counts.mean()
    oracle = counted_pixels_oracle(6.7, site, psf, camera, (16, 16), 100000, seed=13)
    assert mean_s == pytest.approx(oracle, rel=0.02)
    assert mean_s < 6.7


def test_extract_counts_and_rows(four_sites, camera):
    means = np.zeros((3, 4))
    means[:, 0] = 20.0
    stack = render_frames(four_sites, means, PSFModel(), camera, 0, (40, 40))
    result = extract_counts(stack, four_sites)
    assert result.counts.shape == (3, 4)
    assert np.all(result.counts[:, 0] > 5)
    assert np.all(result.counts[:, 1:] <= 1)
    rows = list(result.rows())
    assert len(rows) == 12 and rows[0][:2] == (0, 1)


def test_region_sum():
    frame = np.arange(100, dtype=np.uint16).reshape(10, 10)
    site = NVSite(0, 5, 5)
    assert region_sum(frame, site, 2) == 44 + 45 + 54 + 55
    assert region_sum(frame, site, 4) == frame[3:7, 3:7].sum()
    stack = FrameStack(np.stack([frame, 2 * frame]))
    result = extract_sums(stack, [site], 4, [0], [1])
    assert result.c_sig[0, 0] == region_sum(frame, site, 4)
    assert result.c_ref[0, 0] == 2 * region_sum(frame, site, 4)
    with pytest.raises(ValueError):
        region_sum(frame, NVSite(1, 0, 0), 4)


def test_normalize_signal():
    assert normalize_signal(90.0, 100.0) == 0.9
    assert np.allclose(normalize_signal([1, 2], [2, 4]), [0.5, 0.5])
    with pytest.raises(ValueError):
        normalize_signal([1, 2], [1, 0])


def test_extract_sums_offset():
    pixels = np.full((4, 10, 10), 100, dtype=np.uint16)
    pixels[0::2, 4:6, 4:6] += 50
    pixels[1::2, 4:6, 4:6] += 100
    result = extract_sums(FrameStack(pixels), [NVSite(0, 5, 5)], 4, [0, 2], [1, 3], offset=1600)
    assert np.allclose(result.c_sig, 200) and np.allclose(result.c_ref, 400)
    assert np.allclose(result.c_norm, 0.5)
    assert isinstance(result, ExtractionResult)


def test_pipeline_recovers_charge_population():
    camera = CameraModel(roi_n=10)
    psf = PSFModel(2.5)
    site = NVSite(0, 12, 12)
    minus = rng_stream(0, 'truth').random(10000) < 0.7
    means = np.where(minus, 6.7, 1.6)[:, None]
    stack = render_frames([site], means, psf, camera, 11, (24, 24))
    counts = extract_counts(stack, [site]).counts[:, 0]
    fit = fit_double_poisson(histogram(counts))
    assert not fit.degenerate
    assert fit.mixture.w_minus == pytest.approx(minus.mean(), abs=0.02)
    assert fit.mixture.lambda1 > 2 * fit.mixture.lambda0


def synthetic_emitters(n_cols=15, n_rows=10, spacing=12, amplitude=10.0, sigma=1.5, seed=0):
    rng = rng_stream(seed, 'emitters')
    height, width = 20 + spacing * (n_rows - 1), 20 + spacing * (n_cols - 1)
    cols, rows = np.meshgrid(np.arange(n_cols), np.arange(n_rows))
    x = 10 + spacing * cols.ravel() + rng.uniform(-0.5, 0.5, cols.size)
    y = 10 + spacing * rows.ravel() + rng.uniform(-0.5, 0.5, rows.size)
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    image = rng.normal(0.0, 1.0, (height, width))
    for xi, yi in zip(x, y):
        image += gaussian2d((xx, yy), amplitude, xi, yi, sigma, 0.0)
    return image, np.stack([x, y], axis=1)


def test_detect_blobs_recall():
    image, truth = synthetic_emitters()
    blobs = detect_blobs(image, 1.5)
    found = np.array([(b.x, b.y) for b in blobs])
    distances = np.hypot(*(truth[:, None, :] - found[None, :, :]).transpose(2, 0, 1))
    recall = np.mean(distances.min(axis=1) < 1.5)
    false_positives = np.count_nonzero(distances.min(axis=0) >= 1.5)
    assert len(truth) == 150
    assert recall >= 0.99
    assert false_positives <= 1
    assert blobs == sorted(blobs, key=lambda b: (round(b.y, 6), round(b.x, 6)))


def test_detect_blobs_flags_crowded():
    yy, xx = np.mgrid[0:30, 0:30].astype(float)
    image = gaussian2d((xx, yy), 50, 12, 15, 1.5, 0) + gaussian2d((xx, yy), 50, 17, 15, 1.5, 0)
    image += rng_stream(1, 'crowded').normal(0, 0.5, image.shape)
    blobs = detect_blobs(image, 1.5)
    assert blobs and all(b.ambiguous for b in blobs)
    assert detect_blobs(np.zeros((10, 10))) == []


def test_fit_gaussian2d_accuracy():
    yy, xx = np.mgrid[0:11, 0:11].astype(float)
    rng = rng_stream(2, 'localize')
    errors = []
    for _ in range(1000):
        x0, y0 = 5 + rng.uniform(-0.5, 0.5, 2)
        image = gaussian2d((xx, yy), 10.0, x0, y0, 1.5, 3.0) + rng.normal(0, 1.0, xx.shape)
        loc = fit_gaussian2d(image, sigma_guess=1.5)
        errors.append((loc.x - x0, loc.y - y0))
    rms = np.sqrt(np.mean(np.square(errors), axis=0))
    assert np.all(rms <= 0.1)


def test_fit_gaussian2d_roi_and_errors():
    yy, xx = np.mgrid[0:30, 0:30].astype(float)
    image = gaussian2d((xx, yy), 100.0, 20.3, 9.8, 1.5, 5.0)
    loc = fit_gaussian2d(image, roi=(15, 5, 26, 16))
    assert (loc.x, loc.y) == (pytest.approx(20.3, abs=1e-6), pytest.approx(9.8, abs=1e-6))
    assert loc.sigma == pytest.approx(1.5, abs=1e-6)
    with pytest.raises(FitError):
        fit_gaussian2d(np.full((9, 9), 7.0))
