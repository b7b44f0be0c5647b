import os

import numpy as np
import pytest

from d2hnet.api.models import IspConfig, IspParams, NoiseParams
from d2hnet.services.eval_service import psnr
from d2hnet.services.noise_service import NoiseService, bayer_masks
from d2hnet.utils.errors import ShapeError
from d2hnet.utils.procedural import gradient_background
from d2hnet.utils.seeding import derive_rng

SILENT = dict(k_iso=0.0, r0=0.0, r1=0.0, row0=0.0, row1=0.0, quant_step=0.0)


def test_bayer_masks_partition_the_plane():
    r, g, b = bayer_masks(4, 6)
    total = r.astype(int) + g.astype(int) + b.astype(int)
    assert (total == 1).all()
    assert r[0, 0] and g[0, 1] and g[1, 0] and b[1, 1]


def test_unprocess_makes_a_mosaic(rng):
    x = rng.random((2, 3, 4, 6)).astype(np.float32)
    raw = NoiseService.unprocess(x, IspParams())
    assert raw.shape == (2, 1, 4, 6)
    assert raw.min() >= 0.0 and raw.max() <= 1.0
    with pytest.raises(ShapeError):
        NoiseService.unprocess(rng.random((1, 3, 5, 6)).astype(np.float32), IspParams())


def test_isp_round_trip_on_smooth_gradient():
    x = gradient_background(256, 256, derive_rng(0, 0, "isp"))
    p = IspParams(gamma=2.2, wr=2.1, wb=1.6)
    y = NoiseService.process(NoiseService.unprocess(x, p), p)
    assert psnr(y[..., 4:-4, 4:-4], x[..., 4:-4, 4:-4]) > 40.0


def test_noise_variance_follows_signal_model():
    params = NoiseParams(row0=0.0, row1=0.0)
    iso = 1000.0
    levels = np.linspace(0.05, 0.5, 10)
    variances = []
    for i, level in enumerate(levels):
        raw = np.full((1, 1, 100, 1000), level)
        noisy = NoiseService.add_noise(raw, iso, params, derive_rng(0, i, "noise_long"))
        variances.append(noisy.var())
    slope, intercept = np.polyfit(levels, variances, 1)
    fitted = slope * levels + intercept
    r2 = 1 - np.sum((variances - fitted) ** 2) / np.sum((variances - np.mean(variances)) ** 2)
    assert r2 > 0.99
    assert slope == pytest.approx(params.gain(iso), rel=0.05)
    expected_floor = params.read_sigma(iso) ** 2 + params.q ** 2 / 12
    assert intercept == pytest.approx(expected_floor, abs=1e-4)


def test_silent_sensor_is_identity(rng):
    raw = rng.random((1, 1, 4, 4))
    out = NoiseService.add_noise(raw, 1000.0, NoiseParams(**SILENT), rng)
    np.testing.assert_array_equal(out, raw)


def test_row_noise_is_constant_along_rows(rng):
    params = NoiseParams(**{**SILENT, "row0": 0.02})
    out = NoiseService.add_noise(np.full((1, 1, 8, 16), 0.5), 1000.0, params, rng)
    assert (out == out[..., :1]).all()
    assert out[0, 0, :, 0].std() > 0.0


def test_normal_approximation_keeps_the_mean():
    params = NoiseParams(**{**SILENT, "k_iso": 1e-5}, poisson_normal_threshold=1.0)
    out = NoiseService.add_noise(np.full((1, 1, 200, 200), 0.3), 1000.0, params, derive_rng(0, 0, "noise_short"))
    assert out.mean() == pytest.approx(0.3, abs=1e-3)


def test_iso_outside_sensor_range_is_rejected(rng):
    with pytest.raises(ValueError):
        NoiseService.add_noise(np.zeros((1, 1, 2, 2)), 50.0, NoiseParams(), rng)


def test_black_level_is_removed(rng):
    params = NoiseParams(**SILENT, black_level=0.0625)
    raw = np.full((1, 1, 2, 2), 0.5)
    np.testing.assert_allclose(NoiseService.add_noise(raw, 1000.0, params, rng), 0.5)


def test_short_exposure_is_noisier(rng):
    flat = np.full((1, 3, 32, 32), 0.4, dtype=np.float32)
    pair = NoiseService.simulate_pair(flat, flat, IspConfig(), NoiseParams(), derive_rng(3, 0, "augment"))
    assert pair.iso_short > pair.iso_long
    assert np.var(pair.s_n - flat) > np.var(pair.l_n - flat)
    l_n, s_n = pair
    assert l_n is pair.l_n and s_n is pair.s_n


def test_simulate_pair_is_reproducible(rng):
    img = rng.random((1, 3, 8, 8)).astype(np.float32)
    a = NoiseService.simulate_pair(img, img, IspConfig(), NoiseParams(), derive_rng(5, 2, "validation"))
    b = NoiseService.simulate_pair(img, img, IspConfig(), NoiseParams(), derive_rng(5, 2, "validation"))
    np.testing.assert_array_equal(a.s_n, b.s_n)
    assert a.isp == b.isp


def test_validation_noise_is_cached(tmp_path, dataset, tiny_cfg):
    entries = dataset.train[:2]
    cache = str(tmp_path / "cache")
    first = NoiseService.simulate_validation(entries, tiny_cfg.isp, tiny_cfg.noise, 11, cache)
    assert os.path.exists(os.path.join(cache, f"{entries[0].tuple_id}_11_l.d2t"))
    second = NoiseService.simulate_validation(entries, tiny_cfg.isp, tiny_cfg.noise, 11, cache, threads=2)
    for (l1, s1), (l2, s2) in zip(first, second):
        np.testing.assert_array_equal(l1, l2)
        np.testing.assert_array_equal(s1, s2)


def test_constant_plane_variance_matches_shot_plus_read():
    params = NoiseParams(k_iso=1e-5, r0=0.02, r1=0.0, row0=0.0, row1=0.0, quant_step=0.0, black_level=0.0)
    iso = 1000.0
    assert params.gain(iso) == pytest.approx(0.01)
    noisy = NoiseService.add_noise(np.full((1, 1, 1000, 1000), 0.25), iso, params, derive_rng(3, 0, "noise_short"))
    assert noisy.var() == pytest.approx(0.01 * 0.25 + 0.02 ** 2, rel=0.05)
    assert noisy.mean() == pytest.approx(0.25, abs=1e-3)
