import numpy as np
import pytest

from d2hnet.api.models import AugmentConfig, IspConfig, NoiseParams
from d2hnet.services.augment_service import AugmentService, SelectionResult, Square, luminance
from d2hnet.utils.errors import ShapeError
from d2hnet.utils.seeding import derive_rng


def tuple_images(rng, size=16):
    return {name: rng.random((1, 3, size, size)).astype(np.float32) for name in ("l", "s", "l_last", "s_first")}


def box_blur(x, k=3):
    out = np.zeros_like(x)
    padded = np.pad(x, ((0, 0), (0, 0), (k // 2, k // 2), (k // 2, k // 2)), mode="edge")
    for dy in range(k):
        for dx in range(k):
            out += padded[:, :, dy:dy + x.shape[2], dx:dx + x.shape[3]]
    return out / (k * k)


def test_luminance_weights():
    x = np.zeros((1, 3, 1, 1))
    x[0, 1] = 1.0
    assert luminance(x)[0, 0, 0, 0] == pytest.approx(0.587)


def test_variance_map_bounds_and_sharp_identity(rng):
    sharp = rng.random((1, 3, 32, 32))
    same = AugmentService.variance_map(sharp, sharp, 8)
    np.testing.assert_array_equal(same, 1.0)
    blurred = AugmentService.variance_map(box_blur(sharp), sharp, 8)
    assert blurred.shape == (1, 1, 32, 32)
    assert blurred.max() <= 1.0 and blurred.min() >= 0.0
    assert blurred.mean() < 0.5
    with pytest.raises(ShapeError):
        AugmentService.variance_map(sharp[..., :30], sharp[..., :30], 8)


def percentile_by_sorting(values, p):
    s = sorted(values)
    k = p / 100 * (len(s) - 1)
    lo = int(np.floor(k))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (k - lo) * (s[hi] - s[lo])


def test_selection_matches_brute_force_oracle(rng):
    maps = [rng.random((1, 1, 40, 48)).astype(np.float32) ** (1 + i % 3) for i in range(20)]
    cfg = AugmentConfig(samples_per_map=30, crop_size=8, selection_square=8, selection_percentile=5.0)
    seed = 21
    result = AugmentService.select_blurry_patches(maps, cfg, seed)

    first, second = [], []
    for i, vmap in enumerate(maps):
        r = derive_rng(seed, i, "select")
        for bucket in (first, second):
            tops = r.integers(0, 40 - 8 + 1, size=30)
            lefts = r.integers(0, 48 - 8 + 1, size=30)
            for t, lf in zip(tops, lefts):
                bucket.append((i, int(t), int(lf), float(vmap[0, 0, t:t + 8, lf:lf + 8].astype(np.float64).mean())))
    threshold = percentile_by_sorting([m for *_, m in first], 5.0)
    expected = [(i, t, lf) for i, t, lf, m in second if m < threshold]

    assert result.threshold == pytest.approx(threshold, abs=1e-12)
    assert [(sq.tuple_index, sq.top, sq.left) for sq in result.selected] == expected
    for sq, (_, _, _, m) in zip(result.second_pass, second):
        assert sq.mean == pytest.approx(m, abs=1e-9)
    assert not result.degenerate


def test_selection_on_flat_maps_is_degenerate():
    maps = [np.full((1, 1, 16, 16), 0.5, np.float32) for _ in range(3)]
    cfg = AugmentConfig(samples_per_map=5, crop_size=8, selection_square=8)
    result = AugmentService.select_blurry_patches(maps, cfg, 0)
    assert result.degenerate
    assert result.selected == []


def test_selection_square_must_fit():
    cfg = AugmentConfig(crop_size=16, selection_square=16)
    with pytest.raises(ShapeError):
        AugmentService.select_blurry_patches([np.zeros((1, 1, 8, 8))], cfg, 0)


def test_augment_manifest_appends_cropped_entries(dataset):
    selection = SelectionResult(threshold=0.1, selected=[Square(1, 2, 4, 16, 0.05)])
    out = AugmentService.augment_manifest(dataset.train, selection)
    assert len(out) == len(dataset.train) + 1
    assert out[-1].tuple_id == f"{dataset.train[1].tuple_id}#sel00000"
    assert out[-1].crop == (2, 4, 16)


def test_illumination_and_color_adjust():
    img = {"a": np.array([[[[0.0, 0.25, 1.0]]]])}
    out = AugmentService.illumination_adjust(img, 2.0)["a"]
    np.testing.assert_allclose(out, [[[[1e-16, 0.0625, 1.0]]]])
    np.testing.assert_allclose(AugmentService.color_adjust(np.ones((1, 1, 1, 2)), 0.5, 0.01), 0.51)


def test_cut_noise_is_exact(rng):
    s_n = rng.random((1, 3, 16, 16)).astype(np.float32)
    s_first = rng.random((1, 3, 16, 16)).astype(np.float32)
    out, mask = AugmentService.cut_noise(s_n, s_first, 6, rng, position=(3, 5))
    inside = np.broadcast_to(mask.astype(bool), out.shape)
    np.testing.assert_array_equal(out[inside], s_first[inside])
    np.testing.assert_array_equal(out[~inside], s_n[~inside])
    assert mask.sum() == 36
    assert mask[0, 0, 3, 5] == 1 and mask[0, 0, 9, 5] == 0


def test_cut_noise_edge_cases(rng):
    s = rng.random((1, 3, 8, 8)).astype(np.float32)
    out, mask = AugmentService.cut_noise(s, s * 0, 0, rng)
    np.testing.assert_array_equal(out, s)
    assert mask.sum() == 0
    with pytest.raises(ShapeError):
        AugmentService.cut_noise(s, s, 9, rng)
    with pytest.raises(ShapeError):
        AugmentService.cut_noise(s, s, 4, rng, position=(6, 0))


def test_scheme_rates_match_probabilities(rng):
    cfg = AugmentConfig(crop_size=16, noise=False)
    images = tuple_images(rng)
    draws = 4000
    counts = {"ia": 0, "ca": 0, "cutnoise": 0}
    for i in range(draws):
        sample = AugmentService.apply_augmentations(
            images, cfg, IspConfig(), NoiseParams(), derive_rng(0, i, "augment"))
        for key in counts:
            counts[key] += sample.applied[key]
    assert counts["ia"] / draws == pytest.approx(0.3, abs=0.03)
    assert counts["ca"] / draws == pytest.approx(0.5, abs=0.03)
    assert counts["cutnoise"] / draws == pytest.approx(0.3, abs=0.03)


def test_target_only_sees_illumination(rng):
    images = tuple_images(rng, 24)
    cfg = AugmentConfig(crop_size=16, noise=False, p_ia=0.0, p_ca=1.0, p_cutnoise=1.0)
    sample = AugmentService.apply_augmentations(images, cfg, IspConfig(), NoiseParams(), derive_rng(1, 0, "augment"))
    assert sample.applied == {"ia": False, "ca": True, "cutnoise": True}
    matches = [
        np.array_equal(sample.target, images["s_first"][:, :, t:t + 16, lf:lf + 16])
        for t in range(9) for lf in range(9)
    ]
    assert sum(matches) == 1
    assert sample.cutnoise_mask.shape == (1, 1, 16, 16)


def test_ablations_switch_schemes_and_target(rng):
    images = tuple_images(rng, 16)
    cfg = AugmentConfig(crop_size=16, noise=False, p_ia=1.0, p_ca=1.0, p_cutnoise=1.0)
    flags = ("no-illumination-adjust", "no-color-adjust", "no-cutnoise", "only-long")
    sample = AugmentService.apply_augmentations(
        images, cfg, IspConfig(), NoiseParams(), derive_rng(2, 0, "augment"), flags)
    assert not any(sample.applied.values())
    np.testing.assert_array_equal(sample.target, images["l_last"])
    np.testing.assert_array_equal(sample.short_img, np.clip(images["s"], 0, 1))


def test_augmentation_is_reproducible(rng):
    images = tuple_images(rng, 16)
    cfg = AugmentConfig(crop_size=16)
    a = AugmentService.apply_augmentations(images, cfg, IspConfig(), NoiseParams(), derive_rng(4, 9, "augment"))
    b = AugmentService.apply_augmentations(images, cfg, IspConfig(), NoiseParams(), derive_rng(4, 9, "augment"))
    np.testing.assert_array_equal(a.short_img, b.short_img)
    np.testing.assert_array_equal(a.long_img, b.long_img)


def test_cut_noise_pastes_s_first_when_l_last_is_target(rng):
    images = tuple_images(rng, 16)
    cfg = AugmentConfig(crop_size=16, noise=False, p_ia=0.0, p_ca=0.0, p_cutnoise=1.0)
    sample = AugmentService.apply_augmentations(
        images, cfg, IspConfig(), NoiseParams(), derive_rng(5, 0, "augment"), ("long-short-l_last-gt",))
    assert sample.applied["cutnoise"]
    np.testing.assert_array_equal(sample.target, images["l_last"])
    inside = np.broadcast_to(sample.cutnoise_mask.astype(bool), sample.short_img.shape)
    assert inside.any()
    np.testing.assert_array_equal(sample.short_img[inside], images["s_first"][inside])
    np.testing.assert_array_equal(sample.short_img[~inside], np.clip(images["s"], 0, 1)[~inside])
