import os

import numpy as np
import pytest
from pydantic import ValidationError

from d2hnet.api.models import SamplingPolicy, SynthConfig
from d2hnet.services.file_service import FileService
from d2hnet.services.synth_service import SynthService
from d2hnet.utils.procedural import moving_scene, translating_dot, write_video

from conftest import VIDEO_FRAMES


def dot_config(**overrides) -> SynthConfig:
    values = dict(interp_factor=1, long_frames=4, short_frames=1, gap_frames=1, exposure_ratio=4)
    values.update(overrides)
    return SynthConfig(**values)


def test_interpolation_keeps_originals_and_length(rng):
    frames = [rng.random((1, 3, 4, 4)).astype(np.float32) for _ in range(3)]
    out = SynthService.interpolate_sequence(frames, 4)
    assert len(out) == (3 - 1) * 4 + 1
    for i, frame in enumerate(frames):
        assert out[4 * i] is frame
    np.testing.assert_allclose(out[2], 0.5 * frames[0] + 0.5 * frames[1], atol=1e-7)


def test_interpolation_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        SynthService.interpolate_sequence([rng.random((1, 3, 2, 2))], 2)
    with pytest.raises(ValueError):
        SynthService.interpolate_sequence([rng.random((1, 3, 2, 2)), rng.random((1, 3, 2, 4))], 2)
    with pytest.raises(ValueError):
        SynthService.interpolate_sequence([rng.random((1, 3, 2, 2))] * 2, 0)


def test_translating_dot_tuple():
    frames = translating_dot(10, 4, 12, row=1, start_col=0)
    tup = SynthService.synthesize_tuple(frames, dot_config(), 0)
    np.testing.assert_allclose(tup.l[0, 0, 1, :4], 0.25)
    assert tup.l[0, 0, 1, 4:].sum() == 0.0
    assert tup.l_last[0, 0, 1, 3] == 1.0
    assert tup.s_first[0, 0, 1, 5] == 1.0
    np.testing.assert_array_equal(tup.s, tup.s_first)
    assert tup.long_indices == (0, 3)
    assert tup.short_indices == (5, 5)


def test_window_must_fit():
    frames = translating_dot(5, 4, 8, row=0, start_col=0)
    with pytest.raises(ValueError):
        SynthService.synthesize_tuple(frames, dot_config(), 0)


def test_exposure_ratio_is_enforced():
    with pytest.raises(ValidationError):
        SynthConfig(long_frames=10, short_frames=2, exposure_ratio=8)
    assert SynthConfig(long_frames=10, short_frames=2, exposure_ratio=None).window_length == 10 + 8 + 2


def test_burst_is_successive_short_exposures():
    frames = translating_dot(16, 2, 16, row=0, start_col=0)
    burst = SynthService.synthesize_burst(frames, dot_config(), 0, count=3)
    assert len(burst) == 3
    for k, image in enumerate(burst):
        assert image[0, 0, 0, 5 + 2 * k] == 1.0


def test_window_starts_stride_jitter_and_cap(rng):
    cfg = dot_config()
    starts = SynthService.window_starts(20, cfg, SamplingPolicy(stride=3), rng)
    assert starts == [0, 3, 6, 9, 12]
    jittered = SynthService.window_starts(20, cfg, SamplingPolicy(stride=3, jitter=2), rng)
    assert all(0 <= s - base <= 2 for s, base in zip(jittered, range(0, 20, 3)))
    assert all(s <= 20 - cfg.window_length for s in jittered)
    assert len(SynthService.window_starts(20, cfg, SamplingPolicy(stride=3, max_windows=2), rng)) == 2


def test_dataset_count_matches_window_oracle(dataset, tiny_cfg):
    synth = tiny_cfg.synth
    n_interp = (VIDEO_FRAMES - 1) * synth.interp_factor + 1
    step = synth.window_stride * synth.interp_factor
    per_video = (n_interp - synth.window_length) // step + 1
    assert len(dataset.train) == 2 * per_video
    assert len(FileService.read_manifest(dataset.manifest_path)) == 2 * per_video
    entry = dataset.train[0]
    for name in ("l", "s", "l_last", "s_first"):
        assert os.path.exists(os.path.join(os.path.dirname(dataset.manifest_path), entry.path(name)))


def test_dataset_is_identical_across_thread_counts(tmp_path, video_root, tiny_cfg):
    dirs = SynthService.video_dirs(video_root)
    a = SynthService.build_dataset(dirs, tiny_cfg.synth, str(tmp_path / "a"), seed=1, threads=1)
    b = SynthService.build_dataset(dirs, tiny_cfg.synth, str(tmp_path / "b"), seed=1, threads=4)
    with open(a.manifest_path, "rb") as fa, open(b.manifest_path, "rb") as fb:
        assert fa.read() == fb.read()
    first = os.path.relpath(a.train[0].path("l"), tmp_path / "a")
    with open(tmp_path / "a" / first, "rb") as fa, open(tmp_path / "b" / first, "rb") as fb:
        assert fa.read() == fb.read()


def test_validation_split(tmp_path, video_root, tiny_cfg):
    synth = tiny_cfg.synth.model_copy(update={"val_fraction": 0.25})
    result = SynthService.build_dataset(SynthService.video_dirs(video_root), synth, str(tmp_path / "d"), seed=1)
    total = len(result.train) + len(result.val)
    assert len(result.val) == round(0.25 * total)
    assert result.val_manifest_path is not None
    assert not {e.tuple_id for e in result.train} & {e.tuple_id for e in result.val}


def test_short_video_is_rejected(tmp_path, tiny_cfg):
    write_video(str(tmp_path / "short"), moving_scene(0, 3, 16, 16))
    with pytest.raises(ValueError):
        SynthService.build_dataset([str(tmp_path / "short")], tiny_cfg.synth, str(tmp_path / "out"))


def test_returned_entries_read_from_any_working_directory(tmp_path, video_root, tiny_cfg, monkeypatch):
    out_dir = tmp_path / "nested" / "data"
    elsewhere = tmp_path / "elsewhere"
    elsewhere.mkdir()
    monkeypatch.chdir(tmp_path)
    result = SynthService.build_dataset(SynthService.video_dirs(video_root), tiny_cfg.synth, "nested/data", seed=1)
    monkeypatch.chdir(elsewhere)
    for entry in result.train + result.val:
        assert os.path.isabs(entry.directory)
        images = FileService.read_tuple(entry)
        assert set(images) >= {"l", "s", "l_last", "s_first"}
    for entry in FileService.read_manifest(str(out_dir / "manifest.tsv")):
        assert os.path.exists(entry.path("l"))
    with open(out_dir / "manifest.tsv") as fh:
        assert str(tmp_path) not in fh.read()


def test_dataset_burst_frames(tmp_path, video_root, tiny_cfg):
    synth = tiny_cfg.synth.model_copy(update={"burst_count": 2})
    result = SynthService.build_dataset(SynthService.video_dirs(video_root), synth, str(tmp_path / "b"),
                                        seed=1, burst=True)
    n_interp = (VIDEO_FRAMES - 1) * synth.interp_factor + 1
    step = synth.window_stride * synth.interp_factor
    assert len(result.train) == 2 * ((n_interp - synth.burst_length) // step + 1)
    entry = result.train[0]
    s = FileService.read_rgb(entry.path("s"))
    burst = [FileService.read_rgb(entry.path(f"burst_{k}")) for k in range(2)]
    np.testing.assert_array_equal(burst[0], s)
    assert not os.path.exists(entry.path("burst_2"))
