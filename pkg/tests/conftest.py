"""
Shared fixtures: seeded generators, a tiny run configuration and procedural videos.
"""
import os

import numpy as np
import pytest

from d2hnet.api.models import RunConfig
from d2hnet.services.synth_service import SynthService
from d2hnet.utils.procedural import moving_scene, write_video

VIDEO_FRAMES = 12
VIDEO_SIZE = 32


def tiny_config_dict(seed: int = 7) -> dict:
    """A configuration small enough to train in a unit test."""
    return {
        "seed": seed,
        "synth": {
            "interp_factor": 2,
            "long_frames": 8,
            "short_frames": 1,
            "gap_frames": 1,
            "exposure_ratio": 8,
            "window_stride": 2,
        },
        "augment": {
            "crop_size": 16,
            "selection_square": 16,
            "samples_per_map": 50,
        },
        "model": {
            "deblur_base_width": 4,
            "enhance_base_width": 4,
            "deblur_resolution": 16,
            "residual_layers": 1,
            "pyramid_levels": 3,
        },
        "train": {
            "deblur_epochs": 1,
            "enhance_epochs": 1,
            "batch_size": 1,
            "steps_per_epoch": 2,
        },
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return RunConfig.model_validate(tiny_config_dict())


@pytest.fixture
def config_file(tmp_path):
    """The tiny configuration written as TOML."""
    cfg = tiny_config_dict()
    lines = [f"seed = {cfg['seed']}"]
    for section in ("synth", "augment", "model", "train"):
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in cfg[section].items())
    path = tmp_path / "run.toml"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture
def video_root(tmp_path):
    """Two procedural videos of VIDEO_FRAMES frames each."""
    root = tmp_path / "videos"
    for index in range(2):
        frames = moving_scene(seed=3, n_frames=VIDEO_FRAMES, height=VIDEO_SIZE, width=VIDEO_SIZE, index=index)
        write_video(str(root / f"v{index}"), frames)
    return str(root)


@pytest.fixture
def dataset(tmp_path, video_root, tiny_cfg):
    out_dir = os.path.join(str(tmp_path), "data")
    return SynthService.build_dataset(
        SynthService.video_dirs(video_root), tiny_cfg.synth, out_dir, seed=tiny_cfg.seed)
