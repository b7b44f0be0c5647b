"""
Procedural test videos: moving rectangles and dots over smooth gradients.
"""
import os
from pathlib import Path

import numpy as np

from d2hnet.services.file_service import FileService
from d2hnet.utils.seeding import derive_rng


def gradient_background(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-channel linear ramps, 1 x 3 x H x W in [0.1, 0.9]."""
    yy = np.linspace(0.0, 1.0, height)[:, None]
    xx = np.linspace(0.0, 1.0, width)[None, :]
    channels = []
    for _ in range(3):
        a, b, c = rng.uniform(-0.4, 0.4, size=3)
        ramp = 0.5 + a * (yy - 0.5) + b * (xx - 0.5) + 0.1 * c
        channels.append(np.clip(ramp, 0.1, 0.9))
    return np.stack(channels)[None].astype(np.float32)


def moving_scene(
    seed: int,
    n_frames: int,
    height: int = 64,
    width: int = 64,
    shapes: int = 3,
    max_speed: float = 2.0,
    index: int = 0,
) -> list[np.ndarray]:
    """A video of axis-aligned rectangles and small dots drifting at constant velocity.

    Positions wrap around the frame so objects never leave the view.
    """
    rng = derive_rng(seed, index, "synth")
    background = gradient_background(height, width, rng)
    objects = []
    for k in range(shapes):
        side_h = int(rng.integers(3, max(4, height // 4)))
        side_w = int(rng.integers(3, max(4, width // 4)))
        if k % 2:
            side_h = side_w = 2
        objects.append({
            "pos": rng.uniform(0, [height, width]),
            "vel": rng.uniform(-max_speed, max_speed, size=2),
            "size": (side_h, side_w),
            "color": rng.uniform(0.0, 1.0, size=3).astype(np.float32),
        })

    frames = []
    for t in range(n_frames):
        frame = background.copy()
        for obj in objects:
            top, left = np.floor(obj["pos"] + t * obj["vel"]).astype(int)
            rows = (np.arange(obj["size"][0]) + top) % height
            cols = (np.arange(obj["size"][1]) + left) % width
            frame[0][:, rows[:, None], cols[None, :]] = obj["color"][:, None, None]
        frames.append(frame)
    return frames


def translating_dot(n_frames: int, height: int, width: int, row: int, start_col: int,
                    step: int = 1) -> list[np.ndarray]:
    """Single white pixel moving right by ``step`` per frame on black."""
    frames = []
    for t in range(n_frames):
        frame = np.zeros((1, 3, height, width), dtype=np.float32)
        col = start_col + t * step
        if 0 <= col < width:
            frame[0, :, row, col] = 1.0
        frames.append(frame)
    return frames


def write_video(directory: str, frames: list[np.ndarray]) -> list[str]:
    """Write frames as numbered PNGs; returns the paths."""
    Path(directory).mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        path = os.path.join(directory, f"frame_{i:05d}.png")
        FileService.write_png(path, frame)
        paths.append(path)
    return paths
