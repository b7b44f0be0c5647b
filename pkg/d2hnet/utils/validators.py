"""
Input validation utilities for tensors, images and pipeline parameters.
"""
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from d2hnet.utils.errors import ShapeError

ALLOWED_IMAGE_EXTENSIONS = {'.png'}


def validate_image_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate an N x C x H x W real array with finite values."""
    if not isinstance(x, np.ndarray):
        raise ShapeError(f"{name} must be a numpy array, got {type(x).__name__}")

    if x.ndim != 4:
        raise ShapeError(f"{name} must have 4 extents (N, C, H, W), got shape {x.shape}")

    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty extent: {x.shape}")

    if x.dtype not in (np.float32, np.float64):
        raise ShapeError(f"{name} must be float32 or float64, got {x.dtype}")

    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")

    return x


def validate_same_shape(a: Sequence[int], b: Sequence[int], what: str) -> None:
    """Reject mismatched shapes instead of broadcasting."""
    if tuple(a) != tuple(b):
        raise ShapeError(f"{what}: shape mismatch {tuple(a)} vs {tuple(b)}")


def validate_divisible(height: int, width: int, factor: int, what: str) -> None:
    """Require spatial extents divisible by factor."""
    if factor < 1:
        raise ValueError(f"{what}: factor must be >= 1, got {factor}")

    if height % factor or width % factor:
        raise ShapeError(
            f"{what}: extents {height}x{width} must be divisible by {factor}"
        )


def validate_even(height: int, width: int, what: str) -> None:
    """Require even spatial extents (Bayer planes, Haar blocks)."""
    if height % 2 or width % 2:
        raise ShapeError(f"{what}: odd spatial extent {height}x{width}")


def validate_range(value: float, bounds: Sequence[float], name: str) -> float:
    """Validate value lies within the closed interval bounds."""
    low, high = bounds
    if value < low or value > high:
        raise ValueError(f"{name} must be between {low} and {high}, got {value}")

    return float(value)


def validate_image_file(file_path: str) -> bool:
    """Validate an input image path before decoding."""
    if not os.path.exists(file_path):
        raise FileNotFoundError(f"Image file not found: {file_path}")

    file_ext = Path(file_path).suffix.lower()
    if file_ext not in ALLOWED_IMAGE_EXTENSIONS:
        raise ValueError(
            f"File type not allowed. Allowed types: {', '.join(sorted(ALLOWED_IMAGE_EXTENSIONS))}"
        )

    return True
