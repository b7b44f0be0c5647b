"""
Two-phase workflow: model construction, training losses and inference.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from d2hnet.api.models import ModelConfig
from d2hnet.core.ops import area_resize, avg_pool, bilinear_resize, l1_loss
from d2hnet.core.tensor import GradNode, no_grad, value_of
from d2hnet.nn.deblurnet import DeblurNet
from d2hnet.nn.enhancenet import EnhanceNet
from d2hnet.utils.errors import ShapeError
from d2hnet.utils.seeding import derive_rng
from d2hnet.utils.validators import validate_divisible, validate_same_shape

logger = logging.getLogger(__name__)


def build_deblurnet(cfg: ModelConfig, seed: int, dtype=np.float32) -> DeblurNet:
    rng = derive_rng(seed, 0, "init")
    return DeblurNet(rng, cfg.deblur_base_width, cfg.residual_layers, cfg.leaky_slope, dtype)


def build_enhancenet(cfg: ModelConfig, seed: int, dtype=np.float32) -> Optional[EnhanceNet]:
    """None under the deblur-only setting."""
    if cfg.has("deblur-only"):
        return None
    rng = derive_rng(seed, 1, "init")
    return EnhanceNet(
        rng,
        base=cfg.enhance_base_width,
        levels=cfg.pyramid_levels,
        residual_layers=cfg.residual_layers,
        slope=cfg.leaky_slope,
        dense_alignment=cfg.has("dense-alignment"),
        skip_fusion=not cfg.has("no-skip-fusion"),
        tail_block=not cfg.has("no-tail-block"),
        dtype=dtype,
    )


def train_downsample(cfg: ModelConfig) -> int:
    """Pooling factor between the training crop and DeblurNet's input."""
    return 1 if cfg.has("no-deblur-downsample") else cfg.train_downsample


def mask_inputs(long_img: np.ndarray, short_img: np.ndarray, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Replace the input an ablation drops with a zero image."""
    if cfg.has("only-long"):
        short_img = np.zeros_like(short_img)
    if cfg.has("only-short"):
        long_img = np.zeros_like(long_img)
    return long_img, short_img


def loss_deblur(t: GradNode, z: np.ndarray, factor: int = 2) -> GradNode:
    """L1 between t and the average-pooled ground truth."""
    z_down = avg_pool(value_of(z), factor)
    return l1_loss(t, z_down)


def loss_enhance(y: GradNode, z: np.ndarray) -> GradNode:
    return l1_loss(y, z)


def deblur_forward_train(deblur: DeblurNet, long_img: np.ndarray, short_img: np.ndarray, factor: int) -> GradNode:
    return deblur(avg_pool(long_img, factor), avg_pool(short_img, factor))


def upsampled_deblur(deblur: DeblurNet, long_img: np.ndarray, short_img: np.ndarray, factor: int) -> np.ndarray:
    """Frozen DeblurNet output brought back to the input extents."""
    h, w = long_img.shape[2:]
    with no_grad():
        t = deblur_forward_train(deblur, long_img, short_img, factor)
        return bilinear_resize(t, h, w).value


@dataclass
class InferenceResult:
    y: np.ndarray
    t: np.ndarray
    t_up: np.ndarray


def two_phase_infer(
    long_img: np.ndarray,
    short_img: np.ndarray,
    deblur: DeblurNet,
    enhance: Optional[EnhanceNet],
    cfg: ModelConfig,
    clamp: bool = True,
) -> InferenceResult:
    """Area-resize to R x R, deblur, upsample t, enhance at full resolution."""
    validate_same_shape(long_img.shape, short_img.shape, "inference inputs")
    long_img, short_img = mask_inputs(long_img, short_img, cfg)
    n, c, h, w = long_img.shape
    r = cfg.deblur_resolution

    with no_grad():
        if cfg.has("no-deblur-downsample"):
            validate_divisible(h, w, DeblurNet.DIVISOR, "inference input")
            long_r, short_r = long_img, short_img
        else:
            if h < r or w < r:
                raise ShapeError(
                    f"input {h}x{w} is smaller than the deblur resolution {r}; lower model.deblur_resolution"
                )
            long_r = area_resize(long_img, r, r)
            short_r = area_resize(short_img, r, r)
        t = deblur(long_r, short_r)
        t_up = bilinear_resize(t, h, w).value

        if enhance is None:
            y = t_up
        else:
            validate_divisible(h, w, enhance.divisor, "inference input")
            y = enhance(short_img, long_img, t_up).value

    if clamp:
        y = np.clip(y, 0.0, 1.0)
        t_value = np.clip(t.value, 0.0, 1.0)
    else:
        t_value = t.value
    return InferenceResult(y=y, t=t_value, t_up=t_up)
