"""
Training-data schemes: variance maps and blurry-patch selection, appearance
adjustment, CutNoise and the seeded augmentation pipeline.
"""
import logging
from dataclasses import dataclass, field
from typing import Collection, Optional, Sequence

import numpy as np

from d2hnet import config
from d2hnet.api.models import AugmentConfig, IspConfig, ManifestEntry, NoiseParams
from d2hnet.services.noise_service import NoiseService
from d2hnet.utils.errors import ShapeError
from d2hnet.utils.seeding import derive_rng
from d2hnet.utils.validators import validate_divisible, validate_same_shape

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Square:
    tuple_index: int
    top: int
    left: int
    side: int
    mean: float


@dataclass
class SelectionResult:
    """Both sampling passes, the pooled threshold and the kept squares."""
    threshold: float
    first_pass: list[Square] = field(default_factory=list)
    second_pass: list[Square] = field(default_factory=list)
    selected: list[Square] = field(default_factory=list)
    degenerate: bool = False


@dataclass
class TrainingSample:
    long_img: np.ndarray
    short_img: np.ndarray
    target: np.ndarray
    applied: dict[str, bool] = field(default_factory=dict)
    cutnoise_mask: Optional[np.ndarray] = None


def luminance(x: np.ndarray) -> np.ndarray:
    """0.299 R + 0.587 G + 0.114 B, keeping a singleton channel axis."""
    if x.shape[1] != 3:
        raise ShapeError(f"luminance needs 3 channels, got {x.shape[1]}")
    w = np.asarray(config.LUMA_WEIGHTS, dtype=np.float64)
    return np.tensordot(w, x.astype(np.float64), axes=([0], [1]))[:, None]


def _cell_variance(lum: np.ndarray, k: int) -> np.ndarray:
    n, _, h, w = lum.shape
    cells = lum.reshape(n, 1, h // k, k, w // k, k)
    return cells.var(axis=(3, 5))


def _square_means(values: np.ndarray, tops: np.ndarray, lefts: np.ndarray, side: int) -> np.ndarray:
    sat = np.zeros((values.shape[0] + 1, values.shape[1] + 1), dtype=np.float64)
    sat[1:, 1:] = values.astype(np.float64).cumsum(axis=0).cumsum(axis=1)
    total = (sat[tops + side, lefts + side] - sat[tops, lefts + side]
             - sat[tops + side, lefts] + sat[tops, lefts])
    return total / (side * side)


class AugmentService:
    """Data schemes applied before training."""

    @staticmethod
    def variance_map(long_img: np.ndarray, long_last: np.ndarray, k: int = config.VARMAP_WINDOW) -> np.ndarray:
        """Per k x k cell min(Var(l) / max(Var(l_last), eps), 1), nearest-upsampled."""
        validate_same_shape(long_img.shape, long_last.shape, "variance_map")
        validate_divisible(long_img.shape[2], long_img.shape[3], k, "variance_map")
        var_l = _cell_variance(luminance(long_img), k)
        var_last = _cell_variance(luminance(long_last), k)
        ratio = np.minimum(var_l / np.maximum(var_last, config.VARMAP_EPSILON), 1.0)
        full = np.repeat(np.repeat(ratio, k, axis=2), k, axis=3)
        return full.astype(np.float32)

    @staticmethod
    def select_blurry_patches(
        maps: Sequence[np.ndarray],
        cfg: AugmentConfig,
        seed: int,
        side: Optional[int] = None,
    ) -> SelectionResult:
        """Percentile-threshold selection of the blurriest squares.

        Squares are sampled per map and their mean map value pooled over the
        whole dataset; the threshold is the configured percentile of that
        pool. A second, independent sample per map keeps only squares whose
        mean lies strictly below the threshold.
        """
        side = cfg.selection_square if side is None else side
        if not maps:
            raise ValueError("select_blurry_patches needs at least one variance map")
        rngs = []
        for i, vmap in enumerate(maps):
            h, w = vmap.shape[-2:]
            if side > min(h, w):
                raise ShapeError(f"selection square {side} is larger than variance map {i} ({h}x{w})")
            rngs.append(derive_rng(seed, i, "select"))

        def sample(i: int, vmap: np.ndarray) -> list[Square]:
            values = vmap.reshape(vmap.shape[-2:])
            h, w = values.shape
            tops = rngs[i].integers(0, h - side + 1, size=cfg.samples_per_map)
            lefts = rngs[i].integers(0, w - side + 1, size=cfg.samples_per_map)
            means = _square_means(values, tops, lefts, side)
            return [Square(i, int(t), int(lf), side, float(m)) for t, lf, m in zip(tops, lefts, means)]

        first = [sq for i, vmap in enumerate(maps) for sq in sample(i, vmap)]
        pooled = np.array([sq.mean for sq in first])
        threshold = float(np.percentile(pooled, cfg.selection_percentile))
        second = [sq for i, vmap in enumerate(maps) for sq in sample(i, vmap)]
        selected = [sq for sq in second if sq.mean < threshold]

        degenerate = bool(np.ptp(pooled) == 0.0) or not selected
        if degenerate:
            logger.warning(
                f"Degenerate blur distribution: threshold {threshold:.6f}, "
                f"{len(selected)} of {len(second)} squares below it"
            )
        logger.info(f"Selected {len(selected)} blurry squares (threshold {threshold:.6f})")
        return SelectionResult(threshold=threshold, first_pass=first, second_pass=second,
                               selected=selected, degenerate=degenerate)

    @staticmethod
    def augment_manifest(entries: Sequence[ManifestEntry], selection: SelectionResult) -> list[ManifestEntry]:
        """Original entries followed by one cropped entry per selected square."""
        out = list(entries)
        for j, sq in enumerate(selection.selected):
            base = entries[sq.tuple_index]
            out.append(base.model_copy(update={
                "tuple_id": f"{base.tuple_id}#sel{j:05d}",
                "crop": (sq.top, sq.left, sq.side),
            }))
        return out

    @staticmethod
    def illumination_adjust(images: dict[str, np.ndarray], g: float) -> dict[str, np.ndarray]:
        """u -> max(u, eps)^g on every image."""
        return {
            name: (np.maximum(img, config.IA_EPSILON) ** g).astype(img.dtype)
            for name, img in images.items()
        }

    @staticmethod
    def color_adjust(short_img: np.ndarray, a: float, b: float) -> np.ndarray:
        """a * s + b, not clamped."""
        return (a * short_img + b).astype(short_img.dtype)

    @staticmethod
    def cut_noise(
        short_noisy: np.ndarray,
        short_first: np.ndarray,
        side: int,
        rng: np.random.Generator,
        position: Optional[tuple[int, int]] = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Paste one side x side ground-truth square into the noisy short image.

        Returns the composed image and the N x 1 x H x W mask used.
        """
        validate_same_shape(short_noisy.shape, short_first.shape, "cut_noise")
        n, _, h, w = short_noisy.shape
        mask = np.zeros((n, 1, h, w), dtype=short_noisy.dtype)
        if side == 0:
            return short_noisy.copy(), mask
        if side < 0 or side > min(h, w):
            raise ShapeError(f"CutNoise side {side} does not fit {h}x{w}")
        if position is None:
            top = int(rng.integers(0, h - side + 1))
            left = int(rng.integers(0, w - side + 1))
        else:
            top, left = position
            if not (0 <= top <= h - side and 0 <= left <= w - side):
                raise ShapeError(f"CutNoise square at {position} leaves the image")
        mask[:, :, top:top + side, left:left + side] = 1
        return np.where(mask.astype(bool), short_first, short_noisy), mask

    @staticmethod
    def random_crop(images: dict[str, np.ndarray], size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        h, w = next(iter(images.values())).shape[2:]
        if size > min(h, w):
            raise ShapeError(f"crop size {size} exceeds image {h}x{w}")
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        return {k: v[:, :, top:top + size, left:left + size].copy() for k, v in images.items()}

    @staticmethod
    def apply_augmentations(
        images: dict[str, np.ndarray],
        cfg: AugmentConfig,
        isp_cfg: IspConfig,
        noise: NoiseParams,
        rng: np.random.Generator,
        ablations: Collection[str] = (),
    ) -> TrainingSample:
        """crop -> illumination -> color (short only) -> noise -> CutNoise.

        The target only ever receives the illumination adjustment. CutNoise
        pastes the s_first crop whichever frame is the target.
        """
        gates = rng.random(3)
        crop = AugmentService.random_crop(images, cfg.crop_size, rng)
        target_key = "l_last" if ("only-long" in ablations or "long-short-l_last-gt" in ablations) else "s_first"
        work = {"l": crop["l"], "s": crop["s"], "z": crop[target_key], "s_first": crop["s_first"]}
        applied = {"ia": False, "ca": False, "cutnoise": False}

        if gates[0] < cfg.p_ia and "no-illumination-adjust" not in ablations:
            g = float(rng.choice(cfg.ia_gammas))
            work = AugmentService.illumination_adjust(work, g)
            applied["ia"] = True

        if gates[1] < cfg.p_ca and "no-color-adjust" not in ablations:
            a = float(rng.uniform(*cfg.ca_a_range))
            b = float(rng.uniform(*cfg.ca_b_range))
            work["s"] = AugmentService.color_adjust(work["s"], a, b)
            applied["ca"] = True

        if cfg.noise:
            long_n, short_n = NoiseService.simulate_pair(work["l"], work["s"], isp_cfg, noise, rng)
        else:
            long_n = np.clip(work["l"], 0.0, 1.0)
            short_n = np.clip(work["s"], 0.0, 1.0)

        mask = None
        side = cfg.cutnoise_side
        if gates[2] < cfg.p_cutnoise and side > 0 and "no-cutnoise" not in ablations:
            short_n, mask = AugmentService.cut_noise(short_n, work["s_first"], side, rng)
            applied["cutnoise"] = True

        return TrainingSample(long_img=long_n, short_img=short_n, target=work["z"],
                              applied=applied, cutnoise_mask=mask)
