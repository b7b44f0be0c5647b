"""
Inverse ISP, RAW-domain sensor noise and forward ISP.

Images are unprocessed to an RGGB mosaic (inverse gamma, inverse white
balance), noise is injected in the signal-referred RAW domain and the
result is processed back to sRGB with the same parameters.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from d2hnet.api.models import IspConfig, IspParams, ManifestEntry, NoiseParams
from d2hnet.services.file_service import D2T_KIND_IMAGE, FileService
from d2hnet.utils.errors import ShapeError
from d2hnet.utils.seeding import derive_rng
from d2hnet.utils.validators import validate_even, validate_range

logger = logging.getLogger(__name__)

RB_KERNEL = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0
G_KERNEL = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4.0


def bayer_masks(height: int, width: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RGGB site masks (R, G, B), each H x W."""
    r = np.zeros((height, width), dtype=bool)
    g = np.zeros((height, width), dtype=bool)
    b = np.zeros((height, width), dtype=bool)
    r[0::2, 0::2] = True
    g[0::2, 1::2] = True
    g[1::2, 0::2] = True
    b[1::2, 1::2] = True
    return r, g, b


@dataclass
class NoisyPair:
    """Noisy long/short images plus the draws that produced them."""
    l_n: np.ndarray
    s_n: np.ndarray
    isp: IspParams
    iso_long: float
    iso_short: float

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter((self.l_n, self.s_n))


class NoiseService:
    """Camera pipeline simulation."""

    @staticmethod
    def sample_isp(cfg: IspConfig, rng: np.random.Generator) -> IspParams:
        wr = float(rng.uniform(*cfg.wr_range))
        wb = float(rng.uniform(*cfg.wb_range))
        return IspParams(gamma=cfg.gamma, wr=wr, wb=wb)

    @staticmethod
    def unprocess(x: np.ndarray, p: IspParams) -> np.ndarray:
        """sRGB N x 3 x H x W -> RGGB RAW N x 1 x H x W."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"unprocess needs N x 3 x H x W input, got {x.shape}")
        validate_even(x.shape[2], x.shape[3], "unprocess")
        lin = np.clip(x.astype(np.float64), 0.0, 1.0) ** p.gamma
        raw = np.empty((x.shape[0], 1) + x.shape[2:], dtype=np.float64)
        raw[:, 0, 0::2, 0::2] = lin[:, 0, 0::2, 0::2] / p.wr
        raw[:, 0, 0::2, 1::2] = lin[:, 1, 0::2, 1::2]
        raw[:, 0, 1::2, 0::2] = lin[:, 1, 1::2, 0::2]
        raw[:, 0, 1::2, 1::2] = lin[:, 2, 1::2, 1::2] / p.wb
        return np.clip(raw, 0.0, 1.0).astype(x.dtype)

    @staticmethod
    def add_noise(raw: np.ndarray, iso: float, params: NoiseParams, rng: np.random.Generator) -> np.ndarray:
        """Shot + read + row + quantization noise at the given ISO, clamped to [0, 1]."""
        validate_range(iso, params.iso_sensor_range, "iso")
        black = params.black_level
        x = black + np.clip(raw.astype(np.float64), 0.0, 1.0) * (1.0 - black)

        k = params.gain(iso)
        if k > 0:
            lam = x / k
            large = lam > params.poisson_normal_threshold
            counts = np.empty_like(lam)
            counts[~large] = rng.poisson(lam[~large])
            counts[large] = lam[large] + np.sqrt(lam[large]) * rng.standard_normal(int(large.sum()))
            y = k * counts
        else:
            y = x.copy()

        sigma_r = params.read_sigma(iso)
        if sigma_r > 0:
            y += rng.normal(0.0, sigma_r, size=y.shape)
        sigma_row = params.row_sigma(iso)
        if sigma_row > 0:
            n, c, h, _ = y.shape
            y += rng.normal(0.0, sigma_row, size=(n, c, h, 1))
        q = params.q
        if q > 0:
            y += rng.uniform(-q / 2, q / 2, size=y.shape)

        y = (y - black) / (1.0 - black)
        return np.clip(y, 0.0, 1.0).astype(raw.dtype)

    @staticmethod
    def process(raw: np.ndarray, p: IspParams) -> np.ndarray:
        """Bilinear demosaic, white balance, gamma; N x 1 x H x W -> N x 3 x H x W."""
        if raw.ndim != 4 or raw.shape[1] != 1:
            raise ShapeError(f"process needs N x 1 x H x W RAW, got {raw.shape}")
        n, _, h, w = raw.shape
        validate_even(h, w, "process")
        plane = raw[:, 0].astype(np.float64)
        masks = bayer_masks(h, w)
        kernels = (RB_KERNEL, G_KERNEL, RB_KERNEL)

        rgb = np.empty((n, 3, h, w), dtype=np.float64)
        for ch, (mask, kernel) in enumerate(zip(masks, kernels)):
            weight = ndimage.correlate(mask.astype(np.float64), kernel, mode="constant")
            for i in range(n):
                values = ndimage.correlate(plane[i] * mask, kernel, mode="constant")
                rgb[i, ch] = np.where(mask, plane[i], values / weight)

        rgb[:, 0] *= p.wr
        rgb[:, 2] *= p.wb
        rgb = np.clip(rgb, 0.0, 1.0) ** (1.0 / p.gamma)
        return np.clip(rgb, 0.0, 1.0).astype(raw.dtype)

    @staticmethod
    def simulate_pair(
        long_img: np.ndarray,
        short_img: np.ndarray,
        isp_cfg: IspConfig,
        params: NoiseParams,
        rng: np.random.Generator,
    ) -> NoisyPair:
        """Noisy (l_n, s_n) with shared white balance and independent ISO draws."""
        isp = NoiseService.sample_isp(isp_cfg, rng)
        iso_l = float(rng.uniform(*params.iso_long_range))
        iso_s = float(rng.uniform(*params.iso_short_range))
        l_n = NoiseService.process(
            NoiseService.add_noise(NoiseService.unprocess(long_img, isp), iso_l, params, rng), isp)
        s_n = NoiseService.process(
            NoiseService.add_noise(NoiseService.unprocess(short_img, isp), iso_s, params, rng), isp)
        return NoisyPair(l_n=l_n, s_n=s_n, isp=isp, iso_long=iso_l, iso_short=iso_s)

    @staticmethod
    def simulate_validation(
        entries: Sequence[ManifestEntry],
        isp_cfg: IspConfig,
        params: NoiseParams,
        seed: int,
        cache_dir: str,
        threads: int = 1,
    ) -> list[tuple[np.ndarray, np.ndarray]]:
        """Seeded noisy inputs for each validation tuple, cached as D2T files."""

        def one(args) -> tuple[np.ndarray, np.ndarray]:
            idx, entry = args
            stem = os.path.join(cache_dir, f"{entry.tuple_id}_{seed}")
            long_path, short_path = f"{stem}_l.d2t", f"{stem}_s.d2t"
            if os.path.exists(long_path) and os.path.exists(short_path):
                return FileService.read_d2t(long_path)[0], FileService.read_d2t(short_path)[0]
            images = FileService.read_tuple(entry)
            pair = NoiseService.simulate_pair(
                images["l"], images["s"], isp_cfg, params, derive_rng(seed, idx, "validation"))
            FileService.write_d2t(long_path, pair.l_n, D2T_KIND_IMAGE)
            FileService.write_d2t(short_path, pair.s_n, D2T_KIND_IMAGE)
            return pair.l_n, pair.s_n

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            pairs = list(pool.map(one, enumerate(entries)))
        logger.info(f"Validation noise ready for {len(pairs)} tuple(s) in {cache_dir}")
        return pairs
