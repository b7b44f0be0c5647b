"""
Image-quality metrics, validation runs and the ablation harness.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from d2hnet import config
from d2hnet.api.models import EvalReport, EvalRow, ManifestEntry, RunConfig
from d2hnet.nn.deblurnet import DeblurNet
from d2hnet.nn.enhancenet import EnhanceNet
from d2hnet.nn.pipeline import two_phase_infer
from d2hnet.services.augment_service import AugmentService
from d2hnet.services.file_service import FileService
from d2hnet.services.noise_service import NoiseService
from d2hnet.services.train_service import TrainService
from d2hnet.utils.errors import ShapeError
from d2hnet.utils.validators import validate_same_shape

logger = logging.getLogger(__name__)

SSIM_RADIUS = config.SSIM_WINDOW // 2
# gaussian_filter radius is int(truncate * sigma + 0.5), i.e. 5 for sigma 1.5
SSIM_TRUNCATE = 3.5

REPORT_COLUMNS = ("tuple_id", "upscale", "stage", "psnr", "ssim", "psnr_input")


def psnr(x: np.ndarray, y: np.ndarray, peak: float = config.PSNR_PEAK) -> float:
    """10 log10(peak^2 / MSE); ``inf`` when the images are identical."""
    validate_same_shape(x.shape, y.shape, "psnr")
    mse = float(np.mean((x.astype(np.float64) - y.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(x: np.ndarray, y: np.ndarray, peak: float = config.PSNR_PEAK) -> float:
    """Mean local SSIM with an 11x11 Gaussian window, per channel then averaged.

    Statistics are only taken where the whole window lies inside the image.
    """
    validate_same_shape(x.shape, y.shape, "ssim")
    h, w = x.shape[-2:]
    if h < config.SSIM_WINDOW or w < config.SSIM_WINDOW:
        raise ShapeError(f"ssim needs images of at least {config.SSIM_WINDOW}x{config.SSIM_WINDOW}, got {h}x{w}")
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    sigma = (0,) * (x.ndim - 2) + (config.SSIM_SIGMA, config.SSIM_SIGMA)

    def blur(v: np.ndarray) -> np.ndarray:
        out = ndimage.gaussian_filter(v, sigma=sigma, truncate=SSIM_TRUNCATE, mode="constant")
        r = SSIM_RADIUS
        return out[..., r:h - r, r:w - r]

    c1 = (config.SSIM_K1 * peak) ** 2
    c2 = (config.SSIM_K2 * peak) ** 2
    ux, uy = blur(x), blur(y)
    vx = blur(x * x) - ux * ux
    vy = blur(y * y) - uy * uy
    vxy = blur(x * y) - ux * uy
    num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    per_channel = (num / den).reshape(-1, *num.shape[-2:]).mean(axis=(1, 2))
    return float(per_channel.mean())


def upscale_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


class EvalService:
    """Runs validation and tabulates metrics."""

    @staticmethod
    def evaluate(
        entries: Sequence[ManifestEntry],
        deblur: DeblurNet,
        enhance: Optional[EnhanceNet],
        cfg: RunConfig,
        cache_dir: str,
        manifest_hash: str = "",
        threads: int = 1,
        setting: str = "full",
        warnings: Sequence[str] = (),
    ) -> EvalReport:
        """Two-phase inference on every validation tuple, scored against s_first."""
        if not entries:
            raise ValueError("validation manifest is empty")
        noisy = NoiseService.simulate_validation(
            entries, cfg.isp, cfg.noise, cfg.seed, cache_dir, threads)
        stage = "deblur" if enhance is None else "two-phase"
        peak = cfg.eval.psnr_peak

        def score(job) -> EvalRow:
            entry, (long_n, short_n), factor = job
            z = upscale_nearest(FileService.read_tuple(entry)["s_first"], factor)
            long_n = upscale_nearest(long_n, factor)
            short_n = upscale_nearest(short_n, factor)
            result = two_phase_infer(long_n, short_n, deblur, enhance, cfg.model, clamp=cfg.eval.clamp)
            return EvalRow(
                tuple_id=entry.tuple_id,
                upscale=factor,
                psnr=psnr(result.y, z, peak),
                ssim=ssim(result.y, z, peak),
                psnr_input=psnr(short_n, z, peak),
                stage=stage,
            )

        jobs = [(entry, pair, factor)
                for factor in cfg.eval.upscale_factors
                for entry, pair in zip(entries, noisy)]
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            rows = list(pool.map(score, jobs))

        for row in rows:
            if row.psnr_infinite:
                logger.warning(f"{row.tuple_id} x{row.upscale}: output identical to ground truth, PSNR is infinite")
        report = EvalReport(
            setting=setting,
            rows=rows,
            mean_psnr=float(np.mean([r.psnr for r in rows])),
            mean_ssim=float(np.mean([r.ssim for r in rows])),
            mean_psnr_input=float(np.mean([r.psnr_input for r in rows])),
            stage2_present=enhance is not None,
            fingerprint=cfg.fingerprint(),
            model_fingerprint=cfg.model_fingerprint(),
            manifest_hash=manifest_hash,
            warnings=list(warnings),
        )
        logger.info(
            f"[{setting}] {len(rows)} row(s): PSNR {report.mean_psnr:.3f} dB, "
            f"SSIM {report.mean_ssim:.4f} (noisy input {report.mean_psnr_input:.3f} dB)"
        )
        return report

    @staticmethod
    def render_tsv(report: EvalReport) -> str:
        """Tab-separated report: '#' header lines, one row per tuple, then the means."""
        lines = [
            f"#setting\t{report.setting}",
            f"#fingerprint\t{report.fingerprint}",
            f"#model_fingerprint\t{report.model_fingerprint}",
            f"#manifest_hash\t{report.manifest_hash}",
            f"#metric_domain\t{report.metric_domain}",
            f"#stage2_present\t{str(report.stage2_present).lower()}",
        ]
        lines.extend(f"#warning\t{w}" for w in report.warnings)
        lines.append("#" + "\t".join(REPORT_COLUMNS))
        for row in report.rows:
            lines.append("\t".join([
                row.tuple_id, str(row.upscale), row.stage,
                _fmt(row.psnr), _fmt(row.ssim), _fmt(row.psnr_input),
            ]))
        lines.append("\t".join([
            "mean", "-", "-", _fmt(report.mean_psnr), _fmt(report.mean_ssim), _fmt(report.mean_psnr_input),
        ]))
        return "\n".join(lines) + "\n"

    @staticmethod
    def write_report(file_path: str, report: EvalReport) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(file_path)), exist_ok=True)
        with open(file_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(EvalService.render_tsv(report))

    @staticmethod
    def summary_table(reports: Sequence[EvalReport]) -> str:
        """Fixed-width table of the mean metrics, one line per setting."""
        width = max([len("setting")] + [len(r.setting) for r in reports])
        lines = [f"{'setting':<{width}}  {'PSNR':>9}  {'SSIM':>7}  {'input':>9}  stage2"]
        for r in reports:
            stage2 = "yes" if r.stage2_present else "absent"
            lines.append(
                f"{r.setting:<{width}}  {r.mean_psnr:9.3f}  {r.mean_ssim:7.4f}  "
                f"{r.mean_psnr_input:9.3f}  {stage2}"
            )
        return "\n".join(lines)

    @staticmethod
    def selection_manifest(entries: Sequence[ManifestEntry], cfg: RunConfig, threads: int = 1) -> list[ManifestEntry]:
        """Training manifest extended with the VarmapSelection squares."""
        def one(entry: ManifestEntry) -> np.ndarray:
            images = FileService.read_tuple(entry)
            return AugmentService.variance_map(images["l"], images["l_last"], cfg.augment.varmap_window)

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            maps = list(pool.map(one, entries))
        selection = AugmentService.select_blurry_patches(maps, cfg.augment, cfg.seed)
        return AugmentService.augment_manifest(entries, selection)

    @staticmethod
    def run_ablation(
        settings: Sequence[tuple[str, Sequence[str]]],
        train_entries: Sequence[ManifestEntry],
        val_entries: Sequence[ManifestEntry],
        cfg: RunConfig,
        out_dir: str,
        manifest_hash: str = "",
        threads: int = 1,
    ) -> list[EvalReport]:
        """Retrain both stages under each flag set and evaluate on shared validation noise."""
        if not settings:
            raise ValueError("no ablation settings given")
        reports = []
        cache_dir = os.path.join(out_dir, "validation_cache")
        for name, flags in settings:
            run_cfg = cfg.with_overrides(ablations=tuple(flags))
            run_dir = os.path.join(out_dir, name)
            logger.info(f"Ablation '{name}': flags {list(run_cfg.model.ablations) or ['none']}")

            entries = list(train_entries)
            if not run_cfg.model.has("no-varmap-selection"):
                entries = EvalService.selection_manifest(entries, run_cfg, threads)

            trainer = TrainService(run_cfg, threads)
            deblur_result = trainer.train_stage(entries, "deblur", run_dir)
            enhance_path = None
            if not run_cfg.model.has("deblur-only"):
                enhance_path = trainer.train_stage(
                    entries, "enhance", run_dir, deblur_checkpoint=deblur_result.checkpoint_path
                ).checkpoint_path
            deblur, enhance, warnings = trainer.load_models(deblur_result.checkpoint_path, enhance_path)

            report = EvalService.evaluate(
                val_entries, deblur, enhance, run_cfg, cache_dir,
                manifest_hash=manifest_hash, threads=threads, setting=name, warnings=warnings,
            )
            EvalService.write_report(os.path.join(run_dir, config.REPORT_NAME), report)
            reports.append(report)
        return reports
