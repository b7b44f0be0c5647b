"""
Two-stage training: DeblurNet first, then EnhanceNet on a frozen DeblurNet.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from d2hnet import config
from d2hnet.api.models import ManifestEntry, RunConfig
from d2hnet.core.optim import Adam
from d2hnet.nn.deblurnet import DeblurNet
from d2hnet.nn.enhancenet import EnhanceNet
from d2hnet.nn.layers import Module
from d2hnet.nn.pipeline import (
    build_deblurnet,
    build_enhancenet,
    deblur_forward_train,
    loss_deblur,
    loss_enhance,
    mask_inputs,
    train_downsample,
    upsampled_deblur,
)
from d2hnet.services.augment_service import AugmentService, TrainingSample
from d2hnet.services.file_service import FileService
from d2hnet.utils.errors import InvariantError, ShapeError
from d2hnet.utils.seeding import derive_rng

logger = logging.getLogger(__name__)

STAGES = ("deblur", "enhance")


@dataclass
class TrainResult:
    stage: str
    checkpoint_path: str
    loss_log_path: str
    losses: list[float] = field(default_factory=list)


def checkpoint_name(stage: str) -> str:
    return f"{stage}.d2ck"


def smoothed(losses: Sequence[float], window: int, tail: bool = True) -> float:
    """Mean of the last (or first) ``window`` losses."""
    if not losses:
        raise ValueError("no losses recorded")
    part = losses[-window:] if tail else losses[:window]
    return float(np.mean(part))


class TrainService:
    """Runs one training stage and persists its checkpoint and loss log."""

    def __init__(self, cfg: RunConfig, threads: int = 1):
        self.cfg = cfg
        self.threads = max(1, threads)

    def meta(self, stage: str) -> dict[str, str]:
        return {
            "fingerprint": self.cfg.fingerprint(),
            "model_fingerprint": self.cfg.model_fingerprint(),
            "stage": stage,
            "seed": str(self.cfg.seed),
        }

    def save(self, path: str, stage: str, module: Module, optimizer: Optional[Adam] = None) -> None:
        tensors = module.state_dict(prefix=f"{stage}.")
        meta = self.meta(stage)
        if optimizer is not None:
            state = optimizer.state_dict()
            # payloads are float32; the step count goes to metadata exactly
            meta["optim_step"] = str(int(state.pop("optim/step")[0]))
            tensors.update({f"{stage}.{k}": v for k, v in state.items()})
        FileService.save_checkpoint(path, tensors, meta)

    def load_into(self, path: str, stage: str, module: Module) -> dict[str, str]:
        """Load parameters of ``stage`` into ``module``; returns the checkpoint metadata."""
        ckpt = FileService.load_checkpoint(path)
        if ckpt.meta.get("stage", stage) != stage:
            raise ValueError(f"{path} is a {ckpt.meta.get('stage')} checkpoint, expected {stage}")
        module.load_state_dict(ckpt.tensors, prefix=f"{stage}.")
        if ckpt.meta.get("model_fingerprint") not in (None, self.cfg.model_fingerprint()):
            logger.warning(
                f"{path}: model fingerprint {ckpt.meta.get('model_fingerprint')} "
                f"differs from config {self.cfg.model_fingerprint()}"
            )
        return ckpt.meta

    def load_models(self, deblur_path: str, enhance_path: Optional[str]) -> tuple[DeblurNet, Optional[EnhanceNet], list[str]]:
        """Models for evaluation/inference plus fingerprint warnings."""
        warnings = []
        deblur = build_deblurnet(self.cfg.model, self.cfg.seed)
        meta = self.load_into(deblur_path, "deblur", deblur)
        if meta.get("fingerprint") not in (None, self.cfg.fingerprint()):
            warnings.append(f"deblur checkpoint fingerprint {meta['fingerprint']} != config {self.cfg.fingerprint()}")
        enhance = build_enhancenet(self.cfg.model, self.cfg.seed)
        if enhance is not None:
            if enhance_path is None:
                raise ValueError("an enhance checkpoint is required unless the deblur-only setting is active")
            meta = self.load_into(enhance_path, "enhance", enhance)
            if meta.get("fingerprint") not in (None, self.cfg.fingerprint()):
                warnings.append(
                    f"enhance checkpoint fingerprint {meta['fingerprint']} != config {self.cfg.fingerprint()}")
        return deblur, enhance, warnings

    def _check_crop(self) -> None:
        size = self.cfg.augment.crop_size
        factor = train_downsample(self.cfg.model)
        divisor = math.lcm(factor * DeblurNet.DIVISOR, self.cfg.model.enhance_divisor)
        if size % divisor:
            raise ShapeError(f"augment.crop_size {size} must be divisible by {divisor}")

    def make_sample(self, images: dict[str, np.ndarray], counter: int) -> TrainingSample:
        rng = derive_rng(self.cfg.seed, counter, "augment")
        return AugmentService.apply_augmentations(
            images, self.cfg.augment, self.cfg.isp, self.cfg.noise, rng, self.cfg.model.ablations)

    def train_stage(
        self,
        entries: Sequence[ManifestEntry],
        stage: str,
        out_dir: str,
        deblur_checkpoint: Optional[str] = None,
    ) -> TrainResult:
        """Train one stage; deterministic for a fixed seed and any thread count."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage '{stage}'")
        if not entries:
            raise ValueError("training manifest is empty")
        self._check_crop()
        schedule = self.cfg.train
        model_cfg = self.cfg.model
        factor = train_downsample(model_cfg)

        deblur = build_deblurnet(model_cfg, self.cfg.seed)
        enhance: Optional[EnhanceNet] = None
        if stage == "deblur":
            trained: Module = deblur
        else:
            if deblur_checkpoint is None or not os.path.exists(deblur_checkpoint):
                raise ValueError(
                    f"enhance stage needs a trained DeblurNet checkpoint (got {deblur_checkpoint}); run train-deblur first"
                )
            self.load_into(deblur_checkpoint, "deblur", deblur)
            enhance = build_enhancenet(model_cfg, self.cfg.seed)
            if enhance is None:
                raise ValueError("the deblur-only setting has no enhance stage")
            trained = enhance

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            tuples = list(pool.map(FileService.read_tuple, entries))

        optimizer = Adam(trained.parameters(), schedule.beta1, schedule.beta2, schedule.eps)
        steps = schedule.steps_per_epoch or math.ceil(len(tuples) / schedule.batch_size)
        epochs = schedule.epochs(stage)
        logger.info(
            f"Training {stage}: {trained.parameter_count()} parameters, {epochs} epoch(s) x {steps} step(s), "
            f"{len(tuples)} tuple(s)"
        )

        losses: list[float] = []
        counter = 0
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            for epoch in range(epochs):
                lr = schedule.lr_at(stage, epoch)
                order = derive_rng(self.cfg.seed, epoch, "order").permutation(len(tuples))
                cursor = 0
                for step in range(steps):
                    jobs = []
                    for _ in range(schedule.batch_size):
                        jobs.append((tuples[order[cursor % len(order)]], counter))
                        cursor += 1
                        counter += 1
                    samples = list(pool.map(lambda job: self.make_sample(*job), jobs))
                    long_b = np.concatenate([s.long_img for s in samples])
                    short_b = np.concatenate([s.short_img for s in samples])
                    target_b = np.concatenate([s.target for s in samples])
                    long_b, short_b = mask_inputs(long_b, short_b, model_cfg)

                    if stage == "deblur":
                        t = deblur_forward_train(deblur, long_b, short_b, factor)
                        loss = loss_deblur(t, target_b, factor)
                    else:
                        t_up = upsampled_deblur(deblur, long_b, short_b, factor)
                        y = enhance(short_b, long_b, t_up)
                        loss = loss_enhance(y, target_b)

                    if not np.isfinite(loss.value):
                        raise InvariantError(f"{stage} loss became non-finite at epoch {epoch} step {step}")
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step(lr)
                    losses.append(float(loss.value))
                    logger.debug(f"{stage} epoch {epoch} step {step}: loss {losses[-1]:.6f} lr {lr:g}")

                epoch_losses = losses[-steps:]
                logger.info(f"{stage} epoch {epoch + 1}/{epochs}: mean L1 {np.mean(epoch_losses):.6f} (lr {lr:g})")

        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, checkpoint_name(stage))
        self.save(ckpt_path, stage, trained, optimizer)
        log_path = os.path.join(out_dir, f"{stage}_{config.LOSS_LOG_NAME}")
        FileService.write_loss_log(log_path, losses)
        logger.info(f"Saved {stage} checkpoint to {ckpt_path}")
        return TrainResult(stage=stage, checkpoint_path=ckpt_path, loss_log_path=log_path, losses=losses)
