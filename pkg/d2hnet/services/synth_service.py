"""
Exposure synthesis: (l, s, l_last, s_first) tuples from sharp frame sequences.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from d2hnet import config
from d2hnet.api.models import ManifestEntry, SamplingPolicy, SynthConfig
from d2hnet.services.file_service import FileService
from d2hnet.utils.seeding import derive_rng

logger = logging.getLogger(__name__)


@dataclass
class ExposureTuple:
    """One synthesized long/short pair with its sharp references."""
    l: np.ndarray  # noqa: E741
    s: np.ndarray
    l_last: np.ndarray
    s_first: np.ndarray
    source: str = ""
    start: int = 0
    long_indices: tuple[int, int] = (0, 0)
    short_indices: tuple[int, int] = (0, 0)
    interp_factor: int = 1

    def images(self) -> dict[str, np.ndarray]:
        return {"l": self.l, "s": self.s, "l_last": self.l_last, "s_first": self.s_first}


@dataclass
class DatasetResult:
    train: list[ManifestEntry] = field(default_factory=list)
    val: list[ManifestEntry] = field(default_factory=list)
    manifest_path: str = ""
    val_manifest_path: Optional[str] = None


def _average(frames: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.zeros(frames[0].shape, dtype=np.float64)
    for frame in frames:
        acc += frame
    return (acc / len(frames)).astype(frames[0].dtype)


def _resolved(entries: Sequence[ManifestEntry], out_dir: str) -> list[ManifestEntry]:
    """Entries whose tuple directories point into out_dir from any working directory."""
    root = os.path.abspath(out_dir)
    return [e.model_copy(update={"directory": os.path.join(root, e.directory)}) for e in entries]


def _check_sequence(frames: Sequence[np.ndarray]) -> None:
    if len(frames) < 2:
        raise ValueError(f"a frame sequence needs at least 2 frames, got {len(frames)}")
    shape = frames[0].shape
    for i, frame in enumerate(frames):
        if frame.shape != shape:
            raise ValueError(f"frame {i} has shape {frame.shape}, expected {shape}")


class SynthService:
    """Interpolation, exposure averaging and dataset assembly."""

    @staticmethod
    def interpolate_sequence(frames: Sequence[np.ndarray], factor: int) -> list[np.ndarray]:
        """Insert factor - 1 linear cross-fades between consecutive frames.

        Output length is (n - 1) * factor + 1 and original frames are kept
        bit for bit.
        """
        if factor < 1:
            raise ValueError(f"interpolation factor must be >= 1, got {factor}")
        _check_sequence(frames)
        if factor == 1:
            return list(frames)

        out = []
        for a, b in zip(frames[:-1], frames[1:]):
            out.append(a)
            a64 = a.astype(np.float64)
            b64 = b.astype(np.float64)
            for j in range(1, factor):
                t = j / factor
                out.append(((1.0 - t) * a64 + t * b64).astype(a.dtype))
        out.append(frames[-1])
        return out

    @staticmethod
    def synthesize_tuple(frames: Sequence[np.ndarray], cfg: SynthConfig, start_index: int,
                         source: str = "") -> ExposureTuple:
        """Average the long window, skip the readout gap, average the short window."""
        end = start_index + cfg.window_length
        if start_index < 0 or end > len(frames):
            raise ValueError(
                f"window [{start_index}, {end}) does not fit a sequence of {len(frames)} frames"
            )
        long_end = start_index + cfg.long_frames
        short_start = long_end + cfg.gap_frames
        short_end = short_start + cfg.short_frames
        return ExposureTuple(
            l=_average(frames[start_index:long_end]),
            s=_average(frames[short_start:short_end]),
            l_last=frames[long_end - 1].copy(),
            s_first=frames[short_start].copy(),
            source=source,
            start=start_index,
            long_indices=(start_index, long_end - 1),
            short_indices=(short_start, short_end - 1),
            interp_factor=cfg.interp_factor,
        )

    @staticmethod
    def synthesize_burst(frames: Sequence[np.ndarray], cfg: SynthConfig, start_index: int,
                         count: Optional[int] = None) -> list[np.ndarray]:
        """``count`` successive short exposures following the long window, each after a readout gap."""
        count = cfg.burst_count if count is None else count
        if count < 1:
            raise ValueError(f"burst count must be >= 1, got {count}")
        first = start_index + cfg.long_frames + cfg.gap_frames
        period = cfg.short_frames + cfg.gap_frames
        end = first + (count - 1) * period + cfg.short_frames
        if start_index < 0 or end > len(frames):
            raise ValueError(f"burst window [{start_index}, {end}) does not fit {len(frames)} frames")
        return [
            _average(frames[first + k * period:first + k * period + cfg.short_frames])
            for k in range(count)
        ]

    @staticmethod
    def window_starts(n_frames: int, cfg: SynthConfig, policy: SamplingPolicy,
                      rng: np.random.Generator, length: Optional[int] = None) -> list[int]:
        """Window starts every ``stride`` source frames, optionally jittered.

        ``length`` defaults to the exposure window; bursts pass the longer span.
        """
        step = policy.stride * cfg.interp_factor
        last = n_frames - (cfg.window_length if length is None else length)
        starts = []
        base = 0
        while base <= last:
            shift = int(rng.integers(0, policy.jitter + 1)) if policy.jitter else 0
            starts.append(min(base + shift, last))
            base += step
            if policy.max_windows is not None and len(starts) >= policy.max_windows:
                break
        return starts

    @staticmethod
    def video_dirs(root: str) -> list[str]:
        """A frame directory itself, or each of its sub-directories."""
        if not os.path.isdir(root):
            raise FileNotFoundError(f"Frame directory not found: {root}")
        if any(Path(root).glob("*.png")):
            return [root]
        subdirs = sorted(str(p) for p in Path(root).iterdir() if p.is_dir())
        return subdirs

    @staticmethod
    def build_dataset(
        video_dirs: Sequence[str],
        cfg: SynthConfig,
        out_dir: str,
        seed: int = config.DEFAULT_SEED,
        threads: int = 1,
        policy: Optional[SamplingPolicy] = None,
        burst: bool = False,
    ) -> DatasetResult:
        """Synthesize every window of every video and write tuples plus manifests.

        With ``burst`` each tuple directory also gets burst_0.png ... for
        ``cfg.burst_count`` successive short exposures, and windows must fit
        the whole burst.
        """
        if not video_dirs:
            raise ValueError("no source videos given")
        policy = policy or cfg.policy()
        span = cfg.burst_length if burst else cfg.window_length

        jobs = []
        for video_idx, directory in enumerate(video_dirs):
            source = Path(directory).name
            frames = [FileService.read_rgb(str(p)) for p in FileService.list_frames(directory)]
            frames = SynthService.interpolate_sequence(frames, cfg.interp_factor)
            starts = SynthService.window_starts(
                len(frames), cfg, policy, derive_rng(seed, video_idx, "synth"), length=span
            )
            if not starts:
                logger.warning(
                    f"{directory}: {len(frames)} interpolated frames cannot hold a window of {span}"
                )
            for start in starts:
                jobs.append((frames, source, start))
        if not jobs:
            raise ValueError("no source video is long enough for one exposure window")

        def write_one(job) -> ManifestEntry:
            frames, source, start = job
            tup = SynthService.synthesize_tuple(frames, cfg, start, source)
            tuple_id = f"{source}_{start:06d}"
            rel_dir = os.path.join("tuples", tuple_id)
            for name, image in tup.images().items():
                FileService.write_png(os.path.join(out_dir, rel_dir, f"{name}.png"), image)
            if burst:
                for k, image in enumerate(SynthService.synthesize_burst(frames, cfg, start)):
                    FileService.write_png(os.path.join(out_dir, rel_dir, f"burst_{k}.png"), image)
            return ManifestEntry(
                tuple_id=tuple_id,
                directory=rel_dir,
                source=source,
                start=start,
                long_indices=tup.long_indices,
                short_indices=tup.short_indices,
                interp_factor=cfg.interp_factor,
            )

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            entries = list(pool.map(write_one, jobs))

        n_val = int(round(policy.val_fraction * len(entries)))
        val_idx: set[int] = set()
        if n_val:
            order_rng = derive_rng(seed, 0, "order")
            val_idx = set(int(i) for i in order_rng.choice(len(entries), size=n_val, replace=False))

        train = [e for i, e in enumerate(entries) if i not in val_idx]
        val = [e for i, e in enumerate(entries) if i in val_idx]
        result = DatasetResult(train=_resolved(train, out_dir), val=_resolved(val, out_dir))
        # manifests keep tuple directories relative to out_dir
        result.manifest_path = os.path.join(out_dir, config.MANIFEST_NAME)
        FileService.write_manifest(result.manifest_path, train)
        if val:
            result.val_manifest_path = os.path.join(out_dir, config.VAL_MANIFEST_NAME)
            FileService.write_manifest(result.val_manifest_path, val)

        logger.info(
            f"Synthesized {len(entries)} tuples from {len(video_dirs)} video(s) "
            f"({len(result.train)} train, {len(result.val)} validation)"
        )
        return result
