"""
File service for images, tensor dumps, checkpoints and manifests.
"""
import logging
import math
import os
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
from PIL import Image

from d2hnet.api.models import ManifestEntry
from d2hnet.config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, D2T_MAGIC
from d2hnet.utils.errors import BadMagicError, ChecksumError, FormatError, TruncatedFileError, UnsupportedImageError
from d2hnet.utils.validators import validate_image_file

logger = logging.getLogger(__name__)

D2T_KIND_IMAGE = 0
D2T_KIND_FEATURE = 1
D2T_HEADER = struct.Struct("<4sIIIB")
MAX_RANK = 8
META_PREFIX = "meta/"


@dataclass
class Checkpoint:
    """Named tensors plus string metadata."""
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)


class _ByteReader:
    """Cursor over a byte string that refuses to read past the end."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or n > self.remaining:
            raise TruncatedFileError(
                f"{self.what}: needs {n} bytes at offset {self.pos}, only {self.remaining} left"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _check_magic(data: bytes, magic: bytes, what: str) -> None:
    if data[:len(magic)] != magic:
        if len(data) < len(magic) and magic.startswith(data):
            raise TruncatedFileError(f"{what}: file ends inside the magic bytes")
        raise BadMagicError(f"{what}: expected magic {magic!r}, found {data[:len(magic)]!r}")


def _frame_number(path: Path) -> tuple[int, str]:
    digits = re.findall(r"\d+", path.stem)
    return (int(digits[-1]) if digits else -1, path.name)


class FileService:
    """Readers and writers for every on-disk artifact."""

    @staticmethod
    def read_png(file_path: str) -> np.ndarray:
        """Read an 8-bit RGB or grayscale PNG as a 1 x C x H x W float32 tensor in [0, 1]."""
        validate_image_file(file_path)
        with Image.open(file_path) as img:
            if img.format != "PNG":
                raise UnsupportedImageError(f"{file_path}: not a PNG file ({img.format})")
            if img.mode not in ("RGB", "L"):
                raise UnsupportedImageError(
                    f"{file_path}: unsupported PNG mode '{img.mode}' (expected 8-bit RGB or grayscale)"
                )
            data = np.asarray(img, dtype=np.uint8)
        if data.ndim == 2:
            data = data[:, :, None]
        return (data.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255.0))

    @staticmethod
    def to_bytes(x: np.ndarray) -> np.ndarray:
        """Quantize to uint8 with round-half-up: floor(clamp(v) * 255 + 0.5)."""
        clipped = np.clip(x.astype(np.float64), 0.0, 1.0)
        return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)

    @staticmethod
    def write_png(file_path: str, x: np.ndarray) -> None:
        """Write a 1 x C x H x W (or C x H x W) tensor with C in {1, 3}."""
        if x.ndim == 4:
            if x.shape[0] != 1:
                raise ValueError(f"write_png takes a single image, got batch {x.shape[0]}")
            x = x[0]
        if x.ndim != 3 or x.shape[0] not in (1, 3):
            raise ValueError(f"write_png needs 1 or 3 channels, got shape {x.shape}")
        data = FileService.to_bytes(x).transpose(1, 2, 0)
        img = Image.fromarray(data[:, :, 0] if data.shape[2] == 1 else data)
        Path(file_path).parent.mkdir(parents=True, exist_ok=True)
        img.save(file_path, format="PNG")

    @staticmethod
    def write_d2t(file_path: str, x: np.ndarray, kind: int = D2T_KIND_IMAGE) -> None:
        """Write a planar single-precision tensor dump."""
        if x.ndim == 4:
            if x.shape[0] != 1:
                raise ValueError(f"write_d2t takes a single tensor, got batch {x.shape[0]}")
            x = x[0]
        if x.ndim != 3:
            raise ValueError(f"write_d2t needs C x H x W data, got shape {x.shape}")
        if kind not in (D2T_KIND_IMAGE, D2T_KIND_FEATURE):
            raise ValueError(f"unknown D2T kind {kind}")
        if kind == D2T_KIND_IMAGE and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("image-class D2T values must lie in [0, 1]")
        c, h, w = x.shape
        payload = np.ascontiguousarray(x, dtype="<f4").tobytes()
        Path(file_path).parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "wb") as f:
            f.write(D2T_HEADER.pack(D2T_MAGIC, h, w, c, kind))
            f.write(payload)

    @staticmethod
    def read_d2t(file_path: str) -> tuple[np.ndarray, int]:
        """Return (1 x C x H x W float32 tensor, kind)."""
        with open(file_path, "rb") as f:
            data = f.read()
        _check_magic(data, D2T_MAGIC, file_path)
        reader = _ByteReader(data, file_path)
        _, h, w, c, kind = D2T_HEADER.unpack(reader.take(D2T_HEADER.size))
        if min(h, w, c) < 1:
            raise FormatError(f"{file_path}: empty extent in header ({h}, {w}, {c})")
        if kind not in (D2T_KIND_IMAGE, D2T_KIND_FEATURE):
            raise FormatError(f"{file_path}: unknown kind {kind}")
        count = c * h * w
        if 4 * count > reader.remaining:
            raise TruncatedFileError(
                f"{file_path}: header claims {4 * count} payload bytes, file has {reader.remaining}"
            )
        payload = reader.take(4 * count)
        if reader.remaining:
            raise FormatError(f"{file_path}: {reader.remaining} trailing bytes after payload")
        x = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(1, c, h, w)
        return x, kind

    @staticmethod
    def save_checkpoint(file_path: str, tensors: Mapping[str, np.ndarray],
                        meta: Optional[Mapping[str, str]] = None) -> None:
        """Write named tensors (as float32) and metadata with a trailing CRC32."""
        entries: list[tuple[str, np.ndarray]] = []
        meta = meta or {}
        for key in sorted(meta):
            entries.append((f"{META_PREFIX}{key}={meta[key]}", np.zeros(0, dtype=np.float32)))
        for name in sorted(tensors):
            if name.startswith(META_PREFIX):
                raise ValueError(f"tensor name '{name}' uses the reserved metadata prefix")
            entries.append((name, np.asarray(tensors[name])))

        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
        for name, value in entries:
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<I", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<I", value.ndim))
            parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
            parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
        body = b"".join(parts)
        Path(file_path).parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "wb") as f:
            f.write(body)
            f.write(struct.pack("<I", zlib.crc32(body)))
        logger.debug(f"Saved checkpoint {file_path} with {len(entries)} entries")

    @staticmethod
    def load_checkpoint(file_path: str) -> Checkpoint:
        if not os.path.exists(file_path):
            raise FileNotFoundError(f"Checkpoint not found: {file_path}")
        with open(file_path, "rb") as f:
            data = f.read()
        _check_magic(data, CHECKPOINT_MAGIC, file_path)
        if len(data) < len(CHECKPOINT_MAGIC) + 12:
            raise TruncatedFileError(f"{file_path}: {len(data)} bytes cannot hold a header and CRC32 trailer")
        body, trailer = data[:-4], data[-4:]
        stored = struct.unpack("<I", trailer)[0]
        actual = zlib.crc32(body)
        if stored != actual:
            raise ChecksumError(f"{file_path}: CRC32 mismatch (stored {stored:08x}, computed {actual:08x})")

        reader = _ByteReader(body, file_path)
        reader.take(len(CHECKPOINT_MAGIC))
        version = reader.u32()
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{file_path}: unsupported checkpoint version {version}")
        count = reader.u32()

        ckpt = Checkpoint()
        seen: set[str] = set()
        for _ in range(count):
            name_len = reader.u32()
            try:
                name = reader.take(name_len).decode("utf-8")
            except UnicodeDecodeError as e:
                raise FormatError(f"{file_path}: entry name is not UTF-8") from e
            if name in seen:
                raise FormatError(f"{file_path}: duplicate entry '{name}'")
            seen.add(name)
            rank = reader.u32()
            if rank > MAX_RANK:
                raise FormatError(f"{file_path}: entry '{name}' has rank {rank}")
            extents = tuple(reader.u32() for _ in range(rank))
            size = math.prod(extents)
            value = np.frombuffer(reader.take(4 * size), dtype="<f4").astype(np.float32).reshape(extents)
            if name.startswith(META_PREFIX):
                key, _, text = name[len(META_PREFIX):].partition("=")
                ckpt.meta[key] = text
            else:
                ckpt.tensors[name] = value

        if reader.remaining:
            raise FormatError(f"{file_path}: {reader.remaining} unexpected bytes before the CRC32")
        return ckpt

    @staticmethod
    def write_manifest(file_path: str, entries: Iterable[ManifestEntry]) -> int:
        """Write a tab-separated manifest; returns the number of lines."""
        lines = ["#" + "\t".join(ManifestEntry.COLUMNS)]
        lines.extend("\t".join(entry.to_fields()) for entry in entries)
        Path(file_path).parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        return len(lines) - 1

    @staticmethod
    def read_manifest(file_path: str) -> list[ManifestEntry]:
        """Read a manifest; tuple directories are resolved against its folder."""
        if not os.path.exists(file_path):
            raise FileNotFoundError(f"Manifest not found: {file_path}")
        base = Path(file_path).parent
        entries = []
        with open(file_path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                try:
                    entry = ManifestEntry.from_fields(line.split("\t"))
                except ValueError as e:
                    raise ValueError(f"{file_path}:{lineno}: {e}") from e
                if not Path(entry.directory).is_absolute():
                    entry = entry.model_copy(update={"directory": str(base / entry.directory)})
                entries.append(entry)
        if not entries:
            raise ValueError(f"Manifest {file_path} has no tuples")
        return entries

    @staticmethod
    def manifest_hash(file_path: str) -> str:
        with open(file_path, "rb") as f:
            return f"{zlib.crc32(f.read()):08x}"

    @staticmethod
    def list_frames(directory: str) -> list[Path]:
        """Numbered PNG frames of one video, in frame order."""
        if not os.path.isdir(directory):
            raise FileNotFoundError(f"Frame directory not found: {directory}")
        frames = sorted(Path(directory).glob("*.png"), key=_frame_number)
        if len(frames) < 2:
            raise ValueError(f"{directory}: need at least 2 PNG frames, found {len(frames)}")
        return frames

    @staticmethod
    def read_rgb(file_path: str) -> np.ndarray:
        """Read a PNG as 3 channels (grayscale is replicated)."""
        x = FileService.read_png(file_path)
        return np.repeat(x, 3, axis=1) if x.shape[1] == 1 else x

    @staticmethod
    def read_tuple(entry: ManifestEntry) -> dict[str, np.ndarray]:
        """The four images of a tuple, cropped to its square when one is set."""
        images = {name: FileService.read_rgb(entry.path(name)) for name in ("l", "s", "l_last", "s_first")}
        if entry.crop is not None:
            top, left, side = entry.crop
            images = {k: v[:, :, top:top + side, left:left + side].copy() for k, v in images.items()}
        return images

    @staticmethod
    def write_loss_log(file_path: str, losses: Iterable[float]) -> None:
        Path(file_path).parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8", newline="\n") as f:
            for value in losses:
                f.write(f"{value:.8e}\n")

    @staticmethod
    def read_loss_log(file_path: str) -> list[float]:
        with open(file_path, encoding="utf-8") as f:
            return [float(line) for line in f if line.strip()]
