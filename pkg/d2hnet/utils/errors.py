"""
Exception taxonomy shared by the pipeline.

Input problems are ``ValueError`` subclasses (CLI exit code 1); broken
internal invariants are ``InvariantError`` (exit code 2).
"""


class ShapeError(ValueError):
    """Tensor shapes or extents do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """Malformed config file or unknown key."""


class FormatError(ValueError):
    """Binary file does not follow its declared format."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(FormatError):
    """File is shorter than its header claims."""


class ChecksumError(FormatError):
    """Stored CRC32 does not match the file contents."""


class UnsupportedImageError(ValueError):
    """PNG uses a bit depth or color mode the pipeline does not read."""


class InvariantError(RuntimeError):
    """An internal invariant was violated."""
