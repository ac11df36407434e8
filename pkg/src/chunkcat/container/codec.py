"""Deflate codec used for chunk payloads."""

import zlib

from ..errors import FormatError, SpecError

COMPRESS = "compress"
DECOMPRESS = "decompress"


def check_level(level):
    if not isinstance(level, int) or isinstance(level, bool) or not 0 <= level <= 9:
        raise SpecError(f"compression level must be an integer in [0, 9], got {level!r}")


def compress(data, level=6):
    check_level(level)
    return zlib.compress(bytes(data), level)


def decompress(data):
    try:
        return zlib.decompress(data)
    except zlib.error as exc:
        raise FormatError(f"corrupt deflate stream: {exc}") from None


def codec(data, level=6, direction=COMPRESS):
    """Compress or decompress ``data``; level 0 yields a stored (uncompressed) stream."""
    if direction == COMPRESS:
        return compress(data, level)
    if direction == DECOMPRESS:
        return decompress(data)
    raise SpecError(f"unknown codec direction {direction!r}")
