"""Binary PGM (P5) and PPM (P6) reading and writing, maxval 255 only."""

from __future__ import annotations

import numpy as np

from bdpm.bitplanes import validate_image


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # Skip whitespace and '#' comments between header tokens.
    while pos < len(data):
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("truncated netpbm header")
    return data[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM or PPM file into a (channels, h, w) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, pos = _read_token(data, 0)
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise ValueError(f"unsupported netpbm magic {magic!r} in {path}")
    width_tok, pos = _read_token(data, pos)
    height_tok, pos = _read_token(data, pos)
    maxval_tok, pos = _read_token(data, pos)
    width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # exactly one whitespace byte separates header and raster
    n_bytes = width * height * channels
    raster = data[pos : pos + n_bytes]
    if len(raster) != n_bytes:
        raise ValueError(f"truncated raster in {path}: {len(raster)}/{n_bytes} bytes")
    pixels = np.frombuffer(raster, dtype=np.uint8)
    # raster is row-major with interleaved samples
    return pixels.reshape(height, width, channels).transpose(2, 0, 1).copy()


def write_pnm(path, image: np.ndarray) -> None:
    """Write a (channels, h, w) uint8 array as PGM (1 channel) or PPM (3)."""
    image = validate_image(image)
    channels, height, width = image.shape
    magic = b"P5" if channels == 1 else b"P6"
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    raster = image.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raster)
