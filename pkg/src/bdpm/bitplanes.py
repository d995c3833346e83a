"""Lossless conversion between 8-bit images and stacks of binary bit-planes.

Images are channel-first uint8 arrays of shape (channels, height, width)
with 1 (grayscale) or 3 (RGB) channels.  A decomposed image is a stack of
channels * depth binary planes stored one byte per bit: plane
``c * depth + k`` holds the coefficient of ``2**(depth - 1 - k)`` of
channel ``c`` (MSB-first within each channel, channels contiguous).

Packed storage is an explicit layer on top: bits are flattened in C order
and placed LSB-first into little-endian 64-bit words, so the first bit of
the tensor sits in the least-significant bit of the first word.  The
packed-plane file layout is::

    magic "BDPM-BP1" | u32 channels | u32 depth | u32 height | u32 width
    | packed u64 words

with every integer little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC_PLANES = b"BDPM-BP1"

_VALID_CHANNELS = (1, 3)


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check an (channels, height, width) uint8 image and return it."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"image must be uint8, got {image.dtype}")
    if image.ndim != 3:
        raise ValueError(f"image must have shape (channels, h, w), got {image.shape}")
    channels, height, width = image.shape
    if channels not in _VALID_CHANNELS:
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    if height < 1 or width < 1:
        raise ValueError(f"image dimensions must be >= 1, got {height}x{width}")
    return image


@dataclass(frozen=True)
class BitPlanes:
    """Stack of binary planes plus the metadata needed to invert it.

    ``bits`` has shape (channels * depth, height, width) with values in
    {0, 1} stored as uint8.  Treat the array as immutable.
    """

    bits: np.ndarray
    channels: int
    depth: int = 8

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.dtype != np.uint8:
            raise ValueError(f"bits must be uint8, got {bits.dtype}")
        if bits.ndim != 3:
            raise ValueError(f"bits must have shape (planes, h, w), got {bits.shape}")
        if self.channels not in _VALID_CHANNELS:
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if bits.shape[0] != self.channels * self.depth:
            raise ValueError(
                f"expected {self.channels * self.depth} planes, got {bits.shape[0]}"
            )
        if bits.shape[1] < 1 or bits.shape[2] < 1:
            raise ValueError(f"plane dimensions must be >= 1, got {bits.shape[1:]}")
        if bits.size and bits.max() > 1:
            raise ValueError("bits must contain only 0 and 1")

    @property
    def n_planes(self) -> int:
        return self.bits.shape[0]

    @property
    def height(self) -> int:
        return self.bits.shape[1]

    @property
    def width(self) -> int:
        return self.bits.shape[2]


def decompose(image: np.ndarray, depth: int = 8) -> BitPlanes:
    """Split an 8-bit image into MSB-first binary planes.

    Only depth 8 is supported for 8-bit input; other depths would drop or
    invent bits and are rejected.
    """
    image = validate_image(image)
    if depth != 8:
        raise ValueError(f"bit-depth must be 8 for 8-bit images, got {depth}")
    channels, height, width = image.shape
    shifts = np.arange(depth - 1, -1, -1, dtype=np.uint8)  # MSB first
    # (channels, depth, h, w) -> (channels*depth, h, w)
    planes = (image[:, None, :, :] >> shifts[None, :, None, None]) & np.uint8(1)
    return BitPlanes(planes.reshape(channels * depth, height, width), channels, depth)


def recompose(planes: BitPlanes) -> np.ndarray:
    """Exact inverse of :func:`decompose`."""
    if not isinstance(planes, BitPlanes):
        raise ValueError("recompose expects a BitPlanes instance")
    bits = planes.bits.reshape(planes.channels, planes.depth, planes.height, planes.width)
    weights = (1 << np.arange(planes.depth - 1, -1, -1)).astype(np.uint32)
    values = (bits.astype(np.uint32) * weights[None, :, None, None]).sum(axis=1)
    if planes.depth == 8:
        return values.astype(np.uint8)
    return values.astype(np.uint8) if values.max(initial=0) <= 255 else values


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a {0,1} array into little-endian u64 words, C order, LSB-first.

    The packed buffer holds ceil(size / 64) words; trailing pad bits are
    zero.  An empty input packs to an empty buffer.
    """
    bits = np.asarray(bits)
    if bits.size and bits.max() > 1:
        raise ValueError("bits must contain only 0 and 1")
    flat = np.ascontiguousarray(bits, dtype=np.uint8).reshape(-1)
    n_words = (flat.size + 63) // 64
    padded = np.zeros(n_words * 64, dtype=np.uint8)
    padded[: flat.size] = flat
    packed = np.packbits(padded, bitorder="little")
    return packed.view("<u8")


def unpack_bits(words: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of :func:`pack_bits` for a known target shape."""
    words = np.asarray(words)
    if words.dtype != np.uint64:
        words = words.astype("<u8")
    n_bits = int(np.prod(shape, dtype=np.int64)) if shape else 1
    expected_words = (n_bits + 63) // 64
    if words.size != expected_words:
        raise ValueError(
            f"buffer holds {words.size} words but shape {shape} needs {expected_words}"
        )
    as_bytes = words.astype("<u8").view(np.uint8)
    flat = np.unpackbits(as_bytes, bitorder="little")[:n_bits]
    return flat.reshape(shape).astype(np.uint8)


def save_planes(path, planes: BitPlanes) -> None:
    """Write a BitPlanes stack as a packed-plane file."""
    header = MAGIC_PLANES + struct.pack(
        "<IIII", planes.channels, planes.depth, planes.height, planes.width
    )
    words = pack_bits(planes.bits)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(words.tobytes())


def load_planes(path) -> BitPlanes:
    """Read a packed-plane file written by :func:`save_planes`."""
    with open(path, "rb") as fh:
        data = fh.read()
    header_len = len(MAGIC_PLANES) + 16
    if len(data) < header_len:
        raise ValueError(f"truncated packed-plane file: {path}")
    if data[: len(MAGIC_PLANES)] != MAGIC_PLANES:
        raise ValueError(f"bad magic in packed-plane file: {path}")
    channels, depth, height, width = struct.unpack(
        "<IIII", data[len(MAGIC_PLANES) : header_len]
    )
    n_bits = channels * depth * height * width
    n_words = (n_bits + 63) // 64
    payload = data[header_len:]
    if len(payload) != n_words * 8:
        raise ValueError(
            f"packed-plane payload is {len(payload)} bytes, expected {n_words * 8}"
        )
    words = np.frombuffer(payload, dtype="<u8")
    bits = unpack_bits(words, (channels * depth, height, width))
    return BitPlanes(bits, channels, depth)
