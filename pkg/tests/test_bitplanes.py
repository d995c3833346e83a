"""Bit-plane codec: exactness, packing, and the on-disk container."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdpm.bitplanes import (
    BitPlanes,
    decompose,
    load_planes,
    pack_bits,
    recompose,
    save_planes,
    unpack_bits,
    validate_image,
)
from bdpm.rng import stream


def test_round_trip_exhaustive_values():
    """Every 8-bit value survives decompose/recompose bit-exactly."""
    image = np.arange(256, dtype=np.uint8).reshape(1, 16, 16)
    assert np.array_equal(recompose(decompose(image)), image)


def test_round_trip_random_rgb():
    rng = stream(11)
    for _ in range(25):
        image = rng.integers(0, 256, size=(3, 13, 7), dtype=np.uint8)
        assert np.array_equal(recompose(decompose(image)), image)


def test_decompose_against_per_pixel_bits():
    """Plane k of channel c holds bit (7 - k) of each pixel, MSB first.

    Oracle: plain Python integer bit twiddling, no vectorized shifts.
    """
    rng = stream(12)
    image = rng.integers(0, 256, size=(3, 4, 5), dtype=np.uint8)
    planes = decompose(image)
    assert planes.bits.shape == (24, 4, 5)
    for c in range(3):
        for k in range(8):
            for y in range(4):
                for x in range(5):
                    expected = (int(image[c, y, x]) >> (7 - k)) & 1
                    assert planes.bits[c * 8 + k, y, x] == expected


def test_recompose_is_weighted_plane_sum():
    rng = stream(13)
    bits = rng.integers(0, 2, size=(8, 6, 6), dtype=np.uint8)
    expected = np.zeros((6, 6), dtype=np.int64)
    for k in range(8):
        expected += bits[k].astype(np.int64) << (7 - k)
    out = recompose(BitPlanes(bits, channels=1))
    assert np.array_equal(out[0], expected.astype(np.uint8))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 3]),
       st.integers(1, 9), st.integers(1, 9))
def test_round_trip_property(seed, channels, h, w):
    image = stream(seed).integers(0, 256, size=(channels, h, w), dtype=np.uint8)
    planes = decompose(image)
    assert planes.bits.dtype == np.uint8
    assert set(np.unique(planes.bits)) <= {0, 1}
    assert np.array_equal(recompose(planes), image)


def test_validate_image_rejects():
    with pytest.raises(ValueError):
        validate_image(np.zeros((2, 4, 4), dtype=np.uint8))  # 2 channels
    with pytest.raises(ValueError):
        validate_image(np.zeros((1, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        validate_image(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ValueError):
        validate_image(np.zeros((1, 0, 4), dtype=np.uint8))


def test_bitplanes_rejects_non_binary():
    bits = np.full((8, 2, 2), 2, dtype=np.uint8)
    with pytest.raises(ValueError):
        BitPlanes(bits, channels=1)


def test_bitplanes_rejects_plane_count_mismatch():
    bits = np.zeros((7, 2, 2), dtype=np.uint8)
    with pytest.raises(ValueError):
        BitPlanes(bits, channels=1)


class TestPacking:
    def test_round_trip(self):
        rng = stream(14)
        bits = rng.integers(0, 2, size=(8, 11, 13), dtype=np.uint8)
        words = pack_bits(bits)
        assert words.dtype == np.dtype("<u8")
        assert np.array_equal(unpack_bits(words, bits.shape), bits)

    def test_known_word(self):
        """First 64 bits land in word 0, bit i of the flattened order."""
        bits = np.zeros((1, 8, 8), dtype=np.uint8)
        bits.flat[0] = 1
        bits.flat[63] = 1
        words = pack_bits(bits)
        assert words.shape == (1,)
        assert int(words[0]) == (1 << 0) | (1 << 63)

    def test_word_count_checked(self):
        bits = np.zeros((8, 4, 4), dtype=np.uint8)
        words = pack_bits(bits)
        with pytest.raises(ValueError):
            unpack_bits(words[:-1], bits.shape)


class TestPlaneContainer:
    def test_round_trip(self, tmp_path):
        rng = stream(15)
        image = rng.integers(0, 256, size=(3, 9, 5), dtype=np.uint8)
        planes = decompose(image)
        path = tmp_path / "planes.bin"
        save_planes(path, planes)
        loaded = load_planes(path)
        assert loaded.channels == 3 and loaded.depth == 8
        assert np.array_equal(loaded.bits, planes.bits)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "planes.bin"
        save_planes(path, decompose(np.zeros((1, 4, 4), dtype=np.uint8)))
        data = bytearray(path.read_bytes())
        data[0] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ValueError):
            load_planes(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "planes.bin"
        save_planes(path, decompose(np.zeros((1, 8, 8), dtype=np.uint8)))
        data = path.read_bytes()
        path.write_bytes(data[:-4])
        with pytest.raises(ValueError):
            load_planes(path)
