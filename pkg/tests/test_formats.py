"""Round-trip and malformed-input tests for the FTEN / PPM / PGM codecs."""

import struct

import numpy as np
import numpy.testing as npt
import pytest

from camalign import formats
from camalign.errors import DataError


def test_ften_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(3,), (2, 4), (2, 3, 4, 5), ()]:
        arr = rng.normal(size=shape)
        path = tmp_path / "t.ften"
        formats.write_ften(path, arr)
        back = formats.read_ften(path)
        assert back.shape == arr.shape and back.dtype == np.float64
        npt.assert_array_equal(back, arr)


def test_ften_layout_is_little_endian_with_magic(tmp_path):
    path = tmp_path / "t.ften"
    formats.write_ften(path, np.array([[1.0, 2.0]]))
    raw = path.read_bytes()
    assert raw[:4] == b"FTEN"
    rank, d0, d1 = struct.unpack("<3I", raw[4:16])
    assert (rank, d0, d1) == (2, 1, 2)
    assert struct.unpack("<2d", raw[16:]) == (1.0, 2.0)


def test_ften_truncated_payload(tmp_path):
    path = tmp_path / "t.ften"
    formats.write_ften(path, np.zeros(4))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataError, match="t.ften"):
        formats.read_ften(path)


def test_ften_bad_magic(tmp_path):
    path = tmp_path / "t.ften"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(DataError, match="magic"):
        formats.read_ften(path)


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    path = tmp_path / "img.ppm"
    formats.write_ppm(path, img)
    back = formats.read_ppm(path)
    npt.assert_array_equal(back, img)


def test_pgm_round_trip(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    path = tmp_path / "m.pgm"
    formats.write_pgm(path, img)
    npt.assert_array_equal(formats.read_pgm(path), img)


def test_ppm_header_comments_tolerated(tmp_path):
    path = tmp_path / "c.ppm"
    body = bytes(range(6))
    path.write_bytes(b"P6\n# a comment\n2 1\n# another\n255\n" + body)
    img = formats.read_ppm(path)
    assert img.shape == (1, 2, 3)
    npt.assert_array_equal(img.reshape(-1), np.frombuffer(body, np.uint8))


def test_ppm_wrong_magic(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(DataError, match="bad.ppm"):
        formats.read_ppm(path)


def test_ppm_truncated_pixels(tmp_path):
    path = tmp_path / "short.ppm"
    path.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 11)
    with pytest.raises(DataError, match="short.ppm"):
        formats.read_ppm(path)


def test_pgm_nonstandard_maxval_rejected(tmp_path):
    path = tmp_path / "deep.pgm"
    path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(DataError, match="maxval"):
        formats.read_pgm(path)


def test_write_ppm_validates_shape_and_dtype(tmp_path):
    with pytest.raises(ValueError):
        formats.write_ppm(tmp_path / "x.ppm", np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ValueError):
        formats.write_ppm(tmp_path / "x.ppm", np.zeros((4, 4, 3)))
