import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from grfp.tensorio import (FormatError, decode, encode, load_checkpoint, read_pnm,
                           save_checkpoint, write_pgm, write_ppm)


@given(st.sampled_from([np.float32, np.float64, np.uint8]).flatmap(
    lambda dt: arrays(dt, array_shapes(min_dims=0, max_dims=4, max_side=5))))
def test_round_trip_is_bit_exact(a):
    b = decode(encode(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_header_layout():
    buf = encode(np.zeros((2, 3), np.float64))
    assert buf[:8] == b"GRFPTNSR"
    assert struct.unpack_from("<BBB", buf, 8) == (1, 1, 2)
    assert struct.unpack_from("<2I", buf, 11) == (2, 3)
    assert len(buf) == 8 + 3 + 8 + 6 * 8


def test_values_are_little_endian_row_major():
    buf = encode(np.array([[1.0, 2.0]], np.float32))
    assert struct.unpack_from("<2f", buf, 8 + 3 + 8) == (1.0, 2.0)


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXXXXXX" + b[8:], "bad magic.*offset 0"),
    (lambda b: b[:8] + bytes([2]) + b[9:], "unsupported version.*offset 8"),
    (lambda b: b[:9] + bytes([7]) + b[10:], "dtype code 7"),
    (lambda b: b[:13], "truncated extents"),
    (lambda b: b[:-1], "truncated data"),
    (lambda b: b + b"\0", "trailing"),
    (lambda b: b[:5], "truncated header"),
])
def test_malformed_input_raises_format_error(mutate, match):
    with pytest.raises(FormatError, match=match):
        decode(mutate(encode(np.ones((2, 2), np.float32))))


def test_expected_rank_is_named():
    with pytest.raises(FormatError, match="expected rank 3, found rank 2"):
        decode(encode(np.ones((2, 2))), expect_rank=3)


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        encode(np.ones(3, np.int32))


def test_checkpoint_manifest(tmp_path):
    save_checkpoint({"a": np.ones(2), "lam": np.asarray(2.0)}, tmp_path / "ck", meta={"kind": "x"})
    text = (tmp_path / "ck" / "manifest.txt").read_text()
    assert "a = a.GRFPTNSR" in text and "@kind = x" in text
    arrs, meta = load_checkpoint(tmp_path / "ck")
    assert arrs["lam"].shape == () and meta == {"kind": "x"}
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none")


def test_pnm_round_trip(tmp_path, rng):
    gray = rng.integers(0, 5, size=(4, 6)).astype(np.uint8)
    write_pgm(tmp_path / "l.pgm", gray)
    assert (tmp_path / "l.pgm").read_bytes().startswith(b"P5\n6 4\n255\n")
    assert np.array_equal(read_pnm(tmp_path / "l.pgm"), gray)
    rgb = rng.integers(0, 256, size=(3, 5, 3)) / 255.0
    write_ppm(tmp_path / "i.ppm", rgb)
    assert (tmp_path / "i.ppm").read_bytes().startswith(b"P6\n5 3\n255\n")
    assert np.array_equal(read_pnm(tmp_path / "i.ppm"), np.round(rgb * 255).astype(np.uint8))
