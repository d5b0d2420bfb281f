import struct
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lspstereo.autodiff import CheckpointError
from lspstereo.autodiff.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from lspstereo.fileio import (
    FormatError,
    decode_pfm,
    decode_pnm,
    encode_pfm,
    encode_pnm,
    read_pfm,
    read_pnm,
    write_pfm,
    write_pnm,
)

# ---------------------------------------------------------------------------
# PFM


def test_pfm_round_trip_2x2(tmp_path):
    data = np.array([[1.5, -2.25], [np.float32(1e-30), 7.0]], dtype=np.float32)
    write_pfm(tmp_path / "a.pfm", data)
    back = read_pfm(tmp_path / "a.pfm")
    assert back.dtype == np.float32
    assert back.tobytes() == data.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=st.floats(width=32, allow_nan=False)))
def test_pfm_round_trip_property(data):
    assert decode_pfm(encode_pfm(data)).tobytes() == data.tobytes()


def test_pfm_hand_assembled_little_endian():
    buf = b"Pf\n2 1\n-1.0\n" + struct.pack("<2f", 3.25, -0.5)
    assert len(buf) - len(b"Pf\n2 1\n-1.0\n") == 8
    np.testing.assert_array_equal(decode_pfm(buf), np.array([[3.25, -0.5]], np.float32))


def test_pfm_hand_assembled_rows_bottom_to_top():
    # file rows run bottom-up
    buf = b"Pf\n2 3\n-1.0\n" + struct.pack("<6f", 1, 2, 3, 4, 5, 6)
    out = decode_pfm(buf)
    np.testing.assert_array_equal(out, np.array([[5, 6], [3, 4], [1, 2]], np.float32))
    header = encode_pfm(out)[: len(b"Pf\n2 3\n-1.0\n")]
    assert header == b"Pf\n2 3\n-1.0\n"
    assert encode_pfm(out) == buf


def test_pfm_big_endian():
    buf = b"Pf\n3 1\n1.0\n" + struct.pack(">3f", 1.0, 2.5, -4.0)
    np.testing.assert_array_equal(decode_pfm(buf), np.array([[1.0, 2.5, -4.0]], np.float32))


def test_pfm_errors():
    with pytest.raises(FormatError, match="magic"):
        decode_pfm(b"P5\n2 1\n-1.0\n" + bytes(8))
    with pytest.raises(FormatError, match="colour"):
        decode_pfm(b"PF\n2 1\n-1.0\n" + bytes(24))
    with pytest.raises(FormatError, match="truncated"):
        decode_pfm(b"Pf\n2 2\n-1.0\n" + bytes(12))
    with pytest.raises(FormatError):
        decode_pfm(b"Pf\n2 2\n")
    with pytest.raises(FormatError):
        encode_pfm(np.zeros((2, 2, 2)))


# ---------------------------------------------------------------------------
# PPM / PGM


def test_ppm_round_trip_bytes(tmp_path):
    raw = np.random.default_rng(0).integers(0, 256, (3, 5, 7), dtype=np.uint8)
    img = raw.astype(np.float32) / np.float32(255.0)
    write_pnm(tmp_path / "a.ppm", img)
    assert read_pnm(tmp_path / "a.ppm", as_bytes=True).tobytes() == raw.tobytes()
    assert read_pnm(tmp_path / "a.ppm").tobytes() == img.tobytes()
    again = encode_pnm(read_pnm(tmp_path / "a.ppm"))
    assert again == (tmp_path / "a.ppm").read_bytes()


def test_pgm_round_trip_bytes(tmp_path):
    raw = np.random.default_rng(1).integers(0, 256, (4, 9), dtype=np.uint8)
    write_pnm(tmp_path / "m.pgm", raw)
    data = (tmp_path / "m.pgm").read_bytes()
    assert data.startswith(b"P5\n9 4\n255\n")
    assert read_pnm(tmp_path / "m.pgm", as_bytes=True).tobytes() == raw.tobytes()


def test_ppm_hand_assembled():
    payload = bytes(range(24))
    img = decode_pnm(b"P6\n4 2\n255\n" + payload)
    assert img.shape == (3, 2, 4)
    # pixel (row 1, col 2) starts at byte 3 * (1 * 4 + 2) = 18
    np.testing.assert_array_equal(img[:, 1, 2] * 255, [18, 19, 20])
    assert decode_pnm(b"P6\n1 1\n255\n" + b"\xff\x00\x80")[0, 0, 0] == 1.0


def test_pnm_header_comments():
    img = decode_pnm(b"P5\n# made by hand\n2 1\n255\n\x00\xff", as_bytes=True)
    np.testing.assert_array_equal(img, [[0, 255]])


def test_pnm_round_half_up():
    img = np.array([[0.5 / 255, 1.5 / 255, 254.5 / 255, 1.0]])
    assert decode_pnm(encode_pnm(img), as_bytes=True).tolist() == [[1, 2, 255, 255]]


def test_pnm_errors():
    with pytest.raises(FormatError, match="maxval"):
        decode_pnm(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(FormatError, match="magic"):
        decode_pnm(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(FormatError, match="truncated"):
        decode_pnm(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(FormatError):
        encode_pnm(np.zeros((2, 3, 3)))


# ---------------------------------------------------------------------------
# LACM checkpoints


def test_checkpoint_hand_assembled():
    buf = (
        b"LACM" + struct.pack("<II", 1, 2)
        + struct.pack("<H", 1) + b"w" + struct.pack("<BB", 0, 2) + struct.pack("<2I", 2, 1)
        + struct.pack("<2f", 0.5, -1.0)
        + struct.pack("<H", 2) + b"b0" + struct.pack("<BB", 0, 0) + struct.pack("<f", 3.0)
    )
    out = decode_checkpoint(buf)
    assert list(out) == ["w", "b0"]
    np.testing.assert_array_equal(out["w"], [[0.5], [-1.0]])
    assert out["b0"].shape == () and out["b0"] == 3.0
    assert encode_checkpoint(out) == buf


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = OrderedDict(
        [("feat.conv1.w", rng.standard_normal((4, 3, 3, 3)).astype(np.float32)),
         ("feat.conv1.b", rng.standard_normal(4).astype(np.float32)),
         ("ünï", np.zeros((0, 2), np.float32))]
    )
    save_checkpoint(tmp_path / "m.lacm", tensors)
    back = load_checkpoint(tmp_path / "m.lacm")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes()
    assert encode_checkpoint(back) == (tmp_path / "m.lacm").read_bytes()


def test_checkpoint_errors():
    good = encode_checkpoint({"a": np.ones(2, np.float32)})
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + good[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(b"LACM" + struct.pack("<II", 2, 0))
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(good[:-1])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(good + b"\x00")
    bad_dtype = bytearray(good)
    bad_dtype[4 + 8 + 2 + 1] = 7
    with pytest.raises(CheckpointError, match="dtype"):
        decode_checkpoint(bytes(bad_dtype))
