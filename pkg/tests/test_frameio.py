import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spadvae.datagen import LabeledSet
from spadvae.errors import FormatError
from spadvae.frameio import HEADER, decode_frames, encode_frames, read_frames, write_frames


def same(a, b):
    assert a.frames.shape == b.frames.shape
    assert a.frames.tobytes() == b.frames.tobytes()
    if a.labels is None:
        assert b.labels is None
    else:
        assert a.labels.tobytes() == b.labels.tobytes()


def test_three_frame_round_trip(tmp_path, rng):
    ds = LabeledSet((rng.random((3, 5, 7)) < 0.3).astype(np.uint8), np.array([0, 1, 0]))
    write_frames(tmp_path / "a.spf", ds)
    same(ds, read_frames(tmp_path / "a.spf"))


def test_empty_set_is_bare_header(tmp_path):
    ds = LabeledSet(np.zeros((0, 64, 64), np.uint8))
    write_frames(tmp_path / "e.spf", ds)
    assert (tmp_path / "e.spf").stat().st_size == 20
    back = read_frames(tmp_path / "e.spf")
    assert len(back) == 0 and back.frames.shape == (0, 64, 64)


def test_single_pixel_frames():
    ds = LabeledSet(np.array([[[1]], [[0]], [[1]]], np.uint8), np.array([1, 0, 1]))
    buf = encode_frames(ds)
    assert len(buf) == 20 + 3 + 3
    same(ds, decode_frames(buf))


def test_bit_order_msb_first_and_continuous():
    f = np.zeros((1, 3, 3), np.uint8)
    f[0, 0, 0] = 1  # bit 7 of byte 0
    f[0, 2, 2] = 1  # pixel 8, bit 7 of byte 1
    buf = encode_frames(LabeledSet(f))
    assert buf[20:] == bytes([0x80, 0x80])


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(0, 5),
    h=st.integers(1, 9),
    w=st.integers(1, 9),
    labelled=st.booleans(),
    seed=st.integers(0, 2**31),
)
def test_round_trip_property(n, h, w, labelled, seed):
    r = np.random.default_rng(seed)
    frames = (r.random((n, h, w)) < 0.5).astype(np.uint8)
    labels = r.integers(0, 2, n).astype(np.uint8) if labelled else None
    ds = LabeledSet(frames, labels)
    same(ds, decode_frames(encode_frames(ds)))


def good_buffer():
    return encode_frames(LabeledSet(np.ones((2, 4, 4), np.uint8), np.array([0, 1])))


def test_bad_magic():
    buf = b"XXXX" + good_buffer()[4:]
    with pytest.raises(FormatError, match="bad magic") as exc:
        decode_frames(buf)
    assert exc.value.offset == 0


def test_truncated_payload_reports_offset():
    buf = good_buffer()[:-3]
    with pytest.raises(FormatError, match="truncated") as exc:
        decode_frames(buf)
    assert exc.value.offset == len(buf)


def test_truncated_header():
    with pytest.raises(FormatError, match="truncated header"):
        decode_frames(b"SPF1\x01")


def test_dimension_overflow():
    buf = HEADER.pack(b"SPF1", 1, 0, 1 << 16, 1 << 16, 1)
    with pytest.raises(FormatError, match="overflow") as exc:
        decode_frames(buf)
    assert exc.value.offset == 8


def test_unsupported_version_and_flags():
    buf = bytearray(good_buffer())
    struct.pack_into("<H", buf, 4, 9)
    with pytest.raises(FormatError, match="unsupported version"):
        decode_frames(bytes(buf))
    buf = bytearray(good_buffer())
    struct.pack_into("<H", buf, 6, 0x4)
    with pytest.raises(FormatError, match="flag"):
        decode_frames(bytes(buf))


def test_trailing_bytes_and_bad_labels():
    with pytest.raises(FormatError, match="trailing"):
        decode_frames(good_buffer() + b"\0")
    buf = bytearray(good_buffer())
    buf[-1] = 7
    with pytest.raises(FormatError, match="label") as exc:
        decode_frames(bytes(buf))
    assert exc.value.offset == len(buf) - 1


def test_zero_extent_rejected():
    with pytest.raises(FormatError, match="zero"):
        decode_frames(HEADER.pack(b"SPF1", 1, 0, 0, 4, 0))
