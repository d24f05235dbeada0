"""Bit-packed frame files (``.spf``).

Layout, all integers little-endian::

    offset  size  field
    0       4     magic b"SPF1"
    4       2     version (u16) = 1
    6       2     flags (u16); bit 0 = labels present
    8       4     width (u32)
    12      4     height (u32)
    16      4     n_frames (u32)
    20      ...   n_frames * ceil(W*H/8) bytes of pixels
    ...     ...   n_frames label bytes (0 background, 1 signal), if flagged

Pixels are packed row-major and continuously across each frame (no per-row
padding), most significant bit first; only the last byte of a frame can carry
padding bits.
"""

import struct

import numpy as np

from .datagen import LabeledSet
from .errors import FormatError

MAGIC = b"SPF1"
VERSION = 1
FLAG_LABELS = 0x1
HEADER = struct.Struct("<4sHHIII")
MAX_PIXELS = 1 << 30


def frame_nbytes(width, height):
    return (width * height + 7) // 8


def encode_frames(ds):
    frames = np.asarray(ds.frames, dtype=np.uint8)
    n, h, w = frames.shape
    if frames.size and frames.max() > 1:
        raise ValueError("frames must be binary")
    flags = FLAG_LABELS if ds.labels is not None else 0
    parts = [HEADER.pack(MAGIC, VERSION, flags, w, h, n)]
    if n:
        parts.append(np.packbits(frames.reshape(n, h * w), axis=1, bitorder="big").tobytes())
    if ds.labels is not None:
        parts.append(np.asarray(ds.labels, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_frames(buf):
    buf = memoryview(buf)
    if len(buf) < HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER.size} bytes", offset=len(buf))
    magic, version, flags, w, h, n = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if flags & ~FLAG_LABELS:
        raise FormatError(f"unknown flag bits 0x{flags:04x}", offset=6)
    if w == 0 or h == 0:
        raise FormatError(f"zero frame extent {w}x{h}", offset=8 if w == 0 else 12)
    if w * h > MAX_PIXELS:
        raise FormatError(f"dimension overflow: {w}x{h} pixels per frame", offset=8)
    fb = frame_nbytes(w, h)
    pos = HEADER.size
    need = n * fb + (n if flags & FLAG_LABELS else 0)
    if len(buf) - pos < need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {len(buf) - pos}", offset=len(buf)
        )
    if len(buf) - pos > need:
        raise FormatError(f"{len(buf) - pos - need} trailing bytes after payload", offset=pos + need)
    packed = np.frombuffer(buf, dtype=np.uint8, count=n * fb, offset=pos).reshape(n, fb)
    frames = np.unpackbits(packed, axis=1, count=w * h, bitorder="big").reshape(n, h, w)
    pos += n * fb
    labels = None
    if flags & FLAG_LABELS:
        labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).copy()
        if labels.size and labels.max() > 1:
            bad = int(np.argmax(labels > 1))
            raise FormatError(f"invalid label value {labels[bad]}", offset=pos + bad)
    return LabeledSet(frames, labels)


def write_frames(path, ds):
    with open(path, "wb") as fh:
        fh.write(encode_frames(ds))


def read_frames(path):
    with open(path, "rb") as fh:
        return decode_frames(fh.read())
