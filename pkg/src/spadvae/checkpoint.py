"""Binary checkpoint (``.vaec``) files.

Layout, little-endian::

    magic       4 bytes  b"VAEC"
    version     u16
    config_len  u32
    config      config_len bytes of UTF-8 JSON {"model": ..., "train": ..., "adamw": ...}
    config_hash u64      ModelConfig.config_hash()
    iteration   u64      optimizer steps completed
    adam_t      u64
    n_params    u64      total scalar parameter count P
    params      P * f32  tensors in param_shapes() order, each row-major
    adam_m      P * f64
    adam_v      P * f64
    rng         40 bytes PCG64 state (u128 state, u128 inc, u32 has_uint32, u32 uinteger)
    checksum    u64      first 8 bytes of BLAKE2b over everything above

Parameters are stored in 32-bit; the trainer keeps its 64-bit working copy
rounded to float32 after every step, so saving loses nothing.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigMismatchError
from .optim import AdamWState
from .vae import ModelConfig, param_count, param_shapes

MAGIC = b"VAEC"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_COUNTERS = struct.Struct("<QQQQ")
_RNG = struct.Struct("<QQQQII")
_CHECKSUM = struct.Struct("<Q")
_MASK64 = (1 << 64) - 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    adam: AdamWState
    iteration: int = 0
    rng_state: dict = None
    train_config: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def config_hash(self):
        return self.config.config_hash()


def _checksum(data):
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _flat(tensors, names, dtype):
    return np.concatenate([np.asarray(tensors[n], dtype=dtype).ravel() for n in names])


def _unflat(vec, shapes):
    out, pos = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        out[name] = vec[pos : pos + size].reshape(shape).copy()
        pos += size
    return out


def _pack_rng(state):
    if state is None:
        return _RNG.pack(0, 0, 0, 0, 0, 0)
    if state.get("bit_generator") != "PCG64":
        raise ValueError("only PCG64 generator state can be checkpointed")
    s, inc = state["state"]["state"], state["state"]["inc"]
    return _RNG.pack(s & _MASK64, s >> 64, inc & _MASK64, inc >> 64,
                     int(state["has_uint32"]), int(state["uinteger"]))


def _unpack_rng(raw):
    s_lo, s_hi, i_lo, i_hi, has, uint = _RNG.unpack(raw)
    if not (s_lo or s_hi or i_lo or i_hi):
        return None
    return {
        "bit_generator": "PCG64",
        "state": {"state": s_lo | (s_hi << 64), "inc": i_lo | (i_hi << 64)},
        "has_uint32": has,
        "uinteger": uint,
    }


def encode_checkpoint(ckpt):
    shapes = param_shapes(ckpt.config)
    names = list(shapes)
    p = param_count(ckpt.config)
    adam = ckpt.adam
    cfg_blob = json.dumps(
        {
            "model": ckpt.config.to_dict(),
            "train": ckpt.train_config,
            "adamw": {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                      "weight_decay": adam.weight_decay},
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    m = adam.m if adam.m else {n: np.zeros(s) for n, s in shapes.items()}
    v = adam.v if adam.v else {n: np.zeros(s) for n, s in shapes.items()}
    parts = [
        _PREFIX.pack(MAGIC, ckpt.version, len(cfg_blob)),
        cfg_blob,
        _COUNTERS.pack(ckpt.config_hash, ckpt.iteration, adam.t, p),
        _flat(ckpt.params, names, "<f4").tobytes(),
        _flat(m, names, "<f8").tobytes(),
        _flat(v, names, "<f8").tobytes(),
        _pack_rng(ckpt.rng_state),
    ]
    body = b"".join(parts)
    return body + _CHECKSUM.pack(_checksum(body))


def checkpoint_size(config, config_block_len):
    """Exact file size for a model config and JSON config block length."""
    p = param_count(config)
    header = _PREFIX.size + config_block_len + _COUNTERS.size
    return header + 4 * p + 8 * (2 * p) + _RNG.size + _CHECKSUM.size


def decode_checkpoint(buf, expected_hash=None):
    buf = bytes(buf)
    if len(buf) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint header", offset=len(buf))
    magic, version, cfg_len = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", offset=4)
    pos = _PREFIX.size
    if len(buf) < pos + cfg_len + _COUNTERS.size:
        raise CheckpointError("truncated checkpoint config block", offset=len(buf))
    try:
        meta = json.loads(buf[pos : pos + cfg_len].decode())
        config = ModelConfig.from_dict(meta["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable config block: {exc}", offset=pos) from exc
    pos += cfg_len
    cfg_hash, iteration, adam_t, p = _COUNTERS.unpack_from(buf, pos)
    pos += _COUNTERS.size
    expected_size = checkpoint_size(config, cfg_len)
    if len(buf) < expected_size:
        raise CheckpointError(
            f"truncated checkpoint: {len(buf)} of {expected_size} bytes", offset=len(buf)
        )
    if len(buf) > expected_size:
        raise CheckpointError("trailing bytes after checksum", offset=expected_size)
    stored_sum = _CHECKSUM.unpack_from(buf, expected_size - _CHECKSUM.size)[0]
    if stored_sum != _checksum(buf[: expected_size - _CHECKSUM.size]):
        raise CheckpointError("checksum mismatch", offset=expected_size - _CHECKSUM.size)
    if cfg_hash != config.config_hash():
        raise CheckpointError("stored config hash does not match config block", offset=pos - 32)
    if p != param_count(config):
        raise CheckpointError(f"parameter count {p} does not match config", offset=pos - 8)
    if expected_hash is not None and cfg_hash != expected_hash:
        raise ConfigMismatchError(
            f"checkpoint config hash {cfg_hash:016x} != expected {expected_hash:016x}"
        )

    shapes = param_shapes(config)
    params = np.frombuffer(buf, "<f4", count=p, offset=pos).astype(np.float64)
    pos += 4 * p
    m = np.frombuffer(buf, "<f8", count=p, offset=pos).astype(np.float64)
    pos += 8 * p
    v = np.frombuffer(buf, "<f8", count=p, offset=pos).astype(np.float64)
    pos += 8 * p
    rng_state = _unpack_rng(buf[pos : pos + _RNG.size])
    hyper = meta.get("adamw", {})
    adam = AdamWState(m=_unflat(m, shapes), v=_unflat(v, shapes), t=adam_t, **hyper)
    return Checkpoint(config, _unflat(params, shapes), adam, iteration, rng_state,
                      meta.get("train", {}), version)


def save_checkpoint(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path, expected_hash=None):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), expected_hash)
