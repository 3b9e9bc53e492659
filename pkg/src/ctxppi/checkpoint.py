"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"CTXPPI1\\0"
    version      u32
    config hash  32 bytes  sha256 digest
    epoch        u64
    has adam     u8
    adam step    u64
    adam hyper   4 x f64   lr, beta1, beta2, eps
    state JSON   u32 length + UTF-8 JSON {"rng": ..., "meta": ...}
    n matrices   u32
    per matrix   u16 name length, name, u32 rows, u32 cols, rows*cols f64
    crc32        u32 over every preceding byte

Matrix names carry a prefix: ``param/`` for model parameters, ``best/`` for
the best-validation parameters kept by training, ``adam.m/`` and ``adam.v/``
for optimizer moments.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState
from .errors import CorruptCheckpoint, ResumeMismatch, UnsupportedVersion

MAGIC = b"CTXPPI1\0"
VERSION = 1


@dataclass
class Checkpoint:
    config_hash: str
    params: dict
    epoch: int = 0
    adam: AdamState | None = None
    rng_state: dict | None = None
    best_params: dict | None = None
    meta: dict = field(default_factory=dict)

    def equals(self, other):
        def same(a, b):
            return a.keys() == b.keys() and all(
                a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a
            )

        if (self.config_hash, self.epoch) != (other.config_hash, other.epoch):
            return False
        if _state_json(self) != _state_json(other):
            return False
        if not same(self.params, other.params) or not same(self.best_params or {}, other.best_params or {}):
            return False
        if (self.best_params is None) != (other.best_params is None):
            return False
        if (self.adam is None) != (other.adam is None):
            return False
        if self.adam is not None:
            ha = (self.adam.step, self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps)
            hb = (other.adam.step, other.adam.lr, other.adam.beta1, other.adam.beta2, other.adam.eps)
            if ha != hb or not same(self.adam.m, other.adam.m) or not same(self.adam.v, other.adam.v):
                return False
        return True


def _state_json(ckpt):
    return json.dumps({"rng": ckpt.rng_state, "meta": ckpt.meta}, sort_keys=True).encode()


def _matrix(buf, name, arr):
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim != 2:
        raise ValueError(f"{name}: checkpoints hold 2-d matrices only")
    raw = name.encode("utf-8")
    buf += struct.pack("<H", len(raw)) + raw
    buf += struct.pack("<II", *arr.shape)
    buf += np.ascontiguousarray(arr).tobytes()


def dumps(ckpt):
    digest = bytes.fromhex(ckpt.config_hash)
    if len(digest) != 32:
        raise ValueError("config hash must be a sha256 hex digest")
    adam = ckpt.adam or AdamState(step=0)
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    buf += digest
    buf += struct.pack("<QBQ", ckpt.epoch, ckpt.adam is not None, adam.step)
    buf += struct.pack("<4d", adam.lr, adam.beta1, adam.beta2, adam.eps)
    state = _state_json(ckpt)
    buf += struct.pack("<I", len(state)) + state
    mats = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    if ckpt.best_params is not None:
        mats += [(f"best/{k}", v) for k, v in ckpt.best_params.items()]
    if ckpt.adam is not None:
        mats += [(f"adam.m/{k}", v) for k, v in ckpt.adam.m.items()]
        mats += [(f"adam.v/{k}", v) for k, v in ckpt.adam.v.items()]
    buf += struct.pack("<I", len(mats))
    for name, arr in mats:
        _matrix(buf, name, arr)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptCheckpoint("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data):
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint("not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint("CRC mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}; this build reads {VERSION}")
    digest = r.take(32).hex()
    epoch, has_adam, step = r.unpack("<QBQ")
    lr, b1, b2, eps = r.unpack("<4d")
    (n_state,) = r.unpack("<I")
    try:
        state = json.loads(r.take(n_state).decode())
    except ValueError:
        raise CorruptCheckpoint("unreadable state block") from None
    (n_mats,) = r.unpack("<I")
    params, best, m, v = {}, {}, {}, {}
    for _ in range(n_mats):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode("utf-8")
        rows, cols = r.unpack("<II")
        arr = np.frombuffer(r.take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
        kind, _, key = name.partition("/")
        target = {"param": params, "best": best, "adam.m": m, "adam.v": v}.get(kind)
        if target is None:
            raise CorruptCheckpoint(f"unknown matrix section {kind!r}")
        target[key] = arr
    if r.pos != len(body):
        raise CorruptCheckpoint("trailing bytes after matrices")
    adam = AdamState(lr, b1, b2, eps, step, m, v) if has_adam else None
    return Checkpoint(digest, params, epoch, adam, state.get("rng"), best or None, state.get("meta") or {})


def save_checkpoint(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def check_resume(ckpt, config_hash):
    if ckpt.config_hash != config_hash:
        raise ResumeMismatch(
            f"checkpoint was written under config {ckpt.config_hash[:12]}..., "
            f"current config is {config_hash[:12]}..."
        )
