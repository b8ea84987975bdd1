"""Single-file binary checkpoints.

Layout (little-endian)::

    b"PPGN"  u32 format_version
    u32 len, module_name (utf-8)
    u32 len, config snapshot (canonical JSON)
    u32 len, config_hash (ascii hex)
    u64 step   u8 frozen   u32 n_arrays
    n_arrays x [u32 len, name | u32 ndim | ndim x u32 dim | u64 count | count x f32]

Arrays appear in declaration order.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"PPGN"
FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    module_name: str
    config: dict
    step: int
    arrays: dict[str, np.ndarray]
    frozen: bool = False
    format_version: int = FORMAT_VERSION
    config_hash: str = field(default="")

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)


def _str(buf, s: str):
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def dumps(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ck.format_version))
    _str(buf, ck.module_name)
    _str(buf, json.dumps(ck.config, sort_keys=True, separators=(",", ":")))
    _str(buf, ck.config_hash)
    buf.write(struct.pack("<QBI", ck.step, int(ck.frozen), len(ck.arrays)))
    for name, arr in ck.arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        _str(buf, name)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(struct.pack("<Q", a.size))
        buf.write(a.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def str(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic; not a PPGN checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {version}")
    module_name = r.str()
    config = json.loads(r.str())
    chash = r.str()
    step, frozen, n = r.unpack("<QBI")
    arrays = {}
    for _ in range(n):
        name = r.str()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (count,) = r.unpack("<Q")
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last array")
    return Checkpoint(module_name, config, step, arrays, bool(frozen), version, chash)


def save(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ck))
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
