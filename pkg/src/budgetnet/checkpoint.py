"""Binary checkpoint container.

Layout (little-endian)::

    b"BNET"  u32 version
    u32 n, n bytes     config text (same format as config files)
    u32 n, n bytes     state text (epoch, counters, rng states, metrics)
    u32 count
    count x { u32 name_len, name, u32 rank, rank x u32 dims, float32 payload }
"""

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from budgetnet import config as cfg
from budgetnet.errors import ConfigError, FormatError

MAGIC = b"BNET"
VERSION = 1


@dataclass
class Checkpoint:
    config: cfg.TrainConfig
    epoch: int
    tensors: dict = field(default_factory=dict)  # name -> ndarray, insertion ordered
    state: dict = field(default_factory=dict)  # scalar/list values, text serialisable


def _state_text(epoch, state):
    lines = [f"epoch = {epoch}"]
    for key, value in state.items():
        lines.append(f"{key} = {cfg.format_value(value)}")
    return "\n".join(lines) + "\n"


def dumps(ckpt):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for text in (cfg.dumps(ckpt.config), _state_text(ckpt.epoch, ckpt.state)):
        raw = text.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if n < 0 or self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def text(self):
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("checkpoint text section is not UTF-8") from exc


def loads(raw):
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        config = cfg.loads(r.text())
        state = cfg.parse_text(r.text())
    except ConfigError as exc:
        raise FormatError(f"checkpoint header is malformed: {exc}") from exc
    if "epoch" not in state:
        raise FormatError("checkpoint state lacks an epoch")
    epoch = state.pop("epoch")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(config, epoch, tensors, state)


def save(path, ckpt):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return loads(raw)
