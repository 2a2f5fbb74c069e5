"""Binary checkpoint files (magic ``UCKP``) with a JSON run-config snapshot alongside.

Layout, little-endian:

    b"UCKP" | u32 version | u8 stage | u16 len + task tag
    u32 count, then per parameter block:  u16 len + name | u32 rank | u32 extents | f32 payload
    u32 count, buffer blocks (same block layout)
    u32 optimizer step | u32 count, moment blocks named ``m/<param>`` and ``v/<param>``
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"UCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    task: str
    stage: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict | None = None


def _write_blocks(out: list[bytes], blocks: dict[str, np.ndarray]) -> None:
    out.append(struct.pack("<I", len(blocks)))
    for name, arr in blocks.items():
        raw = name.encode()
        a = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())


def _read_blocks(buf: memoryview, pos: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    blocks = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = bytes(buf[pos:pos + n]).decode()
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + size > len(buf):
            raise CheckpointError(f"block {name!r} is truncated")
        blocks[name] = np.frombuffer(bytes(buf[pos:pos + size]), dtype="<f4").reshape(shape).copy()
        pos += size
    return blocks, pos


def dumps(ck: Checkpoint) -> bytes:
    tag = ck.task.encode()
    out = [MAGIC, struct.pack("<IB", VERSION, ck.stage), struct.pack("<H", len(tag)), tag]
    _write_blocks(out, ck.params)
    _write_blocks(out, ck.buffers)
    out.append(struct.pack("<I", ck.opt_step))
    _write_blocks(out, ck.moments)
    return b"".join(out)


def loads(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    buf = memoryview(data)
    try:
        version, stage = struct.unpack_from("<IB", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<H", buf, 9)
        task = bytes(buf[11:11 + n]).decode()
        pos = 11 + n
        params, pos = _read_blocks(buf, pos)
        buffers, pos = _read_blocks(buf, pos)
        (opt_step,) = struct.unpack_from("<I", buf, pos)
        moments, pos = _read_blocks(buf, pos + 4)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after checkpoint payload")
    return Checkpoint(task, stage, params, buffers, opt_step, moments)


def config_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save(path, ck: Checkpoint) -> Path:
    path = Path(path)
    path.write_bytes(dumps(ck))
    if ck.config is not None:
        config_path(path).write_text(json.dumps(ck.config, indent=2, sort_keys=True) + "\n")
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    ck = loads(path.read_bytes())
    cp = config_path(path)
    if cp.exists():
        ck.config = json.loads(cp.read_text())
    return ck
