"""Binary checkpoint shard files and the consolidation manifest.

File layout (little-endian)::

    b"GMCK" | format u16 | model_id str16 | dp_group u16 | iteration u64 |
    shard_id u16 | shard_count u16 | layer_count u32 |
    layer_count x (name str16 | elements u64 | float32 params) |
    kind str8 | hyper json str32 | step u64 | buffer_count u8 |
    buffer_count x (name str8 | float32 state for every layer, in layer order) |
    crc32 u32   (over every preceding byte)

``str16`` is a u16 length followed by UTF-8 bytes (``str8``/``str32`` likewise).
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, ProtocolError, ShapeError
from .optim import OptimHyper, OptimState

FILE_MAGIC = b"GMCK"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<HQHHI")


@dataclass
class CheckpointFile:
    model_id: str
    dp_group: int
    iteration: int
    shard_id: int
    shard_count: int
    layers: list[tuple[str, int]]
    params: np.ndarray  # float32, concatenated in layer order
    optim: OptimState  # buffers congruent to ``params``

    def layer_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, count in self.layers:
            out[name] = slice(start, start + count)
            start += count
        return out


def _str(fmt: str, s: str) -> bytes:
    raw = s.encode()
    return struct.pack(fmt, len(raw)) + raw


def _read_str(buf: io.BytesIO, fmt: str) -> str:
    (n,) = struct.unpack(fmt, _read(buf, struct.calcsize(fmt)))
    return _read(buf, n).decode()


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ProtocolError("truncated checkpoint")
    return data


def encode(ck: CheckpointFile) -> bytes:
    out = io.BytesIO()
    out.write(FILE_MAGIC)
    out.write(struct.pack("<H", FORMAT_VERSION))
    out.write(_str("<H", ck.model_id))
    out.write(_HEAD.pack(ck.dp_group, ck.iteration, ck.shard_id, ck.shard_count, len(ck.layers)))
    sl = ck.layer_slices()
    for name, count in ck.layers:
        out.write(_str("<H", name))
        out.write(struct.pack("<Q", count))
        out.write(np.ascontiguousarray(ck.params[sl[name]], dtype="<f4").tobytes())
    hyper = ck.optim.hyper
    out.write(_str("<B", hyper.kind))
    out.write(_str("<I", json.dumps(hyper.as_dict(), sort_keys=True)))
    out.write(struct.pack("<QB", ck.optim.step, len(ck.optim.buffers)))
    for name in hyper.buffer_names():
        out.write(_str("<B", name))
        out.write(np.ascontiguousarray(ck.optim.buffers[name], dtype="<f4").tobytes())
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes) -> CheckpointFile:
    if len(data) < 8:
        raise ProtocolError("checkpoint too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint CRC-32 mismatch")
    buf = io.BytesIO(body)
    if _read(buf, 4) != FILE_MAGIC:
        raise ProtocolError("not a checkpoint file")
    (version,) = struct.unpack("<H", _read(buf, 2))
    if version != FORMAT_VERSION:
        raise ProtocolError(f"unsupported checkpoint format {version}")
    model_id = _read_str(buf, "<H")
    dp_group, iteration, shard_id, shard_count, nlayers = _HEAD.unpack(_read(buf, _HEAD.size))
    layers, chunks = [], []
    for _ in range(nlayers):
        name = _read_str(buf, "<H")
        (count,) = struct.unpack("<Q", _read(buf, 8))
        layers.append((name, count))
        chunks.append(np.frombuffer(_read(buf, 4 * count), dtype="<f4"))
    total = sum(c for _, c in layers)
    params = np.concatenate(chunks).astype(np.float32) if chunks else np.zeros(0, np.float32)
    kind = _read_str(buf, "<B")
    hyper = OptimHyper(**json.loads(_read_str(buf, "<I")))
    if hyper.kind != kind:
        raise ProtocolError("optimizer kind disagrees with hyperparameters")
    step, nbuf = struct.unpack("<QB", _read(buf, 9))
    buffers = {}
    for _ in range(nbuf):
        name = _read_str(buf, "<B")
        buffers[name] = np.frombuffer(_read(buf, 4 * total), dtype="<f4").astype(np.float32)
    if buf.read(1):
        raise ProtocolError("trailing bytes in checkpoint")
    return CheckpointFile(model_id, dp_group, iteration, shard_id, shard_count, layers, params,
                          OptimState(hyper, step, buffers))


def write(path: Path, ck: CheckpointFile) -> int:
    data = encode(ck)
    Path(path).write_bytes(data)
    return zlib.crc32(data[:-4])


def read(path: Path) -> CheckpointFile:
    return decode(Path(path).read_bytes())


def shard_filename(dp_group: int, shard: int) -> str:
    return f"group{dp_group}_shard{shard}.ckpt"


def write_manifest(path: Path, iteration: int, entries: list[tuple[int, int, str, int]]) -> None:
    """``entries`` are ``(dp_group, shard, filename, crc32)``."""
    lines = [f"iteration {iteration}", f"shards {len(entries)}"]
    for group, shard, fname, crc in entries:
        lines.append(f"shard group={group} id={shard} file={fname} crc32={crc:08x}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> tuple[int, list[tuple[int, int, str, int]]]:
    text = Path(path).read_text().splitlines()
    try:
        iteration = int(text[0].split()[1])
        entries = []
        for line in text[2:]:
            fields = dict(kv.split("=", 1) for kv in line.split()[1:])
            entries.append((int(fields["group"]), int(fields["id"]), fields["file"], int(fields["crc32"], 16)))
    except (IndexError, KeyError, ValueError) as exc:
        raise ProtocolError(f"malformed manifest {path}: {exc}") from None
    return iteration, entries


def merge(files: list[CheckpointFile], layer_table: list[tuple[str, int]]):
    """Reassemble full ``(params, OptimState)`` in ``layer_table`` order from shard files."""
    from .trainer import FlatTensor

    if not files:
        raise ShapeError("no checkpoint shards to merge")
    iters = {f.iteration for f in files}
    if len(iters) != 1:
        raise ShapeError(f"shards pinned to different iterations: {sorted(iters)}")
    steps = {f.optim.step for f in files}
    if len(steps) != 1:
        raise ShapeError(f"shards disagree on optimizer step: {sorted(steps)}")
    hyper = files[0].optim.hyper
    params = FlatTensor.zeros(layer_table)
    buffers = {name: FlatTensor.zeros(layer_table) for name in hyper.buffer_names()}
    seen = set()
    expected = dict(layer_table)
    for f in files:
        for name, sl in f.layer_slices().items():
            if name not in expected or expected[name] != sl.stop - sl.start:
                raise ShapeError(f"checkpoint layer {name!r} not in the model layer table")
            if name in seen:
                raise ShapeError(f"layer {name!r} present in two shards")
            seen.add(name)
            params.view(name)[:] = f.params[sl]
            for b in buffers:
                buffers[b].view(name)[:] = f.optim.buffers[b][sl]
    missing = set(expected) - seen
    if missing:
        raise ShapeError(f"layers missing from checkpoint shards: {sorted(missing)}")
    state = OptimState(hyper, steps.pop(), {b: t.storage for b, t in buffers.items()})
    return iters.pop(), params, state
