"""Shadow replicas: predict the tagged streams, reassemble buckets, step the optimizer.

A shadow never runs forward or backward passes.  It knows, from the ring
configuration and bucket layout alone, which chunk arrives at which offset of
which stream, so incoming frames can be written straight into bucket buffers.
Once every bucket a replica owns is complete for an iteration, it runs the
same optimizer step as the trainers on views into those buffers.
"""

from __future__ import annotations

import bisect
import json
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import checkpoint, collective, optim
from .collective import RingConfig
from .errors import (ConsistencyError, ConsolidationError, CorruptionError, ProtocolError,
                     ShapeError)
from .fabric.wire import Flags, MsgType, WireFrame
from .trainer import BucketLayout, FlatTensor, TrainState, grad_scale

StreamKey = tuple[int, int, int, int]  # (dp_group, source rank, channel, shard)


@dataclass(frozen=True)
class Segment:
    bucket_id: int
    chunk_id: int
    round: int
    byte_offset: int  # offset of the chunk inside the padded bucket
    byte_len: int
    inner_seq: int


@dataclass
class StreamExpectation:
    dp_group: int
    world_size: int
    streams: dict[StreamKey, list[Segment]] = field(default_factory=dict)

    def __post_init__(self):
        self._starts = {k: [s.inner_seq for s in segs] for k, segs in self.streams.items()}

    def lookup(self, key: StreamKey, seq: int) -> Segment:
        segs = self.streams.get(key)
        if segs is None:
            raise ProtocolError(f"frame on unexpected stream {key}")
        i = bisect.bisect_right(self._starts[key], seq) - 1
        if i < 0 or seq >= segs[i].inner_seq + segs[i].byte_len:
            raise ProtocolError(f"inner_seq {seq} outside expected segments of stream {key}")
        return segs[i]

    def stream_bytes(self, key: StreamKey) -> int:
        segs = self.streams[key]
        return segs[-1].inner_seq + segs[-1].byte_len if segs else 0

    def segments(self) -> Iterable[tuple[StreamKey, Segment]]:
        for key in sorted(self.streams):
            for seg in self.streams[key]:
                yield key, seg


def expected_stream_layout(ring: RingConfig, layout: BucketLayout,
                           shards: optim.ShardAssignment | None = None) -> StreamExpectation:
    """Derive every tagged segment of one iteration from configuration alone."""
    n = ring.world_size
    if n < 2:
        raise ShapeError("a ring of one rank emits no tagged traffic")
    if shards is None:
        shards = optim.partition_parameters(layout, 1)
    if set(shards.bucket_to_shard) != {b.bucket_id for b in layout.buckets}:
        raise ShapeError("shard assignment does not cover the bucket layout")
    streams: dict[StreamKey, list[Segment]] = defaultdict(list)
    cursor: dict[StreamKey, int] = defaultdict(int)
    for bucket in layout.buckets:
        refs = collective.chunk_refs(ring, bucket.bucket_id, bucket.elements)
        shard = shards.bucket_to_shard[bucket.bucket_id]
        for rnd in range(n - 1):
            for rank in collective.boundary_ranks(n):
                if not collective.should_tag(n, rank, rnd):
                    continue
                ref = refs[collective.allgather_send_chunk(n, rank, rnd)]
                key = (ring.dp_group, rank, ref.channel_id, shard)
                streams[key].append(Segment(bucket.bucket_id, ref.chunk_id, rnd, ref.byte_offset,
                                            ref.byte_len, cursor[key]))
                cursor[key] += ref.byte_len
    return StreamExpectation(ring.dp_group, n, dict(streams))


@dataclass(frozen=True)
class BucketComplete:
    dp_group: int
    iteration: int
    bucket_id: int


class ReassemblyState:
    """Per-shadow reassembly of tagged streams into padded bucket buffers."""

    def __init__(self, expectations: dict[int, StreamExpectation], layouts: dict[int, BucketLayout],
                 owned: dict[int, set[int]]):
        self.expect = expectations
        self.layouts = layouts
        self.owned = owned  # dp_group -> bucket ids this node must receive
        self.watermark: dict[tuple[int, StreamKey], int] = {}
        self.buffers: dict[tuple[int, int, int], np.ndarray] = {}  # (group, iter, bucket) -> uint8
        self.coverage: dict[tuple[int, int, int], np.ndarray] = {}
        self.received: dict[tuple[int, int, int], int] = {}
        self.completed: set[tuple[int, int, int]] = set()
        self.frames = 0

    def bucket_bytes(self, group: int, bucket_id: int) -> int:
        b = self.layouts[group].buckets[bucket_id]
        n = self.expect[group].world_size
        return collective.padded_elements(b.elements, n) * 4

    def ingest_frame(self, frame: WireFrame) -> list[BucketComplete]:
        if frame.msg_type != MsgType.DATA or not frame.tagged:
            raise ProtocolError("shadow streams carry only tagged DATA frames")
        group = frame.dp_group
        if group not in self.expect:
            raise ProtocolError(f"no expectation for dp_group {group}")
        skey: StreamKey = (group, frame.src_rank, frame.channel_id, frame.shadow_shard)
        seg = self.expect[group].lookup(skey, frame.inner_seq)
        wkey = (frame.iteration, skey)
        mark = self.watermark.get(wkey, 0)
        plen = len(frame.payload)
        if frame.inner_seq < mark:
            raise CorruptionError(f"duplicate bytes at seq {frame.inner_seq} on stream {skey}")
        if frame.inner_seq > mark:
            raise ProtocolError(f"gap on stream {skey}: expected seq {mark}, got {frame.inner_seq}")
        if (frame.bucket_id, frame.chunk_id) != (seg.bucket_id, seg.chunk_id):
            raise ProtocolError(
                f"frame claims bucket/chunk {(frame.bucket_id, frame.chunk_id)}, "
                f"expected {(seg.bucket_id, seg.chunk_id)}")
        if frame.inner_seq - seg.inner_seq != frame.byte_offset or frame.byte_offset + plen > seg.byte_len:
            raise ProtocolError("frame offset inconsistent with the expected segment")
        if frame.bucket_id not in self.owned.get(group, ()):
            raise ProtocolError(f"bucket {frame.bucket_id} of group {group} not owned here")
        bkey = (group, frame.iteration, frame.bucket_id)
        if bkey in self.completed:
            raise CorruptionError(f"bucket {bkey} already complete")
        size = self.bucket_bytes(group, frame.bucket_id)
        buf = self.buffers.get(bkey)
        if buf is None:
            buf = self.buffers[bkey] = np.zeros(size, dtype=np.uint8)
            self.coverage[bkey] = np.zeros(size // 4, dtype=bool)
            self.received[bkey] = 0
        lo = seg.byte_offset + frame.byte_offset
        cov = self.coverage[bkey][lo // 4:(lo + plen) // 4]
        if cov.any():
            raise CorruptionError(f"byte range {lo}..{lo + plen} of bucket {bkey} written twice")
        buf[lo:lo + plen] = np.frombuffer(frame.payload, dtype=np.uint8)
        cov[:] = True
        self.watermark[wkey] = mark + plen
        self.received[bkey] += plen
        self.frames += 1
        if self.received[bkey] == size:
            self.completed.add(bkey)
            return [BucketComplete(group, frame.iteration, frame.bucket_id)]
        return []

    def take_bucket(self, group: int, iteration: int, bucket_id: int) -> np.ndarray:
        key = (group, iteration, bucket_id)
        if key not in self.completed:
            raise ConsistencyError(f"bucket {key} is not complete")
        self.coverage.pop(key)
        self.received.pop(key)
        return self.buffers.pop(key)

    def finish_iteration(self, group: int, iteration: int, shard: int | None = None,
                         buckets: Iterable[int] | None = None) -> None:
        """Forget completion marks and watermarks of one iteration (optionally one shard)."""
        owned = None if buckets is None else set(buckets)
        self.completed = {k for k in self.completed
                          if k[:2] != (group, iteration) or (owned is not None and k[2] not in owned)}
        for key in [k for k in self.watermark if k[0] == iteration and k[1][0] == group
                    and (shard is None or k[1][3] == shard)]:
            del self.watermark[key]

    def bucket_ready(self, group: int, iteration: int, buckets: Iterable[int]) -> bool:
        return all((group, iteration, b) in self.completed for b in buckets)

    def discard_incomplete(self) -> int:
        """Drop every buffered bucket (after a training failure the iteration is redone)."""
        stale = list(self.buffers)
        for k in stale:
            del self.buffers[k], self.coverage[k], self.received[k]
        self.completed.clear()
        self.watermark.clear()
        return len(stale)


def map_bucket_to_params(layout: BucketLayout, bucket_id: int, bucket_bytes) -> list[tuple[str, tuple[int, int], np.ndarray]]:
    """Float32 views (no copies) of each layer's gradient inside a bucket buffer."""
    bucket = layout.buckets[bucket_id]
    raw = np.frombuffer(bucket_bytes, dtype=np.uint8) if isinstance(bucket_bytes, (bytes, bytearray)) else bucket_bytes
    if raw.dtype != np.uint8:
        raw = raw.view(np.uint8)
    if raw.shape[0] < bucket.nbytes or raw.shape[0] % 4:
        raise ShapeError(f"bucket {bucket_id} buffer is {raw.shape[0]} bytes, layout needs {bucket.nbytes}")
    floats = raw.view(np.float32)
    out = []
    for e in bucket.entries:
        lo = e.bucket_offset // 4
        out.append((e.layer, (e.layer_start, e.layer_stop), floats[lo:lo + e.nbytes // 4]))
    return out


@dataclass
class Snapshot:
    iteration: int
    params: np.ndarray
    optim: optim.OptimState


class ShadowReplica:
    """One optimizer shard: the parameter slice and optimizer state for its buckets."""

    def __init__(self, dp_group: int, shard_id: int, shards: optim.ShardAssignment,
                 layout: BucketLayout, world_size: int, params: FlatTensor, state: optim.OptimState,
                 iteration: int = 0, model_id: str = "mlp"):
        self.dp_group = dp_group
        self.shard_id = shard_id
        self.shards = shards
        self.layout = layout
        self.world_size = world_size
        self.owned = shards.buckets_of(shard_id)
        self.model_id = model_id
        owned_layers = {e.layer for b in self.owned for e in layout.buckets[b].entries}
        self.layers = [(name, count) for name, count in params.layers if name in owned_layers]
        self.params = FlatTensor(self.layers, np.concatenate(
            [params.view(n) for n, _ in self.layers]).astype(np.float32) if self.layers else np.zeros(0, np.float32))
        self.optim = optim.OptimState(state.hyper, state.step, {
            k: np.concatenate([buf[slice(*params.layer_range(n))] for n, _ in self.layers]).astype(np.float32)
            if self.layers else np.zeros(0, np.float32)
            for k, buf in state.buffers.items()})
        self.last_completed = iteration
        self.snapshot: Snapshot | None = None

    @classmethod
    def from_train_state(cls, state: TrainState, layout: BucketLayout, shards: optim.ShardAssignment,
                         shard_id: int, model_id: str = "mlp") -> "ShadowReplica":
        return cls(state.ring.dp_group, shard_id, shards, layout, state.ring.world_size, state.params,
                   state.optim, state.iteration, model_id)

    def apply_update(self, iteration: int, buckets: dict[int, np.ndarray]) -> None:
        if iteration != self.last_completed + 1:
            raise ConsistencyError(
                f"shard {self.shard_id} at iteration {self.last_completed} cannot apply {iteration}")
        missing = [b for b in self.owned if b not in buckets]
        if missing:
            raise ConsistencyError(f"buckets {missing} missing for iteration {iteration}")
        pieces = []
        for b in self.owned:
            for name, _, grad in map_bucket_to_params(self.layout, b, buckets[b]):
                lo, hi = self.params.layer_range(name)
                pieces.append((lo, hi, grad))
        pieces.sort(key=lambda p: p[0])
        self.snapshot = Snapshot(self.last_completed, self.params.storage.copy(), self.optim.copy())
        optim.apply_step_pieces(self.optim, self.params.storage, pieces, grad_scale(self.world_size))
        self.last_completed = iteration

    def state_at(self, iteration: int) -> tuple[np.ndarray, optim.OptimState]:
        if iteration == self.last_completed:
            return self.params.storage, self.optim
        if self.snapshot is not None and self.snapshot.iteration == iteration:
            return self.snapshot.params, self.snapshot.optim
        raise ConsolidationError(
            f"shard {self.shard_id} of group {self.dp_group} cannot produce iteration {iteration} "
            f"(at {self.last_completed})")

    def rollback(self, iteration: int) -> None:
        """Return to ``iteration`` (current or the retained snapshot) before training is redone."""
        if iteration == self.last_completed:
            return
        params, state = self.state_at(iteration)
        self.params.storage[:] = params
        self.optim = state.copy()
        self.last_completed = iteration
        self.snapshot = None

    def checkpoint_file(self, iteration: int) -> checkpoint.CheckpointFile:
        params, state = self.state_at(iteration)
        return checkpoint.CheckpointFile(self.model_id, self.dp_group, iteration, self.shard_id,
                                         self.shards.k, list(self.layers), params.copy(), state.copy())

    def corrupt(self, layer: str, element: int) -> None:
        """Flip the low mantissa bit of one parameter (fault seeding for verification)."""
        view = self.params.view(layer).view(np.uint32)
        view[element] ^= 1


def consolidate(replicas: Sequence[ShadowReplica],
                at_most: int | None = None) -> tuple[int, list[checkpoint.CheckpointFile]]:
    """Pin every shard of one DP group to the minimum completed iteration.

    ``at_most`` caps the target at the iteration the trainers were running
    when they failed, so a restore never skips work the trainers never logged.
    """
    if not replicas:
        raise ConsolidationError("no shadow replicas to consolidate")
    target = min(r.last_completed for r in replicas)
    if at_most is not None:
        target = min(target, at_most)
    return target, [r.checkpoint_file(target) for r in replicas]


@dataclass
class ConsolidatedCheckpoint:
    dp_group: int
    iteration: int
    params: FlatTensor
    optim: optim.OptimState


def assemble(files: Sequence[checkpoint.CheckpointFile], layer_table) -> ConsolidatedCheckpoint:
    iteration, params, state = checkpoint.merge(list(files), list(layer_table))
    return ConsolidatedCheckpoint(files[0].dp_group, iteration, params, state)


# --- checkpoint serving --------------------------------------------------------

def serve_checkpoint(ck: checkpoint.CheckpointFile, layers: Sequence[str] | None = None) -> tuple[bytes, int]:
    """Encode the requested layers of a pinned shard; returns ``(bytes, crc32)``."""
    owned = dict(ck.layers)
    if layers is None:
        layers = [n for n, _ in ck.layers]
    unknown = [n for n in layers if n not in owned]
    if unknown:
        raise ShapeError(f"layers {unknown} are outside shard {ck.shard_id}")
    sl = ck.layer_slices()
    wanted = set(layers)
    idx = [n for n, _ in ck.layers if n in wanted]
    sub = checkpoint.CheckpointFile(
        ck.model_id, ck.dp_group, ck.iteration, ck.shard_id, ck.shard_count,
        [(n, owned[n]) for n in idx],
        np.concatenate([ck.params[sl[n]] for n in idx]) if idx else np.zeros(0, np.float32),
        optim.OptimState(ck.optim.hyper, ck.optim.step, {
            k: np.concatenate([b[sl[n]] for n in idx]) if idx else np.zeros(0, np.float32)
            for k, b in ck.optim.buffers.items()}),
    )
    data = checkpoint.encode(sub)
    return data, zlib.crc32(data[:-4])


CTRL_CHUNK = 8192


def ctrl_request(dp_group: int, shard: int, layers: Sequence[str] | None, src_rank: int = 0) -> WireFrame:
    body = json.dumps({"op": "fetch", "shard": shard, "layers": list(layers) if layers is not None else None})
    return WireFrame(msg_type=MsgType.CTRL, dp_group=dp_group, src_rank=src_rank, shadow_shard=shard,
                     payload=body.encode())


def handle_ctrl(files: dict[tuple[int, int], checkpoint.CheckpointFile], frame: WireFrame) -> list[WireFrame]:
    """Answer a fetch request with CTRL frames; ``chunk_id`` numbers the pieces, ``round`` is 1 on the last."""
    if frame.msg_type != MsgType.CTRL:
        raise ProtocolError("expected a CTRL request")
    req = json.loads(frame.payload)
    if req.get("op") != "fetch":
        raise ProtocolError(f"unknown ctrl op {req.get('op')!r}")
    ck = files.get((frame.dp_group, req["shard"]))
    if ck is None:
        raise ProtocolError(f"shard {req['shard']} of group {frame.dp_group} not served here")
    data, crc = serve_checkpoint(ck, req["layers"])
    pieces = [data[i:i + CTRL_CHUNK] for i in range(0, len(data), CTRL_CHUNK)] or [b""]
    return [
        WireFrame(msg_type=MsgType.CTRL, flags=int(Flags.RESPONSE), dp_group=frame.dp_group,
                  src_rank=frame.src_rank, shadow_shard=req["shard"], iteration=ck.iteration, chunk_id=i,
                  round=int(i == len(pieces) - 1), inner_seq=crc, byte_offset=i * CTRL_CHUNK, payload=p)
        for i, p in enumerate(pieces)
    ]


def collect_ctrl(frames: Sequence[WireFrame]) -> checkpoint.CheckpointFile:
    frames = sorted(frames, key=lambda f: f.chunk_id)
    if not frames or frames[-1].round != 1 or [f.chunk_id for f in frames] != list(range(len(frames))):
        raise ProtocolError("incomplete checkpoint response")
    data = b"".join(f.payload for f in frames)
    if zlib.crc32(data[:-4]) != frames[0].inner_seq:
        raise CorruptionError("served checkpoint failed its integrity check")
    return checkpoint.decode(data)
