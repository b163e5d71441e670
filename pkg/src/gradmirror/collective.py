"""Ring ReduceScatter/AllGather schedules and the boundary-rank tagging rule.

Chunk ownership convention: after ReduceScatter, rank ``i`` holds the fully
reduced chunk ``(i + 1) % n``.  During AllGather round ``r`` rank ``i`` sends
chunk ``(i + 1 - r) % n`` to rank ``i + 1``.  Only rank 0 (round 0) and rank
``n - 1`` (every round) tag what they send, which marks each reduced chunk
exactly once per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ScheduleError


@dataclass(frozen=True)
class RingConfig:
    world_size: int
    rank: int = 0
    num_channels: int = 1
    dp_group: int = 0

    def __post_init__(self):
        if self.world_size < 1:
            raise ConfigError(f"world_size must be >= 1, got {self.world_size}")
        if not 0 <= self.rank < self.world_size:
            raise ConfigError(f"rank {self.rank} outside ring of {self.world_size}")
        if self.num_channels < 1:
            raise ConfigError("num_channels must be >= 1")

    @property
    def next_rank(self) -> int:
        return (self.rank + 1) % self.world_size

    @property
    def prev_rank(self) -> int:
        return (self.rank - 1) % self.world_size

    def with_rank(self, rank: int) -> "RingConfig":
        return RingConfig(self.world_size, rank, self.num_channels, self.dp_group)


@dataclass(frozen=True)
class ChunkRef:
    bucket_id: int
    chunk_id: int
    channel_id: int
    byte_offset: int
    byte_len: int


@dataclass
class ChannelSeqState:
    channel_id: int
    next_tagged_seq: int = 0


def _check_ring(n: int, rank: int) -> None:
    if n < 2:
        raise ScheduleError(f"ring schedules need n >= 2, got {n}")
    if not 0 <= rank < n:
        raise ScheduleError(f"rank {rank} outside ring of {n}")


def reduce_scatter_schedule(n: int, rank: int, step: int) -> tuple[int, int]:
    """Return ``(send_chunk, recv_chunk)`` for one ReduceScatter step."""
    _check_ring(n, rank)
    if not 0 <= step <= n - 2:
        raise ScheduleError(f"reduce-scatter step {step} outside [0, {n - 2}]")
    return (rank - step) % n, (rank - step - 1) % n


def allgather_send_chunk(n: int, rank: int, round: int) -> int:
    _check_ring(n, rank)
    if not 0 <= round <= n - 2:
        raise ScheduleError(f"allgather round {round} outside [0, {n - 2}]")
    return (rank + 1 - round) % n


def allgather_recv_chunk(n: int, rank: int, round: int) -> int:
    return allgather_send_chunk(n, (rank - 1) % n, round)


def owned_chunk(n: int, rank: int) -> int:
    """Chunk fully reduced on ``rank`` once ReduceScatter finishes."""
    return (rank + 1) % n


def should_tag(n: int, rank: int, round: int) -> bool:
    return (rank == 0 and round == 0) or rank == n - 1


def boundary_ranks(n: int) -> tuple[int, int]:
    return 0, n - 1


def next_tagged_seq(state: ChannelSeqState, payload_len: int, tagged: bool) -> int | None:
    """Hand out the next tagged sequence number; untagged sends do not advance it."""
    if payload_len <= 0:
        raise ValueError("payload_len must be positive")
    if not tagged:
        return None
    seq = state.next_tagged_seq
    state.next_tagged_seq += payload_len
    return seq


def channel_for_chunk(cfg: RingConfig, bucket_id: int, chunk_id: int) -> int:
    return (bucket_id + chunk_id) % cfg.num_channels


def tag_events(n: int) -> Iterator[tuple[int, int, int]]:
    """Yield ``(rank, round, chunk)`` for every tagged AllGather send."""
    for rnd in range(n - 1):
        for rank in boundary_ranks(n):
            if should_tag(n, rank, rnd):
                yield rank, rnd, allgather_send_chunk(n, rank, rnd)


def padded_elements(count: int, n: int) -> int:
    return -(-count // n) * n


def chunk_refs(cfg: RingConfig, bucket_id: int, bucket_elements: int) -> list[ChunkRef]:
    """Split a bucket of ``bucket_elements`` floats into ``n`` equal chunks (zero-padded)."""
    n = cfg.world_size
    per = padded_elements(bucket_elements, n) // n
    return [
        ChunkRef(bucket_id, c, channel_for_chunk(cfg, bucket_id, c), c * per * 4, per * 4)
        for c in range(n)
    ]


@dataclass
class RingTrace:
    """Record of what a pure in-memory ring run sent, for cross-checks."""

    tagged: list[tuple[int, int, int]] = field(default_factory=list)  # (rank, round, chunk)
    sends: int = 0


def ring_allreduce(inputs: Sequence[np.ndarray], trace: RingTrace | None = None) -> list[np.ndarray]:
    """In-memory ring AllReduce driven purely by the schedule functions.

    ``inputs`` are equal-length 1-D float32 arrays, one per rank.  Returns the
    per-rank outputs; each equals the ring-order sum of all inputs.
    """
    n = len(inputs)
    if n == 1:
        return [np.array(inputs[0], dtype=np.float32, copy=True)]
    size = inputs[0].shape[0]
    per = padded_elements(size, n) // n
    bufs = []
    for x in inputs:
        buf = np.zeros(per * n, dtype=np.float32)
        buf[:size] = x
        bufs.append(buf)

    def sl(c: int) -> slice:
        return slice(c * per, (c + 1) * per)

    for step in range(n - 1):
        # all sends of a step read pre-step state
        outgoing = []
        for r in range(n):
            send, _ = reduce_scatter_schedule(n, r, step)
            outgoing.append((send, bufs[r][sl(send)].copy()))
        for r in range(n):
            chunk, data = outgoing[(r - 1) % n]
            assert chunk == reduce_scatter_schedule(n, r, step)[1]
            bufs[r][sl(chunk)] = data + bufs[r][sl(chunk)]
        if trace is not None:
            trace.sends += n
    for rnd in range(n - 1):
        outgoing = []
        for r in range(n):
            c = allgather_send_chunk(n, r, rnd)
            outgoing.append((c, bufs[r][sl(c)].copy()))
            if trace is not None and should_tag(n, r, rnd):
                trace.tagged.append((r, rnd, c))
        for r in range(n):
            chunk, data = outgoing[(r - 1) % n]
            bufs[r][sl(chunk)] = data
        if trace is not None:
            trace.sends += n
    return [b[:size] for b in bufs]


def ring_order_sum(inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Sequential oracle: chunk ``c`` is summed left to right starting at rank ``c``."""
    n = len(inputs)
    size = inputs[0].shape[0]
    if n == 1:
        return np.array(inputs[0], dtype=np.float32, copy=True)
    per = padded_elements(size, n) // n
    out = np.zeros(per * n, dtype=np.float32)
    padded = []
    for x in inputs:
        buf = np.zeros(per * n, dtype=np.float32)
        buf[:size] = x
        padded.append(buf)
    for c in range(n):
        s = slice(c * per, (c + 1) * per)
        acc = padded[c][s].copy()
        for k in range(1, n):
            acc = acc + padded[(c + k) % n][s]
        out[s] = acc
    return out[:size]
