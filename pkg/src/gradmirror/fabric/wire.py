"""Little-endian fixed 48-byte header framing.

Layout::

    magic u32 | version u8 | msg_type u8 | flags u8 | shadow_shard u8 |
    dp_group u16 | src_rank u16 | channel_id u16 | round u16 |
    iteration u64 | bucket_id u32 | chunk_id u32 | inner_seq u64 |
    byte_offset u32 | payload_len u32 | payload

CREDIT frames carry the granted credit count in ``payload_len`` and no payload.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

from ..errors import ProtocolError

MAGIC = 0x434B4D54
VERSION = 1
HEADER = struct.Struct("<IBBBBHHHHQIIQII")
HEADER_LEN = HEADER.size
NO_SHARD = 0xFF

assert HEADER_LEN == 48


class MsgType(enum.IntEnum):
    DATA = 0
    CREDIT = 1
    CTRL = 2
    ACK = 3


class Flags(enum.IntFlag):
    NONE = 0
    TAGGED = 1
    ALLGATHER = 2  # phase marker; cleared on ReduceScatter traffic
    RESPONSE = 4  # CTRL replies travelling shadow -> trainer


@dataclass(frozen=True, slots=True)
class WireFrame:
    msg_type: MsgType = MsgType.DATA
    flags: int = 0
    dp_group: int = 0
    src_rank: int = 0
    channel_id: int = 0
    iteration: int = 0
    bucket_id: int = 0
    chunk_id: int = 0
    round: int = 0
    shadow_shard: int = NO_SHARD
    inner_seq: int = 0
    byte_offset: int = 0
    payload: bytes = b""
    credits: int = 0  # CREDIT frames only
    version: int = VERSION

    @property
    def tagged(self) -> bool:
        return bool(self.flags & Flags.TAGGED)

    @property
    def allgather(self) -> bool:
        return bool(self.flags & Flags.ALLGATHER)

    @property
    def payload_len(self) -> int:
        if self.msg_type == MsgType.CREDIT:
            return self.credits
        return len(self.payload)

    def validate(self) -> None:
        if self.msg_type == MsgType.CREDIT:
            if self.payload:
                raise ProtocolError("CREDIT frames carry no payload")
            return
        if self.msg_type == MsgType.DATA and not self.tagged and self.shadow_shard != NO_SHARD:
            raise ProtocolError("untagged DATA frame must carry the no-shard sentinel")

    def evolve(self, **changes) -> "WireFrame":
        return replace(self, **changes)


def credit_frame(credits: int, src_rank: int = 0, dp_group: int = 0) -> WireFrame:
    return WireFrame(msg_type=MsgType.CREDIT, credits=credits, src_rank=src_rank, dp_group=dp_group)


def encode(frame: WireFrame) -> bytes:
    frame.validate()
    header = HEADER.pack(
        MAGIC,
        frame.version,
        int(frame.msg_type),
        int(frame.flags),
        frame.shadow_shard,
        frame.dp_group,
        frame.src_rank,
        frame.channel_id,
        frame.round,
        frame.iteration,
        frame.bucket_id,
        frame.chunk_id,
        frame.inner_seq,
        frame.byte_offset,
        frame.payload_len,
    )
    if frame.msg_type == MsgType.CREDIT:
        return header
    return header + frame.payload


def decode_header(buf: bytes | memoryview) -> tuple[WireFrame, int]:
    """Parse a header; returns a payload-less frame and the number of payload bytes to follow."""
    if len(buf) < HEADER_LEN:
        raise ProtocolError(f"short header: {len(buf)} bytes")
    (magic, version, msg_type, flags, shard, dp_group, src_rank, channel, rnd,
     iteration, bucket, chunk, inner_seq, offset, plen) = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08X}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        mtype = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {msg_type}") from None
    frame = WireFrame(
        msg_type=mtype, flags=flags, dp_group=dp_group, src_rank=src_rank,
        channel_id=channel, iteration=iteration, bucket_id=bucket, chunk_id=chunk,
        round=rnd, shadow_shard=shard, inner_seq=inner_seq, byte_offset=offset,
        credits=plen if mtype == MsgType.CREDIT else 0, version=version,
    )
    return frame, 0 if mtype == MsgType.CREDIT else plen


def decode(buf: bytes | memoryview) -> WireFrame:
    frame, plen = decode_header(buf)
    if len(buf) != HEADER_LEN + plen:
        raise ProtocolError(f"frame length {len(buf)} != header + payload_len {HEADER_LEN + plen}")
    if plen:
        frame = replace(frame, payload=bytes(buf[HEADER_LEN:]))
    frame.validate()
    return frame


class FrameReader:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireFrame]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER_LEN:
            _, plen = decode_header(self._buf)
            total = HEADER_LEN + plen
            if len(self._buf) < total:
                break
            out.append(decode(bytes(self._buf[:total])))
            del self._buf[:total]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
