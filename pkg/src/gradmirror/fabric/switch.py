"""Software ToR switch: control-plane tables plus a stateless data plane.

Control plane
    * ring forwarding table ``(dp_group, src_rank) -> next rank``
    * multicast groups keyed by ``(dp_group, boundary rank, TAGGED)``
    * shard map ``(dp_group, shadow_shard) -> shadow node``
    * shadow stream registrations (must precede training)

Data plane
    Untagged DATA is unicast to the next ring rank.  TAGGED DATA from a
    boundary rank is replicated to the next rank, the shadow stream selected
    by the frame's ``shadow_shard`` and any extra mirror ports, all-or-nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from ..errors import ClassificationError, ConfigError, ControlPlaneError, TransportError
from .wire import Flags, MsgType, WireFrame

NIC_A, NIC_B = 0, 1


@dataclass(frozen=True)
class MulticastGroup:
    group_id: int
    dp_group: int
    src_rank: int
    next_rank: int
    shadow_streams: tuple[int, ...]  # shadow node ids reachable from this group
    mirrors: int = 0  # extra sink ports (replication-factor experiments)

    @property
    def key(self) -> tuple[int, int, bool]:
        return (self.dp_group, self.src_rank, True)


@dataclass(frozen=True)
class Unicast:
    dest: tuple  # ("trainer", dp_group, rank)


@dataclass(frozen=True)
class Multicast:
    group_id: int


@dataclass(frozen=True)
class Drop:
    reason: str


@dataclass(frozen=True)
class ShadowDelivery:
    shadow_id: int
    nic: int
    stream_seq: int
    frame: WireFrame


@dataclass(frozen=True)
class StreamHandle:
    shadow_id: int
    dp_group: int
    source_rank: int


def boundary_index(src_rank: int) -> int:
    return 0 if src_rank == 0 else 1


def nic_for(src_rank: int, channel_id: int, num_channels: int = 2) -> int:
    """Shadow ingress NIC for a (boundary source, channel) stream.

    Channels alternate NICs round-robin.  Round 0 pairs rank 0 on channel
    ``c + 1`` with the last rank on channel ``c``; the last rank's mapping is
    chosen so that pair always lands on different NICs (for even channel
    counts both rules reduce to ``channel % 2``).
    """
    if boundary_index(src_rank) == 0:
        return channel_id % 2
    return 1 - ((channel_id + 1) % num_channels) % 2


@dataclass
class SwitchCounters:
    rx_data: int = 0
    tx_data: int = 0
    rx_tagged: int = 0
    rx_untagged: int = 0
    tx_untagged: int = 0
    tx_shadow: int = 0
    tx_mirror: int = 0
    ack_drop: int = 0
    classify_errors: int = 0
    ctrl: int = 0


@dataclass
class SwitchControl:
    rings: dict[int, int] = field(default_factory=dict)  # dp_group -> world size
    channels: dict[int, int] = field(default_factory=dict)  # dp_group -> channel count
    groups: dict[int, MulticastGroup] = field(default_factory=dict)
    match: dict[tuple[int, int, bool], int] = field(default_factory=dict)
    shard_map: dict[tuple[int, int], int] = field(default_factory=dict)
    shadows: set[int] = field(default_factory=set)
    streams: dict[tuple[int, int, int], StreamHandle] = field(default_factory=dict)
    training_started: bool = False

    def install_ring(self, dp_group: int, world_size: int, num_channels: int = 1) -> None:
        if self.rings.get(dp_group, world_size) != world_size:
            raise ControlPlaneError(f"dp_group {dp_group} already installed with another size")
        self.rings[dp_group] = world_size
        self.channels[dp_group] = num_channels

    def next_rank(self, dp_group: int, src_rank: int) -> int:
        try:
            n = self.rings[dp_group]
        except KeyError:
            raise ControlPlaneError(f"no ring installed for dp_group {dp_group}") from None
        if not 0 <= src_rank < n:
            raise ControlPlaneError(f"rank {src_rank} not in dp_group {dp_group}")
        return (src_rank + 1) % n

    def register_shadow(self, shadow_id: int) -> None:
        self.shadows.add(shadow_id)

    def set_shard(self, dp_group: int, shard: int, shadow_id: int) -> None:
        if shadow_id not in self.shadows:
            raise ControlPlaneError(f"shadow {shadow_id} not registered")
        self.shard_map[(dp_group, shard)] = shadow_id

    def start_training(self) -> None:
        self.training_started = True


def install_multicast_group(ctrl: SwitchControl, dp_group: int, boundary_rank: int, next_rank: int,
                            shadow_streams: Sequence[int], mirrors: int = 0) -> int:
    n = ctrl.rings.get(dp_group)
    if n is None:
        raise ControlPlaneError(f"install ring for dp_group {dp_group} first")
    if boundary_rank not in (0, n - 1):
        raise ControlPlaneError(f"rank {boundary_rank} is not a boundary rank of a {n}-ring")
    if next_rank != (boundary_rank + 1) % n:
        raise ControlPlaneError("multicast next_rank must be the ring successor")
    if not shadow_streams:
        raise ControlPlaneError("multicast group needs at least one shadow member")
    key = (dp_group, boundary_rank, True)
    streams = tuple(sorted(set(shadow_streams)))
    existing = ctrl.match.get(key)
    if existing is not None:
        g = ctrl.groups[existing]
        if g.next_rank == next_rank and g.shadow_streams == streams and g.mirrors == mirrors:
            return existing
        raise ControlPlaneError(f"conflicting multicast entry for {key}")
    gid = len(ctrl.groups)
    ctrl.groups[gid] = MulticastGroup(gid, dp_group, boundary_rank, next_rank, streams, mirrors)
    ctrl.match[key] = gid
    return gid


def shadow_stream_accept(ctrl: SwitchControl, shadow_id: int) -> list[StreamHandle]:
    """Open the shadow's streams: one per boundary-rank source of every DP group it serves."""
    if ctrl.training_started:
        raise ConfigError("shadow streams must be accepted before training starts")
    if shadow_id not in ctrl.shadows:
        raise ConfigError(f"shadow {shadow_id} not in the shadow port map")
    handles = []
    for gid in sorted(ctrl.groups):
        g = ctrl.groups[gid]
        if shadow_id in g.shadow_streams:
            h = StreamHandle(shadow_id, g.dp_group, g.src_rank)
            ctrl.streams[(shadow_id, g.dp_group, g.src_rank)] = h
            handles.append(h)
    return handles


def classify(ctrl: SwitchControl, frame: WireFrame, counters: SwitchCounters | None = None):
    """Decide the data-plane action for a frame received from a node."""
    if frame.msg_type == MsgType.ACK:
        return Drop("ack")
    if frame.msg_type == MsgType.CTRL:
        if frame.flags & Flags.RESPONSE:
            return Unicast(("trainer", frame.dp_group, frame.src_rank))
        shadow = ctrl.shard_map.get((frame.dp_group, frame.shadow_shard))
        if shadow is None:
            raise TransportError(f"no shadow serves shard {frame.shadow_shard} of group {frame.dp_group}")
        return Unicast(("shadow", shadow, NIC_A))
    if frame.msg_type != MsgType.DATA:
        return Drop("non-data")
    nxt = ctrl.next_rank(frame.dp_group, frame.src_rank)
    if frame.tagged:
        gid = ctrl.match.get((frame.dp_group, frame.src_rank, True))
        if gid is not None:
            return Multicast(gid)
        if counters is not None:
            counters.classify_errors += 1
    return Unicast(("trainer", frame.dp_group, nxt))


def classify_strict(ctrl: SwitchControl, frame: WireFrame):
    action = classify(ctrl, frame)
    if frame.tagged and isinstance(action, Unicast):
        raise ClassificationError(f"tagged frame from non-boundary rank {frame.src_rank}")
    return action


def rewrite_for_shadow(frame: WireFrame, shard_map: dict[tuple[int, int], int],
                       num_channels: int = 1) -> ShadowDelivery:
    """Shadow-bound copy: stream sequence is the per-channel tagged counter."""
    if not frame.tagged:
        raise TransportError("only tagged frames are mirrored to shadows")
    try:
        shadow_id = shard_map[(frame.dp_group, frame.shadow_shard)]
    except KeyError:
        raise TransportError(
            f"shadow shard {frame.shadow_shard} of dp_group {frame.dp_group} not in shard map") from None
    return ShadowDelivery(shadow_id, nic_for(frame.src_rank, frame.channel_id, num_channels), frame.inner_seq, frame)


class SwitchDataPlane:
    """Per-frame forwarding logic, independent of the transport carrying the frames.

    ``resolve`` maps a destination tuple to an egress port object exposing
    ``has_credit()``/``try_send()``; ``send_all`` performs the all-or-nothing
    multicast enqueue.
    """

    def __init__(self, ctrl: SwitchControl, resolve, send_all):
        self.ctrl = ctrl
        self.resolve = resolve
        self.send_all = send_all
        self.counters = SwitchCounters()

    def egress_for(self, frame: WireFrame) -> list | None:
        """Egress ports for ``frame``; ``None`` means drop."""
        action = classify(self.ctrl, frame, self.counters)
        if isinstance(action, Drop):
            return None
        if isinstance(action, Unicast):
            return [self.resolve(action.dest)]
        group = self.ctrl.groups[action.group_id]
        delivery = rewrite_for_shadow(frame, self.ctrl.shard_map, self.ctrl.channels.get(frame.dp_group, 1))
        ports = [self.resolve(("trainer", group.dp_group, group.next_rank)),
                 self.resolve(("shadow", delivery.shadow_id, delivery.nic))]
        ports.extend(self.resolve(("mirror", group.group_id, i)) for i in range(group.mirrors))
        return ports

    def forward(self, frame: WireFrame) -> bool:
        """Try to forward one ingress frame; False means blocked (frame stays queued)."""
        ports = self.egress_for(frame)
        if ports is None:
            if frame.msg_type == MsgType.ACK:
                self.counters.ack_drop += 1
            return True
        if not self.send_all(ports, frame):
            return False
        c = self.counters
        if frame.msg_type == MsgType.CTRL:
            c.ctrl += 1
            return True
        c.rx_data += 1
        c.tx_data += len(ports)
        if frame.tagged and len(ports) > 1:
            c.rx_tagged += 1
            c.tx_untagged += 1
            c.tx_shadow += 1
            c.tx_mirror += len(ports) - 2
        else:
            c.rx_untagged += 1
            c.tx_untagged += 1
        return True


def replication_ratio(counters: SwitchCounters) -> float:
    return counters.tx_data / counters.rx_data if counters.rx_data else 0.0


def ingress_order(ports: Iterable) -> list:
    return sorted(ports, key=lambda p: p.link_id)
