import itertools

import pytest
from hypothesis import given, strategies as st

from gradmirror.errors import (ClassificationError, ConfigError, ControlPlaneError, ProtocolError,
                               TransportError)
from gradmirror.fabric import switch as sw
from gradmirror.fabric.sim import DEFAULT_CAPACITY, Endpoint, Fabric, Scheduler, try_send_all
from gradmirror.fabric.wire import Flags, MsgType, NO_SHARD, WireFrame
from gradmirror.world import World

from conftest import small_cfg


class Sink(Endpoint):
    """Consumes up to ``rate`` frames per tick from ``link``."""

    def __init__(self, sched, node_id, rate=None):
        super().__init__(sched, node_id, f"sink{node_id}")
        self.link = None
        self.rate = rate
        self.got = []

    def process(self, now):
        k = 0
        while self.link.rx and (self.rate is None or k < self.rate):
            self.got.append(self.link.pop())
            k += 1
        if self.link.rx:
            self.wake(now, 1)


class Source(Endpoint):
    def __init__(self, sched, node_id, frames):
        super().__init__(sched, node_id, "src")
        self.pending = list(frames)
        self.link = None
        self.blocked = 0

    def process(self, now):
        while self.pending and self.link.try_send(self.pending[0]):
            self.pending.pop(0)
        if self.pending:
            self.blocked += 1


def _pair(capacity=DEFAULT_CAPACITY, rate=None, frames=()):
    fab = Fabric()
    src = Source(fab.sched, 0, frames)
    dst = Sink(fab.sched, 1, rate)
    link = fab.connect(src, dst, capacity, 1)
    src.link, dst.link = link, link
    return fab, src, dst, link


def test_default_capacity():
    assert DEFAULT_CAPACITY == 256


def test_credit_send_and_block():
    _, _, _, link = _pair(capacity=1)
    assert link.try_send(WireFrame()) and link.credits == 0
    assert not link.try_send(WireFrame())


def test_grant_to_capacity_and_overflow():
    _, _, _, link = _pair(capacity=64)
    link.credits = 60
    link.grant_credits(4)
    assert link.credits == 64
    with pytest.raises(ProtocolError):
        link.grant_credits(1)


def test_closed_link():
    _, _, _, link = _pair()
    link.closed = True
    with pytest.raises(TransportError):
        link.try_send(WireFrame())


def test_multicast_credit_table():
    # exhaustive over both members' credit states
    for c1, c2 in itertools.product((0, 1), repeat=2):
        fab = Fabric()
        a, b, c = (Sink(fab.sched, i) for i in range(3))
        l1, l2 = fab.connect(a, b, 1), fab.connect(a, c, 1)
        l1.credits, l2.credits = c1, c2
        ok = try_send_all([l1, l2], WireFrame())
        assert ok == (c1 == 1 and c2 == 1)
        assert l1.stats.sent == l2.stats.sent == int(ok)
    # blocked, then a credit grant unblocks both
    fab = Fabric()
    a, b, c = (Sink(fab.sched, i) for i in range(3))
    l1, l2 = fab.connect(a, b, 1), fab.connect(a, c, 1)
    l2.credits = 0
    assert not try_send_all([l1, l2], WireFrame())
    l2.grant_credits(1)
    assert try_send_all([l1, l2], WireFrame())
    assert l1.stats.sent == l2.stats.sent == 1


def test_empty_scheduler_is_noop():
    s = Scheduler()
    assert s.run() == 0 and not s.step()


def test_event_order_is_total():
    s = Scheduler()
    log = []
    for t, node, link in [(2, 0, 0), (1, 5, 0), (1, 2, 3), (1, 2, 1), (1, 2, 1)]:
        s.schedule(t, node, link, lambda now, k=(t, node, link, len(log)): log.append(k))
    s.run()
    assert [k[:3] for k in log] == [(1, 2, 1), (1, 2, 1), (1, 2, 3), (1, 5, 0), (2, 0, 0)]


def test_slow_consumer_lossless_in_order():
    frames = [WireFrame(bucket_id=i) for i in range(500)]
    fab, src, dst, link = _pair(capacity=8, rate=1, frames=frames)
    src.wake(0)
    for t in range(1, 2000):
        fab.sched.schedule(t, 0, -1, lambda now: src.process(now) if src.pending else None)
    fab.sched.run()
    assert [f.bucket_id for f in dst.got] == list(range(500))
    assert link.stats.dropped == 0 and src.blocked > 0
    assert link.credits == link.capacity


@given(st.integers(1, 16), st.lists(st.integers(0, 4), min_size=1, max_size=12), st.integers(1, 300))
def test_credits_never_exceed_capacity(cap, rates, count):
    frames = [WireFrame(bucket_id=i) for i in range(count)]
    fab, src, dst, link = _pair(capacity=cap, frames=frames)
    pattern = [r if r else 0 for r in rates]
    if not any(pattern):
        pattern.append(1)

    def tick(now):
        if src.pending:
            src.process(now)
        dst.rate = pattern[now % len(pattern)]
        dst.process(now)
        assert 0 <= link.credits <= cap
        assert len(link.rx) + len(link.inflight) <= cap
        if src.pending or link.rx or link.inflight:
            fab.sched.schedule(now + 1, 99, -1, tick)

    fab.sched.schedule(0, 99, -1, tick)
    fab.sched.run(max_events=1_000_000)
    assert [f.bucket_id for f in dst.got] == list(range(count))


# --- switch ------------------------------------------------------------------------

def _ctrl(groups=1, n=4, shadows=1):
    ctrl = sw.SwitchControl()
    for s in range(shadows):
        ctrl.register_shadow(s)
    for g in range(groups):
        ctrl.install_ring(g, n)
        ctrl.set_shard(g, 0, 0)
        for b in (0, n - 1):
            sw.install_multicast_group(ctrl, g, b, (b + 1) % n, [0])
    return ctrl


def test_two_multicast_groups_per_dp_group():
    assert len(_ctrl().groups) == 2
    assert len(_ctrl(groups=2).groups) == 4


def test_multicast_idempotent_and_conflict():
    ctrl = _ctrl()
    assert sw.install_multicast_group(ctrl, 0, 0, 1, [0]) == 0
    assert len(ctrl.groups) == 2
    ctrl.register_shadow(1)
    with pytest.raises(ControlPlaneError):
        sw.install_multicast_group(ctrl, 0, 0, 1, [1])
    with pytest.raises(ControlPlaneError):
        sw.install_multicast_group(ctrl, 0, 1, 2, [0])


def test_classify():
    ctrl = _ctrl()
    assert sw.classify(ctrl, WireFrame(src_rank=1)) == sw.Unicast(("trainer", 0, 2))
    tagged = WireFrame(flags=int(Flags.TAGGED), src_rank=0, shadow_shard=0)
    assert isinstance(sw.classify(ctrl, tagged), sw.Multicast)
    c = sw.SwitchCounters()
    bad = WireFrame(flags=int(Flags.TAGGED), src_rank=1, shadow_shard=0)
    assert sw.classify(ctrl, bad, c) == sw.Unicast(("trainer", 0, 2))
    assert c.classify_errors == 1
    with pytest.raises(ClassificationError):
        sw.classify_strict(ctrl, bad)


def test_rewrite_for_shadow():
    f = WireFrame(flags=int(Flags.TAGGED), inner_seq=4096, shadow_shard=0)
    d = sw.rewrite_for_shadow(f, {(0, 0): 0})
    assert d.stream_seq == 4096 and d.shadow_id == 0
    with pytest.raises(TransportError):
        sw.rewrite_for_shadow(f.evolve(shadow_shard=3), {(0, 0): 0})


def test_shards_partition_across_streams():
    shard_map = {(0, 0): 0, (0, 1): 1}
    frames = [WireFrame(flags=int(Flags.TAGGED), shadow_shard=i % 2, inner_seq=i) for i in range(20)]
    by = {}
    for f in frames:
        by.setdefault(sw.rewrite_for_shadow(f, shard_map).shadow_id, []).append(f.shadow_shard)
    assert by == {0: [0] * 10, 1: [1] * 10}


def test_nic_round_robin():
    assert [sw.nic_for(0, c, 4) for c in range(4)] == [0, 1, 0, 1]
    assert [sw.nic_for(3, c, 4) for c in range(4)] == [0, 1, 0, 1]
    assert (sw.nic_for(0, 0, 1), sw.nic_for(3, 0, 1)) == (0, 1)


def test_stream_accept_rules():
    ctrl = _ctrl()
    handles = sw.shadow_stream_accept(ctrl, 0)
    assert {h.source_rank for h in handles} == {0, 3}
    with pytest.raises(ConfigError):
        sw.shadow_stream_accept(ctrl, 9)
    ctrl.start_training()
    with pytest.raises(ConfigError):
        sw.shadow_stream_accept(ctrl, 0)


def test_ack_dropped_and_counted():
    ctrl = _ctrl()
    dp = sw.SwitchDataPlane(ctrl, lambda d: d, lambda ports, f: True)
    assert dp.forward(WireFrame(msg_type=MsgType.ACK))
    assert dp.counters.ack_drop == 1 and dp.counters.rx_data == 0


def test_ctrl_routing():
    ctrl = _ctrl()
    req = WireFrame(msg_type=MsgType.CTRL, shadow_shard=0, src_rank=2)
    assert sw.classify(ctrl, req) == sw.Unicast(("shadow", 0, sw.NIC_A))
    resp = req.evolve(flags=int(Flags.RESPONSE))
    assert sw.classify(ctrl, resp) == sw.Unicast(("trainer", 0, 2))
    with pytest.raises(TransportError):
        sw.classify(ctrl, req.evolve(shadow_shard=5))


def test_untagged_never_replicated():
    w = World(small_cfg(iterations=1, mirrors=3))
    w.run()
    c = w.counters
    assert c.rx_untagged == c.tx_untagged - c.rx_tagged
    assert c.tx_data == c.rx_untagged + c.rx_tagged * (2 + 3)


def test_same_seed_same_trace():
    logs = []
    for _ in range(2):
        w = World(small_cfg(iterations=2, shadow_rate=3), trace=True)
        w.run()
        logs.append((w.delivered_log, w.sched.trace))
    assert logs[0] == logs[1] and logs[0][0]
    assert NO_SHARD == 0xFF
