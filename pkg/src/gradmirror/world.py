"""A deterministic simulated cluster: trainer rings, one switch, shadow nodes.

Topology: every trainer has an uplink to and a downlink from the switch;
every shadow node has two switch-to-shadow links (NIC A and NIC B) and an
uplink; mirror sinks stand in for extra replication ports.  All links are
credit-based, so a slow shadow back-pressures the ring instead of losing
frames.
"""

from __future__ import annotations

import csv
import logging
import zlib
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import checkpoint, collective, optim, shadow
from .collective import RingConfig
from .config import Failure, RunConfig
from .errors import (ConfigError, ConsolidationError, InvariantError, ProtocolError,
                     UnrecoverableError)
from .fabric import switch as sw
from .fabric.sim import Endpoint, Fabric, Link, Scheduler, try_send_all
from .fabric.wire import MsgType, WireFrame
from .trainer import (BucketLayout, TrainerCore, TrainState, build_buckets, restore_from_checkpoint,
                      segment)

log = logging.getLogger(__name__)

RateFn = Callable[[int, int], "int | None"]  # (shadow_id, ticks since iteration start) -> frames


@dataclass(frozen=True)
class IterationRecord:
    dp_group: int
    iteration: int
    loss: float
    tagged_bytes: int
    wall_ticks: int


@dataclass(frozen=True)
class Divergence:
    iteration: int
    dp_group: int
    shard: int
    layer: str
    array: str  # "params" or an optimizer buffer name
    element: int

    def __str__(self):
        return (f"iteration {self.iteration}: group {self.dp_group} shard {self.shard} "
                f"{self.array} of {self.layer} differs at element {self.element}")


@dataclass
class RecoveryReport:
    failure_iteration: int
    dp_group: int
    killed_ranks: tuple[int, ...]
    consolidated_iteration: int
    drained_ticks: int
    shard_iterations: dict[tuple[int, int], int]
    restored_bytes: int = 0


# --- nodes -----------------------------------------------------------------------

class TrainerNode(Endpoint):
    def __init__(self, sched: Scheduler, node_id: int, core: TrainerCore):
        ring = core.state.ring
        super().__init__(sched, node_id, f"trainer{ring.dp_group}.{ring.rank}")
        self.core = core
        self.uplink: Link | None = None
        self.downlink: Link | None = None
        self.accepting = True
        self.finished_at: int | None = None
        self.ctrl_out: deque[WireFrame] = deque()
        self.fetch: dict[int, list[WireFrame]] = {}
        self.fetch_done: set[int] = set()
        self.restored: list[checkpoint.CheckpointFile] | None = None

    def process(self, now: int) -> None:
        link = self.downlink
        while link.rx:
            frame = link.pop()
            if frame.msg_type == MsgType.CTRL:
                self._on_ctrl(frame)
            elif self.accepting:
                self.core.on_frame(frame)
        while self.ctrl_out and self.uplink.try_send(self.ctrl_out[0]):
            self.ctrl_out.popleft()
        self.core.drain(self.uplink.try_send)
        if self.core.done and self.finished_at is None:
            self.finished_at = now

    def _on_ctrl(self, frame: WireFrame) -> None:
        pieces = self.fetch.get(frame.shadow_shard)
        if pieces is None:
            raise ProtocolError(f"{self.name}: unsolicited checkpoint response")
        pieces.append(frame)
        if frame.round == 1:
            self.fetch_done.add(frame.shadow_shard)
        if self.fetch_done == set(self.fetch):
            self.restored = [shadow.collect_ctrl(self.fetch[s]) for s in sorted(self.fetch)]


class ShadowNode(Endpoint):
    def __init__(self, sched: Scheduler, node_id: int, shadow_id: int, reassembly: shadow.ReassemblyState,
                 replicas: list[shadow.ShadowReplica], rate: RateFn | None = None):
        super().__init__(sched, node_id, f"shadow{shadow_id}")
        self.shadow_id = shadow_id
        self.reassembly = reassembly
        self.replicas = replicas
        self.rate = rate
        self.nics: list[Link] = []
        self.uplink: Link | None = None
        self.outbox: deque[WireFrame] = deque()
        self.serving: dict[tuple[int, int], checkpoint.CheckpointFile] = {}
        self._served: dict[tuple, list[WireFrame]] = {}
        self.epoch = 0
        self._tick = -1
        self._left: int | None = None
        self.on_update: Callable[[shadow.ShadowReplica, int], None] | None = None
        self.consumed = 0
        self.acks = 0

    def process(self, now: int) -> None:
        if now != self._tick:
            self._tick = now
            self._left = self.rate(self.shadow_id, now - self.epoch) if self.rate else None
        while self._left is None or self._left > 0:
            progressed = False
            for nic in self.nics:
                if nic.rx and (self._left is None or self._left > 0):
                    self._consume(nic.pop())
                    progressed = True
                    if self._left is not None:
                        self._left -= 1
            if not progressed:
                break
        if any(nic.rx for nic in self.nics):
            self.wake(now, 1)
        while self.outbox and self.uplink.try_send(self.outbox[0]):
            self.outbox.popleft()

    def _consume(self, frame: WireFrame) -> None:
        self.consumed += 1
        if frame.msg_type == MsgType.CTRL:
            key = (frame.dp_group, frame.src_rank, frame.payload)
            cache_key = (frame.dp_group, frame.payload)
            replies = self._served.get(cache_key)
            if replies is None:
                replies = self._served[cache_key] = shadow.handle_ctrl(self.serving, frame)
            self.outbox.extend(r.evolve(src_rank=key[1]) for r in replies)
            return
        for ev in self.reassembly.ingest_frame(frame):
            self.acks += 1
            self.outbox.append(WireFrame(msg_type=MsgType.ACK, dp_group=ev.dp_group, src_rank=self.shadow_id,
                                         iteration=ev.iteration, bucket_id=ev.bucket_id))
            self.advance(ev.dp_group)

    def advance(self, group: int) -> None:
        for rep in self.replicas:
            if rep.dp_group != group:
                continue
            while self.reassembly.bucket_ready(group, rep.last_completed, rep.owned):
                it = rep.last_completed
                buckets = {b: self.reassembly.take_bucket(group, it, b) for b in rep.owned}
                rep.apply_update(it + 1, buckets)
                self.reassembly.finish_iteration(group, it, rep.shard_id, rep.owned)
                if self.on_update is not None:
                    self.on_update(rep, it)


class SwitchNode(Endpoint):
    def __init__(self, sched: Scheduler, node_id: int, dataplane: sw.SwitchDataPlane):
        super().__init__(sched, node_id, "switch")
        self.dp = dataplane
        self.ingress: list[Link] = []

    def process(self, now: int) -> None:
        for link in self.ingress:
            while link.rx:
                if not self.dp.forward(link.rx[0]):
                    break  # head-of-line blocked until an egress credit returns
                link.pop()


class MirrorNode(Endpoint):
    def __init__(self, sched: Scheduler, node_id: int, name: str):
        super().__init__(sched, node_id, name)
        self.inbox: Link | None = None
        self.frames = 0

    def process(self, now: int) -> None:
        while self.inbox.rx:
            self.inbox.pop()
            self.frames += 1


# --- world -----------------------------------------------------------------------

def group_prefix(cfg: RunConfig, group: int) -> str:
    return f"g{group}." if cfg.dp_groups > 1 else ""


def _crc(a: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(a).view(np.uint8))


class World:
    """Deterministic event-driven run of a :class:`RunConfig`."""

    def __init__(self, cfg: RunConfig, rate: RateFn | None = None, check_equality: bool = False,
                 collect_divergence: bool = False, keep_digests: bool = True,
                 max_events: int = 50_000_000, trace: bool = False):
        self.cfg = cfg
        self.fabric = Fabric()
        self.sched = self.fabric.sched
        if trace:
            self.sched.trace = []
        self.check_equality = check_equality
        self.collect_divergence = collect_divergence
        self.keep_digests = keep_digests
        self.max_events = max_events
        self.iteration = 0
        self.records: list[IterationRecord] = []
        self.trainer_digests: list[tuple] = []
        self.shadow_digests: list[tuple] = []
        self.divergences: list[Divergence] = []
        self.recoveries: list[RecoveryReport] = []
        self.delivered_log: list[tuple] | None = [] if trace else None
        n = cfg.world_size

        if rate is None and cfg.shadow_rate:
            fixed = cfg.shadow_rate
            rate = lambda sid, t: fixed  # noqa: E731
        self.rate = rate

        self.layer_tables: dict[int, list[tuple[str, int]]] = {}
        self.layouts: dict[int, BucketLayout] = {}
        self.shards: dict[int, optim.ShardAssignment] = {}
        for g in range(cfg.dp_groups):
            self.layer_tables[g], self.layouts[g], self.shards[g] = group_layout(cfg, g)

        next_id = iter(range(1 << 30))
        self.switch = None
        ctrl = sw.SwitchControl()
        dataplane = sw.SwitchDataPlane(ctrl, self._resolve, try_send_all)
        self.switch = SwitchNode(self.sched, next(next_id), dataplane)

        self.trainers: dict[int, list[TrainerNode]] = {}
        for g in range(cfg.dp_groups):
            nodes = []
            for r in range(n):
                ring = RingConfig(n, r, cfg.channels, g)
                state = TrainState.fresh(cfg.model, cfg.optimizer, ring, cfg.seed, group_prefix(cfg, g))
                core = TrainerCore(state, self.layouts[g], self.shards[g], cfg.mtu)
                core.tagging = cfg.shadow_count > 0
                nodes.append(TrainerNode(self.sched, next(next_id), core))
            self.trainers[g] = nodes

        self.shadows: list[ShadowNode] = []
        expectations = {}
        if cfg.shadow_count:
            expectations = {g: shadow.expected_stream_layout(RingConfig(n, 0, cfg.channels, g),
                                                             self.layouts[g], self.shards[g])
                            for g in range(cfg.dp_groups)}
        for s in range(cfg.shadow_count):
            replicas = []
            owned: dict[int, set[int]] = {}
            for g in range(cfg.dp_groups):
                for shard in range(cfg.shards):
                    if cfg.shadow_for(g, shard) != s:
                        continue
                    rep = shadow.ShadowReplica.from_train_state(
                        self.trainers[g][0].core.state, self.layouts[g], self.shards[g], shard,
                        model_id=f"mlp-{'x'.join(map(str, cfg.model.dims))}")
                    replicas.append(rep)
                    owned.setdefault(g, set()).update(rep.owned)
            reasm = shadow.ReassemblyState(expectations, self.layouts, owned)
            node = ShadowNode(self.sched, next(next_id), s, reasm, replicas, rate)
            node.on_update = self._on_shadow_update
            self.shadows.append(node)

        # links
        cap, lat = cfg.link_capacity, cfg.link_latency
        self.ports: dict[tuple, Link] = {}
        ingress = []
        for g, nodes in self.trainers.items():
            for r, t in enumerate(nodes):
                t.uplink = self.fabric.connect(t, self.switch, cap, lat, f"{t.name}->switch")
                t.downlink = self.fabric.connect(self.switch, t, cap, lat, f"switch->{t.name}")
                self.ports[("trainer", g, r)] = t.downlink
                ingress.append(t.uplink)
        for node in self.shadows:
            for nic, label in ((sw.NIC_A, "A"), (sw.NIC_B, "B")):
                link = self.fabric.connect(self.switch, node, cap, lat, f"switch->{node.name}.{label}")
                node.nics.append(link)
                self.ports[("shadow", node.shadow_id, nic)] = link
            node.uplink = self.fabric.connect(node, self.switch, cap, lat, f"{node.name}->switch")
            ingress.append(node.uplink)
        self.switch.ingress = sw.ingress_order(ingress)

        # control plane, all before training starts
        for g in range(cfg.dp_groups):
            ctrl.install_ring(g, n, cfg.channels)
        for node in self.shadows:
            ctrl.register_shadow(node.shadow_id)
        self.mirrors: list[MirrorNode] = []
        if cfg.shadow_count:
            for g in range(cfg.dp_groups):
                for shard in range(cfg.shards):
                    ctrl.set_shard(g, shard, cfg.shadow_for(g, shard))
                streams = sorted({cfg.shadow_for(g, s) for s in range(cfg.shards)})
                for b in collective.boundary_ranks(n):
                    gid = sw.install_multicast_group(ctrl, g, b, (b + 1) % n, streams, cfg.mirrors)
                    for i in range(cfg.mirrors):
                        m = MirrorNode(self.sched, next(next_id), f"mirror{gid}.{i}")
                        m.inbox = self.fabric.connect(self.switch, m, cap, lat, f"switch->{m.name}")
                        self.ports[("mirror", gid, i)] = m.inbox
                        self.mirrors.append(m)
            for node in self.shadows:
                sw.shadow_stream_accept(ctrl, node.shadow_id)
        ctrl.start_training()
        if self.delivered_log is not None:
            for link in self.fabric.links:
                link.on_deliver = self._logger(link)

        self.pending_failures = list(cfg.all_failures())
        self.frames_per_iteration = self._count_frames()

    def _logger(self, link: Link):
        def record(frame: WireFrame):
            self.delivered_log.append((self.sched.now, link.link_id, int(frame.msg_type), frame.dp_group,
                                       frame.src_rank, frame.iteration, frame.bucket_id, frame.chunk_id,
                                       frame.round, frame.byte_offset, zlib.crc32(frame.payload)))
        return record

    def _resolve(self, dest: tuple) -> Link:
        try:
            return self.ports[dest]
        except KeyError:
            raise InvariantError(f"switch has no port for {dest}") from None

    def _count_frames(self) -> int:
        n = self.cfg.world_size
        if n < 2:
            return 0
        total = 0
        for g, layout in self.layouts.items():
            for b in layout.buckets:
                chunk = collective.padded_elements(b.elements, n) // n * 4
                total += 2 * (n - 1) * len(segment(chunk, self.cfg.mtu)) * n
        return total

    # --- accessors ---------------------------------------------------------------

    @property
    def counters(self) -> sw.SwitchCounters:
        return self.switch.dp.counters

    @property
    def replicas(self) -> list[shadow.ShadowReplica]:
        return [r for node in self.shadows for r in node.replicas]

    def group_replicas(self, g: int) -> list[shadow.ShadowReplica]:
        return sorted((r for r in self.replicas if r.dp_group == g), key=lambda r: r.shard_id)

    def trainer_state(self, g: int, rank: int = 0) -> TrainState:
        return self.trainers[g][rank].core.state

    def all_trainers(self) -> Iterable[TrainerNode]:
        for g in sorted(self.trainers):
            yield from self.trainers[g]

    # --- running -----------------------------------------------------------------

    def _run_until(self, pred: Callable[[], bool], what: str) -> None:
        self.sched.run(until=pred, max_events=self.max_events)
        if not pred():
            if len(self.sched) == 0:
                raise InvariantError(f"deadlock while {what} (event queue empty)")
            raise InvariantError(f"event budget exhausted while {what}")

    def _quiesce(self) -> None:
        self.sched.run(max_events=self.max_events)
        if len(self.sched):
            raise InvariantError("fabric failed to quiesce")

    def _begin_all(self) -> int:
        start = self.sched.now
        for node in self.shadows:
            node.epoch = start
        for t in self.all_trainers():
            t.accepting = True
            t.finished_at = None
            t.core.begin()
            if t.core.done:
                t.finished_at = start
            t.wake(start)
        return start

    def run_iteration(self) -> list[IterationRecord]:
        it = self.iteration
        start = self._begin_all()
        target = it + 1
        lockstep = self.cfg.lockstep

        def done():
            if not all(t.core.done for t in self.all_trainers()):
                return False
            return not lockstep or all(r.last_completed >= target for r in self.replicas)

        self._run_until(done, f"running iteration {it}")
        self._quiesce()
        out = []
        for g, nodes in self.trainers.items():
            self._check_dp_equivalence(g, it)
            losses = np.array([t.core.loss for t in nodes], dtype=np.float64)
            out.append(IterationRecord(g, it, float(losses.mean()), sum(t.core.tagged_bytes for t in nodes),
                                       max(t.finished_at for t in nodes) - start))
            if self.keep_digests:
                self._trainer_digest(g, it)
        self.records.extend(out)
        self.iteration = target
        if lockstep and (self.check_equality or self.collect_divergence):
            for g in self.trainers:
                self._compare_group(g, it)
        return out

    def run(self, iterations: int | None = None) -> None:
        stop = self.cfg.iterations if iterations is None else self.iteration + iterations
        while self.iteration < stop:
            fail = next((f for f in self.pending_failures if f.iteration == self.iteration), None)
            if fail is not None:
                self.pending_failures.remove(fail)
                self.inject_failure(fail)
                continue
            self.run_iteration()
        self._quiesce()
        if not self.cfg.lockstep and (self.check_equality or self.collect_divergence):
            for g in self.trainers:
                self._compare_group(g, self.iteration - 1, final_only=True)

    # --- verification ------------------------------------------------------------

    def _check_dp_equivalence(self, g: int, it: int) -> None:
        ref = self.trainers[g][0].core.state
        for t in self.trainers[g][1:]:
            st = t.core.state
            if st.params.storage.tobytes() != ref.params.storage.tobytes() or st.optim != ref.optim:
                raise InvariantError(f"DP replicas of group {g} diverged after iteration {it} (rank {st.ring.rank})")

    def _compare_group(self, g: int, it: int, final_only: bool = False) -> None:
        ref = self.trainers[g][0].core.state
        for rep in self.group_replicas(g):
            d = compare_replica(ref, rep, it)
            if d is None:
                continue
            if self.check_equality:
                raise InvariantError(f"shadow diverged from trainers: {d}")
            if not any(x.dp_group == g and x.shard == rep.shard_id for x in self.divergences):
                self.divergences.append(d)

    def _trainer_digest(self, g: int, it: int) -> None:
        st = self.trainers[g][0].core.state
        self.trainer_digests.extend(trainer_digest_rows(st, self.layouts[g], self.shards[g], it))

    def _on_shadow_update(self, rep: shadow.ShadowReplica, it: int) -> None:
        c = self.cfg.corrupt
        if c is not None and (c.iteration, c.group, c.shard) == (it, rep.dp_group, rep.shard_id):
            rep.corrupt(c.layer, c.element)
        if self.keep_digests:
            self.shadow_digests.extend(replica_digest_rows(rep, it))

    # --- failures and recovery -----------------------------------------------------

    def mean_iteration_ticks(self) -> float:
        ticks = [r.wall_ticks for r in self.records]
        return sum(ticks) / len(ticks) if ticks else 0.0

    def inject_failure(self, f: Failure) -> RecoveryReport:
        """Halt training mid-iteration, consolidate the shadow shards, restore every trainer."""
        it = self.iteration
        cfg = self.cfg
        if not self.shadows:
            raise UnrecoverableError("no shadow nodes: nothing to recover from")
        if f.shadows:
            for s in f.shadows:
                self.shadows[s].alive = False
            raise UnrecoverableError(f"shadow node(s) {list(f.shadows)} lost at iteration {it}: "
                                     "no surviving checkpoint source")
        rx0 = self.counters.rx_data
        self._begin_all()
        threshold = int(f.at_fraction * self.frames_per_iteration)
        self.sched.run(until=lambda: self.counters.rx_data - rx0 >= threshold
                       or all(t.core.done for t in self.all_trainers()), max_events=self.max_events)
        crash = self.sched.now
        killed = tuple(range(cfg.world_size)) if f.ranks is None else tuple(f.ranks)
        for t in self.all_trainers():
            t.accepting = False
            t.core.active = False
            t.core.outbox.clear()
        for r in killed:
            self.trainers[f.group][r].alive = False
        log.info("failure at iteration %d: group %d ranks %s down at tick %d", it, f.group, killed, crash)

        timeout = cfg.recovery_timeout_ticks or max(1, int(round(3 * self.mean_iteration_ticks()))) or 1
        if not self.records and not cfg.recovery_timeout_ticks:
            timeout = 10_000
        deadline = crash + timeout
        while True:
            nxt = self.sched.peek_time()
            if nxt is None or nxt > deadline:
                break
            self.sched.step()
        drained = self.sched.now - crash

        shard_iters = {(r.dp_group, r.shard_id): r.last_completed for r in self.replicas}
        target = min([it, *shard_iters.values()])
        files: dict[int, list[checkpoint.CheckpointFile]] = {}
        try:
            for g in self.trainers:
                pinned, files[g] = shadow.consolidate(self.group_replicas(g), at_most=target)
        except ConsolidationError as exc:
            raise UnrecoverableError(f"consolidation failed: {exc}") from exc
        self.last_consolidated = files

        # tear down the fabric; failed nodes come back as replacements
        self.fabric.reset()
        for node in [self.switch, *self.all_trainers(), *self.shadows, *self.mirrors]:
            node.reset_wake()
            node.alive = True
        for g, nodes in self.trainers.items():
            for t in nodes:
                core = t.core
                if t.core.state.ring.rank in killed and g == f.group:
                    core.state = TrainState.fresh(cfg.model, cfg.optimizer, core.state.ring, cfg.seed,
                                                  group_prefix(cfg, g))
                core._staging.clear()
                core.outbox.clear()
                core.active = core.done = False
        for node in self.shadows:
            node.reassembly.discard_incomplete()
            node.outbox.clear()
            node._served.clear()
            for rep in node.replicas:
                rep.rollback(target)
            node.serving = {(ck.dp_group, ck.shard_id): ck for g in files for ck in files[g]
                            if cfg.shadow_for(g, ck.shard_id) == node.shadow_id}
        self.records = [r for r in self.records if r.iteration < target]
        self.trainer_digests = [d for d in self.trainer_digests if d[0] < target]
        self.shadow_digests = [d for d in self.shadow_digests if d[0] < target]

        # every trainer fetches all shards of its group over the fabric
        for g, nodes in self.trainers.items():
            for t in nodes:
                t.restored = None
                t.fetch = {s: [] for s in range(cfg.shards)}
                t.fetch_done = set()
                t.ctrl_out.extend(shadow.ctrl_request(g, s, None, t.core.state.ring.rank)
                                  for s in range(cfg.shards))
                t.wake(self.sched.now)
        self._run_until(lambda: all(t.restored is not None for t in self.all_trainers()),
                        "fetching checkpoints")
        self._quiesce()
        restored_bytes = 0
        for g, nodes in self.trainers.items():
            for t in nodes:
                ck = shadow.assemble(t.restored, self.layer_tables[g])
                t.core.state = restore_from_checkpoint(t.core.state, ck)
                restored_bytes += sum(len(p.payload) for s in t.fetch for p in t.fetch[s])
                t.fetch, t.restored = {}, None
        self.iteration = target
        report = RecoveryReport(it, f.group, killed, target, drained, shard_iters, restored_bytes)
        self.recoveries.append(report)
        log.info("recovered at iteration %d after draining %d ticks", target, drained)
        return report

    # --- output ------------------------------------------------------------------

    def write_logs(self, out: Path) -> list[Path]:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for g in self.trainers:
            written.append(write_train_log(out / f"train_log_g{g}.csv", [r for r in self.records if r.dp_group == g]))
        written.append(write_digests(out / "trainer_digest.csv", self.trainer_digests))
        written.append(write_digests(out / "shadow_digest.csv", sorted(self.shadow_digests, key=lambda d: d[:3])))
        p = out / "fabric_counters.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["counter", "value"])
            for k, v in vars(self.counters).items():
                w.writerow([f"switch.{k}", v])
            for link in self.fabric.links:
                for k, v in vars(link.stats).items():
                    w.writerow([f"{link.name}.{k}", v])
            for m in self.mirrors:
                w.writerow([f"{m.name}.frames", m.frames])
        written.append(p)
        if self.recoveries:
            p = out / "recovery.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["failure_iteration", "dp_group", "killed_ranks", "consolidated_iteration",
                            "drained_ticks", "restored_bytes"])
                for r in self.recoveries:
                    w.writerow([r.failure_iteration, r.dp_group, " ".join(map(str, r.killed_ranks)),
                                r.consolidated_iteration, r.drained_ticks, r.restored_bytes])
            written.append(p)
        if self.shadows:
            written.extend(self.persist_checkpoint(out / "checkpoint"))
        return written

    def persist_checkpoint(self, directory: Path) -> list[Path]:
        """Consolidate the live shadow state and write shard files plus a manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries, paths = [], []
        target = min(r.last_completed for r in self.replicas)
        for g in sorted(self.trainers):
            _, files = shadow.consolidate(self.group_replicas(g), at_most=target)
            for ck in files:
                name = checkpoint.shard_filename(g, ck.shard_id)
                crc = checkpoint.write(directory / name, ck)
                entries.append((g, ck.shard_id, name, crc))
                paths.append(directory / name)
        manifest = directory / "MANIFEST"
        checkpoint.write_manifest(manifest, target, entries)
        return [*paths, manifest]


DIGEST_HEADER = ["iteration", "dp_group", "shard", "layer", "params_crc32", "state_crc32", "step"]


def trainer_digest_rows(st: TrainState, layout: BucketLayout, shards: optim.ShardAssignment, it: int) -> list[tuple]:
    names = st.optim.hyper.buffer_names()
    rows = []
    for name, _ in st.params.layers:
        lo, hi = st.params.layer_range(name)
        shard = shards.bucket_to_shard[layout.bucket_of(name).bucket_id]
        rows.append((it, st.ring.dp_group, shard, name, _crc(st.params.storage[lo:hi]),
                     _state_crc(st.optim, names, lo, hi), st.optim.step))
    return rows


def replica_digest_rows(rep: shadow.ShadowReplica, it: int) -> list[tuple]:
    names = rep.optim.hyper.buffer_names()
    rows = []
    for name, _ in rep.layers:
        lo, hi = rep.params.layer_range(name)
        rows.append((it, rep.dp_group, rep.shard_id, name, _crc(rep.params.storage[lo:hi]),
                     _state_crc(rep.optim, names, lo, hi), rep.optim.step))
    return rows


def write_digests(path: Path, rows: Iterable[tuple]) -> Path:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIGEST_HEADER)
        for row in rows:
            w.writerow([*row[:4], f"{row[4]:08x}", f"{row[5]:08x}", row[6]])
    return Path(path)


def write_train_log(path: Path, records: Iterable[IterationRecord]) -> Path:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "tagged_bytes", "wall_ticks"])
        for r in records:
            w.writerow([r.iteration, repr(r.loss), r.tagged_bytes, r.wall_ticks])
    return Path(path)


def group_layout(cfg: RunConfig, g: int):
    """``(layer table, bucket layout, shard assignment)`` of DP group ``g``."""
    table = cfg.model.layer_table(group_prefix(cfg, g))
    layout = build_buckets([(name, c * 4) for name, c in table], cfg.bucket_cap_bytes)
    assignment = optim.partition_parameters(layout, cfg.shards)
    if cfg.shadow_count and any(not assignment.buckets_of(s) for s in range(cfg.shards)):
        raise ConfigError(f"{cfg.shards} shards but only {len(layout)} buckets: some shard owns nothing")
    return table, layout, assignment


def _state_crc(state: optim.OptimState, names, lo: int, hi: int) -> int:
    crc = 0
    for n in names:
        crc = zlib.crc32(np.ascontiguousarray(state.buffers[n][lo:hi]).view(np.uint8), crc)
    return crc


def compare_replica(ref: TrainState, rep: shadow.ShadowReplica, it: int) -> Divergence | None:
    """First byte-level difference between a trainer's state and a shadow shard, if any."""
    if ref.optim.step != rep.optim.step:
        return Divergence(it, rep.dp_group, rep.shard_id, "*", "step", -1)
    for name, _ in rep.layers:
        lo, hi = ref.params.layer_range(name)
        rlo, rhi = rep.params.layer_range(name)
        pairs = [("params", ref.params.storage[lo:hi], rep.params.storage[rlo:rhi])]
        pairs += [(b, ref.optim.buffers[b][lo:hi], rep.optim.buffers[b][rlo:rhi]) for b in ref.optim.buffers]
        for label, a, b in pairs:
            ua, ub = a.view(np.uint32), b.view(np.uint32)
            if not np.array_equal(ua, ub):
                return Divergence(it, rep.dp_group, rep.shard_id, name, label, int(np.flatnonzero(ua != ub)[0]))
    return None


def replication_experiment(cfg: RunConfig, factors: Iterable[int]) -> list[dict]:
    """One iteration per replication factor ``R`` (shadow stream + ``R - 1`` mirror ports)."""
    rows = []
    for r in factors:
        if r < 1:
            raise ConfigError("replication factor must be >= 1")
        world = World(cfg.replace(mirrors=r - 1, iterations=1, failures=(), failure_every=0, corrupt=None),
                      keep_digests=False)
        world.run_iteration()
        c = world.counters
        rows.append({"replication": r, "rx_frames": c.rx_data, "tx_frames": c.tx_data,
                     "ratio": sw.replication_ratio(c), "rx_tagged": c.rx_tagged,
                     "rx_untagged": c.rx_untagged, "tx_untagged": c.tx_untagged,
                     "tx_shadow": c.tx_shadow, "tx_mirror": c.tx_mirror,
                     "dropped": world.fabric.total_dropped()})
    return rows
