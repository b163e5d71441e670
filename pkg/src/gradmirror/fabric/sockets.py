"""Multi-process demo transport over local TCP streams.

Each trainer, shadow and the switch runs in its own process and talks only
through sockets carrying the 48-byte-header frames.  TCP supplies the
lossless, in-order delivery that credits provide in the simulator, so the
switch's egress ports never report back-pressure here.  Correctness is
asserted in deterministic mode; this transport is a demonstration whose
output directory can be checked with ``gradmirror verify``.

Connection handshake: the first frame on every connection is a CTRL frame
whose JSON payload names the peer (``{"role": "trainer", "group", "rank"}``
or ``{"role": "shadow", "id", "nic"}``).  Shadow streams are accepted before
the switch sends ``{"op": "start"}`` to the trainers.
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import selectors
import socket
import time
from pathlib import Path

import numpy as np

from ..collective import boundary_ranks
from ..errors import ConfigError, GradMirrorError, InvariantError
from . import switch as sw
from .wire import FrameReader, MsgType, WireFrame, encode

log = logging.getLogger(__name__)

RECV_BYTES = 1 << 20
JOIN_TIMEOUT_S = 600.0


def _hello(payload: dict) -> bytes:
    return encode(WireFrame(msg_type=MsgType.CTRL, payload=json.dumps(payload).encode()))


class _Port:
    """Switch egress on one TCP connection; buffered writes, never blocks."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.wbuf = bytearray()
        self.link_id = sock.fileno()

    def has_credit(self) -> bool:
        return True

    def push(self, frame: WireFrame) -> None:
        self.wbuf += encode(frame)

    def flush(self) -> None:
        if self.wbuf:
            try:
                n = self.sock.send(self.wbuf)
            except BlockingIOError:
                return
            del self.wbuf[:n]


def _send_all(ports, frame) -> bool:
    for p in ports:
        p.push(frame)
    return True


def _switch_main(listener: socket.socket, cfg, expect_trainers: int, expect_shadows: int, out: str) -> None:
    ctrl = sw.SwitchControl()
    ports: dict[tuple, _Port] = {}
    dataplane = sw.SwitchDataPlane(ctrl, lambda dest: ports[dest], _send_all)
    n = cfg.world_size
    for g in range(cfg.dp_groups):
        ctrl.install_ring(g, n, cfg.channels)
    for s in range(cfg.shadow_count):
        ctrl.register_shadow(s)
    for g in range(cfg.dp_groups):
        for shard in range(cfg.shards):
            ctrl.set_shard(g, shard, cfg.shadow_for(g, shard))
        streams = sorted({cfg.shadow_for(g, s) for s in range(cfg.shards)})
        for b in boundary_ranks(n):
            sw.install_multicast_group(ctrl, g, b, (b + 1) % n, streams)

    sel = selectors.DefaultSelector()
    listener.setblocking(False)
    sel.register(listener, selectors.EVENT_READ, None)
    conns: dict[int, dict] = {}
    trainers = shadows_seen = 0
    started = False
    expected_conns = expect_trainers + 2 * expect_shadows
    opened = closed = 0
    while True:
        for key, _ in sel.select(timeout=0.05):
            if key.data is None:
                sock, _ = listener.accept()
                sock.setblocking(False)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conns[sock.fileno()] = {"sock": sock, "reader": FrameReader(), "who": None}
                sel.register(sock, selectors.EVENT_READ, sock.fileno())
                opened += 1
                continue
            c = conns[key.data]
            try:
                data = c["sock"].recv(RECV_BYTES)
            except ConnectionResetError:
                data = b""
            if not data:
                sel.unregister(c["sock"])
                c["sock"].close()
                del conns[key.data]
                closed += 1
                continue
            for frame in c["reader"].feed(data):
                if c["who"] is None:
                    who = json.loads(frame.payload)
                    c["who"] = who
                    port = _Port(c["sock"])
                    c["port"] = port
                    if who["role"] == "trainer":
                        ports[("trainer", who["group"], who["rank"])] = port
                        trainers += 1
                    else:
                        ports[("shadow", who["id"], who["nic"])] = port
                        shadows_seen += 1
                        if shadows_seen == 2 * expect_shadows:
                            for s in range(expect_shadows):
                                sw.shadow_stream_accept(ctrl, s)
                    continue
                dataplane.forward(frame)
        if not started and trainers == expect_trainers and shadows_seen == 2 * expect_shadows:
            ctrl.start_training()
            started = True
            for c in conns.values():
                if c["who"] and c["who"]["role"] == "trainer":
                    c["port"].wbuf += _hello({"op": "start"})
        for c in conns.values():
            if "port" in c:
                c["port"].flush()
        if opened == expected_conns and closed == expected_conns:
            break
    Path(out, "switch_counters.json").write_text(json.dumps(vars(dataplane.counters), sort_keys=True))


class _Client:
    def __init__(self, port: int, hello: dict):
        self.sock = socket.create_connection(("127.0.0.1", port))
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.sendall(_hello(hello))
        self.sock.setblocking(False)
        self.reader = FrameReader()
        self.wbuf = bytearray()

    def poll(self, timeout: float = 0.01) -> list[WireFrame]:
        sel_events = selectors.EVENT_READ | (selectors.EVENT_WRITE if self.wbuf else 0)
        with selectors.DefaultSelector() as sel:
            sel.register(self.sock, sel_events)
            frames = []
            for _, mask in sel.select(timeout):
                if mask & selectors.EVENT_READ:
                    data = self.sock.recv(RECV_BYTES)
                    if not data:
                        raise InvariantError("switch closed the connection")
                    frames.extend(self.reader.feed(data))
                if mask & selectors.EVENT_WRITE and self.wbuf:
                    try:
                        n = self.sock.send(self.wbuf)
                        del self.wbuf[:n]
                    except BlockingIOError:
                        pass
            return frames

    def send(self, frame: WireFrame) -> bool:
        self.wbuf += encode(frame)
        return True

    def close(self) -> None:
        self.sock.setblocking(True)
        if self.wbuf:
            self.sock.sendall(self.wbuf)
        self.sock.close()


def _trainer_main(cfg, g: int, r: int, port: int, out: str) -> None:
    from .. import world as W
    from ..collective import RingConfig
    from ..trainer import TrainerCore, TrainState

    _, layout, shards = W.group_layout(cfg, g)
    ring = RingConfig(cfg.world_size, r, cfg.channels, g)
    state = TrainState.fresh(cfg.model, cfg.optimizer, ring, cfg.seed, W.group_prefix(cfg, g))
    core = TrainerCore(state, layout, shards, cfg.mtu)
    client = _Client(port, {"role": "trainer", "group": g, "rank": r})
    # data from a neighbour that started first can share a read with the start frame
    early: list[WireFrame] = []
    while not early or early[0].msg_type != MsgType.CTRL:
        for f in client.poll(0.05):
            if early or f.msg_type == MsgType.CTRL:
                early.append(f)
    for frame in early[1:]:
        core.on_frame(frame)
    records, digests = [], []
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        core.begin()
        while not core.done:
            core.drain(client.send)
            for frame in client.poll(0.001 if client.wbuf else 0.01):
                core.on_frame(frame)
            core.drain(client.send)
        records.append([it, core.loss, core.tagged_bytes, int((time.perf_counter() - t0) * 1e3)])
        if r == 0:
            digests.extend(W.trainer_digest_rows(state, layout, shards, it))
    while client.wbuf:
        client.poll(0.01)
    client.close()
    Path(out, f"trainer_g{g}_r{r}.json").write_text(json.dumps(
        {"records": records, "digests": digests, "params_crc": W._crc(state.params.storage)}))


def _shadow_main(cfg, s: int, port: int, out: str) -> None:
    from .. import shadow as S
    from .. import world as W
    from ..collective import RingConfig
    from ..errors import ProtocolError
    from ..trainer import TrainState

    layouts, expectations, owned, replicas = {}, {}, {}, []
    for g in range(cfg.dp_groups):
        _, layout, shards = W.group_layout(cfg, g)
        layouts[g] = layout
        ring = RingConfig(cfg.world_size, 0, cfg.channels, g)
        expectations[g] = S.expected_stream_layout(ring, layout, shards)
        init = TrainState.fresh(cfg.model, cfg.optimizer, ring, cfg.seed, W.group_prefix(cfg, g))
        for shard in range(cfg.shards):
            if cfg.shadow_for(g, shard) == s:
                rep = S.ShadowReplica.from_train_state(init, layout, shards, shard,
                                                       model_id=f"mlp-{'x'.join(map(str, cfg.model.dims))}")
                replicas.append(rep)
                owned.setdefault(g, set()).update(rep.owned)
    reasm = S.ReassemblyState(expectations, layouts, owned)
    nics = [_Client(port, {"role": "shadow", "id": s, "nic": nic}) for nic in (sw.NIC_A, sw.NIC_B)]
    digests, rejected = [], 0
    while any(rep.last_completed < cfg.iterations for rep in replicas):
        for nic in nics:
            for frame in nic.poll(0.005):
                try:
                    events = reasm.ingest_frame(frame)
                except ProtocolError as exc:  # counted and dropped in this transport
                    rejected += 1
                    log.warning("shadow %d rejected a frame: %s", s, exc)
                    continue
                for ev in events:
                    nics[0].send(WireFrame(msg_type=MsgType.ACK, dp_group=ev.dp_group, src_rank=s,
                                           iteration=ev.iteration, bucket_id=ev.bucket_id))
                    for rep in replicas:
                        while rep.dp_group == ev.dp_group and reasm.bucket_ready(rep.dp_group, rep.last_completed,
                                                                                  rep.owned):
                            it = rep.last_completed
                            rep.apply_update(it + 1, {b: reasm.take_bucket(rep.dp_group, it, b) for b in rep.owned})
                            reasm.finish_iteration(rep.dp_group, it, rep.shard_id, rep.owned)
                            digests.extend(W.replica_digest_rows(rep, it))
    for nic in nics:
        nic.close()
    Path(out, f"shadow_{s}.json").write_text(json.dumps({"digests": digests, "rejected": rejected}))


def run_sockets(cfg, out: Path) -> dict:
    """Run ``cfg`` as separate processes over loopback TCP; returns a summary."""
    from .. import world as W

    if cfg.all_failures() or cfg.corrupt is not None:
        raise ConfigError("failure injection and fault seeding are deterministic-mode only")
    if cfg.shadow_count < 1:
        raise ConfigError("socket mode needs at least one shadow node")
    out = Path(out)
    work = out / "sockets"
    work.mkdir(parents=True, exist_ok=True)
    ctx = mp.get_context("fork")
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind(("127.0.0.1", 0))
    listener.listen(256)
    port = listener.getsockname()[1]
    n_trainers = cfg.dp_groups * cfg.world_size
    procs = [ctx.Process(target=_switch_main, args=(listener, cfg, n_trainers, cfg.shadow_count, str(work)),
                         name="switch")]
    procs += [ctx.Process(target=_shadow_main, args=(cfg, s, port, str(work)), name=f"shadow{s}")
              for s in range(cfg.shadow_count)]
    procs += [ctx.Process(target=_trainer_main, args=(cfg, g, r, port, str(work)), name=f"trainer{g}.{r}")
              for g in range(cfg.dp_groups) for r in range(cfg.world_size)]
    for p in procs:
        p.start()
    listener.close()
    deadline = time.monotonic() + JOIN_TIMEOUT_S
    for p in procs:
        p.join(max(0.0, deadline - time.monotonic()))
    hung = [p.name for p in procs if p.is_alive()]
    for p in procs:
        if p.is_alive():
            p.kill()
    failed = [p.name for p in procs if p.exitcode not in (0, None)]
    if hung or failed:
        raise GradMirrorError(f"socket-mode nodes failed: hung={hung} failed={failed}")

    trainer_rows, shadow_rows, crcs = [], [], {}
    for g in range(cfg.dp_groups):
        per_rank = [json.loads((work / f"trainer_g{g}_r{r}.json").read_text()) for r in range(cfg.world_size)]
        crcs[g] = {d["params_crc"] for d in per_rank}
        records = []
        for it in range(cfg.iterations):
            rows = [d["records"][it] for d in per_rank]
            loss = float(np.array([x[1] for x in rows], dtype=np.float64).mean())
            records.append(W.IterationRecord(g, it, loss, sum(x[2] for x in rows), max(x[3] for x in rows)))
        W.write_train_log(out / f"train_log_g{g}.csv", records)
        trainer_rows.extend(tuple(d) for d in per_rank[0]["digests"])
    rejected = 0
    for s in range(cfg.shadow_count):
        d = json.loads((work / f"shadow_{s}.json").read_text())
        shadow_rows.extend(tuple(x) for x in d["digests"])
        rejected += d["rejected"]
    W.write_digests(out / "trainer_digest.csv", sorted(trainer_rows, key=lambda d: d[:2]))
    W.write_digests(out / "shadow_digest.csv", sorted(shadow_rows, key=lambda d: d[:3]))
    counters = json.loads((work / "switch_counters.json").read_text())
    dp_equal = all(len(v) == 1 for v in crcs.values())
    if not dp_equal:
        raise InvariantError("DP replicas diverged in socket mode")
    return {"iterations": cfg.iterations, "rx_data": counters["rx_data"], "tx_data": counters["tx_data"],
            "ack_drop": counters["ack_drop"], "rejected_frames": rejected, "dp_equal": dp_equal}
