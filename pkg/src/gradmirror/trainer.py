"""Deterministic CPU training nodes.

A small tanh MLP with MSE loss on seeded synthetic regression data.  All math
is float32 with a fixed evaluation order, so identical ``(seed, iteration,
rank)`` inputs produce identical gradient bytes on every run.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import collective, optim
from .collective import ChannelSeqState, RingConfig
from .errors import ConfigError, InvariantError, ShapeError
from .fabric.wire import NO_SHARD, Flags, WireFrame

DEFAULT_MTU = 8192
f32 = np.float32


@dataclass
class FlatTensor:
    """Contiguous float32 storage over an ordered ``(name, element count)`` table."""

    layers: list[tuple[str, int]]
    storage: np.ndarray

    def __post_init__(self):
        self.layers = [(str(n), int(c)) for n, c in self.layers]
        total = sum(c for _, c in self.layers)
        if self.storage.dtype != np.float32 or self.storage.ndim != 1:
            raise ShapeError("FlatTensor storage must be a 1-D float32 array")
        if self.storage.shape[0] != total:
            raise ShapeError(f"storage holds {self.storage.shape[0]} elements, layer table {total}")
        self._ranges: dict[str, tuple[int, int]] = {}
        start = 0
        for name, count in self.layers:
            if name in self._ranges:
                raise ShapeError(f"duplicate layer {name!r}")
            self._ranges[name] = (start, start + count)
            start += count

    @classmethod
    def zeros(cls, layers: Sequence[tuple[str, int]]) -> "FlatTensor":
        return cls(list(layers), np.zeros(sum(c for _, c in layers), dtype=np.float32))

    @property
    def total_bytes(self) -> int:
        return self.storage.nbytes

    def layer_range(self, name: str) -> tuple[int, int]:
        return self._ranges[name]

    def view(self, name: str) -> np.ndarray:
        lo, hi = self._ranges[name]
        return self.storage[lo:hi]

    def copy(self) -> "FlatTensor":
        return FlatTensor(list(self.layers), self.storage.copy())

    def layer_bytes(self) -> list[tuple[str, int]]:
        return [(n, c * 4) for n, c in self.layers]


@dataclass(frozen=True)
class BucketEntry:
    layer: str
    layer_start: int  # byte range inside the layer
    layer_stop: int
    bucket_offset: int  # byte offset inside the bucket

    @property
    def nbytes(self) -> int:
        return self.layer_stop - self.layer_start


@dataclass(frozen=True)
class Bucket:
    bucket_id: int
    entries: tuple[BucketEntry, ...]

    @property
    def nbytes(self) -> int:
        return sum(e.nbytes for e in self.entries)

    @property
    def elements(self) -> int:
        return self.nbytes // 4

    def layer_names(self) -> list[str]:
        return [e.layer for e in self.entries]


@dataclass(frozen=True)
class BucketLayout:
    cap_bytes: int
    buckets: tuple[Bucket, ...]

    def bucket_of(self, layer: str) -> Bucket:
        for b in self.buckets:
            if layer in b.layer_names():
                return b
        raise KeyError(layer)

    def __len__(self):
        return len(self.buckets)


def build_buckets(layers: Sequence[tuple[str, int]], cap_bytes: int) -> BucketLayout:
    """Bin-pack layers into buckets starting from the last layer.

    A layer joins the open bucket while the bucket stays within ``cap_bytes``;
    a layer larger than the cap gets a dedicated bucket.
    """
    if not layers:
        raise ConfigError("cannot bucket an empty layer list")
    if cap_bytes <= 0:
        raise ConfigError("bucket cap must be positive")
    buckets: list[Bucket] = []
    current: list[BucketEntry] = []
    fill = 0

    def close():
        nonlocal current, fill
        if current:
            buckets.append(Bucket(len(buckets), tuple(current)))
        current, fill = [], 0

    for name, nbytes in reversed(list(layers)):
        if nbytes <= 0:
            raise ConfigError(f"layer {name!r} has non-positive size {nbytes}")
        if nbytes > cap_bytes:
            close()
            current = [BucketEntry(name, 0, nbytes, 0)]
            close()
            continue
        if fill + nbytes > cap_bytes:
            close()
        current.append(BucketEntry(name, 0, nbytes, fill))
        fill += nbytes
    close()
    return BucketLayout(cap_bytes, tuple(buckets))


def pack_bucket(bucket: Bucket, grads: FlatTensor, n: int) -> np.ndarray:
    """Copy a bucket's layer gradients into a fresh buffer zero-padded to a multiple of ``n``."""
    buf = np.zeros(collective.padded_elements(bucket.elements, n), dtype=np.float32)
    for e in bucket.entries:
        lo = e.bucket_offset // 4
        src = grads.view(e.layer)[e.layer_start // 4:e.layer_stop // 4]
        buf[lo:lo + src.shape[0]] = src
    return buf


def unpack_bucket(bucket: Bucket, buf: np.ndarray, out: FlatTensor) -> None:
    for e in bucket.entries:
        lo = e.bucket_offset // 4
        dst = out.view(e.layer)[e.layer_start // 4:e.layer_stop // 4]
        dst[:] = buf[lo:lo + dst.shape[0]]


# --- model -------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    dims: tuple[int, ...] = (64, 128, 32)
    batch_size: int = 16

    def __post_init__(self):
        if len(self.dims) < 2 or any(d <= 0 for d in self.dims):
            raise ConfigError(f"model dims must be >= 2 positive ints, got {self.dims}")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")

    @property
    def num_linear(self) -> int:
        return len(self.dims) - 1

    def layer_table(self, prefix: str = "") -> list[tuple[str, int]]:
        table = []
        for i in range(self.num_linear):
            fan_in, fan_out = self.dims[i], self.dims[i + 1]
            table.append((f"{prefix}fc{i}.weight", fan_out * fan_in))
            table.append((f"{prefix}fc{i}.bias", fan_out))
        return table

    @property
    def param_count(self) -> int:
        return sum(c for _, c in self.layer_table())


def init_params(spec: ModelSpec, seed: int, dp_group: int = 0, prefix: str = "") -> FlatTensor:
    rng = np.random.default_rng([seed, dp_group, 0xC0FFEE])
    params = FlatTensor.zeros(spec.layer_table(prefix))
    for i in range(spec.num_linear):
        fan_in = spec.dims[i]
        w = params.view(f"{prefix}fc{i}.weight")
        w[:] = (rng.standard_normal(w.shape[0]) / np.sqrt(fan_in)).astype(np.float32)
    return params


def synthetic_batch(spec: ModelSpec, seed: int, iteration: int, rank: int, dp_group: int = 0):
    """Seeded regression batch ``(x, y)``; the teacher map depends only on ``seed``."""
    teacher_rng = np.random.default_rng([seed, dp_group, 0x7EAC4E2])
    d_in, d_out = spec.dims[0], spec.dims[-1]
    teacher = (teacher_rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)).astype(np.float32)
    rng = np.random.default_rng([seed, dp_group, iteration, rank])
    x = rng.standard_normal((spec.batch_size, d_in)).astype(np.float32)
    y = np.tanh(x @ teacher).astype(np.float32)
    return x, y


def _weights(spec: ModelSpec, params: FlatTensor, prefix: str):
    out = []
    for i in range(spec.num_linear):
        w = params.view(f"{prefix}fc{i}.weight").reshape(spec.dims[i + 1], spec.dims[i])
        b = params.view(f"{prefix}fc{i}.bias")
        out.append((w, b))
    return out


def forward_loss(spec: ModelSpec, params: FlatTensor, x: np.ndarray, y: np.ndarray, prefix: str = ""):
    h = x
    layers = _weights(spec, params, prefix)
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        h = np.tanh(z) if i < len(layers) - 1 else z
    diff = h - y
    return f32(np.mean(diff * diff, dtype=np.float32))


def model_forward_backward(spec: ModelSpec, params: FlatTensor, x: np.ndarray, y: np.ndarray,
                           prefix: str = "") -> tuple[np.float32, FlatTensor]:
    """Return ``(loss, gradients)`` for one batch; gradients share the params' layer table."""
    if x.ndim != 2 or x.shape[1] != spec.dims[0]:
        raise ShapeError(f"batch input shape {x.shape} does not match model input {spec.dims[0]}")
    if y.shape != (x.shape[0], spec.dims[-1]):
        raise ShapeError(f"target shape {y.shape} does not match model output")
    layers = _weights(spec, params, prefix)
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        acts.append(h)
    diff = h - y
    loss = f32(np.mean(diff * diff, dtype=np.float32))
    grads = FlatTensor.zeros(params.layers)
    dz = diff * f32(2.0 / diff.size)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        h_prev = acts[i]
        grads.view(f"{prefix}fc{i}.weight")[:] = (dz.T @ h_prev).ravel()
        grads.view(f"{prefix}fc{i}.bias")[:] = dz.sum(axis=0, dtype=np.float32)
        if i > 0:
            dh = dz @ w
            dz = dh * (f32(1.0) - h_prev * h_prev)
    return loss, grads


# --- training state ------------------------------------------------------------

@dataclass
class TrainState:
    spec: ModelSpec
    params: FlatTensor
    optim: optim.OptimState
    ring: RingConfig
    seed: int
    iteration: int = 0  # completed iterations
    prefix: str = ""
    losses: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, spec: ModelSpec, hyper: optim.OptimHyper, ring: RingConfig, seed: int,
              prefix: str = "") -> "TrainState":
        params = init_params(spec, seed, ring.dp_group, prefix)
        return cls(spec, params, optim.init_state(hyper, params.storage.shape[0]), ring, seed, 0, prefix)

    def copy(self) -> "TrainState":
        return TrainState(self.spec, self.params.copy(), self.optim.copy(), self.ring, self.seed,
                          self.iteration, self.prefix, list(self.losses))

    def local_gradients(self, iteration: int) -> tuple[np.float32, FlatTensor]:
        x, y = synthetic_batch(self.spec, self.seed, iteration, self.ring.rank, self.ring.dp_group)
        return model_forward_backward(self.spec, self.params, x, y, self.prefix)

    def apply_reduced(self, reduced: np.ndarray) -> None:
        optim.apply_step(self.optim, self.params.storage, reduced, grad_scale=grad_scale(self.ring.world_size))
        self.iteration += 1


def grad_scale(world_size: int) -> np.float32:
    return f32(1.0 / world_size)


def restore_from_checkpoint(state: TrainState, ckpt) -> TrainState:
    """Load params + optimizer state from a consolidated checkpoint.

    ``ckpt`` is a :class:`gradmirror.shadow.ConsolidatedCheckpoint`.
    """
    if list(ckpt.params.layers) != list(state.params.layers):
        raise ShapeError("checkpoint layer table does not match the model")
    if ckpt.optim.hyper.kind != state.optim.hyper.kind:
        raise ShapeError("checkpoint optimizer kind does not match")
    restored = TrainState(state.spec, ckpt.params.copy(), ckpt.optim.copy(), state.ring, state.seed,
                          ckpt.iteration, state.prefix, list(state.losses[:ckpt.iteration]))
    return restored


def reference_iteration(states: Sequence[TrainState], layout: BucketLayout) -> None:
    """Single-process oracle: sum per-rank gradients in ring order, then step every state."""
    n = len(states)
    per_rank = []
    losses = []
    it = states[0].iteration
    for st in states:
        loss, g = st.local_gradients(it)
        losses.append(loss)
        per_rank.append(g)
    reduced = FlatTensor.zeros(states[0].params.layers)
    for bucket in layout.buckets:
        bufs = [pack_bucket(bucket, g, n) for g in per_rank]
        unpack_bucket(bucket, collective.ring_order_sum(bufs), reduced)
    for st, loss in zip(states, losses):
        st.losses.append(float(loss))
        st.apply_reduced(reduced.storage)


# --- networked trainer ---------------------------------------------------------

RS, AG = 0, 1


@dataclass(frozen=True)
class Step:
    bucket: int
    phase: int
    index: int  # step (ReduceScatter) or round (AllGather)
    send_chunk: int
    recv_chunk: int


def collective_plan(n: int, rank: int, layout: BucketLayout) -> list[Step]:
    plan = []
    for b in layout.buckets:
        for s in range(n - 1):
            send, recv = collective.reduce_scatter_schedule(n, rank, s)
            plan.append(Step(b.bucket_id, RS, s, send, recv))
        for r in range(n - 1):
            plan.append(Step(b.bucket_id, AG, r, collective.allgather_send_chunk(n, rank, r),
                             collective.allgather_recv_chunk(n, rank, r)))
    return plan


def segment(nbytes: int, mtu: int) -> list[tuple[int, int]]:
    return [(off, min(mtu, nbytes - off)) for off in range(0, nbytes, mtu)]


class TrainerCore:
    """Transport-agnostic ring participant for one iteration at a time.

    ``send`` is a callable ``(frame) -> bool`` for the uplink (False = no
    credit); incoming frames are handed to :meth:`on_frame`.
    """

    def __init__(self, state: TrainState, layout: BucketLayout, shards: optim.ShardAssignment,
                 mtu: int = DEFAULT_MTU):
        if mtu <= 0 or mtu % 4:
            raise ConfigError("mtu must be a positive multiple of 4 bytes")
        self.state = state
        self.layout = layout
        self.shards = shards
        self.mtu = mtu
        self.n = state.ring.world_size
        self.rank = state.ring.rank
        self.plan = collective_plan(self.n, self.rank, layout) if self.n > 1 else []
        self.outbox: deque[WireFrame] = deque()
        self.active = False
        self.done = False
        self.tagged_bytes = 0
        self.tag_log: list[tuple] = []  # (channel, shard, inner_seq, len, bucket, chunk, offset)
        self.capture: Callable[[WireFrame], None] | None = None
        self.keep_reduced = False
        self.tagging = True
        self.reduced_buckets: dict[int, np.ndarray] = {}
        self._staging: dict[tuple, list] = {}

    def begin(self) -> None:
        st = self.state
        it = st.iteration
        self.iteration = it
        loss, grads = st.local_gradients(it)
        self.loss = float(loss)
        self.grads = grads
        self.tagged_bytes = 0
        self.tag_log = []
        self.reduced_buckets = {}
        self.seq: dict[tuple[int, int], ChannelSeqState] = {}
        self.bufs = {b.bucket_id: pack_bucket(b, grads, self.n) for b in self.layout.buckets}
        self.step_idx = 0
        self.active = True
        self.done = False
        if self.n == 1:
            self._finish()
            return
        self._enter_step()
        self._try_complete()

    def _chunk_slice(self, bucket: int, chunk: int) -> slice:
        per = self.bufs[bucket].shape[0] // self.n
        return slice(chunk * per, (chunk + 1) * per)

    def _enter_step(self) -> None:
        step = self.plan[self.step_idx]
        ring = self.state.ring
        data = self.bufs[step.bucket][self._chunk_slice(step.bucket, step.send_chunk)].tobytes()
        tagged = self.tagging and step.phase == AG and collective.should_tag(self.n, self.rank, step.index)
        channel = collective.channel_for_chunk(ring, step.bucket, step.send_chunk)
        flags = Flags.ALLGATHER if step.phase == AG else Flags.NONE
        shard = NO_SHARD
        if tagged:
            flags |= Flags.TAGGED
            shard = self.shards.bucket_to_shard[step.bucket]
            counter = self.seq.setdefault((channel, shard), ChannelSeqState(channel))
        for off, ln in segment(len(data), self.mtu):
            seq = collective.next_tagged_seq(counter, ln, True) if tagged else 0
            frame = WireFrame(
                flags=int(flags), dp_group=ring.dp_group, src_rank=self.rank, channel_id=channel,
                iteration=self.iteration, bucket_id=step.bucket, chunk_id=step.send_chunk,
                round=step.index, shadow_shard=shard, inner_seq=seq, byte_offset=off,
                payload=data[off:off + ln],
            )
            if tagged:
                self.tagged_bytes += ln
                self.tag_log.append((channel, shard, seq, ln, step.bucket, step.send_chunk, off))
                if self.capture is not None:
                    self.capture(frame)
            self.outbox.append(frame)

    def on_frame(self, frame: WireFrame) -> None:
        key = (frame.iteration, frame.bucket_id, int(frame.allgather), frame.round)
        entry = self._staging.get(key)
        if entry is None:
            per = self._chunk_bytes(frame.bucket_id)
            entry = self._staging[key] = [bytearray(per), 0, frame.chunk_id]
        if entry[2] != frame.chunk_id:
            raise InvariantError(f"chunk mismatch for {key}: {entry[2]} vs {frame.chunk_id}")
        entry[0][frame.byte_offset:frame.byte_offset + len(frame.payload)] = frame.payload
        entry[1] += len(frame.payload)
        if self.active:
            self._try_complete()

    def _chunk_bytes(self, bucket: int) -> int:
        b = self.layout.buckets[bucket]
        return collective.padded_elements(b.elements, self.n) // self.n * 4

    def _try_complete(self) -> None:
        while self.active and not self.done:
            step = self.plan[self.step_idx]
            key = (self.iteration, step.bucket, step.phase, step.index)
            entry = self._staging.get(key)
            if entry is None or entry[1] < len(entry[0]):
                return
            if entry[1] > len(entry[0]) or entry[2] != step.recv_chunk:
                raise InvariantError(f"bad receive for step {step}")
            del self._staging[key]
            received = np.frombuffer(bytes(entry[0]), dtype=np.float32)
            buf = self.bufs[step.bucket]
            sl = self._chunk_slice(step.bucket, step.recv_chunk)
            if step.phase == RS:
                buf[sl] = received + buf[sl]
            else:
                buf[sl] = received
            self.step_idx += 1
            if self.step_idx == len(self.plan):
                self._finish()
                return
            self._enter_step()

    def _finish(self) -> None:
        reduced = FlatTensor.zeros(self.state.params.layers)
        if self.keep_reduced:
            self.reduced_buckets = {bid: buf.copy() for bid, buf in self.bufs.items()}
        for b in self.layout.buckets:
            unpack_bucket(b, self.bufs[b.bucket_id], reduced)
        self.state.losses.append(self.loss)
        self.state.apply_reduced(reduced.storage)
        self.active = False
        self.done = True
        self.bufs = {}
        self.grads = None

    def drain(self, send: Callable[[WireFrame], bool]) -> int:
        sent = 0
        while self.outbox and send(self.outbox[0]):
            self.outbox.popleft()
            sent += 1
        return sent
