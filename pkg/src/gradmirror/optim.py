"""Functional, element-local optimizers shared by trainers and shadow replicas.

Update rules (all arithmetic in float32, evaluated in this order)::

    g  = g_raw * grad_scale
    SGD:    vel = momentum * vel + g;             p = p - lr * vel
    AdamW:  m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            p = p - lr * ((m / (1 - b1**t)) / (sqrt(v / (1 - b2**t)) + eps) + wd * p)

Scalar coefficients are computed in double precision and rounded to float32
once per step, so any partition of the parameter vector produces identical
bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError

SGD = "sgd"
ADAMW = "adamw"

f32 = np.float32


@dataclass(frozen=True)
class OptimHyper:
    kind: str = ADAMW
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    momentum: float = 0.0
    schedule: str = "constant"  # or "cosine"
    total_steps: int = 0  # cosine horizon
    min_lr: float = 0.0

    def __post_init__(self):
        if self.kind not in (SGD, ADAMW):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.schedule == "cosine" and self.total_steps <= 0:
            raise ConfigError("cosine schedule needs total_steps > 0")

    def lr_at(self, time: int) -> float:
        """Learning rate for step ``time`` (1-based)."""
        if self.schedule == "constant":
            return self.lr
        progress = min(time - 1, self.total_steps) / self.total_steps
        return self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + math.cos(math.pi * progress))

    def buffer_names(self) -> tuple[str, ...]:
        if self.kind == ADAMW:
            return ("m", "v")
        return ("velocity",)

    def as_dict(self) -> dict:
        return {
            "kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "weight_decay": self.weight_decay, "momentum": self.momentum,
            "schedule": self.schedule, "total_steps": self.total_steps, "min_lr": self.min_lr,
        }


@dataclass
class OptimState:
    hyper: OptimHyper
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "OptimState":
        return OptimState(self.hyper, self.step, {k: b.copy() for k, b in self.buffers.items()})

    def __eq__(self, other):
        if not isinstance(other, OptimState):
            return NotImplemented
        return (
            self.hyper == other.hyper
            and self.step == other.step
            and self.buffers.keys() == other.buffers.keys()
            and all(self.buffers[k].tobytes() == other.buffers[k].tobytes() for k in self.buffers)
        )


def init_state(hyper: OptimHyper, size: int) -> OptimState:
    return OptimState(hyper, 0, {name: np.zeros(size, dtype=np.float32) for name in hyper.buffer_names()})


def _require_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError("non-finite value reaching the optimizer")


def _adamw_coeffs(hyper: OptimHyper, time: int, grad_scale: float):
    b1, b2 = hyper.beta1, hyper.beta2
    return (
        f32(grad_scale), f32(hyper.lr_at(time)),
        f32(b1), f32(1.0 - b1), f32(b2), f32(1.0 - b2),
        f32(1.0 - b1 ** time), f32(1.0 - b2 ** time),
        f32(hyper.eps), f32(hyper.weight_decay),
    )


def sgd_step(p, g, velocity, hyper: OptimHyper, time: int = 1, grad_scale: float = 1.0):
    """Pure SGD step; returns new ``(p, velocity)`` without touching the inputs."""
    p = np.array(p, dtype=np.float32, copy=True)
    velocity = np.array(velocity, dtype=np.float32, copy=True)
    g = np.ascontiguousarray(g, dtype=np.float32)
    _require_finite(p, g, velocity)
    kernels.sgd_update(p, g, velocity, f32(grad_scale), f32(hyper.lr_at(time)), f32(hyper.momentum))
    return p, velocity


def adamw_step(p, g, m, v, time: int, hyper: OptimHyper, grad_scale: float = 1.0):
    """Pure AdamW step; returns new ``(p, m, v)``."""
    if time < 1:
        raise ValueError("AdamW step counter starts at 1")
    p = np.array(p, dtype=np.float32, copy=True)
    m = np.array(m, dtype=np.float32, copy=True)
    v = np.array(v, dtype=np.float32, copy=True)
    g = np.ascontiguousarray(g, dtype=np.float32)
    _require_finite(p, g, m, v)
    kernels.adamw_update(p, g, m, v, *_adamw_coeffs(hyper, time, grad_scale))
    return p, m, v


def apply_step(
    state: OptimState,
    params: np.ndarray,
    grads: np.ndarray,
    grad_scale: float = 1.0,
    segments: Iterable[tuple[int, int]] | None = None,
) -> None:
    """Advance ``state`` by one step, updating ``params`` in place.

    ``segments`` restricts the update to ``[start, stop)`` element ranges;
    every range sees the same step counter, so splitting the vector any way
    yields the same bytes as one whole-vector call.
    """
    if params.shape != grads.shape:
        raise ValueError(f"params {params.shape} vs grads {grads.shape}")
    if segments is None:
        segments = [(0, params.shape[0])]
    apply_step_pieces(state, params, [(lo, hi, grads[lo:hi]) for lo, hi in segments], grad_scale)


def apply_step_pieces(state: OptimState, params: np.ndarray,
                      pieces: Iterable[tuple[int, int, np.ndarray]], grad_scale: float = 1.0) -> None:
    """Like :func:`apply_step`, with gradients supplied as ``(start, stop, array)`` pieces.

    Shadow replicas use this to step directly on views into reassembled buckets.
    """
    pieces = list(pieces)
    _require_finite(params, *state.buffers.values(), *(g for _, _, g in pieces))
    hyper = state.hyper
    time = state.step + 1
    if hyper.kind == ADAMW:
        coeffs = _adamw_coeffs(hyper, time, grad_scale)
        m, v = state.buffers["m"], state.buffers["v"]
        for lo, hi, g in pieces:
            kernels.adamw_update(params[lo:hi], g, m[lo:hi], v[lo:hi], *coeffs)
    else:
        vel = state.buffers["velocity"]
        scale, lr, mom = f32(grad_scale), f32(hyper.lr_at(time)), f32(hyper.momentum)
        for lo, hi, g in pieces:
            kernels.sgd_update(params[lo:hi], g, vel[lo:hi], scale, lr, mom)
    state.step = time


@dataclass(frozen=True)
class ShardAssignment:
    k: int
    bucket_to_shard: dict[int, int]

    def buckets_of(self, shard: int) -> list[int]:
        return sorted(b for b, s in self.bucket_to_shard.items() if s == shard)


def partition_parameters(layout, k: int) -> ShardAssignment:
    """Assign bucket ``i`` to shard ``i % k``."""
    if k < 1:
        raise ConfigError("shard count must be >= 1")
    return ShardAssignment(k, {b.bucket_id: b.bucket_id % k for b in layout.buckets})
