"""Run configuration: YAML file to validated dataclasses.

Recognised keys (all optional)::

    scenario: name
    world_size: 4            # ranks per DP group
    dp_groups: 1
    channels: 1
    bucket_cap_bytes: 65536
    mtu: 8192
    model: {dims: [64, 128, 32], batch_size: 16}
    optimizer: {kind: adamw, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8,
                weight_decay: 0.01, momentum: 0.0, schedule: constant}
    seed: 0
    iterations: 10
    shadow_count: 1
    shards: 1                # optimizer shards per DP group
    link_capacity: 256       # credits (frames) per link
    link_latency: 1          # ticks
    shadow_rate: 0           # frames consumed per tick per shadow; 0 = unlimited
    mirrors: 0               # extra mirror ports per multicast group
    lockstep: true
    recovery_timeout_ticks: 0   # 0 = 3x mean iteration ticks
    failures:                # failure schedule
      - {iteration: 5, ranks: [2], group: 0, at_fraction: 0.5}
      - {iteration: 7, shadows: [0]}       # lose a shadow: unrecoverable
    failure_every: 0         # shorthand: interrupt every N-th iteration
    corrupt: {iteration: 3, group: 0, shard: 0, layer: fc0.weight, element: 7}
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .optim import OptimHyper
from .trainer import DEFAULT_MTU, ModelSpec


@dataclass(frozen=True)
class Failure:
    iteration: int
    ranks: tuple[int, ...] | None = None  # None = every rank
    group: int = 0
    at_fraction: float = 0.5
    shadows: tuple[int, ...] = ()


@dataclass(frozen=True)
class Corruption:
    iteration: int
    layer: str
    element: int = 0
    group: int = 0
    shard: int = 0


@dataclass
class RunConfig:
    scenario: str = "default"
    world_size: int = 4
    dp_groups: int = 1
    channels: int = 1
    bucket_cap_bytes: int = 64 * 1024
    mtu: int = DEFAULT_MTU
    model: ModelSpec = field(default_factory=ModelSpec)
    optimizer: OptimHyper = field(default_factory=OptimHyper)
    seed: int = 0
    iterations: int = 10
    shadow_count: int = 1
    shards: int = 1
    link_capacity: int = 256
    link_latency: int = 1
    shadow_rate: int = 0
    mirrors: int = 0
    lockstep: bool = True
    recovery_timeout_ticks: int = 0
    failures: tuple[Failure, ...] = ()
    failure_every: int = 0
    corrupt: Corruption | None = None
    mode: str = "det"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond: bool, msg: str):
            if not cond:
                raise ConfigError(msg)

        need(self.world_size >= 1, "world_size must be >= 1")
        need(self.dp_groups >= 1, "dp_groups must be >= 1")
        need(self.channels >= 1, "channels must be >= 1")
        need(self.bucket_cap_bytes > 0, "bucket_cap_bytes must be positive")
        need(self.mtu > 0 and self.mtu % 4 == 0, "mtu must be a positive multiple of 4")
        need(self.iterations >= 0, "iterations must be >= 0")
        need(self.shadow_count >= 0, "shadow_count must be >= 0")
        need(self.shards >= 1 and self.shards <= 255, "shards must be in [1, 255]")
        need(self.link_capacity >= 1, "link_capacity must be >= 1")
        need(self.link_latency >= 1, "link_latency must be >= 1")
        need(self.shadow_rate >= 0, "shadow_rate must be >= 0")
        need(self.mirrors >= 0, "mirrors must be >= 0")
        need(self.mode in ("det", "sockets"), f"unknown mode {self.mode!r}")
        if self.shadow_count:
            need(self.world_size >= 2, "shadow replication needs world_size >= 2")
        need(self.failure_every >= 0, "failure_every must be >= 0")
        for f in self.all_failures():
            need(0 <= f.iteration < self.iterations,
                 f"failure at iteration {f.iteration} outside run of {self.iterations}")
            need(0 <= f.group < self.dp_groups, f"failure group {f.group} does not exist")
            need(0.0 <= f.at_fraction <= 1.0, "at_fraction must lie in [0, 1]")
            for r in f.ranks or ():
                need(0 <= r < self.world_size, f"failure rank {r} outside ring")
            for s in f.shadows:
                need(0 <= s < self.shadow_count, f"failure shadow {s} does not exist")
            need(self.shadow_count > 0, "failure injection needs at least one shadow")
        if self.corrupt is not None:
            c = self.corrupt
            need(0 <= c.iteration < self.iterations, "corrupt.iteration outside the run")
            need(0 <= c.shard < self.shards and 0 <= c.group < self.dp_groups, "corrupt target missing")

    def all_failures(self) -> list[Failure]:
        out = list(self.failures)
        if self.failure_every:
            out.extend(Failure(i) for i in range(self.failure_every - 1, self.iterations, self.failure_every))
        return sorted(out, key=lambda f: (f.iteration, f.group))

    def shadow_for(self, group: int, shard: int) -> int:
        return (group * self.shards + shard) % self.shadow_count

    def replace(self, **changes) -> "RunConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return RunConfig(**data)

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = {"dims": list(self.model.dims), "batch_size": self.model.batch_size}
        d["optimizer"] = self.optimizer.as_dict()
        d["failures"] = [
            {"iteration": f.iteration, "ranks": list(f.ranks) if f.ranks is not None else None,
             "group": f.group, "at_fraction": f.at_fraction, "shadows": list(f.shadows)}
            for f in self.failures]
        d["corrupt"] = None if self.corrupt is None else vars(self.corrupt).copy()
        return d


_SCALARS = {f.name for f in fields(RunConfig)} - {"model", "optimizer", "failures", "corrupt"}


def from_dict(data: dict[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(data) - _SCALARS - {"model", "optimizer", "failures", "corrupt"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw: dict[str, Any] = {k: data[k] for k in _SCALARS if k in data}
    try:
        if "model" in data:
            m = dict(data["model"])
            kw["model"] = ModelSpec(tuple(int(d) for d in m.pop("dims", ModelSpec().dims)),
                                    int(m.pop("batch_size", ModelSpec().batch_size)))
            if m:
                raise ConfigError(f"unknown model keys: {sorted(m)}")
        iterations = int(data.get("iterations", RunConfig.iterations))
        if "optimizer" in data:
            o = {k: (float(v) if isinstance(v, str) and k not in ("kind", "schedule") else v)
                 for k, v in dict(data["optimizer"]).items()}
            if o.get("schedule") == "cosine":
                o.setdefault("total_steps", iterations)
            kw["optimizer"] = OptimHyper(**o)
        if data.get("failures"):
            kw["failures"] = tuple(
                Failure(int(f["iteration"]),
                        None if f.get("ranks") in (None, "all") else tuple(int(r) for r in f["ranks"]),
                        int(f.get("group", 0)), float(f.get("at_fraction", 0.5)),
                        tuple(int(s) for s in f.get("shadows", ())))
                for f in data["failures"])
        if data.get("corrupt"):
            kw["corrupt"] = Corruption(**data["corrupt"])
        for key in ("world_size", "dp_groups", "channels", "bucket_cap_bytes", "mtu", "seed",
                    "iterations", "shadow_count", "shards", "link_capacity", "link_latency",
                    "shadow_rate", "mirrors", "recovery_timeout_ticks", "failure_every"):
            if key in kw:
                kw[key] = int(kw[key])
        if "lockstep" in kw:
            kw["lockstep"] = bool(kw["lockstep"])
        return RunConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def load(path: str | os.PathLike) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from None
    return from_dict(data or {})
