"""Transformer FLOPs, iteration time, checkpoint size, and checkpointing cost.

Inputs take seconds for iteration time and checkpoint stall, hours for the
training duration and per-GPU-hour failure rates.  GPU-hour outputs are exact
float64 evaluations of the closed forms; FLOPs counts are exact integers.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

from .errors import ConfigError

SECONDS_PER_HOUR = 3600.0
CHECKPOINT_NEVER = math.inf  # optimal frequency when failures never happen

SWEEP_COLUMNS = ("axis_value", "f", "f_star", "wasted_sota_gpu_h", "checkmate_gpu_h", "cpu_node_h",
                 "savings_gpu_h_per_day", "dollars_sota", "dollars_checkmate")
AXES = ("frequency", "overhead", "failure_rate", "cluster_size")


@dataclass(frozen=True)
class ModelFlopsConfig:
    b: int  # sequences per batch
    s: int  # sequence length
    L: int
    h: int
    f_ffn: int
    v: int
    a: int  # query heads
    g: int  # KV groups

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not isinstance(val, int) or val <= 0:
                raise ConfigError(f"model flops field {name} must be a positive integer, got {val!r}")

    @property
    def tokens(self) -> int:
        return self.b * self.s


def flops_qkv(c: ModelFlopsConfig) -> int:
    return 2 * (c.b * c.s * c.h ** 2 + 2 * c.b * c.s * c.h * (c.g * c.a))


def flops_attn(c: ModelFlopsConfig) -> int:
    return 4 * c.b * c.s ** 2 * c.h


def flops_attn_out(c: ModelFlopsConfig) -> int:
    return 2 * c.b * c.s * c.h * (c.g * c.a)


def flops_ffn(c: ModelFlopsConfig) -> int:
    return 4 * c.b * c.s * c.h * c.f_ffn


def flops_rope(c: ModelFlopsConfig) -> int:
    return 2 * c.b * c.s * c.h


def flops_vocab(c: ModelFlopsConfig) -> int:
    return 4 * c.b * c.s * c.h * c.v


def flops_layer(c: ModelFlopsConfig) -> int:
    return flops_qkv(c) + flops_attn(c) + flops_attn_out(c) + flops_ffn(c) + flops_rope(c)


def flops_forward(c: ModelFlopsConfig) -> int:
    return flops_layer(c) * c.L + flops_vocab(c)


def flops_breakdown(c: ModelFlopsConfig) -> dict[str, int]:
    return {"qkv": flops_qkv(c), "attn": flops_attn(c), "attn_out": flops_attn_out(c),
            "ffn": flops_ffn(c), "rope": flops_rope(c), "layer": flops_layer(c),
            "vocab": flops_vocab(c), "forward": flops_forward(c), "iteration": 3 * flops_forward(c)}


def iteration_time(c: ModelFlopsConfig | int, achieved_flops_per_gpu: float, n_gpus: int) -> float:
    """Seconds per iteration: three forward passes' worth of FLOPs over the cluster's rate."""
    if achieved_flops_per_gpu <= 0 or n_gpus <= 0:
        raise ConfigError("achieved FLOP rate and GPU count must be positive")
    forward = c if isinstance(c, int) else flops_forward(c)
    return 3 * forward / (achieved_flops_per_gpu * n_gpus)


def checkpoint_size(param_count: int, bytes_param: int = 2, bytes_opt: int = 4) -> int:
    if param_count < 0 or bytes_param < 0 or bytes_opt < 0:
        raise ConfigError("checkpoint size inputs must be non-negative")
    return param_count * (bytes_param + bytes_opt)


def checkpoint_time(size_bytes: float, bandwidth_bytes_per_s: float) -> float:
    if bandwidth_bytes_per_s <= 0:
        raise ConfigError("checkpoint bandwidth must be positive")
    return size_bytes / bandwidth_bytes_per_s


@dataclass(frozen=True)
class CostParams:
    lam: float  # failures per GPU-hour
    n_gpus: int
    duration_h: float
    t_seconds: float  # iteration time
    omega_seconds: float  # stall per checkpoint
    cpu_nodes: int = 128
    price_gpu: float = 11.06  # $/GPU-hour
    price_cpu: float = 1.28  # $/CPU-node-hour
    f: float = 1.0  # checkpoint every f iterations

    def __post_init__(self):
        if min(self.lam, self.n_gpus, self.duration_h, self.omega_seconds, self.cpu_nodes,
               self.price_gpu, self.price_cpu) < 0:
            raise ConfigError("cost parameters must be non-negative")
        if self.t_seconds <= 0:
            raise ConfigError("iteration time must be positive")
        if self.f < 1:
            raise ConfigError("checkpoint frequency must be >= 1")

    @property
    def t_h(self) -> float:
        return self.t_seconds / SECONDS_PER_HOUR

    @property
    def omega_h(self) -> float:
        return self.omega_seconds / SECONDS_PER_HOUR

    def with_(self, **kw) -> "CostParams":
        return replace(self, **kw)


def wasted_sota(p: CostParams, f: float | None = None) -> float:
    """Expected GPU-hours lost to recomputation plus checkpoint stalls at frequency ``f``."""
    f = p.f if f is None else f
    if f < 1:
        raise ConfigError("checkpoint frequency must be >= 1")
    if math.isinf(f):
        return 0.0 if p.lam == 0 else math.inf
    n, t = p.n_gpus, p.t_h
    return n * p.duration_h * (0.5 * p.lam * n * f * t + p.omega_h / (f * t))


@dataclass(frozen=True)
class OptimalFrequency:
    f_star: float  # clamped to >= 1; CHECKPOINT_NEVER when lam = 0
    unclamped: float
    wasted: float  # GPU-hours at f_star

    @property
    def clamped(self) -> bool:
        return self.unclamped < 1


def optimal_frequency(p: CostParams) -> OptimalFrequency:
    n, t = p.n_gpus, p.t_h
    if p.lam * n * t == 0:
        return OptimalFrequency(CHECKPOINT_NEVER, CHECKPOINT_NEVER, 0.0)
    raw = math.sqrt(2 * p.omega_h / (p.lam * n * t * t))
    if raw >= 1:
        return OptimalFrequency(raw, raw, n * p.duration_h * math.sqrt(2 * p.omega_h * p.lam * n))
    return OptimalFrequency(1.0, raw, wasted_sota(p, 1.0))


@dataclass(frozen=True)
class ShadowCost:
    gpu_waste_h: float
    cpu_node_h: float
    dollars: float


def cost_shadow_checkpointing(p: CostParams) -> ShadowCost:
    """Per-iteration checkpointing on CPU shadow nodes: half an iteration lost per failure."""
    if p.cpu_nodes < 1:
        raise ConfigError("at least one CPU node is required")
    gpu = 0.5 * p.lam * p.n_gpus ** 2 * p.duration_h * p.t_h
    cpu = p.duration_h * p.cpu_nodes
    return ShadowCost(gpu, cpu, p.price_gpu * gpu + p.price_cpu * cpu)


def savings_per_day(p: CostParams) -> float:
    """GPU-hours per day saved versus conventional checkpointing at its optimal frequency."""
    day = p.with_(duration_h=24.0)
    return optimal_frequency(day).wasted - cost_shadow_checkpointing(day).gpu_waste_h


def grid_argmin(p: CostParams, grid: Sequence[float]) -> float:
    best = min(grid, key=lambda f: (wasted_sota(p, f), f))
    return best


def power_of_two_grid(limit: int = 4096) -> list[int]:
    return [1 << i for i in range(limit.bit_length()) if (1 << i) <= limit]


def stream_plan(dp_groups: int, streams_per_shadow: int = 2) -> dict[str, int]:
    """Shadow provisioning: two tagged streams per DP group, packed onto shadow nodes."""
    if dp_groups < 1 or streams_per_shadow < 1:
        raise ConfigError("need at least one DP group and one stream per shadow")
    streams = 2 * dp_groups
    nodes = -(-streams // streams_per_shadow)
    return {"streams": streams, "shadow_nodes": nodes, "shadow_ports": 2 * nodes,
            "multicast_groups": 2 * dp_groups}


# --- sweeps ----------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[float, ...]
    base: CostParams

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; expected one of {AXES}")
        if not self.values:
            raise ConfigError("sweep grid is empty")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ConfigError("sweep grid must be strictly increasing")


def cost_row(p: CostParams, axis_value: float, f: float | None = None) -> dict[str, float]:
    opt = optimal_frequency(p)
    f_used = opt.f_star if f is None else f
    wasted = wasted_sota(p, f_used)
    shadow = cost_shadow_checkpointing(p)
    return {
        "axis_value": axis_value, "f": f_used, "f_star": opt.f_star,
        "wasted_sota_gpu_h": wasted, "checkmate_gpu_h": shadow.gpu_waste_h,
        "cpu_node_h": shadow.cpu_node_h, "savings_gpu_h_per_day": savings_per_day(p),
        "dollars_sota": p.price_gpu * wasted, "dollars_checkmate": shadow.dollars,
    }


def run_sweep(spec: SweepSpec) -> list[dict[str, float]]:
    rows = []
    for x in spec.values:
        if spec.axis == "frequency":
            rows.append(cost_row(spec.base, x, f=x))
            continue
        field = {"overhead": "omega_seconds", "failure_rate": "lam", "cluster_size": "n_gpus"}[spec.axis]
        val = int(x) if spec.axis == "cluster_size" else float(x)
        rows.append(cost_row(spec.base.with_(**{field: val}), x))
    return rows


def rows_to_csv(rows: Sequence[dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def _fmt(x: float) -> str:
    if isinstance(x, int) or (isinstance(x, float) and x.is_integer() and abs(x) < 1e15):
        return str(int(x))
    if math.isinf(x):
        return "inf"
    return repr(float(x))


# --- presets / param files -------------------------------------------------------

def flops_config_from(d: dict) -> ModelFlopsConfig:
    d = dict(d)
    if "tokens_per_batch" in d and "b" not in d:
        tokens = int(d.pop("tokens_per_batch"))
        if tokens % int(d["s"]):
            raise ConfigError("tokens_per_batch must be a multiple of the sequence length")
        d["b"] = tokens // int(d["s"])
    d.pop("tokens_per_batch", None)
    try:
        return ModelFlopsConfig(**{k: int(v) for k, v in d.items()})
    except TypeError as exc:
        raise ConfigError(f"bad model flops config: {exc}") from None


def cost_params_from(d: dict, derived_t: float | None = None) -> CostParams:
    d = dict(d)
    if "duration_days" in d:
        d["duration_h"] = float(d.pop("duration_days")) * 24.0
    if "t_seconds" not in d:
        if derived_t is None:
            raise ConfigError("cost params need t_seconds or a model section to derive it")
        d["t_seconds"] = derived_t
    try:
        return CostParams(**{k: (int(v) if k in ("n_gpus", "cpu_nodes") else float(v)) for k, v in d.items()})
    except TypeError as exc:
        raise ConfigError(f"bad cost params: {exc}") from None
