"""Command-line front end.

Exit codes: 0 ok, 2 configuration error, 3 invariant violation,
4 unrecoverable failure.  ``CHECKMATE_SIM_LOG`` sets log verbosity
(``debug``, ``info``, ``warning``, ``error`` or a numeric level).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import yaml

from . import config as configmod
from . import costmodel as cm
from .errors import ConfigError, GradMirrorError, InvariantError, UnrecoverableError

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_UNRECOVERABLE = 0, 2, 3, 4
LOG_ENV = "CHECKMATE_SIM_LOG"

log = logging.getLogger("gradmirror")


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("gradmirror.presets").iterdir() if p.name.endswith(".yaml"))


def resolve_config(ref: str | None) -> Path:
    if ref is None:
        raise ConfigError("--config is required for this command")
    path = Path(ref)
    if path.exists():
        return path
    bundled = resources.files("gradmirror.presets") / f"{ref}.yaml"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config {ref!r} is neither a file nor a bundled preset ({', '.join(preset_names())})")


def load_yaml(ref: str | None) -> dict:
    path = resolve_config(ref)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return data


def load_run_config(args) -> configmod.RunConfig:
    cfg = configmod.load(resolve_config(args.config)) if args.config else configmod.RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.mode is not None:
        changes["mode"] = args.mode
    return cfg.replace(**changes) if changes else cfg


def out_dir(args, default: str) -> Path:
    path = Path(args.out) if args.out else Path("runs") / default
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit(msg: str) -> None:
    print(msg, flush=True)


# --- simulation commands -------------------------------------------------------------

def _simulate(cfg: configmod.RunConfig, **kw):
    from .world import World

    world = World(cfg, **kw)
    world.run()
    return world


def cmd_run(args) -> int:
    cfg = load_run_config(args)
    out = out_dir(args, cfg.scenario)
    if cfg.mode == "sockets":
        from .fabric import sockets

        summary = sockets.run_sockets(cfg, out)
        _emit(f"sockets run finished: {summary}")
        return EXIT_OK
    world = _simulate(cfg, check_equality=cfg.lockstep)
    for p in world.write_logs(out):
        log.debug("wrote %s", p)
    c = world.counters
    last = [r for r in world.records if r.iteration == cfg.iterations - 1]
    _emit(f"{cfg.scenario}: {cfg.iterations} iterations, {cfg.dp_groups} group(s) x {cfg.world_size} ranks, "
          f"{cfg.shadow_count} shadow(s), {len(world.recoveries)} recoveries")
    for r in last:
        _emit(f"  group {r.dp_group}: final loss {r.loss!r}")
    _emit(f"  switch rx {c.rx_data} tx {c.tx_data} ratio {c.tx_data / c.rx_data if c.rx_data else 0:.3f} "
          f"drops {world.fabric.total_dropped()}; logs in {out}")
    return EXIT_OK


def _read_rows(path: Path) -> list[list[str]]:
    if not path.exists():
        raise ConfigError(f"missing run artifact {path}")
    with path.open(newline="") as fh:
        return list(csv.reader(fh))


def compare_digests(run_dir: Path) -> str | None:
    """First trainer/shadow digest mismatch in a run directory, or None if identical."""
    trainer = _read_rows(run_dir / "trainer_digest.csv")[1:]
    shadow = _read_rows(run_dir / "shadow_digest.csv")[1:]
    by_key = {(r[0], r[1], r[3]): r for r in trainer}
    if not shadow:
        raise ConfigError(f"{run_dir} has no shadow digests to verify")
    mismatches = []
    for row in shadow:
        ref = by_key.get((row[0], row[1], row[3]))
        if ref is None:
            mismatches.append((int(row[0]), f"iteration {row[0]}: no trainer digest for {row[3]}"))
        elif ref[4:] != row[4:]:
            what = "params" if ref[4] != row[4] else ("optimizer state" if ref[5] != row[5] else "step")
            mismatches.append((int(row[0]), f"iteration {row[0]}: group {row[1]} shard {row[2]} {what} "
                                            f"of {row[3]} differs"))
    if len({(r[0], r[1], r[3]) for r in shadow}) != len(trainer):
        missing = sorted({(r[0], r[1], r[3]) for r in trainer} - {(r[0], r[1], r[3]) for r in shadow})
        if missing:
            mismatches.append((int(missing[0][0]), f"iteration {missing[0][0]}: shadow has no digest for "
                                                   f"{missing[0][2]}"))
    return min(mismatches)[1] if mismatches else None


def compare_loss_logs(a: Path, b: Path) -> str | None:
    names = sorted(p.name for p in a.glob("train_log_g*.csv"))
    if not names:
        raise ConfigError(f"no training logs in {a}")
    for name in names:
        if not (b / name).exists():
            raise ConfigError(f"missing run artifact {b / name}")
        la, lb = (a / name).read_bytes(), (b / name).read_bytes()
        if la != lb:
            ra, rb = la.decode().splitlines(), lb.decode().splitlines()
            for i, (x, y) in enumerate(zip(ra, rb)):
                if x != y:
                    return f"{name} line {i + 1}: {x!r} != {y!r}"
            return f"{name}: lengths differ ({len(ra)} vs {len(rb)} lines)"
    return None


def cmd_verify(args) -> int:
    if args.run_dir:
        run_dir = Path(args.run_dir)
        diff = compare_digests(run_dir)
        if args.against:
            loss_diff = compare_loss_logs(run_dir, Path(args.against))
            _emit("loss logs byte-identical" if loss_diff is None else f"loss logs differ: {loss_diff}")
            if loss_diff is not None:
                return EXIT_INVARIANT
        if diff is None:
            _emit("identical for all iterations")
            return EXIT_OK
        _emit(f"first divergence: {diff}")
        return EXIT_INVARIANT
    cfg = load_run_config(args)
    if not cfg.shadow_count:
        raise ConfigError("verification needs at least one shadow node")
    world = _simulate(cfg, collect_divergence=True)
    out = Path(args.out) if args.out else None
    if out is not None:
        world.write_logs(out)
    status = EXIT_OK
    if world.divergences:
        _emit(f"first divergence: {min(world.divergences, key=lambda d: d.iteration)}")
        status = EXIT_INVARIANT
    else:
        _emit(f"identical for all iterations ({cfg.iterations} iterations, {len(world.replicas)} shard(s))")
    if args.against_control:
        control = _simulate(cfg.replace(failures=(), failure_every=0, corrupt=None))
        mine = [(r.dp_group, r.iteration, repr(r.loss), r.tagged_bytes, r.wall_ticks) for r in world.records]
        theirs = [(r.dp_group, r.iteration, repr(r.loss), r.tagged_bytes, r.wall_ticks) for r in control.records]
        if mine == theirs:
            _emit(f"loss log identical to the uninterrupted control run ({len(world.recoveries)} recoveries)")
        else:
            first = next(i for i, (x, y) in enumerate(zip(mine + [None], theirs + [None])) if x != y)
            _emit(f"loss log differs from control at row {first}")
            status = EXIT_INVARIANT
        if out is not None:
            control.write_logs(out / "control")
    return status


def cmd_inject(args) -> int:
    cfg = load_run_config(args)
    if not cfg.all_failures():
        raise ConfigError("inject needs a failure schedule (failures or failure_every)")
    out = out_dir(args, cfg.scenario)
    world = _simulate(cfg, check_equality=cfg.lockstep)
    world.write_logs(out)
    for r in world.recoveries:
        _emit(f"failure at iteration {r.failure_iteration} (group {r.dp_group}, ranks {list(r.killed_ranks)}): "
              f"drained {r.drained_ticks} ticks, consolidated at iteration {r.consolidated_iteration}, "
              f"restored {r.restored_bytes} bytes")
    control = _simulate(cfg.replace(failures=(), failure_every=0, corrupt=None))
    same = all(
        world.trainer_state(g).params.storage.tobytes() == control.trainer_state(g).params.storage.tobytes()
        and world.trainer_state(g).optim == control.trainer_state(g).optim
        for g in world.trainers)
    same_log = [(r.iteration, r.loss) for r in world.records] == [(r.iteration, r.loss) for r in control.records]
    if same and same_log:
        _emit("post-recovery state and losses equal the uninterrupted control run")
        return EXIT_OK
    _emit("post-recovery state differs from the control run")
    return EXIT_INVARIANT


# --- analysis commands -----------------------------------------------------------------

def _flops_section(data: dict):
    if "model" not in data:
        return None, None
    fc = cm.flops_config_from(data["model"])
    hw = data.get("hardware", {})
    t = None
    if "achieved_flops_per_gpu" in hw:
        t = cm.iteration_time(fc, float(hw["achieved_flops_per_gpu"]), int(hw["n_gpus"]))
    return fc, t


def cmd_cost(args) -> int:
    data = load_yaml(args.config)
    if "cost" not in data:
        raise ConfigError("params file needs a 'cost' section")
    _, t_derived = _flops_section(data)
    p = cm.cost_params_from(data["cost"], derived_t=t_derived)
    out = out_dir(args, data.get("name", "cost"))
    opt = cm.optimal_frequency(p)
    rows = [cm.cost_row(p, opt.f_star)]
    summary: dict[str, float] = {}
    if t_derived is not None:
        summary["iteration_time_s"] = t_derived
    ck = data.get("checkpoint")
    if ck:
        size = cm.checkpoint_size(int(float(ck["param_count"])), int(ck.get("bytes_param", 2)),
                                  int(ck.get("bytes_opt", 4)))
        summary["checkpoint_bytes"] = size
        summary["checkpoint_time_s"] = cm.checkpoint_time(size, float(ck["bandwidth_bytes_per_s"]))
    grid = cm.power_of_two_grid()
    summary.update({
        "t_seconds": p.t_seconds, "omega_seconds": p.omega_seconds, "f_star": opt.f_star,
        "f_star_pow2_argmin": cm.grid_argmin(p, grid), "wasted_at_f_star_gpu_h": opt.wasted,
        "wasted_every_iteration_gpu_h": cm.wasted_sota(p, 1), "omega_over_t": p.omega_seconds / p.t_seconds,
    })
    interval = data.get("interval_minutes")
    if interval:
        f_interval = float(interval) * 60.0 / p.t_seconds
        summary["interval_f"] = f_interval
        summary["wasted_at_interval_gpu_h"] = cm.wasted_sota(p, f_interval)
        rows.append(cm.cost_row(p, f_interval, f=f_interval))
    shadow = cm.cost_shadow_checkpointing(p)
    summary.update({"checkmate_gpu_h": shadow.gpu_waste_h, "cpu_node_h": shadow.cpu_node_h,
                    "savings_gpu_h_per_day": cm.savings_per_day(p)})
    (out / "cost.csv").write_text(cm.rows_to_csv(rows))
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "value"])
        for k, v in summary.items():
            w.writerow([k, cm._fmt(v)])
            _emit(f"{k:>30} = {_human(v)}")
    return EXIT_OK


def _human(v: float) -> str:
    if isinstance(v, float) and (math.isinf(v) or abs(v) >= 1e6 or (v and abs(v) < 1e-3)):
        return f"{v:.6g}"
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_sweep(args) -> int:
    data = load_yaml(args.config)
    if "sweep" not in data or "cost" not in data:
        raise ConfigError("sweep spec needs 'sweep' and 'cost' sections")
    _, t_derived = _flops_section(data)
    base = cm.cost_params_from(data["cost"], derived_t=t_derived)
    sw = data["sweep"]
    try:
        spec = cm.SweepSpec(sw["axis"], tuple(float(v) for v in sw["values"]), base)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad sweep spec: {exc}") from None
    out = out_dir(args, data.get("name", "sweep"))
    rows = cm.run_sweep(spec)
    text = cm.rows_to_csv(rows)
    (out / "sweep.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_flops(args) -> int:
    data = load_yaml(args.config)
    if "model" not in data:
        raise ConfigError("flops needs a 'model' section")
    fc, t = _flops_section(data)
    out = out_dir(args, data.get("name", "flops"))
    parts = cm.flops_breakdown(fc)
    with (out / "flops.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "flops"])
        for k, v in parts.items():
            w.writerow([k, v])
            _emit(f"{k:>10} = {v:.6e}")
        if t is not None:
            w.writerow(["iteration_time_s", repr(t)])
            _emit(f"iteration time = {t:.4f} s")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "inject": cmd_inject,
            "cost": cmd_cost, "sweep": cmd_sweep, "flops": cmd_flops}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS,
                        help="config file or bundled preset name")
    common.add_argument("--seed", type=int, metavar="N", default=argparse.SUPPRESS)
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS)
    common.add_argument("--mode", choices=("det", "sockets"), default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="gradmirror", parents=[common],
                                     description="Per-iteration gradient-mirroring checkpoint simulator "
                                                 "and checkpoint cost model.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run a simulated training job")
    v = sub.add_parser("verify", parents=[common], help="byte-compare trainer and shadow state")
    v.add_argument("run_dir", nargs="?", help="completed run directory (omit to verify a live run)")
    v.add_argument("--against", metavar="DIR", help="second run whose loss logs must be byte-equal")
    v.add_argument("--against-control", action="store_true",
                   help="also rerun without failures and compare loss logs")
    sub.add_parser("inject", parents=[common], help="run a failure schedule and report recovery")
    sub.add_parser("cost", parents=[common], help="evaluate the checkpoint cost model")
    sub.add_parser("sweep", parents=[common], help="sweep one cost-model axis to CSV")
    sub.add_parser("flops", parents=[common], help="transformer FLOPs and iteration time")
    return parser


def setup_logging() -> None:
    raw = os.environ.get(LOG_ENV, "warning").strip()
    level = int(raw) if raw.isdigit() else logging.getLevelName(raw.upper())
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    for name in ("config", "seed", "out", "mode"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except UnrecoverableError as exc:
        log.error("unrecoverable: %s", exc)
        return EXIT_UNRECOVERABLE
    except (InvariantError, GradMirrorError) as exc:
        log.error("invariant violated: %s", exc)
        return EXIT_INVARIANT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
