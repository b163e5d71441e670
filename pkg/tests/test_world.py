import pytest

from gradmirror.config import Corruption, Failure
from gradmirror.errors import ConfigError, InvariantError, UnrecoverableError
from gradmirror.trainer import ModelSpec
from gradmirror.world import World, compare_replica

from conftest import small_cfg


def _loss_rows(world):
    return [(r.dp_group, r.iteration, repr(r.loss), r.tagged_bytes, r.wall_ticks) for r in world.records]


@pytest.mark.parametrize("n", [2, 4, 8])
@pytest.mark.parametrize("k", [1, 2, 4])
def test_shadow_equals_trainers_every_iteration(n, k):
    cfg = small_cfg(world_size=n, shards=k, iterations=4, bucket_cap_bytes=256)
    w = World(cfg)
    for it in range(cfg.iterations):
        w.run_iteration()
        ref = w.trainer_state(0)
        for rep in w.replicas:
            assert compare_replica(ref, rep, it) is None
    assert w.fabric.total_dropped() == 0


def test_multi_group_two_shadows():
    cfg = small_cfg(dp_groups=2, shards=2, shadow_count=3, bucket_cap_bytes=256, iterations=3)
    w = World(cfg, check_equality=True)
    w.run()
    assert len(w.switch.dp.ctrl.groups) == 4
    names = {n for n, _ in w.trainer_state(1).params.layers}
    assert all(n.startswith("g1.") for n in names)


def test_kill_rank_restores_to_control():
    cfg = small_cfg(iterations=6, failures=(Failure(3, ranks=(2,)),))
    w = World(cfg, check_equality=True)
    w.run()
    control = World(cfg.replace(failures=()))
    control.run()
    assert _loss_rows(w) == _loss_rows(control)
    (rep,) = w.recoveries
    assert rep.consolidated_iteration == 3 and rep.killed_ranks == (2,) and rep.restored_bytes > 0
    assert w.trainer_state(0).params.storage.tobytes() == control.trainer_state(0).params.storage.tobytes()


@pytest.mark.parametrize("frac", [0.0, 0.3, 0.9, 1.0])
def test_failure_at_any_point_of_the_iteration(frac):
    cfg = small_cfg(iterations=4, shards=2, bucket_cap_bytes=512,
                    failures=(Failure(2, at_fraction=frac),))
    w = World(cfg, check_equality=True)
    w.run()
    control = World(cfg.replace(failures=()))
    control.run()
    assert _loss_rows(w) == _loss_rows(control)


def test_lagging_shards_consolidate_at_minimum():
    # the fast shadow finishes the interrupted iteration, the slow one cannot before the timeout
    cfg = small_cfg(iterations=5, shards=2, shadow_count=2, bucket_cap_bytes=256, lockstep=False,
                    recovery_timeout_ticks=1, failures=(Failure(4, ranks=(0,), at_fraction=1.0),))
    w = World(cfg, rate=lambda s, t: int(t % 20 == 0) if s == 1 else 1000)
    w.run()
    control = World(cfg.replace(failures=(), lockstep=True))
    control.run()
    (rep,) = w.recoveries
    assert rep.consolidated_iteration == min([4, *rep.shard_iterations.values()])
    assert sorted(rep.shard_iterations.values()) == [4, 5] and rep.consolidated_iteration == 4
    assert [r.loss for r in w.records] == [r.loss for r in control.records]


def test_shadow_loss_is_unrecoverable():
    w = World(small_cfg(iterations=3, failures=(Failure(1, shadows=(0,)),)))
    with pytest.raises(UnrecoverableError):
        w.run()


def test_no_shadow_no_recovery():
    cfg = small_cfg(shadow_count=0, iterations=3)
    with pytest.raises(ConfigError):
        cfg.replace(failures=(Failure(1),))
    w = World(cfg)
    w.run_iteration()
    with pytest.raises(UnrecoverableError):
        w.inject_failure(Failure(1))


def test_corruption_is_located():
    cfg = small_cfg(iterations=4, corrupt=Corruption(2, "fc1.bias", element=3))
    w = World(cfg, collect_divergence=True)
    w.run()
    (d,) = w.divergences
    assert (d.iteration, d.layer, d.array, d.element) == (2, "fc1.bias", "params", 3)
    with pytest.raises(InvariantError):
        World(cfg, check_equality=True).run()


def test_logs_written(tmp_path):
    cfg = small_cfg(iterations=2, failure_every=2)
    w = World(cfg)
    w.run()
    w.write_logs(tmp_path)
    rows = (tmp_path / "train_log_g0.csv").read_text().splitlines()
    assert rows[0] == "iteration,loss,tagged_bytes,wall_ticks" and len(rows) == 3
    for name in ("trainer_digest.csv", "shadow_digest.csv", "fabric_counters.csv", "recovery.csv",
                 "checkpoint/MANIFEST"):
        assert (tmp_path / name).exists()


def test_config_validation():
    with pytest.raises(ConfigError):
        small_cfg(world_size=0)
    with pytest.raises(ConfigError):
        small_cfg(iterations=3, failures=(Failure(7),))
    with pytest.raises(ConfigError):
        World(small_cfg(shards=64, model=ModelSpec((4, 4))))
    assert [f.iteration for f in small_cfg(iterations=7, failure_every=2).all_failures()] == [1, 3, 5]
