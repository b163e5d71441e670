import numpy as np
import pytest
from hypothesis import settings

from gradmirror import optim
from gradmirror.collective import RingConfig
from gradmirror.config import RunConfig
from gradmirror.trainer import ModelSpec, TrainerCore, TrainState, build_buckets

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def small_cfg(**kw) -> RunConfig:
    base = dict(world_size=4, channels=2, bucket_cap_bytes=4096, mtu=1024,
                model=ModelSpec((16, 32, 8), batch_size=4), iterations=3, shadow_count=1, shards=1)
    base.update(kw)
    cfg = RunConfig(**base)
    cfg.validate()
    return cfg


def make_cores(n, dims=(16, 32, 8), cap=4096, mtu=1024, channels=1, shards=1, seed=0, hyper=None):
    """One :class:`TrainerCore` per rank, sharing a layout, plus the layout and shard assignment."""
    spec = ModelSpec(tuple(dims), batch_size=4)
    layout = build_buckets([(name, c * 4) for name, c in spec.layer_table()], cap)
    assign = optim.partition_parameters(layout, shards)
    hyper = hyper or optim.OptimHyper()
    cores = []
    for r in range(n):
        st = TrainState.fresh(spec, hyper, RingConfig(n, r, channels), seed)
        cores.append(TrainerCore(st, layout, assign, mtu))
    return cores, layout, assign


def run_ring(cores, capture=None):
    """Drive one iteration of every core with an ideal in-order ring (no switch)."""
    n = len(cores)
    for r, c in enumerate(cores):
        if capture is not None:
            c.capture = (lambda rank: (lambda f: capture(rank, f)))(r)
        c.begin()
    while not all(c.done for c in cores):
        moved = 0
        for r, c in enumerate(cores):
            out = []
            c.drain(lambda f: out.append(f) or True)
            for f in out:
                cores[(r + 1) % n].on_frame(f)
            moved += len(out)
        if not moved:
            raise AssertionError("ring stalled")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
