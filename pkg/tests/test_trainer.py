import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradmirror import optim
from gradmirror.collective import RingConfig
from gradmirror.errors import ConfigError, ShapeError
from gradmirror.shadow import ConsolidatedCheckpoint, map_bucket_to_params
from gradmirror.trainer import (FlatTensor, ModelSpec, TrainState, build_buckets, forward_loss,
                                model_forward_backward, reference_iteration, restore_from_checkpoint)

from conftest import make_cores, run_ring


def test_bucket_layout_example():
    layout = build_buckets([("A", 10), ("B", 10), ("C", 10)], 25)
    assert [b.layer_names() for b in layout.buckets] == [["C", "B"], ["A"]]
    assert [e.bucket_offset for e in layout.buckets[0].entries] == [0, 10]


def test_oversized_layer_gets_dedicated_bucket():
    layout = build_buckets([("big", 30)], 25)
    assert len(layout) == 1 and layout.buckets[0].nbytes == 30


def test_cap_above_total_is_one_reversed_bucket():
    layout = build_buckets([("a", 4), ("b", 8), ("c", 12)], 1000)
    assert [b.layer_names() for b in layout.buckets] == [["c", "b", "a"]]


def test_build_buckets_rejects():
    with pytest.raises(ConfigError):
        build_buckets([], 10)
    with pytest.raises(ConfigError):
        build_buckets([("a", 0)], 10)


@given(st.lists(st.integers(1, 200), min_size=1, max_size=20), st.integers(1, 300))
def test_layout_covers_each_layer_once(sizes, cap):
    layers = [(f"l{i}", s) for i, s in enumerate(sizes)]
    layout = build_buckets(layers, cap)
    seen = [e.layer for b in layout.buckets for e in b.entries]
    assert sorted(seen) == sorted(n for n, _ in layers)
    assert seen == [n for n, _ in reversed(layers)]
    for b in layout.buckets:
        assert b.nbytes <= cap or len(b.entries) == 1
    assert build_buckets(layers, cap) == layout


def test_map_bucket_views_no_copy():
    layout = build_buckets([("A", 10), ("B", 10), ("C", 10)], 25)
    raw = np.arange(5, dtype=np.float32).view(np.uint8).copy()
    raw = np.concatenate([raw, np.zeros(4 * 3, np.uint8)])  # padding tail
    maps = map_bucket_to_params(layout, 0, raw)
    assert [m[0] for m in maps] == ["C", "B"]
    assert all(np.shares_memory(m[2], raw) for m in maps)
    with pytest.raises(ShapeError):
        map_bucket_to_params(layout, 0, raw[:8])


def test_zero_model_zero_loss():
    spec = ModelSpec((3, 2), batch_size=2)
    params = FlatTensor.zeros(spec.layer_table())
    loss, g = model_forward_backward(spec, params, np.ones((2, 3), np.float32), np.zeros((2, 2), np.float32))
    assert loss == 0 and not g.storage.any()


def test_gradients_deterministic():
    st = TrainState.fresh(ModelSpec((8, 16, 4)), optim.OptimHyper(), RingConfig(4, 2), 7)
    a = st.local_gradients(3)
    b = st.local_gradients(3)
    assert a[0] == b[0] and a[1].storage.tobytes() == b[1].storage.tobytes()


def test_finite_difference():
    spec = ModelSpec((3, 4, 2), batch_size=1)
    rng = np.random.default_rng(0)
    p = FlatTensor(spec.layer_table(), rng.standard_normal(spec.param_count).astype(np.float32))
    x = rng.standard_normal((1, 3)).astype(np.float32)
    y = rng.standard_normal((1, 2)).astype(np.float32)
    _, g = model_forward_backward(spec, p, x, y)
    p64 = p.storage.astype(np.float64)
    for i in range(spec.param_count):
        eps = 1e-3
        up, dn = p64.copy(), p64.copy()
        up[i] += eps
        dn[i] -= eps
        fd = (_loss64(spec, up, x, y) - _loss64(spec, dn, x, y)) / (2 * eps)
        assert g.storage[i] == pytest.approx(fd, rel=1e-3, abs=1e-5)


def _loss64(spec, flat, x, y):
    h, off = x.astype(np.float64), 0
    for i in range(spec.num_linear):
        fi, fo = spec.dims[i], spec.dims[i + 1]
        w = flat[off:off + fi * fo].reshape(fo, fi)
        off += fi * fo
        b = flat[off:off + fo]
        off += fo
        h = h @ w.T + b
        if i < spec.num_linear - 1:
            h = np.tanh(h)
    return float(np.mean((h - y) ** 2))


def test_single_rank_ring_is_local_step():
    cores, _, _ = make_cores(1)
    c = cores[0]
    ref = c.state.copy()
    loss, g = ref.local_gradients(0)
    optim.apply_step(ref.optim, ref.params.storage, g.storage, 1.0)
    c.begin()
    assert c.done and c.state.params.storage.tobytes() == ref.params.storage.tobytes()


@pytest.mark.parametrize("n,channels,shards", [(2, 1, 1), (4, 2, 2), (5, 3, 1)])
def test_ring_equals_reference_oracle(n, channels, shards):
    cores, layout, _ = make_cores(n, cap=700, mtu=200, channels=channels, shards=shards)
    ref = [c.state.copy() for c in cores]
    for _ in range(5):
        run_ring(cores)
        reference_iteration(ref, layout)
        for c, r in zip(cores, ref):
            assert c.state.params.storage.tobytes() == r.params.storage.tobytes()
            assert c.state.optim == r.optim
    assert len({c.state.params.storage.tobytes() for c in cores}) == 1


def test_restore_mismatched_layers():
    st = TrainState.fresh(ModelSpec((4, 4)), optim.OptimHyper(), RingConfig(2), 0)
    other = TrainState.fresh(ModelSpec((4, 5)), optim.OptimHyper(), RingConfig(2), 0)
    ck = ConsolidatedCheckpoint(0, 0, other.params, other.optim)
    with pytest.raises(ShapeError):
        restore_from_checkpoint(st, ck)


def test_restore_is_bit_exact():
    st = TrainState.fresh(ModelSpec((4, 6, 3)), optim.OptimHyper(), RingConfig(2), 0)
    for i in range(3):
        _, g = st.local_gradients(i)
        st.apply_reduced(g.storage)
    ck = ConsolidatedCheckpoint(0, st.iteration, st.params.copy(), st.optim.copy())
    fresh = TrainState.fresh(ModelSpec((4, 6, 3)), optim.OptimHyper(), RingConfig(2), 0)
    back = restore_from_checkpoint(fresh, ck)
    assert back.params.storage.tobytes() == st.params.storage.tobytes() and back.optim == st.optim
    assert back.iteration == 3


def test_forward_loss_matches_training_loss():
    st = TrainState.fresh(ModelSpec((8, 4)), optim.OptimHyper(), RingConfig(1), 0)
    from gradmirror.trainer import synthetic_batch
    x, y = synthetic_batch(st.spec, 0, 0, 0)
    assert forward_loss(st.spec, st.params, x, y) == st.local_gradients(0)[0]
