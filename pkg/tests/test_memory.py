import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stma.embedding import FeatureMap, Frame
from stma.exceptions import ContractError, DimensionError
from stma.memory import (
    IdEncoderWeights,
    SpatialMemory,
    TemporalMemory,
    UsageUpdate,
    encode_id_values,
    object_features_from_memory,
)
from stma.oracles import HeapLFU, direct_conv2d
from stma.tensor import Tensor


def entry(frame_idx, n=1, N=2, C=3, Cv=2, fill=0.0):
    return Tensor(np.full((N, C), fill)), Tensor(np.full((n, N, Cv), fill)), frame_idx


# --- spatial ------------------------------------------------------------------------


def test_first_frame_is_pinned_and_queue_empty():
    mem = SpatialMemory(3, 3)
    mem.insert(0, None)
    assert mem.pinned.frame_idx == 0 and mem.queue == []


def test_stride_three_capacity_three():
    mem = SpatialMemory(capacity=3, insertion_stride=3)
    for i in (0, 3, 6, 9):
        mem.insert(i, None)
    assert mem.pinned.frame_idx == 0
    assert [e.frame_idx for e in mem.queue] == [6, 9]


def test_off_stride_frame_leaves_memory_unchanged():
    mem = SpatialMemory(4, 3)
    mem.insert(0, None)
    mem.insert(3, None)
    before = mem.indices()
    assert mem.insert(4, None) is None
    assert mem.indices() == before


def test_non_monotone_index_rejected():
    mem = SpatialMemory(4, 3)
    mem.insert(0, None)
    mem.insert(3, None)
    with pytest.raises(ContractError):
        mem.insert(3, None)


def test_empty_references_rejected():
    with pytest.raises(ContractError):
        SpatialMemory().references()


def test_reference_order(rng):
    fm = [FeatureMap(Tensor(rng.normal(size=(1, 2))), 1, 1) for _ in range(3)]
    mem = SpatialMemory(4, 1)
    assert len((mem.insert(0, fm[0]), mem.references())[1]) == 1
    mem.insert(1, fm[1])
    mem.insert(2, fm[2])
    assert mem.references() == [fm[0], fm[1], fm[2]]


def test_hundred_insertions_fill_to_capacity():
    mem = SpatialMemory(4, 1)
    for i in range(100):
        mem.insert(i, None)
    assert len(mem) == 4 and mem.indices() == [0, 97, 98, 99]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.lists(st.integers(1, 4), min_size=1, max_size=200))
def test_spatial_matches_fifo_simulation(capacity, stride, gaps):
    mem = SpatialMemory(capacity, stride)
    idx = 0
    pinned, queue = None, []
    for g in gaps:
        mem.insert(idx, None)
        if pinned is None:
            pinned = idx
        elif idx % stride == 0:
            queue.append(idx)
            queue = queue[-(capacity - 1):] if capacity > 1 else []
        assert mem.indices() == [pinned] + queue
        assert len(mem) <= capacity and mem.indices()[0] == pinned
        idx += g


# --- temporal --------------------------------------------------------------------------


def test_lfu_evicts_least_used():
    mem = TemporalMemory(2)
    mem.insert(*entry(1))
    mem.insert(*entry(2))
    mem.touch_entry(1, 5)
    mem.touch_entry(2, 1)
    victim = mem.insert(*entry(3))
    assert victim.frame_idx == 2
    assert mem.indices() == [1, 3]


def test_lfu_tie_goes_to_oldest():
    mem = TemporalMemory(2)
    mem.insert(*entry(1))
    mem.insert(*entry(2))
    mem.touch_entry(1, 2)
    mem.touch_entry(2, 2)
    # fresh entry starts at the mean usage (2), so all three tie and the oldest leaves
    assert mem.insert(*entry(3)).frame_idx == 1


def test_pinned_entry_survives_ties():
    mem = TemporalMemory(2)
    mem.insert(*entry(1), pin=True)
    mem.insert(*entry(2))
    assert mem.insert(*entry(3)).frame_idx == 2
    assert 1 in mem.indices()


def test_new_entry_baseline_is_mean_usage():
    mem = TemporalMemory(4)
    mem.insert(*entry(1))
    mem.insert(*entry(2))
    mem.touch([3.0, 1.0])
    mem.insert(*entry(3))
    assert mem.usages() == [3.0, 1.0, 2.0]


@pytest.mark.parametrize("seed", range(5))
def test_lfu_matches_heap_simulator(seed):
    rng = np.random.default_rng(seed)
    capacity = int(rng.integers(2, 9))
    mem, ref = TemporalMemory(capacity), HeapLFU(capacity)
    ours = []
    idx = 0
    for op in range(1000):
        if len(mem) == 0 or rng.random() < 0.4:
            pin = idx == 0
            victim = mem.insert(*entry(idx), pin=pin)
            ref.insert(idx, pin)
            if victim is not None:
                ours.append(victim.frame_idx)
            idx += 1
        else:
            target = mem.indices()[int(rng.integers(len(mem)))]
            amount = float(rng.choice([0.0, 0.5, 1.0, rng.uniform(0, 3)]))
            mem.touch_entry(target, amount)
            ref.touch(target, amount)
        assert len(mem) <= capacity
    assert ours == ref.evictions and len(ours) > 100
    assert sorted(mem.indices()) == sorted(ref.usage)


def test_lfu_victim_has_minimal_usage(rng):
    mem = TemporalMemory(5)
    for i in range(300):
        before = {e.frame_idx: e.usage for e in mem.entries}
        victim = mem.insert(*entry(i))
        if victim is not None:
            mean = sum(before.values()) / len(before)
            allowed = {**before, i: mean}
            assert victim.usage == min(allowed.values())
        mem.touch(rng.uniform(size=len(mem)))


def test_zero_update_leaves_memory_unchanged():
    mem = TemporalMemory(3)
    mem.insert(*entry(1))
    mem.insert(*entry(2))
    mem.touch([1.5, 0.25])
    before = mem.usages()
    mem.touch(UsageUpdate((0.0, 0.0)))
    assert mem.usages() == before


def test_touch_count_mismatch():
    mem = TemporalMemory(3)
    mem.insert(*entry(1))
    with pytest.raises(ContractError):
        mem.touch([1.0, 2.0])
    with pytest.raises(ContractError):
        UsageUpdate((-1.0,))


def test_insert_shape_mismatch():
    mem = TemporalMemory(3)
    mem.insert(*entry(1))
    with pytest.raises(DimensionError):
        mem.insert(*entry(2, C=4))
    with pytest.raises(DimensionError):
        mem.insert(Tensor(np.zeros((2, 3))), Tensor(np.zeros((1, 3, 2))), 5)


def test_identical_traces_identical_state(rng):
    ops = [(float(rng.uniform()), i) for i in range(200)]

    def run():
        mem = TemporalMemory(6)
        for u, i in ops:
            mem.insert(*entry(i), pin=i == 0)
            mem.touch([u] * len(mem))
        return [(e.frame_idx, e.usage) for e in mem.entries]

    assert run() == run()


# --- object features -----------------------------------------------------------------


def test_single_entry_single_position_is_projected_value(rng):
    mem = TemporalMemory(2)
    v = rng.normal(size=(2, 1, 3))
    mem.insert(Tensor(np.zeros((1, 4))), Tensor(v), 0)
    proj = rng.normal(size=(3, 5))
    out = object_features_from_memory(mem, 2, Tensor(proj)).vectors.numpy()
    np.testing.assert_allclose(out, v[:, 0] @ proj, rtol=0, atol=1e-14)


def test_constant_values_pool_to_constant():
    mem = TemporalMemory(3)
    for i in range(3):
        mem.insert(*entry(i, n=2, N=4, Cv=3, fill=0.7))
    out = object_features_from_memory(mem, 2, Tensor(np.eye(3))).vectors.numpy()
    assert np.array_equal(out, np.full((2, 3), 0.7))


def test_pooling_is_permutation_invariant(rng):
    vals = [rng.normal(size=(2, 4, 3)) for _ in range(3)]
    proj = Tensor(rng.normal(size=(3, 6)))

    def pooled(order, pos):
        mem = TemporalMemory(3)
        for i, k in enumerate(order):
            mem.insert(Tensor(np.zeros((4, 5))), Tensor(vals[k][:, pos]), i)
        return object_features_from_memory(mem, 2, proj).vectors.numpy()

    base = pooled([0, 1, 2], np.arange(4))
    assert np.array_equal(base, pooled([2, 0, 1], np.arange(4)))
    assert np.array_equal(base, pooled([1, 2, 0], np.array([3, 1, 0, 2])))


def test_object_features_need_entries():
    with pytest.raises(ContractError):
        object_features_from_memory(TemporalMemory(2), 1, Tensor(np.eye(2)))


# --- ID encoder --------------------------------------------------------------------------


def test_empty_mask_is_deterministic(rng):
    enc = IdEncoderWeights.create(8, rng=rng)
    frame = Frame(rng.uniform(size=(3, 32, 32)))
    ids = np.zeros((32, 32), dtype=int)
    a, b = encode_id_values(frame, ids, 2, enc), encode_id_values(frame, ids, 2, enc)
    assert a.shape == (2, 4, 8)
    assert np.array_equal(a.numpy(), b.numpy())
    # both targets are absent, so both see the same zero plane
    assert np.array_equal(a.numpy()[0], a.numpy()[1])


def test_swapped_masks_swap_values(rng):
    enc = IdEncoderWeights.create(8, rng=rng)
    frame = Frame(rng.uniform(size=(3, 32, 32)))
    ids = np.zeros((32, 32), dtype=int)
    ids[2:12, 3:20] = 1
    ids[18:30, 10:28] = 2
    swapped = np.where(ids == 1, 2, np.where(ids == 2, 1, 0))
    a = encode_id_values(frame, ids, 2, enc).numpy()
    b = encode_id_values(frame, swapped, 2, enc).numpy()
    assert np.array_equal(a[0], b[1]) and np.array_equal(a[1], b[0])


def test_impulse_mask_matches_direct_convolution(rng):
    enc = IdEncoderWeights.create(4, widths=(3, 3, 4), rng=rng)
    enc = IdEncoderWeights(enc.weights, tuple(rng.normal(size=b.shape) * 0.1 for b in enc.biases))
    frame = Frame(np.zeros((3, 16, 16)))
    ids = np.zeros((16, 16), dtype=int)
    ids[5, 9] = 1
    out = encode_id_values(frame, ids, 1, enc).numpy()[0]
    x = np.concatenate([frame.pixels, (ids == 1)[None].astype(float)])
    for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        x = direct_conv2d(x, w, b, 2, 1)
        if i < 3:
            x = np.maximum(x, 0)
    assert np.abs(out - x.reshape(x.shape[0], -1).T).max() < 1e-12


def test_id_above_n_rejected(rng):
    enc = IdEncoderWeights.create(4, rng=rng)
    ids = np.zeros((16, 16), dtype=int)
    ids[0, 0] = 3
    with pytest.raises(ContractError):
        encode_id_values(Frame(np.zeros((3, 16, 16))), ids, 2, enc)
