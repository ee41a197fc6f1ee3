import numpy as np
import pytest

from pipa.bank import FeatureBank, TemporalRange, bank_push, bank_sample, sample_reference_frame


def units(rng, n, d=4):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_fifo_keeps_most_recent():
    rng = np.random.default_rng(0)
    bank = FeatureBank(3, 4, capacity=5)
    vecs = units(rng, 6)
    bank_push(bank, 1, vecs)
    stored = np.stack(bank.queues[1])
    np.testing.assert_array_equal(stored, vecs[1:])
    assert bank.evicted == 1 and bank.pushed == 6


def test_push_then_sample_one():
    bank = FeatureBank(2, 4)
    v = units(np.random.default_rng(1), 1)
    bank_push(bank, 0, v)
    (got,) = bank_sample(bank, 0, 1, np.random.default_rng(0))
    np.testing.assert_array_equal(got, v[0])


def test_class_isolation():
    rng = np.random.default_rng(2)
    bank = FeatureBank(3, 4)
    a, b = units(rng, 3), units(rng, 2)
    for k in range(3):
        bank_push(bank, 0, a[k:k + 1])
        if k < 2:
            bank_push(bank, 2, b[k:k + 1])
    np.testing.assert_array_equal(np.stack(bank.queues[0]), a)
    np.testing.assert_array_equal(np.stack(bank.queues[2]), b)
    assert len(bank.queues[1]) == 0


def test_invalid_class_rejected():
    with pytest.raises(ValueError):
        FeatureBank(3, 4).push(3, units(np.random.default_rng(0), 1))


def test_non_unit_rejected():
    with pytest.raises(ValueError):
        FeatureBank(3, 2).push(0, [[1.0, 1.0]])


def test_stored_vectors_detached_copies():
    bank = FeatureBank(1, 2)
    v = np.array([[1.0, 0.0]])
    bank.push(0, v)
    v[0, 0] = 5.0
    assert bank.queues[0][0][0] == 1.0
    assert not bank.queues[0][0].flags.writeable


def test_sample_sizes():
    bank = FeatureBank(1, 4)
    bank.push(0, units(np.random.default_rng(3), 4))
    rng = np.random.default_rng(0)
    assert bank_sample(bank, 0, 0, rng) == []
    whole = bank_sample(bank, 0, 10, rng)
    assert len(whole) == 4
    assert {v.tobytes() for v in whole} == {v.tobytes() for v in bank.queues[0]}


def test_sample_uniform_frequency():
    bank = FeatureBank(1, 4)
    bank.push(0, units(np.random.default_rng(4), 4))
    keys = [v.tobytes() for v in bank.queues[0]]
    rng = np.random.default_rng(123)
    counts = dict.fromkeys(keys, 0)
    for _ in range(10_000):
        counts[bank_sample(bank, 0, 1, rng)[0].tobytes()] += 1
    freqs = np.array(list(counts.values())) / 10_000
    assert np.all((freqs >= 0.22) & (freqs <= 0.28))


def test_sample_pool_split_and_state_roundtrip():
    rng = np.random.default_rng(5)
    bank = FeatureBank(3, 4, capacity=8)
    bank.push_labeled(units(rng, 20), rng.integers(0, 2, 20))
    vecs, labs = bank.sample_pool(6, np.random.default_rng(0))
    assert vecs.shape == (6, 4) and sorted(set(labs.tolist())) == [0, 1]
    clone = FeatureBank(3, 4, capacity=8)
    clone.load_state(bank.state())
    v2, l2 = clone.sample_pool(6, np.random.default_rng(0))
    assert v2.tobytes() == vecs.tobytes() and np.array_equal(l2, labs)


def test_deterministic_from_push_sequence():
    def build():
        rng = np.random.default_rng(6)
        b = FeatureBank(2, 4, capacity=3)
        for _ in range(5):
            b.push_labeled(units(rng, 4), rng.integers(0, 2, 4))
        return b.state()

    a, b = build(), build()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


# ---------------------------------------------------------------- reference frames

def test_forced_single_choice():
    rng = np.random.default_rng(0)
    assert all(sample_reference_frame(0, 10, TemporalRange(1, 1), rng) == 1 for _ in range(20))


def test_support_in_clip_middle():
    rng = np.random.default_rng(0)
    seen = {sample_reference_frame(10, 21, TemporalRange(), rng) - 10 for _ in range(10_000)}
    assert seen == {-3, -2, -1, 1, 2, 3}


def test_short_range_property_everywhere():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        n = int(rng.integers(2, 12))
        key = int(rng.integers(n))
        ref = sample_reference_frame(key, n, TemporalRange(), rng)
        assert 1 <= abs(key - ref) <= 3 and 0 <= ref < n


def test_clip_length_one_rejected():
    with pytest.raises(ValueError):
        sample_reference_frame(0, 1, TemporalRange(), np.random.default_rng(0))


def test_invalid_range():
    with pytest.raises(ValueError):
        TemporalRange(3, 1)
    with pytest.raises(ValueError):
        TemporalRange(0, 2)
