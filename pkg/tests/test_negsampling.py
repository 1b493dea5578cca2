import numpy as np
import pytest

from vlretrieval.negsampling import (
    DeviceGroup,
    EmbeddingBatch,
    MemoryBank,
    Schedule,
    gather_pool,
    sample_negatives,
)

D = 4


def batch(ids, rng=None):
    rng = rng or np.random.default_rng(0)
    ids = np.asarray(ids)
    return EmbeddingBatch(rng.normal(size=(len(ids), D)), np.full(len(ids), 0.01), ids)


def group(G, B, offset=0):
    return DeviceGroup([batch(np.arange(B) + offset + g * B, np.random.default_rng(g)) for g in range(G)])


def test_fifo_keeps_last_two():
    bank = MemoryBank(2)
    a, b, c = batch([1]), batch([2]), batch([3])
    bank.push(a).push(b).push(c)
    assert list(bank.queue) == [b, c]


def test_push_into_empty_bank():
    bank = MemoryBank(4)
    bank.push(batch(range(32)))
    assert bank.current_size == 32


def test_zero_capacity_stores_nothing():
    bank = MemoryBank(0)
    bank.push(batch([1, 2]))
    assert bank.current_size == 0


def test_shadow_list_oracle():
    rng = np.random.default_rng(1)
    bank, shadow = MemoryBank(10), []
    for i in range(1000):
        b = batch(np.arange(32) + 32 * i, rng)
        bank.push(b)
        shadow = (shadow + [b])[-10:]
        assert bank.current_size <= 320
        assert list(bank.queue) == shadow
    got = bank.contents(D)
    assert np.array_equal(got.ids, np.concatenate([s.ids for s in shadow]))


def test_snapshot_is_detached():
    emb = np.ones((2, D))
    b = EmbeddingBatch(emb, np.ones(2), np.arange(2))
    emb[:] = 5.0
    assert np.all(b.embeddings == 1.0)
    with pytest.raises(ValueError):
        b.embeddings[0, 0] = 3.0


def test_empty_push_rejected():
    with pytest.raises(ValueError):
        MemoryBank(1).push(batch([]))


def filled_bank(n_batches, B):
    bank = MemoryBank(n_batches)
    for i in range(n_batches):
        bank.push(batch(np.arange(B) + 1000 + B * i))
    return bank


def test_before_both_thresholds_empty():
    s = Schedule(100)
    neg = sample_negatives(filled_bank(3, 8), group(4, 8), 40, s, positive_id=0)
    assert (neg.n1, neg.n2) == (0, 0)


def test_cdns_only_at_55_percent():
    s = Schedule(100)
    neg = sample_negatives(filled_bank(3, 8), group(4, 8), 55, s, positive_id=0)
    assert (neg.n2, neg.n1) == (24, 0)


def test_both_at_70_percent():
    s = Schedule(100)
    neg = sample_negatives(filled_bank(3, 8), group(4, 8), 70, s, positive_id=0)
    assert (neg.n1, neg.n2) == (24, 24)
    assert neg.w1 == 0.25 and neg.w2 == 1.0


def test_thresholds_are_inclusive_at_start_step():
    s = Schedule(10)
    assert not s.cdns_active(4) and s.cdns_active(5)
    assert not s.mbns_active(5) and s.mbns_active(6)


def test_positive_excluded_from_cdns():
    g = group(3, 4)
    # id 5 lives on device 1; a pair on device 0 with positive 5 drops it
    neg = sample_negatives(MemoryBank(0), g, 9, Schedule(10), positive_id=5, device=0)
    assert neg.n2 == 7
    assert not np.any(np.all(neg.cdns == g.batches[1].embeddings[1], axis=1))


def test_step_out_of_range():
    with pytest.raises(ValueError):
        sample_negatives(MemoryBank(0), group(2, 2), 10, Schedule(10), positive_id=0)


def test_schedule_fraction_validation():
    with pytest.raises(ValueError):
        Schedule(10, cdns_start_frac=1.5)


def test_gather_pool_counts_and_weights():
    pool = gather_pool(filled_bank(2, 8), group(4, 8), 0, 90, Schedule(100), D)
    assert (pool.n1, pool.n2) == (16, 24)
    assert np.allclose(pool.log_weights[:16], np.log(0.25))
    assert np.allclose(pool.log_weights[16:], 0.0)


def test_gather_pool_zero_weight_drops_pool():
    pool = gather_pool(filled_bank(2, 8), group(4, 8), 0, 90, Schedule(100), D, w1=0.0)
    assert len(pool.batch) == 24
    assert pool.n1 == 16  # counted, but weighted out
