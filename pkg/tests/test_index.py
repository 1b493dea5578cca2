import numpy as np
import pytest

from vlretrieval.index import (
    EmbeddingMatrix,
    HCIndex,
    IndexConfigError,
    IndexFormatError,
    brute_force,
    build,
    load_embeddings,
    recall_vs_exact,
    save_embeddings,
    spherical_kmeans,
)


def unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def corpus(n=500, d=16, seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.permutation(10 * n)[:n]
    return EmbeddingMatrix(ids, unit(rng, n, d).astype(np.float32))


def naive_top_k(emb, query, k):
    # second implementation: python loop, sort on (-score, id)
    scored = []
    for pid, row in zip(emb.ids.tolist(), emb.vectors):
        s = 0.0
        for a, b in zip(row.tolist(), np.asarray(query, dtype=np.float64).tolist()):
            s += a * b
        scored.append((-s, pid))
    scored.sort()
    return [pid for _, pid in scored[:k]]


def test_single_list_equals_brute_force():
    emb = corpus()
    index = build(emb, 1)
    assert index.list_sizes() == [len(emb)]
    q = unit(np.random.default_rng(1), 1, 16)[0]
    assert index.search(q, 10) == brute_force(emb, q, 10)


def test_planted_two_clusters_recovered():
    rng = np.random.default_rng(2)
    a = unit(rng, 1, 8)[0]
    pts = np.concatenate([a + 0.05 * rng.normal(size=(50, 8)), -a + 0.05 * rng.normal(size=(50, 8))])
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    planted = np.array([0] * 50 + [1] * 50)
    for seed in range(5):
        _, assign = spherical_kmeans(pts, 2, 20, seed)
        assert len(set(zip(assign.tolist(), planted.tolist()))) == 2


def test_one_list_per_product():
    emb = corpus(200)
    index = build(emb, len(emb))
    assert sum(index.list_sizes()) == 200
    assert max(index.list_sizes()) <= 5
    assert sorted(np.concatenate([pl.ids for pl in index.lists]).tolist()) == sorted(emb.ids.tolist())


def test_centroids_unit_norm():
    index = build(corpus(), 12)
    assert np.allclose(np.linalg.norm(index.centroids, axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("n_lists", [0, 501])
def test_bad_list_count(n_lists):
    with pytest.raises(IndexConfigError):
        build(corpus(), n_lists)


def test_exhaustive_probe_is_exact():
    emb = corpus(1000)
    index = build(emb, 30, seed=3)
    for q in unit(np.random.default_rng(4), 20, 16):
        assert index.search(q, 10, nprobe=30) == brute_force(emb, q, 10)


def test_k_beyond_probed_population():
    emb = corpus(100)
    index = build(emb, 10)
    q = unit(np.random.default_rng(5), 1, 16)[0]
    first = index.lists[index.probe_order(q)[0]]
    out = index.search(q, 1000, nprobe=1)
    assert sorted(pid for pid, _ in out) == sorted(first.ids.tolist())
    assert [s for _, s in out] == sorted((s for _, s in out), reverse=True)


def test_corpus_of_one():
    emb = EmbeddingMatrix([42], np.ones((1, 4), dtype=np.float32) / 2)
    assert [pid for pid, _ in build(emb).search(np.ones(4) / 2, 1)] == [42]


def test_orthonormal_corpus():
    emb = EmbeddingMatrix(np.arange(8), np.eye(8, dtype=np.float32))
    out = brute_force(emb, np.eye(8)[5], 3)
    assert out[0] == (5, 1.0)
    assert [pid for pid, _ in out[1:]] == [0, 1]  # zero-score ties broken by id


def test_matches_naive_rescan():
    emb = corpus(1000, seed=6)
    for q in unit(np.random.default_rng(7), 10, 16):
        assert [pid for pid, _ in brute_force(emb, q, 15)] == naive_top_k(emb, q, 15)


def test_recall_monotone_in_nprobe():
    emb = corpus(2000, seed=8)
    index = build(emb, 40, seed=8)
    queries = unit(np.random.default_rng(9), 50, 16)
    exact = [brute_force(emb, q, 10) for q in queries]
    prev = 0.0
    for nprobe in range(1, 41, 3):
        r = np.mean([recall_vs_exact(index.search(q, 10, nprobe), e) for q, e in zip(queries, exact)])
        assert r >= prev
        prev = r
    assert prev == 1.0 or index.search(queries[0], 10, 40) == exact[0]


def test_nprobe_range():
    index = build(corpus(), 4)
    with pytest.raises(IndexConfigError):
        index.search(np.ones(16), 5, nprobe=5)
    with pytest.raises(IndexConfigError):
        index.search(np.ones(16), 0)


def test_serialization_round_trip(tmp_path):
    emb = corpus(300, seed=10)
    index = build(emb, 17, seed=1)
    index.save(tmp_path / "a.hci")
    again = HCIndex.load(tmp_path / "a.hci")
    for q in unit(np.random.default_rng(11), 10, 16):
        assert again.search(q, 10, 3) == index.search(q, 10, 3)
    assert again.to_bytes() == (tmp_path / "a.hci").read_bytes()
    assert build(emb, 17, seed=1).to_bytes() == index.to_bytes()


def test_truncated_index_rejected(tmp_path):
    data = build(corpus(50), 5).to_bytes()
    with pytest.raises(IndexFormatError):
        HCIndex.from_bytes(data[:-3])
    with pytest.raises(IndexFormatError):
        HCIndex.from_bytes(b"NOPE" + data[4:])


def test_embedding_file_round_trip(tmp_path):
    emb = corpus(40)
    save_embeddings(emb, tmp_path / "e.emb")
    again = load_embeddings(tmp_path / "e.emb")
    assert np.array_equal(again.ids, emb.ids)
    assert np.array_equal(again.vectors, emb.vectors)


def test_duplicate_ids_rejected():
    with pytest.raises(IndexConfigError):
        EmbeddingMatrix([1, 1], np.zeros((2, 3)))


def test_empty_clusters_reseeded():
    # many identical points collapse k-means; every list must still be non-empty
    x = np.tile(np.eye(4)[0], (20, 1))
    x[-3:] = np.eye(4)[1:]
    centroids, assign = spherical_kmeans(x, 4, 10, seed=0)
    assert set(assign.tolist()) == {0, 1, 2, 3}
