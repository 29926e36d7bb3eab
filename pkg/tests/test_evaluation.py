import math

import numpy as np
import pytest

from fedembed import evaluation, nn
from fedembed.errors import InputError


# -------------------------------------------------------- brute-force oracles

def oracle_sorted_ids(dist_row, gallery_ids):
    """Sort-and-scan with explicit stable tie handling."""
    order = sorted(range(len(gallery_ids)), key=lambda g: (dist_row[g], g))
    return [gallery_ids[g] for g in order]


def oracle_cmc(dists, query_ids, gallery_ids, ks):
    hits = {k: 0 for k in ks}
    for qi, qid in enumerate(query_ids):
        ranked = oracle_sorted_ids(dists[qi], gallery_ids)
        first = ranked.index(qid)
        for k in ks:
            hits[k] += first < k
    return {k: hits[k] / len(query_ids) for k in ks}


def oracle_map(dists, query_ids, gallery_ids):
    aps = []
    for qi, qid in enumerate(query_ids):
        ranked = oracle_sorted_ids(dists[qi], gallery_ids)
        precisions = []
        seen = 0
        for pos, gid in enumerate(ranked, start=1):
            if gid == qid:
                seen += 1
                precisions.append(seen / pos)
        aps.append(math.fsum(precisions) / len(precisions))
    return math.fsum(aps) / len(aps), aps


def random_instance(seed):
    rng = np.random.default_rng(seed)
    q, g = int(rng.integers(1, 21)), int(rng.integers(2, 21))
    gallery_ids = rng.integers(0, 6, size=g)
    query_ids = gallery_ids[rng.integers(0, g, size=q)]  # every query id present
    dists = rng.random((q, g))
    if rng.random() < 0.3:  # exercise tie handling
        dists = np.round(dists, 1)
    return dists, query_ids, gallery_ids


# -------------------------------------------------------------- distances

def test_l2_identical_vectors():
    assert np.array_equal(evaluation.l2_distance_matrix([[1.0, 2.0]], [[1.0, 2.0]]),
                          [[0.0]])


def test_l2_triangle():
    assert evaluation.l2_distance_matrix([[0.0, 0.0]], [[3.0, 4.0]])[0, 0] == 5.0


def test_l2_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((4, 3))
    g = rng.standard_normal((5, 3))
    dists = evaluation.l2_distance_matrix(q, g)
    for i in range(4):
        for j in range(5):
            expected = math.sqrt(math.fsum((q[i, k] - g[j, k]) ** 2 for k in range(3)))
            assert abs(dists[i, j] - expected) < 1e-12


def test_l2_symmetric_zero_diagonal():
    x = np.random.default_rng(1).standard_normal((6, 4))
    d = evaluation.l2_distance_matrix(x, x)
    assert np.array_equal(d, d.T)
    assert np.array_equal(np.diag(d), np.zeros(6))


def test_l2_dimension_mismatch():
    with pytest.raises(InputError):
        evaluation.l2_distance_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


# -------------------------------------------------------------- cmc

def test_cmc_perfect_retrieval():
    dists = np.array([[0.1, 0.9, 0.8], [0.9, 0.05, 0.8]])
    ranks = evaluation.cmc(dists, [1, 2], [1, 2, 3])
    assert ranks[1] == 1.0


def test_cmc_match_at_third_position():
    dists = np.array([[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]])
    ranks = evaluation.cmc(dists, [9], [1, 2, 9, 3, 4, 5], ks=(1, 5))
    assert ranks[1] == 0.0
    assert ranks[5] == 1.0


def test_cmc_stable_tie_break():
    # equal distances: lower gallery index wins
    dists = np.array([[0.5, 0.5]])
    assert evaluation.cmc(dists, [7], [7, 8], ks=(1,))[1] == 1.0
    assert evaluation.cmc(dists, [8], [7, 8], ks=(1,))[1] == 0.0


def test_cmc_missing_query_id():
    with pytest.raises(InputError):
        evaluation.cmc(np.ones((1, 2)), [5], [1, 2])


@pytest.mark.parametrize("seed", range(30))
def test_cmc_matches_bruteforce(seed):
    dists, qids, gids = random_instance(seed)
    ks = tuple(sorted({1, 3, 5, len(gids)}))
    assert evaluation.cmc(dists, qids, gids, ks) == oracle_cmc(dists, qids, gids, ks)


def test_cmc_monotone_and_full_rank_is_one():
    dists, qids, gids = random_instance(123)
    ks = tuple(range(1, len(gids) + 1))
    ranks = evaluation.cmc(dists, qids, gids, ks)
    vals = [ranks[k] for k in ks]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0


# -------------------------------------------------------------- mAP

def test_map_worked_example():
    # relevant items ranked 1st and 3rd among 4: AP = (1/1 + 2/3) / 2
    dists = np.array([[0.1, 0.2, 0.3, 0.4]])
    mean_ap, aps = evaluation.mean_average_precision(dists, [1], [1, 0, 1, 0])
    assert mean_ap == pytest.approx((1.0 + 2.0 / 3.0) / 2, abs=1e-15)
    assert round(mean_ap, 6) == 0.833333
    assert aps == [mean_ap]


def test_map_all_relevant():
    dists = np.array([[0.3, 0.2, 0.1]])
    mean_ap, _ = evaluation.mean_average_precision(dists, [4], [4, 4, 4])
    assert mean_ap == 1.0


def test_map_perfect_retrieval():
    dists = np.array([[0.1, 0.9], [0.8, 0.2]])
    mean_ap, _ = evaluation.mean_average_precision(dists, [1, 2], [1, 2])
    assert mean_ap == 1.0


@pytest.mark.parametrize("seed", range(100))
def test_map_matches_bruteforce_exactly(seed):
    dists, qids, gids = random_instance(seed)
    got_map, got_aps = evaluation.mean_average_precision(dists, qids, gids)
    want_map, want_aps = oracle_map(dists, qids, gids)
    assert got_map == want_map
    assert got_aps == want_aps


def test_metrics_invariant_under_monotone_distance_transforms():
    dists, qids, gids = random_instance(7)
    ks = (1, 3, 5)
    base_cmc = evaluation.cmc(dists, qids, gids, ks)
    base_map = evaluation.mean_average_precision(dists, qids, gids)[0]
    for transform in (lambda d: d ** 2, np.exp, lambda d: 5 * d + 1):
        assert evaluation.cmc(transform(dists), qids, gids, ks) == base_cmc
        assert evaluation.mean_average_precision(transform(dists), qids, gids)[0] == base_map


# -------------------------------------------------------------- accuracy

def test_classification_accuracy_perfect():
    logits = np.array([[2.0, 1.0], [0.0, 3.0]])
    assert evaluation.classification_accuracy(logits, [0, 1]) == 1.0


def test_classification_accuracy_tie_breaks_to_lowest_index():
    logits = np.zeros((3, 4))
    assert evaluation.classification_accuracy(logits, [0, 0, 0]) == 1.0
    assert evaluation.classification_accuracy(logits, [1, 1, 1]) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_classification_accuracy_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((20, 5))
    labels = rng.integers(0, 5, size=20)
    expected = sum(int(max(range(5), key=lambda j: (logits[i, j], -j)) == labels[i])
                   for i in range(20)) / 20
    assert evaluation.classification_accuracy(logits, labels) == expected


# -------------------------------------------------------------- embeddings

def test_extract_embeddings_zero_params():
    net = nn.EmbeddingNet((4, 3), init_seed=[0])
    net.params.values[:] = 0.0
    feats = np.random.default_rng(0).standard_normal((5, 4))
    assert np.array_equal(evaluation.extract_embeddings(net, feats), np.zeros((5, 3)))


def test_extract_embeddings_bit_reproducible():
    net = nn.EmbeddingNet((4, 6, 3), init_seed=[1])
    feats = np.random.default_rng(1).standard_normal((7, 4))
    a = evaluation.extract_embeddings(net, feats)
    b = evaluation.extract_embeddings(net, feats)
    assert np.array_equal(a, b)


def test_extract_embeddings_matches_per_sample_forward_exactly():
    net = nn.EmbeddingNet((4, 6, 3), init_seed=[2])
    feats = np.random.default_rng(2).standard_normal((9, 4))
    out = evaluation.extract_embeddings(net, feats)
    for i in range(9):
        assert np.array_equal(out[i], net.forward(feats[i:i + 1])[0])


def test_retrieval_result_invariants():
    rng = np.random.default_rng(11)
    q = rng.standard_normal((8, 3))
    g = np.concatenate([q + 0.01 * rng.standard_normal((8, 3)),
                        rng.standard_normal((12, 3))])
    qids = np.arange(8)
    gids = np.concatenate([np.arange(8), rng.integers(0, 8, size=12)])
    dists = evaluation.l2_distance_matrix(q, g)
    ranks = evaluation.cmc(dists, qids, gids)
    mean_ap, aps = evaluation.mean_average_precision(dists, qids, gids)
    res = evaluation.RetrievalResult(ranks, mean_ap, aps)
    assert 0.0 <= res.rank1 <= 1.0
    assert res.rank_accuracies[1] <= res.rank_accuracies[5] <= res.rank_accuracies[10]
    assert res.mean_ap == math.fsum(aps) / len(aps)
