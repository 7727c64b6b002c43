import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccdec import (
    SearchResult,
    adc_scan_decoded,
    adc_scan_pq,
    binary_encode,
    binary_naive_decode,
    groundtruth,
    itq_train,
    natural_decode,
    opq_train,
    pack_codes,
    pq_encode,
    pq_train,
    recall_at,
    rerank,
    sdc_scan_binary,
)
from ccdec.encoders import ITQModel
from ccdec.search import hamming, median_time, topk, write_results_csv


@pytest.fixture(scope="module")
def pq_db(toy):
    pq = pq_train(toy["train"], 4, 4, iters=5)
    return pq, pq_encode(pq, toy["base"])


def test_topk_ties_to_lower_id():
    d = np.array([3.0, 1.0, 1.0, 0.5, 1.0])
    assert topk(d, 3).tolist() == [3, 1, 2]
    assert topk(d, 10).tolist() == [3, 1, 2, 4, 0]


def test_adc_exact_match_ranked_first(pq_db):
    pq, codes = pq_db
    q = natural_decode(pq, codes.take([17]))
    res = adc_scan_pq(q, pq, codes, 5)
    assert res.distances[0, 0] == pytest.approx(0.0, abs=1e-6)
    first = res.ids[0, 0]
    assert codes.take([first]).equals(codes.take([17]))


def test_adc_lut_equals_explicit(pq_db, toy):
    pq, codes = pq_db
    Q = toy["query"][:20]
    res = adc_scan_pq(Q, pq, codes, codes.n)
    recon = natural_decode(pq, codes).astype(np.float64)
    for q in range(20):
        explicit = ((recon - Q[q].astype(np.float64)) ** 2).sum(1)
        np.testing.assert_allclose(res.distances[q], explicit[res.ids[q]], rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(res.distances[q], np.sort(explicit), rtol=1e-5, atol=1e-6)


def test_adc_opq_lut_equals_explicit(toy):
    opq = opq_train(toy["train"], 4, 4, outer_iters=2, iters=3)
    codes = pq_encode(opq, toy["base"][:1000])
    Q = toy["query"][:5]
    res = adc_scan_pq(Q, opq, codes, 1000)
    recon = natural_decode(opq, codes).astype(np.float64)
    for q in range(5):
        explicit = ((recon - Q[q].astype(np.float64)) ** 2).sum(1)
        np.testing.assert_allclose(res.distances[q], explicit[res.ids[q]], rtol=1e-5, atol=1e-5)


def test_adc_full_ranking_when_r_exceeds_n(pq_db, toy):
    pq, codes = pq_db
    small = codes.take(np.arange(30))
    res = adc_scan_pq(toy["query"][:2], pq, small, 100)
    assert res.R == 30
    assert sorted(res.ids[0].tolist()) == list(range(30))
    assert (np.diff(res.distances, axis=1) >= 0).all()


def test_adc_dimension_mismatch(pq_db):
    pq, codes = pq_db
    with pytest.raises(ValueError):
        adc_scan_pq(np.zeros((1, 5)), pq, codes, 1)


def test_sdc_identical_and_complementary():
    a = pack_codes(np.zeros((1, 64), int), 1)
    b = pack_codes(np.ones((1, 64), int), 1)
    db = pack_codes(np.vstack([np.ones(64, int), np.zeros(64, int)]), 1)
    res = sdc_scan_binary(a, db, 2)
    assert res.ids[0].tolist() == [1, 0]
    assert res.distances[0].tolist() == [0.0, 64.0]
    assert hamming(a, b).tolist() == [64]


def test_popcount_matches_bit_loop(rng):
    m = 77
    A = rng.integers(0, 2, (50, m))
    B = rng.integers(0, 2, (50, m))
    got = hamming(pack_codes(A, 1), pack_codes(B, 1))
    loop = [sum(int(x != y) for x, y in zip(a, b)) for a, b in zip(A, B)]
    assert got.tolist() == loop


def test_sdc_length_mismatch():
    with pytest.raises(ValueError):
        sdc_scan_binary(pack_codes(np.zeros((1, 8), int), 1), pack_codes(np.zeros((3, 16), int), 1), 1)


def test_hamming_metric_axioms(rng):
    C = rng.integers(0, 2, (300, 64))
    a, b, c = (pack_codes(C[i::3], 1) for i in range(3))
    ab, bc, ac = hamming(a, b), hamming(b, c), hamming(a, c)
    assert np.array_equal(ab, hamming(b, a))
    assert (ac <= ab + bc).all()


def test_decoded_scan_perfect_decoder(toy):
    gt = groundtruth(toy["base"], toy["query"], 1)
    res = adc_scan_decoded(toy["query"], toy["base"], 100)
    assert recall_at(res, gt, 1) == 1.0


def test_decoded_scan_single_vector():
    res = adc_scan_decoded(np.ones((3, 4)), np.zeros((1, 4)), 10)
    assert res.ids.tolist() == [[0], [0], [0]]


def test_decoded_scan_small_blocks_agree(toy):
    a = adc_scan_decoded(toy["query"], toy["base"], 20)
    b = adc_scan_decoded(toy["query"], toy["base"], 20, block=97)
    assert np.array_equal(a.ids, b.ids)


def test_naive_binary_decoded_ranking_is_hamming(rng):
    d = 32
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    model = ITQModel(np.zeros(d, np.float32), Q.astype(np.float32), np.eye(d, dtype=np.float32))
    X = rng.standard_normal((400, d)).astype(np.float32)
    codes = binary_encode(model, X)
    qcodes = binary_encode(model, X[:10])
    qb = binary_naive_decode(model, qcodes)
    dec = adc_scan_decoded(qb, binary_naive_decode(model, codes), 400)
    ham = sdc_scan_binary(qcodes, codes, 400)
    # squared distances are exactly 4/d * Hamming up to rounding, so bucket before comparing
    np.testing.assert_allclose(dec.distances * d / 4, ham.distances, atol=1e-3)
    for q in range(10):
        key = np.round(dec.distances[q] * d / 4)
        order = np.lexsort((dec.ids[q], key))
        assert np.array_equal(dec.ids[q][order], ham.ids[q])


def test_rerank_l1_unchanged(pq_db, toy):
    pq, codes = pq_db
    first = adc_scan_pq(toy["query"], pq, codes, 50)
    res = rerank(toy["query"], first, toy["base"], 1)
    assert np.array_equal(res.ids, first.ids)
    assert "rerank" in res.timing


def test_rerank_same_decoder_is_noop(pq_db, toy):
    pq, codes = pq_db
    first = adc_scan_pq(toy["query"], pq, codes, 50)
    res = rerank(toy["query"], first, natural_decode(pq, codes), 20)
    assert np.array_equal(res.ids, first.ids)


def test_rerank_exhaustive_exact(toy):
    base = toy["base"][:300]
    gt = groundtruth(base, toy["query"], 1)
    junk = SearchResult(np.tile(np.arange(300)[::-1], (toy["query"].shape[0], 1)), np.zeros((toy["query"].shape[0], 300)))
    res = rerank(toy["query"], junk, base, 300)
    assert recall_at(res, gt, 1) == 1.0


def test_rerank_callable_and_tail_kept(pq_db, toy):
    pq, codes = pq_db
    first = adc_scan_pq(toy["query"], pq, codes, 30)
    base = toy["base"]
    res = rerank(toy["query"], first, lambda ids: base[ids], 10)
    assert np.array_equal(res.ids[:, 10:], first.ids[:, 10:])
    assert np.array_equal(np.sort(res.ids[:, :10], 1), np.sort(first.ids[:, :10], 1))
    assert (np.diff(res.distances[:, :10], axis=1) >= 0).all()


def test_rerank_with_exact_vectors_cannot_hurt_r1(pq_db, toy):
    pq, codes = pq_db
    gt = groundtruth(toy["base"], toy["query"], 1)
    first = adc_scan_pq(toy["query"], pq, codes, 100)
    res = rerank(toy["query"], first, toy["base"], 100)
    assert recall_at(res, gt, 1) >= recall_at(first, gt, 1)
    assert recall_at(res, gt, 1) == recall_at(first, gt, 100)


def test_rerank_errors(pq_db, toy):
    pq, codes = pq_db
    first = adc_scan_pq(toy["query"], pq, codes, 5)
    with pytest.raises(ValueError):
        rerank(toy["query"], first, toy["base"], 0)
    with pytest.raises(ValueError):
        rerank(toy["query"], first, toy["base"], 6)


def test_recall_exact_and_reversed(toy):
    gt = groundtruth(toy["base"], toy["query"], 1)
    full = adc_scan_decoded(toy["query"], toy["base"], toy["base"].shape[0])
    for R in (1, 10, 100):
        assert recall_at(full, gt, R) == 1.0
    rev = full.ids[:, ::-1]
    for R in (1, 10, 100):
        assert recall_at(rev, gt, R) == 0.0


def test_recall_random_ranking_expectation():
    rng = np.random.default_rng(5)
    nq, n = 4000, 1000
    ids = np.argsort(rng.random((nq, n)), axis=1)[:, :10]
    gt = rng.integers(0, n, nq)
    r = recall_at(ids, gt, 10)
    assert abs(r - 0.01) < 4 * np.sqrt(0.01 * 0.99 / nq)


def test_recall_errors(toy):
    res = adc_scan_decoded(toy["query"], toy["base"], 5)
    with pytest.raises(ValueError):
        recall_at(res, None, 1)
    with pytest.raises(ValueError):
        recall_at(res, np.zeros(len(toy["query"])), 10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(100, 400))
def test_recall_monotone_in_r(seed, n):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((20, n))
    ids = np.argsort(d, axis=1, kind="stable")[:, :100]
    gt = rng.integers(0, n, 20)
    r1, r10, r100 = (recall_at(ids, gt, R) for R in (1, 10, 100))
    assert 0 <= r1 <= r10 <= r100 <= 1


def test_results_sorted_and_unique(pq_db, toy):
    pq, codes = pq_db
    res = adc_scan_pq(toy["query"], pq, codes, 100)
    assert (np.diff(res.distances, axis=1) >= 0).all()
    assert all(len(set(r)) == 100 for r in res.ids.tolist())


def test_groundtruth_ties_to_lowest_id():
    base = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert groundtruth(base, np.zeros((1, 2)), 3).tolist() == [[0, 1, 2]]


def test_itq_sdc_end_to_end(toy):
    itq = itq_train(toy["train"], 16, iters=10)
    codes = binary_encode(itq, toy["base"])
    res = sdc_scan_binary(binary_encode(itq, toy["query"]), codes, 100)
    gt = groundtruth(toy["base"], toy["query"], 1)
    assert recall_at(res, gt, 100) > 100 / toy["base"].shape[0]


def test_median_time_and_results_csv(tmp_path, toy):
    t, out = median_time(lambda: 3, reps=3)
    assert out == 3 and t >= 0
    res = adc_scan_decoded(toy["query"][:2], toy["base"], 3)
    write_results_csv(res, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "query_id,rank,db_id,distance" and len(lines) == 7
