import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simtransfer.errors import IndexMismatchError, InvariantError, MissingCategoryError, UnresolvableError
from simtransfer.model import EmbeddingTable, HeadKind, HeadMatrix, ScoreRecord, ScoreTable, SimilarityMatrix
from simtransfer.pcmp import PcmpConfig
from simtransfer.similarity import (
    MixtureConfig,
    TruncationScheme,
    build_category_embedding,
    category_embeddings,
    lsda_baseline_similarity,
    mixture,
    semantic_similarity_knn,
    semantic_similarity_sparse,
    truncate,
    visual_similarity,
)

from conftest import make_registry


def _scores(rows):
    return ScoreTable(tuple(ScoreRecord(f"i{n}", j, p) for n, (j, p) in enumerate(rows)))


# -- visual -------------------------------------------------------------------


def test_visual_two_images():
    reg = make_registry("SSW")
    table = _scores([(2, [0.2, 0.3, 0.5]), (2, [0.4, 0.1, 0.5])])
    np.testing.assert_allclose(visual_similarity(table, reg).values, [[0.6, 0.4]], atol=1e-15)


def test_visual_single_image():
    reg = make_registry("SSW")
    sim = visual_similarity(_scores([(2, [0.25, 0.25, 0.5])]), reg)
    np.testing.assert_allclose(sim.values, [[0.5, 0.5]])


def test_visual_missing_weak_category():
    reg = make_registry("SSWW")
    with pytest.raises(MissingCategoryError):
        visual_similarity(_scores([(2, [0.25, 0.25, 0.25, 0.25])]), reg)


def test_visual_drops_weak_columns_before_normalising():
    reg = make_registry("SWSW")
    table = _scores([(1, [0.1, 0.6, 0.3, 0.0]), (3, [0.2, 0.2, 0.2, 0.4])])
    sim = visual_similarity(table, reg)
    np.testing.assert_allclose(sim.values, [[0.25, 0.75], [0.5, 0.5]])


def test_visual_duplication_invariant(rng):
    reg = make_registry("SSSWW")
    rows = []
    for j in (3, 4):
        for _ in range(3):
            p = rng.dirichlet(np.ones(5))
            rows.append((j, p))
    once = visual_similarity(_scores(rows), reg)
    twice = visual_similarity(_scores(rows + rows), reg)
    np.testing.assert_allclose(once.values, twice.values, atol=1e-15)


# -- embeddings ---------------------------------------------------------------


def test_embedding_single_term():
    t = EmbeddingTable(2, {"t": [3.0, 4.0]})
    np.testing.assert_allclose(build_category_embedding(["t"], t), [0.6, 0.8])


def test_embedding_sum_of_terms():
    t = EmbeddingTable(2, {"a": [1.0, 0.0], "b": [0.0, 1.0]})
    np.testing.assert_allclose(build_category_embedding(["a", "b"], t), [0.7071068, 0.7071068], atol=1e-7)


def test_embedding_unresolvable():
    with pytest.raises(UnresolvableError):
        build_category_embedding(["zzz"], EmbeddingTable(2, {}))


def test_embedding_fallback_chain():
    t = EmbeddingTable(2, {"dog": [1.0, 0.0], "Paris": [0.0, 1.0], "hot_dog": [3.0, 4.0],
                           "piano": [0.0, 2.0], "accordion": [2.0, 0.0]})
    np.testing.assert_allclose(build_category_embedding(["DOG"], t), [1.0, 0.0])
    np.testing.assert_allclose(build_category_embedding(["paris"], t), [0.0, 1.0])
    np.testing.assert_allclose(build_category_embedding(["hot dog"], t), [0.6, 0.8])
    # multiword phrase with no phrase vector: sum its in-vocabulary words
    np.testing.assert_allclose(build_category_embedding(["piano accordion xyz"], t), [0.7071068, 0.7071068], atol=1e-7)


def test_embedding_overrides_are_appended():
    t = EmbeddingTable(2, {"a": [1.0, 0.0], "b": [0.0, 1.0]})
    np.testing.assert_allclose(build_category_embedding(["zzz"], t, overrides=["b"]), [0.0, 1.0])


def test_category_embeddings_unit_norm(rng):
    reg = make_registry("SSW")
    t = EmbeddingTable(3, {f"cat{i}": rng.standard_normal(3) for i in range(3)})
    emb = category_embeddings(reg, t)
    for v in emb.values():
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)


# -- semantic -----------------------------------------------------------------


def test_knn_identical_and_unit_distance():
    reg = make_registry("SSW")
    emb = {0: np.array([1.0, 0.0]), 1: np.array([1.0, 1.0]), 2: np.array([1.0, 0.0])}
    row = semantic_similarity_knn(emb, reg).values[0]
    expect = np.array([1 / 1e-6, 1 / (1 + 1e-6)])
    np.testing.assert_allclose(row, expect / expect.sum(), rtol=1e-12)
    assert row[0] == pytest.approx(0.999999, abs=1e-6)


def test_knn_equidistant():
    reg = make_registry("SSW")
    emb = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0]), 2: np.array([0.0, 0.0])}
    np.testing.assert_allclose(semantic_similarity_knn(emb, reg).values, [[0.5, 0.5]])


def test_knn_three_distances():
    reg = make_registry("SSSW")
    emb = {0: np.array([1.0, 0.0]), 1: np.array([-1.0, 0.0]), 2: np.array([0.0, 2.0]), 3: np.zeros(2)}
    np.testing.assert_allclose(semantic_similarity_knn(emb, reg).values, [[0.4, 0.4, 0.2]], atol=1e-6)


def test_knn_order_follows_distance(rng):
    reg = make_registry("SSSSSW")
    emb = {i: rng.standard_normal(4) for i in range(6)}
    row = semantic_similarity_knn(emb, reg).values[0]
    dist = [np.linalg.norm(emb[5] - emb[i]) for i in range(5)]
    assert list(np.argsort(-row, kind="stable")) == list(np.argsort(dist, kind="stable"))


def test_sparse_exact_atom(rng):
    reg = make_registry("SSSW")
    V = rng.standard_normal((3, 5))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    emb = {0: V[0], 1: V[1], 2: V[2], 3: V[1]}
    np.testing.assert_allclose(semantic_similarity_sparse(emb, reg).values, [[0, 1, 0]], atol=1e-12)


def test_sparse_orthonormal_half_half():
    reg = make_registry("SSSW")
    e = np.eye(4)
    target = (e[0] + e[2]) / np.sqrt(2)
    emb = {0: e[0], 1: e[1], 2: e[2], 3: target}
    np.testing.assert_allclose(semantic_similarity_sparse(emb, reg).values, [[0.5, 0, 0.5]], atol=1e-12)


def test_sparse_orthogonal_is_flagged():
    reg = make_registry("SSW")
    e = np.eye(3)
    sim = semantic_similarity_sparse({0: e[0], 1: e[1], 2: e[2]}, reg)
    assert sim.flagged.tolist() == [True]


def test_sparse_missing_embedding():
    with pytest.raises(MissingCategoryError):
        semantic_similarity_sparse({0: np.ones(2)}, make_registry("SW"))


# -- LSDA baseline and truncation ----------------------------------------------


def _head(rows):
    rows = np.asarray(rows, float)
    return HeadMatrix(HeadKind.CLASSIFIER, tuple(range(len(rows))), rows)


def test_lsda_k1_is_one_hot():
    reg = make_registry("SSSW")
    head = _head([[0, 0], [5, 0], [2, 0], [1.8, 0]])
    sim = lsda_baseline_similarity(head, reg, TruncationScheme("avg", 1))
    np.testing.assert_array_equal(sim.values, [[0, 0, 1]])


def test_lsda_k_equals_m_average_is_uniform(rng):
    reg = make_registry("SSSSW")
    sim = lsda_baseline_similarity(_head(rng.standard_normal((5, 3))), reg, TruncationScheme("avg", 4))
    np.testing.assert_allclose(sim.values, [[0.25] * 4], atol=1e-15)


def test_lsda_weighted_distances_one_and_three():
    reg = make_registry("SSW")
    sim = lsda_baseline_similarity(_head([[1, 0], [3, 0], [0, 0]]), reg, TruncationScheme("weighted", 2))
    np.testing.assert_allclose(sim.values, [[0.75, 0.25]], atol=1e-6)


def test_lsda_k_above_m():
    with pytest.raises(InvariantError):
        lsda_baseline_similarity(_head(np.zeros((3, 2))), make_registry("SSW"), TruncationScheme("avg", 3))


def _row(values):
    values = np.asarray(values, float)
    return SimilarityMatrix((9,), tuple(range(values.size)), [values])


def test_truncate_weighted():
    out = truncate(_row([0.5, 0.3, 0.2]), TruncationScheme("weighted", 2))
    np.testing.assert_allclose(out.values, [[0.625, 0.375, 0]])


def test_truncate_average():
    out = truncate(_row([0.5, 0.3, 0.2]), TruncationScheme("avg", 2))
    np.testing.assert_allclose(out.values, [[0.5, 0.5, 0]])


def test_truncate_ties_go_to_lower_id():
    out = truncate(_row([0.2, 0.4, 0.2, 0.2]), TruncationScheme("avg", 2))
    np.testing.assert_array_equal(out.values, [[0.5, 0.5, 0, 0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_truncate_full_k_weighted_is_identity(seed, m):
    rng = np.random.default_rng(seed)
    vals = rng.dirichlet(np.ones(m), size=3)
    sim = SimilarityMatrix((10, 11, 12), tuple(range(m)), vals)
    assert truncate(sim, TruncationScheme("weighted", m)) == sim


# -- mixture ------------------------------------------------------------------


def _pair(sv, ss):
    cols = tuple(range(len(sv[0])))
    rows = tuple(range(100, 100 + len(sv)))
    return SimilarityMatrix(rows, cols, sv), SimilarityMatrix(rows, cols, ss)


def test_mixture_intersection_example():
    sv, ss = _pair([[0.6, 0.4, 0.0]], [[0.5, 0.0, 0.5]])
    np.testing.assert_array_equal(mixture(sv, ss, MixtureConfig(0.6)).values, [[1, 0, 0]])


def test_mixture_alpha_endpoints():
    sv, ss = _pair([[0.5, 0.3, 0.2, 0.0]], [[0.1, 0.0, 0.6, 0.3]])
    one = mixture(sv, ss, MixtureConfig(1.0)).values
    zero = mixture(sv, ss, MixtureConfig(0.0)).values
    np.testing.assert_allclose(one, [[0.5 / 0.7, 0, 0.2 / 0.7, 0]], rtol=1e-15)
    np.testing.assert_allclose(zero, [[0.1 / 0.7, 0, 0.6 / 0.7, 0]], rtol=1e-15)


def test_mixture_disjoint_falls_back_to_visual(caplog):
    sv, ss = _pair([[1.0, 0.0]], [[0.0, 1.0]])
    out = mixture(sv, ss)
    np.testing.assert_array_equal(out.values, [[1.0, 0.0]])
    assert "disjoint" in caplog.text


def test_mixture_index_mismatch():
    sv = SimilarityMatrix((5,), (0, 1), [[0.5, 0.5]])
    ss = SimilarityMatrix((6,), (0, 1), [[0.5, 0.5]])
    with pytest.raises(IndexMismatchError):
        mixture(sv, ss)


def test_mixture_alpha_range():
    with pytest.raises(InvariantError):
        MixtureConfig(1.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_mixture_full_support_is_between_inputs(seed, alpha):
    rng = np.random.default_rng(seed)
    sv, ss = _pair(rng.dirichlet(np.ones(4), size=2), rng.dirichlet(np.ones(4), size=2))
    out = mixture(sv, ss, MixtureConfig(alpha)).values
    lo = np.minimum(sv.values, ss.values)
    hi = np.maximum(sv.values, ss.values)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
