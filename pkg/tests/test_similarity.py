import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdrc.io import Dataset
from tdrc.similarity import (
    DagError,
    DiseaseDag,
    SemanticSimilarity,
    SimilarityMatrix,
    SimParams,
    build_similarity_matrices,
    disease_similarity,
    mirna_similarity,
    semantic_contribution,
    semantic_value,
)

HALF = SimParams(0.5)


def chain_dag():
    return DiseaseDag({"root": [], "mid": ["root"], "d": ["mid"]})


def sibling_dag():
    return DiseaseDag({"A": [], "B": ["A"], "C": ["A"], "X": []})


# Independent oracle: the defining recursion, evaluated literally.
def oracle_contribution(dag, d, di, delta):
    closure = dag.ancestors(d)
    d, di = d.casefold(), di.casefold()

    def c(node):
        if node == d:
            return 1.0
        children = [x for x in closure if node in dag.parents[x]]
        return max(delta * c(x) for x in children)

    return c(di)


def oracle_similarity(dag, a, b, delta):
    na, nb = dag.ancestors(a), dag.ancestors(b)
    sva = sum(oracle_contribution(dag, a, x, delta) for x in na)
    svb = sum(oracle_contribution(dag, b, x, delta) for x in nb)
    num = sum(oracle_contribution(dag, a, x, delta) + oracle_contribution(dag, b, x, delta) for x in na & nb)
    return num / (sva + svb)


def test_self_contribution_is_one():
    assert semantic_contribution(chain_dag(), "d", "d", HALF) == 1.0


def test_parent_contribution():
    dag = DiseaseDag({"a": [], "d": ["a"]})
    assert semantic_contribution(dag, "d", "a", HALF) == 0.5


def test_chain_contribution():
    assert semantic_contribution(chain_dag(), "d", "root", HALF) == 0.25


def test_contribution_takes_max_over_children():
    # root is both a grandparent (via a) and a direct parent of d
    dag = DiseaseDag({"root": [], "a": ["root"], "d": ["a", "root"]})
    assert semantic_contribution(dag, "d", "root", HALF) == 0.5
    assert oracle_contribution(dag, "d", "root", 0.5) == 0.5


def test_contribution_outside_closure():
    with pytest.raises(DagError):
        semantic_contribution(sibling_dag(), "B", "C", HALF)


def test_semantic_values():
    assert semantic_value(DiseaseDag({"d": []}), "d", HALF) == 1.0
    assert semantic_value(DiseaseDag({"root": [], "d": ["root"]}), "d", HALF) == 1.5
    assert semantic_value(chain_dag(), "d", HALF) == 1.75


def test_unknown_disease():
    with pytest.raises(DagError):
        semantic_value(chain_dag(), "nope", HALF)


def test_disease_similarity_values():
    dag = sibling_dag()
    assert disease_similarity(dag, "B", "B", HALF) == 1.0
    assert disease_similarity(dag, "B", "C", HALF) == pytest.approx(1 / 3, abs=1e-12)
    assert disease_similarity(dag, "B", "X", HALF) == 0.0


def test_identifiers_are_case_insensitive():
    dag = sibling_dag()
    assert disease_similarity(dag, " b", "c ", HALF) == pytest.approx(1 / 3, abs=1e-12)


def test_simparams_range():
    with pytest.raises(ValueError):
        SimParams(1.0)
    with pytest.raises(ValueError):
        SimParams(0.0)


def test_dag_rejects_cycles_and_dangling_parents():
    with pytest.raises(DagError):
        DiseaseDag({"a": ["b"], "b": ["a"]})
    with pytest.raises(DagError):
        DiseaseDag({"a": ["ghost"]})


def _smat(dag, labels):
    sem = SemanticSimilarity(dag, HALF)
    return SimilarityMatrix(labels, [[sem.similarity(a, b) for b in labels] for a in labels])


def test_mirna_similarity_values():
    s = _smat(sibling_dag(), ["B", "C"])
    sets = {"e1": {"B"}, "e2": {"C"}, "e3": {"B", "C"}}
    assert mirna_similarity("e1", "e1", sets, s) == 1.0
    assert mirna_similarity("e1", "e2", sets, s) == pytest.approx(1 / 3, abs=1e-12)
    assert mirna_similarity("e1", "e3", sets, s) == pytest.approx(7 / 9, abs=1e-12)
    assert mirna_similarity("e3", "e1", sets, s) == pytest.approx(7 / 9, abs=1e-12)


def test_mirna_similarity_empty_set_warns(caplog):
    s = _smat(sibling_dag(), ["B"])
    with caplog.at_level(logging.WARNING):
        assert mirna_similarity("e1", "e2", {"e1": {"B"}, "e2": set()}, s) == 0.0
    assert "empty disease set" in caplog.text


def _dataset(mirna_diseases, diseases, n_types=1):
    mirnas = sorted(mirna_diseases)
    rows = [(mirnas.index(e), diseases.index(d), 0) for e in mirnas for d in mirna_diseases[e]]
    return Dataset(mirnas, diseases, [f"t{k}" for k in range(n_types)], np.array(rows))


def test_build_matrices_single_disease():
    ds = _dataset({"e1": ["d"]}, ["d"])
    S_m, S_n = build_similarity_matrices(ds, DiseaseDag({"d": []}), HALF)
    np.testing.assert_array_equal(S_n.values, [[1.0]])
    np.testing.assert_array_equal(S_m.values, [[1.0]])


def test_build_matrices_three_siblings():
    dag = DiseaseDag({"A": [], "B": ["A"], "C": ["A"], "D": ["A"]})
    ds = _dataset({"e1": ["B"], "e2": ["C"], "e3": ["B", "C"], "e4": ["D"]}, ["B", "C", "D"])
    S_m, S_n = build_similarity_matrices(ds, dag, HALF)
    expected = np.full((3, 3), 1 / 3)
    np.fill_diagonal(expected, 1.0)
    np.testing.assert_allclose(S_n.values, expected, rtol=0, atol=1e-12)
    assert np.array_equal(S_n.values, S_n.values.T)
    assert np.array_equal(S_m.values, S_m.values.T)
    assert S_m.values[0, 2] == pytest.approx(7 / 9, abs=1e-12)
    assert S_m.values[0, 1] == pytest.approx(1 / 3, abs=1e-12)


def test_missing_disease_kept_with_zero_similarity(caplog):
    dag = sibling_dag()
    ds = _dataset({"e1": ["B"], "e2": ["Z"]}, ["B", "Z"])
    with caplog.at_level(logging.WARNING):
        _, S_n = build_similarity_matrices(ds, dag, HALF)
    np.testing.assert_array_equal(S_n.values, np.eye(2))
    assert "not found in the ontology" in caplog.text


def random_dag(rng, n_nodes):
    parents = {}
    for v in range(n_nodes):
        k = rng.integers(0, min(v, 3) + 1)
        parents[f"n{v}"] = [f"n{p}" for p in rng.choice(v, size=k, replace=False)] if v else []
    return DiseaseDag(parents)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n_nodes=st.integers(2, 14), delta=st.floats(0.1, 0.9))
def test_random_dags_match_oracle(seed, n_nodes, delta):
    rng = np.random.default_rng(seed)
    dag = random_dag(rng, n_nodes)
    params = SimParams(delta)
    sem = SemanticSimilarity(dag, params)
    nodes = dag.nodes()
    for d in nodes:
        assert sem.value(d) >= 1.0
        for a in dag.ancestors(d):
            c = sem.contribution(d, a)
            assert 0.0 <= c <= 1.0
            assert c == pytest.approx(oracle_contribution(dag, d, a, delta), abs=1e-15)
    for a in nodes:
        for b in nodes:
            s = sem.similarity(a, b)
            assert 0.0 <= s <= 1.0
            assert s == pytest.approx(sem.similarity(b, a), abs=1e-15)
            assert s == pytest.approx(oracle_similarity(dag, a, b, delta), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_matrix_builder_matches_pairwise_functions(seed):
    rng = np.random.default_rng(seed)
    dag = random_dag(rng, 12)
    diseases = [f"n{v}" for v in rng.permutation(12)[:8]]
    mirna_diseases = {
        f"e{i}": sorted(rng.choice(diseases, size=rng.integers(1, 4), replace=False).tolist())
        for i in range(6)
    }
    ds = _dataset(mirna_diseases, diseases)
    S_m, S_n = build_similarity_matrices(ds, dag, HALF)
    for M in (S_m, S_n):
        v = M.values
        assert np.array_equal(v, v.T)
        assert np.all(np.diag(v) == 1.0)
        assert v.min() >= 0.0 and v.max() <= 1.0
    pairwise = _smat(dag, diseases)
    np.testing.assert_allclose(S_n.values, pairwise.values, rtol=0, atol=1e-12)
    sets = {ds.mirna_vocab[i]: {ds.disease_vocab[j] for j in js} for i, js in ds.disease_sets.items()}
    for a in range(len(ds.mirna_vocab)):
        for b in range(len(ds.mirna_vocab)):
            expected = mirna_similarity(ds.mirna_vocab[a], ds.mirna_vocab[b], sets, S_n)
            assert S_m.values[a, b] == pytest.approx(expected, abs=1e-12)


def test_equal_disease_sets_give_one():
    dag = sibling_dag()
    ds = _dataset({"e1": ["B", "C"], "e2": ["B", "C"]}, ["B", "C"])
    S_m, _ = build_similarity_matrices(ds, dag, HALF)
    assert S_m.values[0, 1] == pytest.approx(1.0, abs=1e-12)
