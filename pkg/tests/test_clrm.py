import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dekg_ilp import clrm
from dekg_ilp import numeric as nm
from dekg_ilp.kg import KnowledgeGraph, Vocab

T = clrm.RelationComponentTable

tables = st.dictionaries(st.integers(0, 7), st.integers(1, 20), min_size=1, max_size=8)


def small_graph():
    # A=0, B=1, C=2, D=3 ; r0=0, r1=1
    return KnowledgeGraph([(0, 0, 1), (3, 0, 0), (0, 1, 2)], 5, 2)


def test_build_table_both_directions():
    g = small_graph()
    assert clrm.build_table(g, 0).counts == {0: 2, 1: 1}
    assert clrm.build_table(g, 4).counts == {}


def test_build_table_direction_aware():
    g = small_graph()
    assert clrm.build_table(g, 0, direction_aware=True).counts == {0: 1, 2: 1, 1: 1}


def test_count_matrix_matches_tables():
    rng = np.random.default_rng(0)
    rows = {tuple(x) for x in zip(rng.integers(12, size=60), rng.integers(4, size=60), rng.integers(12, size=60))}
    g = KnowledgeGraph(sorted(rows), 12, 4)
    for aware in (False, True):
        mat = clrm.count_matrix(g, aware)
        for e in range(12):
            assert np.array_equal(mat[e], clrm.build_table(g, e, aware).dense(mat.shape[1]))


def test_russell_support():
    v = Vocab()
    names = ["Russell", "Lakers", "Celtics", "West", "Auerbach"]
    v.entities = {n: i for i, n in enumerate(names)}
    v.relations = {"teammate": 0, "employed_by": 1, "coach": 2, "born_in": 3}
    g = KnowledgeGraph([(0, 0, 3), (0, 1, 2), (4, 2, 0)], 5, 4, v)
    table = clrm.build_table(g, 0)
    assert {g.vocab.relation_names()[k] for k in table.support} == {"teammate", "employed_by", "coach"}


def test_table_invariants():
    t = T({0: 2, 1: 0, 3: 1})
    assert t.counts == {0: 2, 3: 1} and t.support == {0, 3}
    with pytest.raises(ValueError):
        T({0: -1})


# --- fusion -----------------------------------------------------------------------

def test_fuse_examples():
    F = nm.Tensor([[1.0, 0.0], [0.0, 3.0], [5.0, 5.0]])
    assert clrm.fuse(T({0: 1}), F).data.tolist() == [[1.0, 0.0]]
    assert np.allclose(clrm.fuse(T({0: 1, 1: 1}), F).data, [[0.5, 1.5]])
    assert np.allclose(clrm.fuse(T({0: 2, 1: 1}), F).data, [[2 / 3, 1.0]])


def test_fuse_empty():
    with pytest.raises(clrm.EmptyTableError):
        clrm.fuse(T({}), nm.Tensor(np.ones((2, 2))))


def test_fuse_many_zero_rows():
    F = nm.Tensor(np.arange(6.0).reshape(3, 2))
    out = clrm.fuse_many(np.array([[0, 0, 0], [1, 0, 1]]), F)
    assert out.data.tolist() == [[0.0, 0.0], [2.0, 3.0]]


@settings(max_examples=100, deadline=None)
@given(tables, st.integers(1, 50), st.integers(0, 2**31))
def test_fuse_scale_invariance(counts, c, seed):
    F = nm.Tensor(np.random.default_rng(seed).normal(size=(8, 5)))
    a = clrm.fuse(T(counts), F).data
    b = clrm.fuse(T({k: v * c for k, v in counts.items()}), F).data
    assert np.array_equal(a, b)


@settings(max_examples=100, deadline=None)
@given(tables, st.integers(0, 2**31))
def test_fuse_matches_weighted_average_oracle(counts, seed):
    F = np.random.default_rng(seed).normal(size=(8, 3))
    total = sum(counts.values())
    oracle = sum(v * F[k] for k, v in counts.items()) / total
    assert np.allclose(clrm.fuse(T(counts), nm.Tensor(F)).data[0], oracle, rtol=1e-12, atol=1e-12)


def test_entity_independence():
    F = nm.Tensor(np.random.default_rng(1).normal(size=(4, 3)))
    a = clrm.fuse(T({0: 2, 3: 1}, owner=7), F).data
    b = clrm.fuse(T({0: 2, 3: 1}, owner=99), F).data
    assert np.array_equal(a, b)


# --- semantic score ----------------------------------------------------------------

def test_semantic_score_examples():
    R = nm.Tensor([[1.0, 1.0], [0.0, 0.0]])
    assert clrm.semantic_score([[1.0, 2.0]], 0, [[1.0, 1.0]], R).data.tolist() == [3.0]
    assert clrm.semantic_score([[4.0, -2.0]], 1, [[3.0, 9.0]], R).data.tolist() == [0.0]


def test_semantic_score_loop_oracle_and_symmetry():
    rng = np.random.default_rng(5)
    ei, ej = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    R = rng.normal(size=(3, 4))
    oracle = 0.0
    for x in range(4):
        oracle += ei[0, x] * R[2, x] * ej[0, x]
    got = clrm.semantic_score(ei, 2, ej, nm.Tensor(R)).data[0]
    assert got == pytest.approx(oracle, rel=1e-12)
    assert clrm.semantic_score(ej, 2, ei, nm.Tensor(R)).data[0] == pytest.approx(got, rel=1e-12)


def test_semantic_score_mismatch():
    with pytest.raises(ValueError):
        clrm.semantic_score(np.ones((1, 3)), 0, np.ones((1, 4)), nm.Tensor(np.ones((1, 4))))


# --- mean count and operations ----------------------------------------------------------

@pytest.mark.parametrize("counts, m", [({0: 2, 1: 1}, 1.5), ({0: 5}, 5.0), ({0: 1, 1: 1, 2: 1}, 1.0)])
def test_mean_count(counts, m):
    assert clrm.mean_count(T(counts)) == m


def test_mean_count_empty():
    with pytest.raises(clrm.EmptyTableError):
        clrm.mean_count(T({}))


def test_variation_examples():
    rng = np.random.default_rng(0)
    base = T({0: 2, 1: 1})
    for _ in range(200):
        out = clrm.op_variation(base, rng, 2.0)
        assert out.support == base.support
        assert all(1 <= v <= 3 for v in out.counts.values())  # ceil(1.5 * 2) = 3
        assert sum(out.counts[k] != base.counts[k] for k in base.counts) <= 1
    assert clrm.op_variation(T({0: 1}), rng, 1.0).counts == {0: 1}
    with pytest.raises(clrm.OperationError):
        clrm.op_variation(T({}), rng, 2.0)


def test_addition_examples():
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(100):
        out = clrm.op_addition(T({0: 2}, n_slots=3), rng, 2.0)
        (new,) = out.support - {0}
        seen.add(new)
        assert 1 <= out.counts[new] <= 4   # ceil(2 * 2)
        assert out.counts[0] == 2
    assert seen == {1, 2}
    with pytest.raises(clrm.OperationError):
        clrm.op_addition(T({0: 1, 1: 1}, n_slots=2), rng, 2.0)


def test_deletion_examples():
    rng = np.random.default_rng(0)
    outs = {tuple(clrm.op_deletion(T({0: 2, 1: 1}), rng).counts.items()) for _ in range(50)}
    assert outs == {((0, 2),), ((1, 1),)}
    with pytest.raises(clrm.OperationError):
        clrm.op_deletion(T({0: 1}), rng)


@settings(max_examples=200, deadline=None)
@given(tables, st.floats(0.5, 4.0), st.integers(0, 2**31))
def test_operation_contracts(counts, theta, seed):
    rng = np.random.default_rng(seed)
    t = T(counts, n_slots=10)
    bound = math.ceil(sum(counts.values()) / len(counts) * theta)

    v = clrm.op_variation(t, rng, theta)
    assert v.support == t.support
    changed = [k for k in t.counts if v.counts[k] != t.counts[k]]
    assert len(changed) <= 1 and all(1 <= v.counts[k] <= max(1, bound) for k in changed)

    a = clrm.op_addition(t, rng, theta)
    assert t.support < a.support and len(a.support - t.support) == 1
    (k,) = a.support - t.support
    assert 1 <= a.counts[k] <= max(1, bound)

    if len(t.counts) >= 2:
        d = clrm.op_deletion(t, rng)
        assert d.support < t.support and len(t.support - d.support) == 1


@settings(max_examples=200, deadline=None)
@given(tables, st.integers(0, 2**31))
def test_sample_pair_invariants(counts, seed):
    rng = np.random.default_rng(seed)
    t = T(counts, n_slots=10)
    pair = clrm.sample_pair(t, rng, 2.0)
    assert pair.positive.support == t.support
    assert pair.negative.support != t.support
    assert pair.negative.counts  # always fusable
    # one addition and one removal whenever both are feasible
    assert pair.negative.support - t.support
    assert t.support - pair.negative.support


def test_sample_pair_len_pos_one():
    rng = np.random.default_rng(2)
    t = T({0: 3, 2: 1, 5: 2}, n_slots=6)
    for _ in range(50):
        pos = clrm.sample_pair(t, rng, 2.0, len_pos=1).positive
        assert sum(pos.counts[k] != t.counts[k] for k in t.counts) <= 1


def test_sample_pair_full_support_deletes_only():
    rng = np.random.default_rng(3)
    t = T({0: 1, 1: 2, 2: 1}, n_slots=3)
    pair = clrm.sample_pair(t, rng, 2.0)
    assert pair.negative.support < t.support


# --- contrastive loss ------------------------------------------------------------------

def test_contrastive_loss_boundaries():
    a = np.zeros((1, 2))
    assert clrm.contrastive_loss(a, a, np.array([[1.0, 0.0]]), 1.0).data == 0.0
    assert clrm.contrastive_loss(a, np.array([[0.0, 2.0]]), np.array([[2.0, 0.0]]), 1.0).data == 1.0


def test_contrastive_loss_scalar_oracle():
    rng = np.random.default_rng(9)
    a, p, n = (rng.normal(size=(1, 4)) for _ in range(3))
    dist = lambda x, y: math.sqrt(sum((x[0, i] - y[0, i]) ** 2 for i in range(4)))
    oracle = max(0.0, dist(p, a) - dist(n, a) + 1.5)
    assert float(clrm.contrastive_loss(a, p, n, 1.5).data) == pytest.approx(oracle, rel=1e-12)


def test_clrm_gradients():
    rng = np.random.default_rng(4)
    store = nm.ParameterStore()
    store.add("F", rng.normal(size=(5, 4)))
    store.add("r", rng.normal(size=(3, 4)))
    anchors = np.array([[2, 1, 0, 0, 0], [0, 0, 1, 3, 0]])
    pos = np.array([[1, 1, 0, 0, 0], [0, 0, 2, 3, 0]])
    neg = np.array([[2, 0, 0, 0, 4], [0, 1, 1, 0, 0]])

    def expr():
        F = store["F"]
        ea, ep, en = (clrm.fuse_many(c, F) for c in (anchors, pos, neg))
        s = clrm.semantic_score(ea, [0, 2], en, store["r"])
        return nm.add(nm.reduce_sum(s), clrm.contrastive_loss(ea, ep, en, 5.0))
    report = nm.grad_check(expr, store)
    assert report.passed, str(report)


def test_export_tables_csv(tmp_path):
    v = Vocab()
    v.entities = {"A": 0, "B": 1, "C": 2, "D": 3, "E": 4}
    v.relations = {"r0": 0, "r1": 1}
    g = KnowledgeGraph([(0, 0, 1), (3, 0, 0), (0, 1, 2)], 5, 2, v)
    path = tmp_path / "tables.csv"
    clrm.export_tables_csv(g, path, entities=[0])
    assert path.read_text().splitlines() == ["entity,relation,count", "A,r0,2", "A,r1,1"]
