import numpy as np
import pytest

from dekg_ilp import clrm
from dekg_ilp.kg import LinkClass, classify_link, load_triples
from dekg_ilp.synthetic import chain_layout, make_benchmark


@pytest.fixture(scope="module", params=[0, 1, 7])
def ds(request):
    return make_benchmark(seed=request.param)


def test_chain_layout():
    assert chain_layout(10, 8) == [(0, 1), (1, 2), (2, 3), (3, 4), (5, 6), (6, 7), (7, 8), (8, 9)]
    with pytest.raises(ValueError):
        chain_layout(8, 8)


def test_sizes_and_classes(ds):
    assert len(ds.enclosing) == 30 and len(ds.bridging) == 30
    assert all(classify_link(ds.train, t) is LinkClass.ENCLOSING for t in ds.enclosing)
    assert all(classify_link(ds.train, t) is LinkClass.BRIDGING for t in ds.bridging)
    assert not ds.emerging.triple_set() & set(ds.enclosing)


def test_components_disconnected(ds):
    n = ds.vocab.boundary
    for h, _, t in ds.inference_graph.triples.tolist():
        assert (h < n) == (t < n)


def test_relations_respect_types(ds):
    for h, r, t in list(ds.inference_graph.triples.tolist()) + list(ds.enclosing) + list(ds.bridging):
        assert (ds.types[h], ds.types[t]) == ds.relation_types[r]


def test_types_have_distinct_signatures(ds):
    # every entity keeps each role of its type, so the support set identifies the type
    g = ds.inference_graph
    counts = clrm.count_matrix(g)
    support = {}
    for e in range(g.n_entities):
        support.setdefault(int(ds.types[e]), set()).add(tuple(np.flatnonzero(counts[e])))
    assert all(len(s) == 1 for s in support.values())
    assert len({next(iter(s)) for s in support.values()}) == len(support)


def test_deterministic_and_written(tmp_path):
    a, b = make_benchmark(seed=5), make_benchmark(seed=5)
    assert a.bridging == b.bridging and a.enclosing == b.enclosing
    paths = a.write(tmp_path)
    g = load_triples(paths["train"])
    assert len(g) == len(a.train)
