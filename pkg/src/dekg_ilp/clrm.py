"""Relation-component tables, entity fusion, semantic scoring and contrastive sampling.

An entity is described only by how many triples of each relation it takes
part in. Its semantic embedding is the count-weighted average of learned
per-relation feature vectors, so unseen entities are embedded by exactly the
same rule as training entities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import numeric as nm
from .kg import KnowledgeGraph


class EmptyTableError(ValueError):
    """The entity has no associated triple, so it cannot be fused."""


class OperationError(ValueError):
    """A perturbation's precondition does not hold for this table."""


@dataclass(frozen=True)
class RelationComponentTable:
    counts: Mapping[int, int]
    owner: int | None = None
    # relation-axis size; doubled when direction-aware
    n_slots: int | None = field(default=None, compare=False)

    def __post_init__(self):
        clean = {int(k): int(v) for k, v in self.counts.items() if v}
        if any(v < 0 for v in clean.values()):
            raise ValueError("relation counts must be non-negative")
        object.__setattr__(self, "counts", dict(sorted(clean.items())))

    @property
    def support(self) -> frozenset[int]:
        return frozenset(self.counts)

    def total(self) -> int:
        return sum(self.counts.values())

    def with_counts(self, counts: Mapping[int, int]) -> "RelationComponentTable":
        return RelationComponentTable(counts, self.owner, self.n_slots)

    def dense(self, n_slots: int | None = None) -> np.ndarray:
        n = n_slots or self.n_slots
        vec = np.zeros(n, dtype=np.int64)
        for k, v in self.counts.items():
            vec[k] = v
        return vec


def table_slot(rel: int, role: int, n_relations: int, direction_aware: bool) -> int:
    """Column of a (relation, role) pair; role 0 = head, 1 = tail."""
    return rel + role * n_relations if direction_aware else rel


def build_table(g: KnowledgeGraph, e: int, direction_aware: bool = False) -> RelationComponentTable:
    if not 0 <= e < g.n_entities:
        raise KeyError(f"entity {e} not in graph")
    n = g.n_relations
    counts: dict[int, int] = {}
    for r, _ in g.out_adj[e]:
        k = table_slot(r, 0, n, direction_aware)
        counts[k] = counts.get(k, 0) + 1
    for r, _ in g.in_adj[e]:
        k = table_slot(r, 1, n, direction_aware)
        counts[k] = counts.get(k, 0) + 1
    return RelationComponentTable(counts, e, 2 * n if direction_aware else n)


def count_matrix(g: KnowledgeGraph, direction_aware: bool = False) -> np.ndarray:
    """All tables at once as a dense (n_entities, n_slots) integer matrix."""
    n = g.n_relations
    mat = np.zeros((g.n_entities, 2 * n if direction_aware else n), dtype=np.int64)
    if len(g):
        h, r, t = g.triples.T
        np.add.at(mat, (h, r), 1)
        np.add.at(mat, (t, r + n if direction_aware else r), 1)
    return mat


def fusion_weights(counts: np.ndarray) -> np.ndarray:
    """Row-normalise count rows; rows summing to zero stay zero."""
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=-1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def fuse(table: RelationComponentTable, features: nm.Tensor) -> nm.Tensor:
    """Count-weighted average of the feature rows in the table's support (1 x d)."""
    if not table.counts:
        raise EmptyTableError(f"entity {table.owner} has an empty relation-component table")
    dense = table.dense(features.shape[0])
    return nm.matmul(fusion_weights(dense)[None, :], features)


def fuse_many(counts: np.ndarray, features: nm.Tensor) -> nm.Tensor:
    """Batched :func:`fuse` over count rows; all-zero rows give zero embeddings."""
    return nm.matmul(fusion_weights(counts), features)


def semantic_score(ei, rk, ej, rel_emb) -> nm.Tensor:
    """DistMult likelihood ``sum(ei * r * ej)`` row-wise.

    ``rk`` is a relation id (or array of ids, one per row) into ``rel_emb``.
    """
    ei, ej = nm.as_tensor(ei), nm.as_tensor(ej)
    r = nm.take(rel_emb, np.atleast_1d(rk))
    if ei.shape != ej.shape or ei.shape[-1] != r.shape[-1]:
        raise ValueError(f"semantic_score: dimension mismatch {ei.shape}, {r.shape}, {ej.shape}")
    return nm.reduce_sum(ei * r * ej, axis=1)


def mean_count(table: RelationComponentTable) -> float:
    if not table.counts:
        raise EmptyTableError("mean count of an empty table")
    return table.total() / len(table.counts)


def _count_bound(table: RelationComponentTable, theta: float) -> int:
    return max(1, math.ceil(mean_count(table) * theta))


def op_variation(table: RelationComponentTable, rng: np.random.Generator,
                 theta: float) -> RelationComponentTable:
    """Redraw one in-support count uniformly from [1, ceil(m * theta)]."""
    if not table.counts:
        raise OperationError("variation needs a non-empty support")
    keys = sorted(table.counts)
    k = keys[rng.integers(len(keys))]
    counts = dict(table.counts)
    counts[k] = int(rng.integers(1, _count_bound(table, theta) + 1))
    return table.with_counts(counts)


def op_addition(table: RelationComponentTable, rng: np.random.Generator, theta: float,
                n_slots: int | None = None, pool: Iterable[int] | None = None) -> RelationComponentTable:
    """Attach one new relation with a count from [1, ceil(m * theta)].

    ``pool`` optionally restricts which absent relations may be picked.
    """
    n = n_slots or table.n_slots
    if n is None:
        raise ValueError("relation-axis size unknown")
    if not table.counts:
        raise OperationError("addition needs a non-empty support to size the count")
    allowed = set(range(n)) if pool is None else set(pool)
    free = sorted(allowed - table.support)
    if not free:
        raise OperationError("no absent relation left to add")
    k = free[rng.integers(len(free))]
    counts = dict(table.counts)
    counts[k] = int(rng.integers(1, _count_bound(table, theta) + 1))
    return table.with_counts(counts)


def op_deletion(table: RelationComponentTable, rng: np.random.Generator,
                pool: Iterable[int] | None = None) -> RelationComponentTable:
    """Drop every triple of one present relation (needs at least two present)."""
    if len(table.counts) < 2:
        raise OperationError("deletion needs at least two relations in the support")
    present = sorted(table.support if pool is None else table.support & set(pool))
    if not present:
        raise OperationError("no deletable relation in the pool")
    k = present[rng.integers(len(present))]
    counts = dict(table.counts)
    del counts[k]
    return table.with_counts(counts)


@dataclass(frozen=True)
class ContrastivePair:
    anchor: RelationComponentTable
    positive: RelationComponentTable
    negative: RelationComponentTable


def sample_pair(table: RelationComponentTable, rng: np.random.Generator, theta: float = 2.0,
                len_pos: int | None = None, len_neg: int | None = None,
                n_slots: int | None = None) -> ContrastivePair:
    """Positive by repeated variation, negative by interleaved addition/deletion.

    Lengths default to a uniform draw from {1, 2, 3} capped by the support
    size. Additions only pick relations outside the anchor's support and
    deletions only remove anchor relations, so the negative's support always
    differs from the anchor's. One addition and one deletion are forced when
    both are possible, which may lengthen the negative sequence by one.
    """
    n = n_slots or table.n_slots
    if not table.counts:
        raise EmptyTableError("cannot sample examples for an empty table")
    size = len(table.counts)
    if len_pos is None:
        len_pos = min(int(rng.integers(1, 4)), size)
    if len_neg is None:
        len_neg = min(int(rng.integers(1, 4)), size)

    pos = table
    for _ in range(len_pos):
        pos = op_variation(pos, rng, theta)

    anchor_support = table.support
    outside = set(range(n)) - anchor_support
    can_add = bool(outside)
    # deletion becomes possible after one addition even for single-relation anchors
    can_delete = size >= 2 or can_add
    if not can_add and not can_delete:
        raise OperationError("table admits neither addition nor deletion")
    if can_add and can_delete:
        plan = ["add", "del"]
        plan += ["add" if rng.integers(2) else "del" for _ in range(max(0, len_neg - 2))]
        if rng.integers(2):
            plan.reverse()
        if size < 2:
            plan.sort()  # "add" must precede the first deletion
    else:
        plan = ["add" if can_add else "del"] * len_neg
    neg = table
    for step in plan:
        if step == "add":
            if not outside - neg.support:
                continue
            neg = op_addition(neg, rng, theta, n, pool=outside)
        else:
            if len(neg.counts) < 2 or not (neg.support & anchor_support):
                continue
            neg = op_deletion(neg, rng, pool=anchor_support)
    return ContrastivePair(table, pos, neg)


def contrastive_loss(anchor, positive, negative, gamma_c: float) -> nm.Tensor:
    """Mean over rows of ``[|pos - anchor| - |neg - anchor| + gamma_c]_+``."""
    d_pos = nm.row_norm(nm.sub(positive, anchor))
    d_neg = nm.row_norm(nm.sub(negative, anchor))
    return nm.mean(nm.hinge(d_pos - d_neg + gamma_c))


def export_tables_csv(g: KnowledgeGraph, path, entities: Iterable[int] | None = None) -> None:
    ents = g.vocab.entity_names() if g.vocab else None
    rels = g.vocab.relation_names() if g.vocab else None
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("entity,relation,count\n")
        for e in (range(g.n_entities) if entities is None else entities):
            for k, v in build_table(g, e).counts.items():
                fh.write(f"{ents[e] if ents else e},{rels[k] if rels else k},{v}\n")
