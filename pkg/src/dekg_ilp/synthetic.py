"""Synthetic two-component benchmark where plausibility is a function of relation signatures.

Entities carry a hidden type. Every relation connects one fixed source type
to one fixed target type, and the types are laid out on chains so that each
type has a distinct set of incident relations. A triple can therefore only
exist between type-compatible entities, and every type-compatible pair is
equally plausible: an entity's relation-component table identifies its type,
while no path ever joins the two components.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .kg import KnowledgeGraph, Triple, Vocab


@dataclass
class SyntheticDataset:
    vocab: Vocab
    train: KnowledgeGraph        # original graph
    emerging: KnowledgeGraph     # observed part of the emerging graph
    enclosing: list[Triple]      # held-out emerging-graph links
    bridging: list[Triple]       # links crossing the two graphs
    types: np.ndarray            # hidden type of every entity id
    relation_types: list[tuple[int, int]]

    @property
    def inference_graph(self) -> KnowledgeGraph:
        return self.train.union(self.emerging)

    def known_triples(self) -> frozenset:
        return frozenset(self.train.triple_set() | self.emerging.triple_set()
                         | set(map(tuple, self.enclosing)) | set(map(tuple, self.bridging)))

    def write(self, directory) -> dict[str, str]:
        """Write TSV splits; returns their paths keyed by split name."""
        os.makedirs(directory, exist_ok=True)
        ents, rels = self.vocab.entity_names(), self.vocab.relation_names()
        paths = {}
        for name, rows in (("train", self.train.triples.tolist()),
                           ("emerging", self.emerging.triples.tolist()),
                           ("enclosing", self.enclosing), ("bridging", self.bridging)):
            path = os.path.join(directory, f"{name}.tsv")
            with open(path, "w", encoding="utf-8") as fh:
                for h, r, t in rows:
                    fh.write(f"{ents[h]}\t{rels[r]}\t{ents[t]}\n")
            paths[name] = path
        return paths


def chain_layout(n_types: int, n_relations: int) -> list[tuple[int, int]]:
    """(source type, target type) per relation, types arranged on disjoint chains."""
    n_chains = n_types - n_relations
    if n_chains < 1 or n_types < 3 * n_chains:
        raise ValueError("need n_relations < n_types <= n_relations + n_types / 3")
    sizes = [n_types // n_chains + (i < n_types % n_chains) for i in range(n_chains)]
    pairs, start = [], 0
    for size in sizes:
        pairs.extend((start + i, start + i + 1) for i in range(size - 1))
        start += size
    return pairs


def _component(ids: np.ndarray, types: np.ndarray, layout, p: float,
               rng: np.random.Generator) -> set[tuple[int, int, int]]:
    triples = set()
    for r, (src, dst) in enumerate(layout):
        heads = ids[types[ids] == src]
        tails = ids[types[ids] == dst]
        for h in heads:
            for t in tails:
                if rng.random() < p:
                    triples.add((int(h), r, int(t)))
        # every entity must show each relation role of its type at least once
        for h in heads:
            if not any((int(h), r, int(t)) in triples for t in tails):
                triples.add((int(h), r, int(rng.choice(tails))))
        for t in tails:
            if not any((int(h), r, int(t)) in triples for h in heads):
                triples.add((int(rng.choice(heads)), r, int(t)))
    return triples


def _role_counts(triples) -> dict[tuple[int, int, int], int]:
    counts: dict[tuple[int, int, int], int] = {}
    for h, r, t in triples:
        counts[(h, r, 0)] = counts.get((h, r, 0), 0) + 1
        counts[(t, r, 1)] = counts.get((t, r, 1), 0) + 1
    return counts


MAX_DRAWS = 20


def _hold_out(emerging, n_enclosing: int, rng: np.random.Generator) -> list[Triple] | None:
    counts = _role_counts(emerging)
    enclosing = []
    for i in rng.permutation(len(emerging)):
        if len(enclosing) == n_enclosing:
            return enclosing
        h, r, t = emerging[i]
        if counts[(h, r, 0)] > 1 and counts[(t, r, 1)] > 1:
            counts[(h, r, 0)] -= 1
            counts[(t, r, 1)] -= 1
            enclosing.append(Triple(h, r, t))
    return enclosing if len(enclosing) == n_enclosing else None


def make_benchmark(n_per_component: int = 50, n_relations: int = 8, n_types: int = 10,
                   density: float = 0.4, n_enclosing: int = 30, n_bridging: int = 30,
                   seed: int = 0) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    layout = chain_layout(n_types, n_relations)
    n = n_per_component
    types = np.concatenate([np.arange(n) % n_types, np.arange(n) % n_types])
    orig_ids, new_ids = np.arange(n), np.arange(n, 2 * n)
    train = sorted(_component(orig_ids, types, layout, density, rng))
    # hold out enclosing links without erasing any entity's relation roles;
    # a draw that cannot spare enough links is resampled from the same stream
    for _ in range(MAX_DRAWS):
        emerging = sorted(_component(new_ids, types, layout, density, rng))
        enclosing = _hold_out(emerging, n_enclosing, rng)
        if enclosing is not None:
            break
    else:
        raise ValueError("emerging graph too sparse to hold out the requested enclosing links")
    held = set(enclosing)
    emerging = [tr for tr in emerging if tr not in held]

    bridging: list[Triple] = []
    seen = set()
    while len(bridging) < n_bridging:
        r = int(rng.integers(n_relations))
        src, dst = layout[r]
        orig_is_head = bool(rng.integers(2))
        h_pool = orig_ids if orig_is_head else new_ids
        t_pool = new_ids if orig_is_head else orig_ids
        h = int(rng.choice(h_pool[types[h_pool] == src]))
        t = int(rng.choice(t_pool[types[t_pool] == dst]))
        if (h, r, t) not in seen:
            seen.add((h, r, t))
            bridging.append(Triple(h, r, t))

    vocab = Vocab()
    for i in range(n):
        vocab.entities[f"o{i}"] = i
    for i in range(n):
        vocab.entities[f"n{i}"] = n + i
    for r in range(n_relations):
        vocab.relations[f"r{r}"] = r
    vocab.boundary = n
    g_train = KnowledgeGraph(train, n, n_relations, vocab)
    g_new = KnowledgeGraph(emerging, 2 * n, n_relations, vocab)
    return SyntheticDataset(vocab, g_train, g_new, enclosing, bridging, types, layout)
