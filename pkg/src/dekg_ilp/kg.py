"""Triple storage, TSV ingestion, link classification and evaluation-set mixing.

Entity ids are dense and assigned in first-seen order. Loading the original
graph first and the emerging graph second (sharing one :class:`Vocab`) puts
every original entity below the recorded ``boundary`` and every emerging
entity at or above it, so classifying a link is a pair of integer comparisons.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class Triple(NamedTuple):
    head: int
    rel: int
    tail: int


class LinkClass(str, enum.Enum):
    ENCLOSING = "enclosing"
    BRIDGING = "bridging"
    TRANSDUCTIVE = "transductive"


RATIOS = {"EQ": (1, 1), "MB": (1, 2), "ME": (2, 1)}


class TripleFormatError(ValueError):
    pass


class DuplicateTripleError(ValueError):
    pass


class UnknownRelationError(KeyError):
    pass


class InsufficientLinksError(ValueError):
    pass


@dataclass
class Vocab:
    """Token <-> id maps shared by every split of one dataset."""

    entities: dict[str, int] = field(default_factory=dict)
    relations: dict[str, int] = field(default_factory=dict)
    # first id belonging to the emerging graph; None until one is loaded
    boundary: int | None = None

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def entity_names(self) -> list[str]:
        names = [""] * len(self.entities)
        for tok, i in self.entities.items():
            names[i] = tok
        return names

    def relation_names(self) -> list[str]:
        names = [""] * len(self.relations)
        for tok, i in self.relations.items():
            names[i] = tok
        return names

    def _entity_id(self, token: str) -> int:
        idx = self.entities.get(token)
        if idx is None:
            idx = len(self.entities)
            self.entities[token] = idx
        return idx

    def save(self, directory: str | os.PathLike) -> None:
        """Write ``entities.tsv`` and ``relations.tsv`` as ``token<TAB>id`` lines."""
        os.makedirs(directory, exist_ok=True)
        for fname, names in (("entities.tsv", self.entity_names()),
                             ("relations.tsv", self.relation_names())):
            with open(os.path.join(directory, fname), "w", encoding="utf-8") as fh:
                for i, tok in enumerate(names):
                    fh.write(f"{tok}\t{i}\n")


class KnowledgeGraph:
    """Immutable indexed triple store.

    Parameters
    ----------
    triples : array-like of shape (m, 3)
        Rows of ``(head, rel, tail)`` ids.
    n_entities, n_relations : int
        Sizes of the id spaces this graph lives in. Entities with no incident
        triple are allowed (they simply have empty adjacency).
    vocab : Vocab, optional
        The vocabulary the ids index into.
    """

    def __init__(self, triples, n_entities: int, n_relations: int,
                 vocab: Vocab | None = None):
        arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        arr.setflags(write=False)
        self.triples = arr
        self.n_entities = int(n_entities)
        self.n_relations = int(n_relations)
        self.vocab = vocab
        if len(arr):
            if arr[:, [0, 2]].min() < 0 or arr[:, [0, 2]].max() >= self.n_entities:
                raise ValueError("entity id out of range")
            if arr[:, 1].min() < 0 or arr[:, 1].max() >= self.n_relations:
                raise ValueError("relation id out of range")
        out_adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n_entities)]
        in_adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n_entities)]
        for h, r, t in arr.tolist():
            out_adj[h].append((r, t))
            in_adj[t].append((r, h))
        self.out_adj = out_adj
        self.in_adj = in_adj
        self._triple_set = frozenset(map(tuple, arr.tolist()))
        self._neighbors: list[tuple[int, ...]] | None = None
        pairs: dict[tuple[int, int], int] = {}
        for h, _, t in arr.tolist():
            key = (h, t) if h <= t else (t, h)
            pairs[key] = pairs.get(key, 0) + 1
        self._pairs = pairs

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        for h, r, t in self.triples.tolist():
            yield Triple(h, r, t)

    def __contains__(self, triple) -> bool:
        return tuple(int(x) for x in triple) in self._triple_set

    def triple_set(self) -> frozenset:
        return self._triple_set

    def degree(self, e: int) -> int:
        return len(self.out_adj[e]) + len(self.in_adj[e])

    def pair_multiplicity(self, u: int, v: int) -> int:
        """Number of triples linking ``u`` and ``v`` in either direction."""
        return self._pairs.get((u, v) if u <= v else (v, u), 0)

    def neighbors(self, e: int) -> tuple[int, ...]:
        """Distinct neighbours of ``e`` in the undirected view."""
        if self._neighbors is None:
            nbrs = []
            for u in range(self.n_entities):
                s = {t for _, t in self.out_adj[u]}
                s.update(h for _, h in self.in_adj[u])
                nbrs.append(tuple(sorted(s)))
            self._neighbors = nbrs
        return self._neighbors[e]

    def union(self, other: "KnowledgeGraph") -> "KnowledgeGraph":
        """Graph over the larger id space holding the triples of both."""
        if self.n_relations != other.n_relations:
            raise ValueError("graphs use different relation vocabularies")
        n_ent = max(self.n_entities, other.n_entities)
        if self.vocab is not None:
            n_ent = max(n_ent, self.vocab.n_entities)
        merged = np.concatenate([self.triples, other.triples])
        return KnowledgeGraph(merged, n_ent, self.n_relations, self.vocab)


def _parse_line(line: str, lineno: int, path) -> tuple[str, str, str]:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != 3:
        raise TripleFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
    return parts[0], parts[1], parts[2]


def load_triples(path: str | os.PathLike, vocab: Vocab | None = None, *,
                 emerging: bool | None = None) -> KnowledgeGraph:
    """Read a ``head<TAB>relation<TAB>tail`` file into a :class:`KnowledgeGraph`.

    Without ``vocab`` a fresh vocabulary is created and new relations are
    admitted. With ``vocab`` its ids are reused, new entities are appended and
    an unknown relation raises :class:`UnknownRelationError`.

    ``emerging=True`` marks the current entity count as the original/emerging
    boundary before reading (it defaults to True whenever a vocabulary is
    passed in and no boundary has been set yet).
    """
    extend_relations = vocab is None
    if vocab is None:
        vocab = Vocab()
    if emerging is None:
        emerging = not extend_relations and vocab.boundary is None
    if emerging and vocab.boundary is None:
        vocab.boundary = vocab.n_entities

    rows: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            h, r, t = _parse_line(line, lineno, path)
            rid = vocab.relations.get(r)
            if rid is None:
                if not extend_relations:
                    raise UnknownRelationError(f"{path}:{lineno}: relation {r!r} not in vocabulary")
                rid = len(vocab.relations)
                vocab.relations[r] = rid
            row = (vocab._entity_id(h), rid, vocab._entity_id(t))
            if row in seen:
                raise DuplicateTripleError(f"{path}:{lineno}: duplicate triple {h} {r} {t}")
            seen.add(row)
            rows.append(row)
    return KnowledgeGraph(rows, vocab.n_entities, vocab.n_relations, vocab)


def save_triples(graph: KnowledgeGraph, path: str | os.PathLike) -> None:
    if graph.vocab is None:
        raise ValueError("graph has no vocabulary to serialise tokens with")
    ents, rels = graph.vocab.entity_names(), graph.vocab.relation_names()
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in graph.triples.tolist():
            fh.write(f"{ents[h]}\t{rels[r]}\t{ents[t]}\n")


def classify_link(g_orig: KnowledgeGraph, t: Sequence[int]) -> LinkClass:
    """Enclosing / bridging / transductive, by the original graph's id range."""
    total = g_orig.vocab.n_entities if g_orig.vocab is not None else g_orig.n_entities
    head, tail = int(t[0]), int(t[2])
    for e in (head, tail):
        if not 0 <= e < total:
            raise KeyError(f"entity id {e} not in vocabulary")
    boundary = g_orig.n_entities
    unseen = (head >= boundary) + (tail >= boundary)
    return (LinkClass.TRANSDUCTIVE, LinkClass.BRIDGING, LinkClass.ENCLOSING)[unseen]


@dataclass(frozen=True)
class EvalSet:
    enclosing: tuple[Triple, ...]
    bridging: tuple[Triple, ...]
    ratio_tag: str
    seed: int | None = None

    def links(self) -> list[tuple[Triple, LinkClass]]:
        return ([(t, LinkClass.ENCLOSING) for t in self.enclosing]
                + [(t, LinkClass.BRIDGING) for t in self.bridging])

    def validate(self, boundary: int) -> None:
        for t in self.enclosing:
            if t.head < boundary or t.tail < boundary:
                raise ValueError(f"enclosing link {t} touches the original graph")
        for t in self.bridging:
            if (t.head < boundary) == (t.tail < boundary):
                raise ValueError(f"bridging link {t} does not cross the boundary")


def mix_counts(n_enclosing: int, n_bridging: int, ratio: str) -> tuple[int, int]:
    """Largest (enclosing, bridging) counts realising ``ratio`` from the pools."""
    a, b = RATIOS[ratio]
    k = min(n_enclosing // a, n_bridging // b)
    if k == 0:
        raise InsufficientLinksError(
            f"cannot realise {ratio} ({a}:{b}) from {n_enclosing} enclosing and {n_bridging} bridging links")
    return a * k, b * k


def build_eval_set(enclosing: Iterable, bridging: Iterable, ratio: str, seed: int) -> EvalSet:
    if ratio not in RATIOS:
        raise ValueError(f"unknown ratio tag {ratio!r}; expected one of {sorted(RATIOS)}")
    enc = [Triple(*map(int, t)) for t in enclosing]
    brg = [Triple(*map(int, t)) for t in bridging]
    n_enc, n_brg = mix_counts(len(enc), len(brg), ratio)
    rng = np.random.default_rng(seed)
    # sorted picks keep the original file order of the survivors
    keep_enc = np.sort(rng.choice(len(enc), size=n_enc, replace=False))
    keep_brg = np.sort(rng.choice(len(brg), size=n_brg, replace=False))
    return EvalSet(tuple(enc[i] for i in keep_enc), tuple(brg[i] for i in keep_brg), ratio, seed)


def write_manifest(eval_set: EvalSet, path: str | os.PathLike, **extra) -> None:
    fields = {
        "ratio": eval_set.ratio_tag,
        "seed": eval_set.seed,
        "n_enclosing": len(eval_set.enclosing),
        "n_bridging": len(eval_set.bridging),
        **extra,
    }
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in fields.items():
            fh.write(f"{k} = {v}\n")


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def load_links(path: str | os.PathLike, vocab: Vocab) -> list[Triple]:
    """Read evaluation links against an existing vocabulary without extending it."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            h, r, t = _parse_line(line, lineno, path)
            try:
                out.append(Triple(vocab.entities[h], vocab.relations[r], vocab.entities[t]))
            except KeyError as exc:
                raise KeyError(f"{path}:{lineno}: unknown token {exc.args[0]!r}") from None
    return out
