"""Filtered ranking evaluation (MRR, Hits@N) over head, relation and tail queries."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kg import EvalSet, LinkClass, Triple

PATTERNS = ("head", "relation", "tail")   # (?,r,t), (h,?,t), (h,r,?)
TIE_MODES = ("average", "pessimistic", "optimistic")
HITS_AT = (1, 5, 10)


@dataclass(frozen=True)
class Query:
    pattern: str
    triple: Triple
    n_candidates: int
    link_class: LinkClass | None = None

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown query pattern {self.pattern!r}")
        slot = PATTERNS.index(self.pattern)
        if not 0 <= self.triple[slot] < self.n_candidates:
            raise ValueError(f"true answer {self.triple[slot]} is not among {self.n_candidates} candidates")

    @property
    def slot(self) -> int:
        return PATTERNS.index(self.pattern)

    def candidates(self) -> np.ndarray:
        """All completions as an (n_candidates, 3) triple array."""
        out = np.tile(np.asarray(self.triple, dtype=np.int64), (self.n_candidates, 1))
        out[:, self.slot] = np.arange(self.n_candidates)
        return out


@dataclass(frozen=True)
class RankResult:
    query: Query
    rank: float
    link_class: LinkClass | None = None


def queries_for(triple, n_entities: int, n_relations: int,
                link_class: LinkClass | None = None, patterns=PATTERNS) -> list[Query]:
    triple = Triple(*(int(x) for x in triple))
    return [Query(p, triple, n_relations if p == "relation" else n_entities, link_class)
            for p in patterns]


def rank_from_scores(scores: np.ndarray, truth: int, keep: np.ndarray | None = None,
                     tie_mode: str = "average") -> float:
    """1 + (#survivors strictly above the truth), plus the tie share per ``tie_mode``."""
    if tie_mode not in TIE_MODES:
        raise ValueError(f"unknown tie mode {tie_mode!r}")
    s_true = scores[truth]
    others = np.ones(len(scores), dtype=bool) if keep is None else keep.copy()
    others[truth] = False
    higher = int(np.count_nonzero(scores[others] > s_true))
    ties = int(np.count_nonzero(scores[others] == s_true))
    if tie_mode == "average":
        return 1.0 + higher + ties / 2.0
    if tie_mode == "pessimistic":
        return float(1 + higher + ties)
    return float(1 + higher)


def filter_mask(query: Query, known) -> np.ndarray:
    """True for candidates that survive filtering (truth always survives)."""
    cands = query.candidates()
    keep = np.fromiter((tuple(c) not in known for c in cands.tolist()), dtype=bool, count=len(cands))
    keep[query.triple[query.slot]] = True
    return keep


def filtered_rank(model, query: Query, known, tie_mode: str = "average") -> RankResult:
    """Score every completion, drop known triples other than the truth, rank the truth."""
    keep = filter_mask(query, known)
    cands = query.candidates()
    scores = np.full(len(cands), -np.inf)
    scores[keep] = model.predict(cands[keep])
    rank = rank_from_scores(scores, query.triple[query.slot], keep, tie_mode)
    return RankResult(query, rank, query.link_class)


def mrr(results: Sequence[RankResult]) -> float:
    if not results:
        raise ValueError("no rank results")
    return float(np.mean([1.0 / r.rank for r in results]))


def hits_at(results: Sequence[RankResult], n: float) -> float:
    if not results:
        raise ValueError("no rank results")
    return float(np.mean([r.rank <= n for r in results]))


def metrics(results: Sequence[RankResult]) -> dict[str, float]:
    out = {"MRR": mrr(results)}
    for n in HITS_AT:
        out[f"Hits@{n}"] = hits_at(results, n)
    return out


def rank_all(model, queries: Sequence[Query], known, tie_mode: str = "average",
             workers: int = 1) -> list[RankResult]:
    if workers <= 1:
        return [filtered_rank(model, q, known, tie_mode) for q in queries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda q: filtered_rank(model, q, known, tie_mode), queries))


@dataclass
class ReportRow:
    split: str
    pattern: str
    MRR: float
    hits1: float
    hits5: float
    hits10: float
    n_queries: int
    seeds: int


COLUMNS = ("split", "pattern", "MRR", "Hits@1", "Hits@5", "Hits@10", "n_queries", "seeds")


@dataclass
class Report:
    rows: list[ReportRow]
    per_seed: dict[int, list[RankResult]]

    def get(self, split: str, pattern: str = "all") -> ReportRow:
        for row in self.rows:
            if row.split == split and row.pattern == pattern:
                return row
        raise KeyError((split, pattern))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([r.split, r.pattern, f"{r.MRR:.6f}", f"{r.hits1:.6f}", f"{r.hits5:.6f}",
                        f"{r.hits10:.6f}", r.n_queries, r.seeds])
        return buf.getvalue()

    def pretty(self) -> str:
        head = f"{'split':<10}{'pattern':<10}{'MRR':>8}{'Hits@1':>8}{'Hits@5':>8}{'Hits@10':>9}{'n':>7}{'seeds':>6}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.split:<10}{r.pattern:<10}{r.MRR:>8.3f}{r.hits1:>8.3f}{r.hits5:>8.3f}"
                         f"{r.hits10:>9.3f}{r.n_queries:>7}{r.seeds:>6}")
        return "\n".join(lines)


def _select(results, split, pattern):
    return [r for r in results
            if (split == "overall" or r.link_class == LinkClass(split))
            and (pattern == "all" or r.query.pattern == pattern)]


def evaluate(models, eval_set, known, seeds: Iterable[int] = (0,), *,
             patterns=PATTERNS, tie_mode: str = "average", workers: int = 1) -> Report:
    """Per-seed filtered metrics, averaged over seeds.

    ``models`` and ``eval_set`` may each be a single object used for every
    seed or a mapping from seed to object (e.g. one trained model per seed,
    or one re-mixed evaluation set per seed). Queries of all patterns are
    pooled for the ``all`` rows; per-pattern rows are always reported.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed required")
    per_seed: dict[int, list[RankResult]] = {}
    for s in seeds:
        model = models[s] if isinstance(models, Mapping) else models
        es: EvalSet = eval_set[s] if isinstance(eval_set, Mapping) else eval_set
        n_ent, n_rel = model.graph.n_entities, model.n_relations
        queries = [q for t, cls in es.links() for q in queries_for(t, n_ent, n_rel, cls, patterns)]
        per_seed[s] = rank_all(model, queries, known, tie_mode, workers)

    rows = []
    for split in ("overall", LinkClass.ENCLOSING.value, LinkClass.BRIDGING.value):
        for pattern in ("all",) + tuple(patterns):
            chunks = [_select(per_seed[s], split, pattern) for s in seeds]
            if not all(chunks):
                continue
            ms = [metrics(c) for c in chunks]
            avg = {k: float(np.mean([m[k] for m in ms])) for k in ms[0]}
            rows.append(ReportRow(split, pattern, avg["MRR"], avg["Hits@1"], avg["Hits@5"],
                                  avg["Hits@10"], len(chunks[0]), len(seeds)))
    return Report(rows, per_seed)


def quick_mrr(model, triples, known, patterns=("head", "tail")) -> float:
    n_ent, n_rel = model.graph.n_entities, model.n_relations
    queries = [q for t in triples for q in queries_for(t, n_ent, n_rel, None, patterns)]
    return mrr(rank_all(model, queries, known))
