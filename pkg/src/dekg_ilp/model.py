"""The combined scorer: semantic (fused relation features) plus topological (GNN)."""
from __future__ import annotations

import numpy as np

from . import clrm, gsm
from . import numeric as nm
from .config import TrainConfig, rng_stream
from .kg import KnowledgeGraph


def param_shapes(n_relations: int, cfg: TrainConfig) -> dict[str, tuple]:
    n_slots = 2 * n_relations if cfg.direction_aware else n_relations
    shapes = {"F": (n_slots, cfg.d), "r_sem": (n_relations, cfg.d)}
    shapes.update(gsm.gnn_param_shapes(n_relations, cfg.t, cfg.d, cfg.L))
    return shapes


def init_params(n_relations: int, cfg: TrainConfig) -> nm.ParameterStore:
    return nm.init_uniform(nm.ParameterStore(), param_shapes(n_relations, cfg), cfg.d,
                           rng_stream(cfg.seed, "init"))


class DekgIlp:
    """Scores triples against a context graph.

    The context graph supplies the relation-component tables and the
    subgraphs: the original graph while training, the union of original and
    emerging graphs at inference. Subgraphs are cached per triple.
    """

    def __init__(self, params: nm.ParameterStore, config: TrainConfig,
                 graph: KnowledgeGraph | None = None, cache_size: int = 200_000):
        self.params = params
        self.config = config
        self.cache_size = cache_size
        self.graph = None
        if graph is not None:
            self.set_graph(graph)

    @classmethod
    def build(cls, graph: KnowledgeGraph, config: TrainConfig) -> "DekgIlp":
        return cls(init_params(graph.n_relations, config), config, graph)

    @property
    def n_relations(self) -> int:
        return self.params["r_sem"].shape[0]

    def set_graph(self, graph: KnowledgeGraph) -> None:
        if graph.n_relations != self.n_relations:
            raise ValueError(f"graph has {graph.n_relations} relations, model {self.n_relations}")
        self.graph = graph
        self.counts = clrm.count_matrix(graph, self.config.direction_aware)
        self._cache: dict[tuple[int, int, int], gsm.LabeledSubgraph] = {}

    def subgraph(self, h: int, r: int, t: int) -> gsm.LabeledSubgraph:
        key = (h, r, t)
        sg = self._cache.get(key)
        if sg is None:
            cfg = self.config
            sg = gsm.extract_subgraph(self.graph, h, t, r, cfg.t, cfg.node_cap)
            sg = gsm.label_nodes(sg, cfg.t, improved=cfg.improved_labeling)
            if len(self._cache) >= self.cache_size:
                self._cache.clear()
            self._cache[key] = sg
        return sg

    def entity_embeddings(self, entities) -> nm.Tensor:
        """Fused semantic embeddings; entities without any triple map to zero."""
        return clrm.fuse_many(self.counts[np.asarray(entities, dtype=np.int64)], self.params["F"])

    def semantic_scores(self, triples: np.ndarray) -> nm.Tensor:
        e_h = self.entity_embeddings(triples[:, 0])
        e_t = self.entity_embeddings(triples[:, 2])
        return clrm.semantic_score(e_h, triples[:, 1], e_t, self.params["r_sem"])

    def topological_scores(self, triples: np.ndarray, training: bool = False,
                           rng: np.random.Generator | None = None) -> nm.Tensor:
        sgs = [self.subgraph(h, r, t) for h, r, t in triples.tolist()]
        cfg = self.config
        return gsm.score_subgraphs(sgs, self.params, cfg.t, cfg.L, beta=cfg.beta,
                                   training=training, rng=rng)

    def score(self, triples, training: bool = False,
              rng: np.random.Generator | None = None) -> nm.Tensor:
        """Combined score per triple, shape (B,); semantic term omitted under -R."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        phi = self.topological_scores(triples, training, rng)
        if not self.config.disable_clrm_score:
            phi = nm.add(self.semantic_scores(triples), phi)
        return phi

    def predict(self, triples, chunk: int = 256) -> np.ndarray:
        """Inference scores as a plain array, evaluated in chunks."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        out = np.empty(len(triples))
        for a in range(0, len(triples), chunk):
            out[a:a + chunk] = self.score(triples[a:a + chunk]).data
        return out

    def topological_embeddings(self, triple) -> dict[str, np.ndarray]:
        """Layer-L head, tail and pooled graph embeddings for one link."""
        h, r, t = (int(x) for x in triple)
        cfg = self.config
        batch = gsm.batch_subgraphs([self.subgraph(h, r, t)], cfg.t)
        hs, hg = gsm.gnn_forward(batch, self.params, cfg.L)
        return {"head": hs.data[batch.heads[0]], "tail": hs.data[batch.tails[0]], "graph": hg.data[0]}
