"""Subgraph extraction, double-radius labeling and the relational GNN scorer.

For a target link the subgraph is the union of the two endpoints' t-hop balls
(undirected view, target edge removed). For a bridging link this is two
disjoint pieces. Each node is labelled with its distance to either endpoint,
measured while the other endpoint is deleted; distances beyond ``t`` or
unreachable nodes carry the sentinel -1, which one-hot encodes to zeros.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import numeric as nm
from .kg import KnowledgeGraph

UNREACHED = -1


@dataclass(frozen=True)
class LabeledSubgraph:
    nodes: np.ndarray               # entity ids; local index = position
    edges: np.ndarray               # (m, 3) local (head, rel, tail)
    head: int                       # local index of e_i
    tail: int                       # local index of e_j
    rel: int                        # target relation
    labels: np.ndarray | None = None  # (k, 2) int, -1 sentinel

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def to_text(self, vocab=None) -> str:
        """Edge list plus a node table carrying the labels (diagnostic export)."""
        ents = vocab.entity_names() if vocab is not None else None
        rels = vocab.relation_names() if vocab is not None else None

        def ename(local):
            e = int(self.nodes[local])
            return ents[e] if ents else str(e)

        lines = ["# nodes: local\tentity\td_head\td_tail"]
        for i in range(self.n_nodes):
            lab = self.labels[i] if self.labels is not None else ("?", "?")
            role = " (head)" if i == self.head else " (tail)" if i == self.tail else ""
            lines.append(f"{i}\t{ename(i)}\t{lab[0]}\t{lab[1]}{role}")
        lines.append("# edges: head\trelation\ttail\tlabel_head\tlabel_tail")
        for h, r, t in self.edges.tolist():
            lh = tuple(self.labels[h]) if self.labels is not None else "?"
            lt = tuple(self.labels[t]) if self.labels is not None else "?"
            lines.append(f"{ename(h)}\t{rels[r] if rels else r}\t{ename(t)}\t{lh}\t{lt}")
        return "\n".join(lines)


def _ball(g: KnowledgeGraph, src: int, t: int, cap: int | None,
          blocked: tuple[int, int] | None) -> list[int]:
    """Nodes within ``t`` undirected hops of ``src`` in BFS (nearest-first) order."""
    dist = {src: 0}
    order = [src]
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if dist[u] == t:
            continue
        skip = None
        if blocked is not None and u in blocked:
            skip = blocked[1] if u == blocked[0] else blocked[0]
        for v in g.neighbors(u):
            if v in dist or v == skip:
                continue
            if cap is not None and len(order) >= cap:
                return order
            dist[v] = dist[u] + 1
            order.append(v)
            queue.append(v)
    return order


def extract_subgraph(g: KnowledgeGraph, ei: int, ej: int, rk: int, t: int,
                     node_cap: int | None = 500) -> LabeledSubgraph:
    """Union of the endpoints' t-hop balls with induced edges, target edge removed.

    ``ei == ej`` (a self-loop candidate) yields the single ball around that
    entity with both endpoint indices pointing at it.
    """
    if t < 1:
        raise ValueError("hop budget t must be >= 1")
    for e in (ei, ej):
        if not 0 <= e < g.n_entities:
            raise KeyError(f"entity {e} not in graph")
    target = (ei, rk, ej)
    blocked = None
    if target in g and g.pair_multiplicity(ei, ej) == 1:
        blocked = (ei, ej)
    members = dict.fromkeys(_ball(g, ei, t, node_cap, blocked))
    members.update(dict.fromkeys(_ball(g, ej, t, node_cap, blocked)))
    rest = sorted(set(members) - {ei, ej})
    nodes = [ei] + ([ej] if ej != ei else []) + rest
    local = {e: i for i, e in enumerate(nodes)}
    edges = []
    for u in nodes:
        lu = local[u]
        for r, v in g.out_adj[u]:
            lv = local.get(v)
            if lv is None or (u, r, v) == target:
                continue
            edges.append((lu, r, lv))
    return LabeledSubgraph(np.asarray(nodes, dtype=np.int64),
                           np.asarray(edges, dtype=np.int64).reshape(-1, 3),
                           0, local[ej], rk)


def _local_adjacency(sg: LabeledSubgraph) -> list[set[int]]:
    adj: list[set[int]] = [set() for _ in range(sg.n_nodes)]
    for h, _, t in sg.edges.tolist():
        adj[h].add(t)
        adj[t].add(h)
    return adj


def _bfs_avoiding(adj: list[set[int]], src: int, removed: int | None) -> np.ndarray:
    dist = np.full(len(adj), UNREACHED, dtype=np.int64)
    dist[src] = 0
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v == removed or dist[v] != UNREACHED:
                continue
            dist[v] = dist[u] + 1
            queue.append(v)
    return dist


def label_nodes(sg: LabeledSubgraph, t: int, improved: bool = True) -> LabeledSubgraph:
    """Attach (d_head, d_tail) labels.

    With ``improved=False`` the classic rule applies instead: every node with
    either distance beyond ``t`` (or unreachable) is pruned together with its
    edges, endpoints excepted.
    """
    adj = _local_adjacency(sg)
    if sg.head == sg.tail:
        d = _bfs_avoiding(adj, sg.head, None)
        d_i = d_j = d
    else:
        d_i = _bfs_avoiding(adj, sg.head, sg.tail)
        d_j = _bfs_avoiding(adj, sg.tail, sg.head)
    labels = np.stack([d_i, d_j], axis=1)
    labels[labels > t] = UNREACHED
    if sg.head == sg.tail:
        labels[sg.head] = (0, 0)
    else:
        labels[sg.head] = (0, 1)
        labels[sg.tail] = (1, 0)
    if improved:
        return replace(sg, labels=labels)

    keep = (labels != UNREACHED).all(axis=1)
    keep[[sg.head, sg.tail]] = True
    new_index = np.cumsum(keep) - 1
    edges = sg.edges
    if len(edges):
        ok = keep[edges[:, 0]] & keep[edges[:, 2]]
        edges = edges[ok].copy()
        edges[:, 0] = new_index[edges[:, 0]]
        edges[:, 2] = new_index[edges[:, 2]]
    return LabeledSubgraph(sg.nodes[keep], edges.reshape(-1, 3), int(new_index[sg.head]),
                           int(new_index[sg.tail]), sg.rel, labels[keep])


def encode_labels(sg: LabeledSubgraph, t: int) -> np.ndarray:
    """Concatenated one-hot blocks over {0..t}; the -1 sentinel is an all-zero block."""
    if sg.labels is None:
        raise ValueError("subgraph has no labels")
    lab = np.asarray(sg.labels)
    if lab.size and (lab.min() < UNREACHED or lab.max() > t):
        raise ValueError(f"label out of range for t={t}")
    feats = np.zeros((len(lab), 2 * (t + 1)))
    rows = np.arange(len(lab))
    for block in (0, 1):
        hit = lab[:, block] != UNREACHED
        feats[rows[hit], block * (t + 1) + lab[hit, block]] = 1.0
    return feats


@dataclass
class GraphBatch:
    """Disjoint union of labelled subgraphs, ready for message passing."""

    features: np.ndarray     # (N, 2(t+1))
    node_graph: np.ndarray   # (N,) graph index of each node
    heads: np.ndarray        # (B,) global node index of each e_i
    tails: np.ndarray        # (B,) global node index of each e_j
    rels: np.ndarray         # (B,) target relation per graph
    edges: np.ndarray        # (M, 3) global (head, rel, tail)
    edge_graph: np.ndarray   # (M,)

    @property
    def n_graphs(self) -> int:
        return len(self.heads)

    @property
    def n_nodes(self) -> int:
        return len(self.node_graph)


def batch_subgraphs(subgraphs: Sequence[LabeledSubgraph], t: int) -> GraphBatch:
    feats, node_graph, edges, edge_graph = [], [], [], []
    heads, tails, rels = [], [], []
    offset = 0
    for b, sg in enumerate(subgraphs):
        feats.append(encode_labels(sg, t))
        node_graph.append(np.full(sg.n_nodes, b, dtype=np.int64))
        if len(sg.edges):
            e = sg.edges.copy()
            e[:, [0, 2]] += offset
            edges.append(e)
            edge_graph.append(np.full(len(e), b, dtype=np.int64))
        heads.append(sg.head + offset)
        tails.append(sg.tail + offset)
        rels.append(sg.rel)
        offset += sg.n_nodes
    width = 2 * (t + 1)
    return GraphBatch(
        np.concatenate(feats) if feats else np.zeros((0, width)),
        np.concatenate(node_graph) if node_graph else np.zeros(0, dtype=np.int64),
        np.asarray(heads, dtype=np.int64), np.asarray(tails, dtype=np.int64),
        np.asarray(rels, dtype=np.int64),
        np.concatenate(edges) if edges else np.zeros((0, 3), dtype=np.int64),
        np.concatenate(edge_graph) if edge_graph else np.zeros(0, dtype=np.int64),
    )


def gnn_param_shapes(n_relations: int, t: int, dim: int, n_layers: int) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {
        "att_edge": (2 * n_relations, dim),
        "att_target": (n_relations, dim),
    }
    d_in = 2 * (t + 1)
    for layer in range(n_layers):
        shapes[f"gnn.{layer}.W_rel"] = (2 * n_relations, d_in, dim)
        shapes[f"gnn.{layer}.W_self"] = (d_in, dim)
        shapes[f"gnn.{layer}.att"] = (dim, dim)
        d_in = dim
    shapes["r_tpo"] = (n_relations, dim)
    shapes["W"] = (4 * dim, 1)
    return shapes


def gnn_forward(batch: GraphBatch, params, n_layers: int, *, beta: float = 0.0,
                training: bool = False, rng: np.random.Generator | None = None):
    """Relational message passing with target-conditioned edge attention.

    Each triple edge sends its head->tail message through the forward
    transform of its relation and the tail->head message through the inverse
    transform. A message is scaled by ``sigmoid(a_edge^T A a_target)`` where
    ``a_edge`` embeds the (directed) edge relation and ``a_target`` the
    target relation of the subgraph, aggregated by mean over incoming
    messages, then added to the self transform and passed through ReLU.
    In training mode every triple edge is dropped with probability ``beta``.

    Returns per-node embeddings of the last layer and the per-graph mean.
    """
    n_rel = params["att_target"].shape[0]
    edges, edge_graph = batch.edges, batch.edge_graph
    if training and beta > 0 and len(edges):
        if rng is None:
            raise ValueError("edge dropout needs an rng")
        keep = rng.random(len(edges)) >= beta
        edges, edge_graph = edges[keep], edge_graph[keep]
    src = np.concatenate([edges[:, 0], edges[:, 2]])
    dst = np.concatenate([edges[:, 2], edges[:, 0]])
    rel = np.concatenate([edges[:, 1], edges[:, 1] + n_rel])
    target = np.tile(batch.rels[edge_graph], 2)
    att_index = rel * n_rel + target
    in_deg = np.bincount(dst, minlength=batch.n_nodes).astype(float)
    inv_deg = (1.0 / np.maximum(in_deg, 1.0))[:, None]

    h = nm.Tensor(batch.features)
    for layer in range(n_layers):
        W_rel = params[f"gnn.{layer}.W_rel"]
        W_self = params[f"gnn.{layer}.W_self"]
        if h.shape[1] != W_self.shape[0]:
            raise ValueError(f"layer {layer}: input width {h.shape[1]} != {W_self.shape[0]}")
        out = nm.matmul(h, W_self)
        if len(src):
            logits = nm.matmul(nm.matmul(params["att_edge"], params[f"gnn.{layer}.att"]),
                               nm.transpose(params["att_target"]))
            alpha = nm.take(nm.reshape(nm.sigmoid(logits), (-1, 1)), att_index)
            msgs = nm.mul(nm.relation_transform(h, W_rel, src, rel), alpha)
            out = nm.add(out, nm.mul(nm.segment_sum(msgs, dst, batch.n_nodes), inv_deg))
        h = nm.relu(out)
    h_graph = nm.segment_mean(h, batch.node_graph, batch.n_graphs)
    return h, h_graph


def topological_score(h_graph, h_head, h_tail, rels, params) -> nm.Tensor:
    """``[h_G | h_i | h_j | r_tpo] @ W`` for each row -> shape (B,)."""
    r = nm.take(params["r_tpo"], np.atleast_1d(rels))
    z = nm.concat([h_graph, h_head, h_tail, r], axis=1)
    if z.shape[1] != params["W"].shape[0]:
        raise ValueError(f"topological_score: width {z.shape[1]} != {params['W'].shape[0]}")
    return nm.reshape(nm.matmul(z, params["W"]), (-1,))


def score_subgraphs(subgraphs: Sequence[LabeledSubgraph], params, t: int, n_layers: int, *,
                    beta: float = 0.0, training: bool = False,
                    rng: np.random.Generator | None = None) -> nm.Tensor:
    batch = batch_subgraphs(subgraphs, t)
    h, h_graph = gnn_forward(batch, params, n_layers, beta=beta, training=training, rng=rng)
    return topological_score(h_graph, nm.take(h, batch.heads), nm.take(h, batch.tails),
                             batch.rels, params)
