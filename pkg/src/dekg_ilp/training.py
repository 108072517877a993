"""Negative sampling, loss assembly and the training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import clrm
from . import numeric as nm
from .config import TrainConfig, rng_stream
from .kg import KnowledgeGraph, Triple
from .model import DekgIlp

log = logging.getLogger(__name__)

MAX_CORRUPTION_TRIES = 100


class NegativeSamplingError(RuntimeError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


def sample_negatives(g: KnowledgeGraph, positive, k: int, rng: np.random.Generator,
                     known: frozenset | None = None) -> list[Triple]:
    """Corrupt head or tail (fair coin) with a uniform entity, avoiding known positives."""
    if g.n_entities < 2:
        raise NegativeSamplingError("need at least two entities to corrupt a triple")
    known = g.triple_set() if known is None else known
    h, r, t = (int(x) for x in positive)
    out = []
    for _ in range(k):
        for _ in range(MAX_CORRUPTION_TRIES):
            e = int(rng.integers(g.n_entities))
            cand = (e, r, t) if rng.integers(2) == 0 else (h, r, e)
            if cand != (h, r, t) and cand not in known:
                out.append(Triple(*cand))
                break
        else:
            raise NegativeSamplingError(f"no valid corruption of {positive} after {MAX_CORRUPTION_TRIES} tries")
    return out


def margin_loss(phi_pos, phi_neg, gamma_rank: float) -> nm.Tensor:
    """Elementwise ``[gamma - phi_pos + phi_neg]_+``."""
    return nm.hinge(nm.add(nm.sub(phi_neg, phi_pos), gamma_rank))


@dataclass
class Batch:
    positives: np.ndarray                   # (P, 3)
    negatives: np.ndarray                   # (P * k, 3), grouped by positive
    # contrastive count rows: anchors/pos/neg (C, n_slots) and the entity slot of each row
    anchors: np.ndarray | None = None
    pos_examples: np.ndarray | None = None
    neg_examples: np.ndarray | None = None
    pair_entity: np.ndarray | None = None   # (C,) index into `entities`
    entities: np.ndarray | None = None      # (U,) distinct endpoints of the positives

    @property
    def k(self) -> int:
        return len(self.negatives) // max(1, len(self.positives))


def contrastive_examples(model: DekgIlp, entities: np.ndarray, n_samples: int,
                         rng: np.random.Generator, theta: float):
    """Sampled (anchor, positive, negative) count rows for each entity."""
    n_slots = model.counts.shape[1]
    anchors, pos, neg, owner = [], [], [], []
    for u, e in enumerate(entities.tolist()):
        table = clrm.RelationComponentTable(
            {k: v for k, v in enumerate(model.counts[e].tolist()) if v}, e, n_slots)
        if not table.counts:
            continue
        dense = table.dense()
        for _ in range(n_samples):
            pair = clrm.sample_pair(table, rng, theta)
            anchors.append(dense)
            pos.append(pair.positive.dense())
            neg.append(pair.negative.dense())
            owner.append(u)
    return (np.asarray(anchors).reshape(-1, n_slots), np.asarray(pos).reshape(-1, n_slots),
            np.asarray(neg).reshape(-1, n_slots), np.asarray(owner, dtype=np.int64))


def make_batch(model: DekgIlp, positives: np.ndarray, cfg: TrainConfig,
               neg_rng: np.random.Generator, con_rng: np.random.Generator | None,
               known: frozenset | None = None) -> Batch:
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    negs = [n for p in positives.tolist()
            for n in sample_negatives(model.graph, p, cfg.negatives_per_positive, neg_rng, known)]
    batch = Batch(positives, np.asarray(negs, dtype=np.int64).reshape(-1, 3))
    if cfg.effective_sigma > 0 and con_rng is not None:
        ents = np.unique(positives[:, [0, 2]])
        a, p, n, owner = contrastive_examples(model, ents, cfg.contrastive_samples, con_rng, cfg.theta)
        batch.anchors, batch.pos_examples, batch.neg_examples = a, p, n
        batch.pair_entity, batch.entities = owner, ents
    return batch


@dataclass
class LossParts:
    total: nm.Tensor
    rank: float
    contrastive: float


def total_loss(batch: Batch, model: DekgIlp, cfg: TrainConfig, training: bool = True,
               dropout_rng: np.random.Generator | None = None) -> LossParts:
    """Sum of ranking hinges over (positive, negative) pairs plus sigma * sum of
    per-positive contrastive losses.

    A positive's contrastive loss is the mean hinge over the sampled pairs of
    its head and of its tail (each entity's pairs averaged first).
    """
    P, k = len(batch.positives), batch.k
    scores = model.score(np.concatenate([batch.positives, batch.negatives]), training, dropout_rng)
    phi_pos = nm.take(scores, np.repeat(np.arange(P), k))
    phi_neg = nm.take(scores, P + np.arange(P * k))
    rank = nm.reduce_sum(margin_loss(phi_pos, phi_neg, cfg.gamma_rank))
    total = rank
    con_value = 0.0
    sigma = cfg.effective_sigma
    if sigma > 0 and batch.anchors is not None and len(batch.anchors):
        F = model.params["F"]
        e_a = clrm.fuse_many(batch.anchors, F)
        e_p = clrm.fuse_many(batch.pos_examples, F)
        e_n = clrm.fuse_many(batch.neg_examples, F)
        d_pos = nm.row_norm(nm.sub(e_p, e_a))
        d_neg = nm.row_norm(nm.sub(e_n, e_a))
        per_pair = nm.hinge(nm.add(nm.sub(d_pos, d_neg), cfg.gamma_c))
        per_entity = nm.segment_mean(per_pair, batch.pair_entity, len(batch.entities))
        slot = {e: i for i, e in enumerate(batch.entities.tolist())}
        heads = [slot.get(h, -1) for h in batch.positives[:, 0].tolist()]
        tails = [slot.get(t, -1) for t in batch.positives[:, 2].tolist()]
        has_pairs = np.bincount(batch.pair_entity, minlength=len(batch.entities)) > 0
        rows, weights = [], []
        for hi, ti in zip(heads, tails):
            ends = [i for i in (hi, ti) if i >= 0 and has_pairs[i]]
            for i in ends:
                rows.append(i)
                weights.append(1.0 / len(ends))
        con = nm.reduce_sum(nm.mul(nm.take(per_entity, rows), np.asarray(weights)[:, None]))
        con_value = float(con.data)
        total = nm.add(rank, nm.mul(con, sigma))
    return LossParts(total, float(rank.data), con_value)


@dataclass
class TrainResult:
    model: DekgIlp
    history: list[dict] = field(default_factory=list)

    @property
    def params(self) -> nm.ParameterStore:
        return self.model.params

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss_total", "loss_rank", "loss_contrastive"])
            for row in self.history:
                w.writerow([row["epoch"], repr(row["loss_total"]), repr(row["loss_rank"]),
                            repr(row["loss_contrastive"])])


def _dump_state(path, model: DekgIlp, epoch: int, batch: Batch) -> None:
    nm.save_checkpoint(path, model.params, {"diverged_at_epoch": epoch,
                                            "batch_positives": batch.positives.tolist()})


def train(g_train: KnowledgeGraph, cfg: TrainConfig, *, valid=None, progress=None,
          dump_path=None) -> TrainResult:
    """Mini-batch SGD over all training triples for ``cfg.epochs`` epochs.

    ``valid`` (a list of triples) enables MRR-based early stopping when
    ``cfg.patience > 0``; the best parameters seen are restored. ``progress``
    is called with each epoch's log row.
    """
    if len(g_train) == 0:
        raise ValueError("training graph is empty")
    model = DekgIlp.build(g_train, cfg)
    shuffle_rng = rng_stream(cfg.seed, "shuffle")
    neg_rng = rng_stream(cfg.seed, "corruption")
    con_rng = rng_stream(cfg.seed, "sampling")
    drop_rng = rng_stream(cfg.seed, "dropout")
    known = g_train.triple_set()
    triples = g_train.triples
    result = TrainResult(model)
    best, best_state, stale = -np.inf, None, 0

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(triples))
        sums = {"loss_total": 0.0, "loss_rank": 0.0, "loss_contrastive": 0.0}
        for a in range(0, len(order), cfg.batch_size):
            batch = make_batch(model, triples[order[a:a + cfg.batch_size]], cfg, neg_rng,
                               con_rng if cfg.effective_sigma > 0 else None, known)
            try:
                parts = total_loss(batch, model, cfg, training=True, dropout_rng=drop_rng)
                nm.backward(parts.total)
                nm.sgd_step(model.params, cfg.lr)
            except FloatingPointError as exc:
                if dump_path is not None:
                    _dump_state(dump_path, model, epoch, batch)
                raise TrainingDivergedError(f"epoch {epoch}: {exc}") from exc
            sums["loss_total"] += float(parts.total.data)
            sums["loss_rank"] += parts.rank
            sums["loss_contrastive"] += parts.contrastive
        row = {"epoch": epoch, **sums}
        result.history.append(row)
        if progress is not None:
            progress(row)
        log.debug("epoch %d loss %.6f", epoch, sums["loss_total"])

        if cfg.patience > 0 and valid:
            from .evaluation import quick_mrr
            model.set_graph(g_train)
            score = quick_mrr(model, valid, known)
            row["valid_mrr"] = score
            if score > best:
                best, best_state, stale = score, model.params.state(), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best_state is not None:
        for name, value in best_state.items():
            model.params.set(name, value)
    return result
