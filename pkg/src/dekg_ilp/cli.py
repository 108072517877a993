"""Command-line entry point: ``dekg-ilp <command> [flags]``.

Every command prints its resolved settings first, writes its outputs
atomically and exits non-zero with a per-class code on failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import dataclass


from . import numeric as nm
from .config import ConfigError, TrainConfig, parse_overrides, resolve_config
from .evaluation import PATTERNS, TIE_MODES, evaluate
from .kg import (
    RATIOS, DuplicateTripleError, InsufficientLinksError, KnowledgeGraph, LinkClass,
    TripleFormatError, UnknownRelationError, Vocab, build_eval_set, classify_link, load_links,
    load_triples, write_manifest,
)
from .model import DekgIlp
from .training import NegativeSamplingError, TrainingDivergedError, train

log = logging.getLogger("dekg_ilp")

EXIT_OK = 0
EXIT_USAGE = 2          # argparse's own code for bad flags
EXIT_MISSING_FILE = 3
EXIT_CONFIG = 4
EXIT_DATA = 5
EXIT_INSUFFICIENT = 6
EXIT_DIVERGED = 7
EXIT_CHECKPOINT = 8
EXIT_IO = 9

# checked in order, so subclasses come before their bases
ERROR_CODES: list[tuple[type, int]] = [
    (FileNotFoundError, EXIT_MISSING_FILE),
    (ConfigError, EXIT_CONFIG),
    (nm.CheckpointError, EXIT_CHECKPOINT),
    (InsufficientLinksError, EXIT_INSUFFICIENT),
    (TrainingDivergedError, EXIT_DIVERGED),
    (FloatingPointError, EXIT_DIVERGED),
    (TripleFormatError, EXIT_DATA),
    (DuplicateTripleError, EXIT_DATA),
    (UnknownRelationError, EXIT_DATA),
    (NegativeSamplingError, EXIT_DATA),
    (KeyError, EXIT_DATA),
    (ValueError, EXIT_DATA),
    (OSError, EXIT_IO),
]

ABLATIONS = {
    "full": {},
    "-R": {"disable_clrm_score": True},
    "-C": {"disable_contrastive": True},
    "-N": {"disable_improved_labeling": True},
}


class CliError(ValueError):
    pass


# --- small helpers -----------------------------------------------------------------

def _atomic_write(path, data: str | bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not os.path.isfile(p):
            raise FileNotFoundError(f"no such file: {p}")


def _print_resolved(args, cfg: TrainConfig | None = None) -> None:
    lines = ["# resolved settings"]
    for k, v in sorted(vars(args).items()):
        if k not in ("func", "set"):
            lines.append(f"{k} = {v}")
    if cfg is not None:
        lines.append("# resolved config")
        lines.append(cfg.dumps().rstrip("\n"))
    print("\n".join(lines), flush=True)


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config_from_args(args) -> TrainConfig:
    cfg = resolve_config(getattr(args, "config", None))
    explicit = parse_overrides(_overrides(getattr(args, "set", None)))
    if getattr(args, "seed", None) is not None:
        explicit["seed"] = args.seed
    return cfg.replace(**explicit) if explicit else cfg


@dataclass
class Dataset:
    vocab: Vocab
    train: KnowledgeGraph
    dekg: KnowledgeGraph | None

    @property
    def inference_graph(self) -> KnowledgeGraph:
        return self.train if self.dekg is None else self.train.union(self.dekg)


def _load_dataset(train_path, dekg_path=None, relations: list[str] | None = None) -> Dataset:
    _require(train_path, dekg_path)
    if relations is not None:
        vocab = Vocab(relations={r: i for i, r in enumerate(relations)})
        g_train = load_triples(train_path, vocab, emerging=False)
    else:
        g_train = load_triples(train_path)
        vocab = g_train.vocab
    g_dekg = load_triples(dekg_path, vocab, emerging=True) if dekg_path else None
    if vocab.boundary is None:
        vocab.boundary = g_train.n_entities
    # the training graph's entity range ends at the boundary
    g_train = KnowledgeGraph(g_train.triples, vocab.boundary, vocab.n_relations, vocab)
    return Dataset(vocab, g_train, g_dekg)


def _load_model(ckpt_path) -> tuple[nm.ParameterStore, TrainConfig, list[str]]:
    _require(ckpt_path)
    store, meta = nm.load_checkpoint(ckpt_path)
    if "config" not in meta or "relations" not in meta:
        raise nm.CheckpointError(f"{ckpt_path}: checkpoint lacks an embedded config or relation vocabulary")
    try:
        cfg = TrainConfig(**meta["config"])
    except TypeError as exc:
        raise nm.CheckpointError(f"{ckpt_path}: embedded config unreadable ({exc})") from None
    return store, cfg, list(meta["relations"])


def _save_model(path, store: nm.ParameterStore, cfg: TrainConfig, vocab: Vocab) -> None:
    nm.save_checkpoint(path, store, {"config": cfg.to_dict(), "relations": vocab.relation_names()})


def _split_pools(ds: Dataset, enclosing_path, bridging_path):
    _require(enclosing_path, bridging_path)
    enc = load_links(enclosing_path, ds.vocab)
    brg = load_links(bridging_path, ds.vocab)
    for path, links, want in ((enclosing_path, enc, LinkClass.ENCLOSING),
                              (bridging_path, brg, LinkClass.BRIDGING)):
        for t in links:
            got = classify_link(ds.train, t)
            if got is not want:
                raise ValueError(f"{path}: {t} is a {got.value} link, expected {want.value}")
    return enc, brg


def _known(ds: Dataset, *pools, extra_paths=()) -> frozenset:
    known = set(ds.train.triple_set())
    if ds.dekg is not None:
        known |= ds.dekg.triple_set()
    for pool in pools:
        known |= {tuple(t) for t in pool}
    for path in extra_paths or ():
        _require(path)
        known |= {tuple(t) for t in load_links(path, ds.vocab)}
    return frozenset(known)


def _parse_triple(text: str, vocab: Vocab):
    parts = text.split("\t") if "\t" in text else text.split()
    if len(parts) != 3:
        raise CliError(f"expected 'head relation tail', got {text!r}")
    h, r, t = parts
    try:
        return vocab.entities[h], vocab.relations[r], vocab.entities[t]
    except KeyError as exc:
        raise KeyError(f"unknown token {exc.args[0]!r}") from None


# --- commands --------------------------------------------------------------------------

def cmd_build_dataset(args) -> int:
    if args.seed is None:
        args.seed = resolve_config().seed  # honours DEKG_SEED
    _print_resolved(args)
    os.makedirs(args.out, exist_ok=True)
    if args.synthetic:
        from .synthetic import make_benchmark
        paths = make_benchmark(seed=args.seed).write(args.out)
        args.train, args.dekg = paths["train"], paths["emerging"]
        args.enclosing, args.bridging = paths["enclosing"], paths["bridging"]
    missing = [f for f in ("train", "dekg", "enclosing", "bridging") if getattr(args, f) is None]
    if missing:
        raise ConfigError(f"build-dataset needs --{' --'.join(missing)} (or --synthetic)")
    ds = _load_dataset(args.train, args.dekg)
    enc, brg = _split_pools(ds, args.enclosing, args.bridging)
    es = build_eval_set(enc, brg, args.ratio, args.seed)
    es.validate(ds.vocab.boundary)
    ents, rels = ds.vocab.entity_names(), ds.vocab.relation_names()
    for name, links in (("eval_enclosing.tsv", es.enclosing), ("eval_bridging.tsv", es.bridging)):
        _atomic_write(os.path.join(args.out, name),
                      "".join(f"{ents[h]}\t{rels[r]}\t{ents[t]}\n" for h, r, t in links))
    ds.vocab.save(args.out)
    write_manifest(es, os.path.join(args.out, "manifest.txt"), boundary=ds.vocab.boundary,
                   n_entities=ds.vocab.n_entities, n_relations=ds.vocab.n_relations)
    print(f"wrote {len(es.enclosing)} enclosing + {len(es.bridging)} bridging links to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    _print_resolved(args, cfg)
    ds = _load_dataset(args.train)
    valid = load_links(args.valid, ds.vocab) if args.valid else None
    progress = (lambda row: log.info("epoch %(epoch)d  loss %(loss_total).4f", row))
    result = train(ds.train, cfg, valid=valid, progress=progress,
                   dump_path=f"{args.out}.diverged")
    _save_model(args.out, result.params, cfg, ds.vocab)
    loss_csv = args.loss_csv or f"{args.out}.loss.csv"
    tmp = f"{loss_csv}.tmp"
    result.write_loss_csv(tmp)
    os.replace(tmp, loss_csv)
    print(f"checkpoint: {args.out}\nloss log: {loss_csv}")
    return EXIT_OK


def _eval_sets(enc, brg, ratio, seeds):
    # one re-mix of the link pools per evaluation seed
    return {s: build_eval_set(enc, brg, ratio, s) for s in seeds}


def cmd_evaluate(args) -> int:
    ckpts = args.ckpt
    loaded = [_load_model(p) for p in ckpts]
    _, cfg0, relations = loaded[0]
    if any(rel != relations for _, _, rel in loaded):
        raise nm.CheckpointError("checkpoints disagree on the relation vocabulary")
    _print_resolved(args, cfg0)
    seeds = list(range(args.seed, args.seed + args.seeds))
    if len(ckpts) not in (1, len(seeds)):
        raise ConfigError(f"{len(ckpts)} checkpoints for {len(seeds)} seeds; pass one or one per seed")
    ds = _load_dataset(args.train, args.dekg, relations)
    enc, brg = _split_pools(ds, args.enclosing, args.bridging)
    graph = ds.inference_graph
    models = {s: DekgIlp(store, cfg, graph)
              for s, (store, cfg, _) in zip(seeds, loaded * len(seeds) if len(loaded) == 1 else loaded)}
    report = evaluate(models, _eval_sets(enc, brg, args.ratio, seeds),
                      _known(ds, enc, brg, extra_paths=args.known), seeds,
                      patterns=tuple(args.patterns), tie_mode=args.tie_mode, workers=args.workers)
    print(report.pretty())
    _atomic_write(args.out, report.to_csv())
    print(f"report: {args.out}")
    return EXIT_OK


ABLATION_COLUMNS = ["variant"] + [f"{split}_{m}" for split in ("overall", "enclosing", "bridging")
                                  for m in ("MRR", "Hits@1", "Hits@5", "Hits@10")]


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    _print_resolved(args, cfg)
    ds = _load_dataset(args.train, args.dekg)
    enc, brg = _split_pools(ds, args.enclosing, args.bridging)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    eval_sets = _eval_sets(enc, brg, args.ratio, seeds)
    known = _known(ds, enc, brg, extra_paths=args.known)
    graph = ds.inference_graph
    rows = []
    for variant, flags in ABLATIONS.items():
        models = {}
        for s in seeds:
            log.info("training %s seed %d", variant, s)
            model = train(ds.train, cfg.replace(seed=s, **flags)).model
            model.set_graph(graph)
            models[s] = model
        report = evaluate(models, eval_sets, known, seeds, tie_mode=args.tie_mode, workers=args.workers)
        row = [variant]
        for split in ("overall", "enclosing", "bridging"):
            r = report.get(split)
            row += [f"{r.MRR:.6f}", f"{r.hits1:.6f}", f"{r.hits5:.6f}", f"{r.hits10:.6f}"]
        rows.append(row)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    w.writerows(rows)
    print(buf.getvalue(), end="")
    _atomic_write(args.out, buf.getvalue())
    print(f"ablation table: {args.out}")
    return EXIT_OK


def _model_for_inspection(args):
    if args.ckpt:
        store, cfg, relations = _load_model(args.ckpt)
        ds = _load_dataset(args.train, args.dekg, relations)
        return ds, DekgIlp(store, cfg, ds.inference_graph), cfg
    cfg = _config_from_args(args)
    ds = _load_dataset(args.train, args.dekg)
    return ds, DekgIlp.build(ds.train, cfg), cfg


def cmd_inspect_subgraph(args) -> int:
    ds, model, cfg = _model_for_inspection(args)
    _print_resolved(args, cfg)
    model.set_graph(ds.inference_graph)
    h, r, t = _parse_triple(args.triple, ds.vocab)
    sg = model.subgraph(h, r, t)
    text = sg.to_text(ds.vocab) + "\n"
    if args.out:
        _atomic_write(args.out, text)
    print(text, end="")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    store, cfg, relations = _load_model(args.ckpt)
    _print_resolved(args, cfg)
    ds = _load_dataset(args.train, args.dekg, relations)
    model = DekgIlp(store, cfg, ds.inference_graph)
    _require(args.links)
    links = load_links(args.links, ds.vocab)
    ents, rels = ds.vocab.entity_names(), ds.vocab.relation_names()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["head", "relation", "tail", "vector"] + [f"x{i}" for i in range(cfg.d)])
    for h, r, t in links:
        sem = model.entity_embeddings([h, t]).data
        tpo = model.topological_embeddings((h, r, t))
        key = [ents[h], rels[r], ents[t]]
        for name, vec in (("semantic_head", sem[0]), ("semantic_tail", sem[1]),
                          ("topological_head", tpo["head"]), ("topological_tail", tpo["tail"]),
                          ("topological_graph", tpo["graph"])):
            w.writerow(key + [name] + [repr(float(x)) for x in vec])
    _atomic_write(args.out, buf.getvalue())
    print(f"embeddings for {len(links)} links: {args.out}")
    return EXIT_OK


# --- argument parsing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dekg-ilp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, *, config=True, workers=True):
        if config:
            sp.add_argument("--config", help="flat 'key = value' config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override one config field (repeatable)")
        sp.add_argument("--seed", type=int, default=None, help="base seed for every RNG stream")
        if workers:
            sp.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                            help="worker threads for ranking (default: available cores)")

    sp = sub.add_parser("build-dataset", help="mix enclosing/bridging pools into an evaluation set")
    sp.add_argument("--train")
    sp.add_argument("--dekg", help="observed triples of the emerging graph")
    sp.add_argument("--enclosing", help="pool of enclosing links")
    sp.add_argument("--bridging", help="pool of bridging links")
    sp.add_argument("--ratio", choices=sorted(RATIOS), default="EQ")
    sp.add_argument("--synthetic", action="store_true",
                    help="generate the synthetic two-component benchmark into --out first")
    sp.add_argument("--out", required=True, help="output directory")
    common(sp, config=False, workers=False)
    sp.set_defaults(func=cmd_build_dataset)

    sp = sub.add_parser("train", help="train on an original graph and write a checkpoint")
    sp.add_argument("--train", required=True)
    sp.add_argument("--valid", help="links for optional early stopping (patience > 0)")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--loss-csv", help="loss log path (default: <out>.loss.csv)")
    common(sp, workers=False)
    sp.set_defaults(func=cmd_train)

    def eval_inputs(sp):
        sp.add_argument("--train", required=True)
        sp.add_argument("--dekg", required=True)
        sp.add_argument("--enclosing", required=True)
        sp.add_argument("--bridging", required=True)
        sp.add_argument("--ratio", choices=sorted(RATIOS), default="EQ")
        sp.add_argument("--seeds", type=int, default=5, help="number of evaluation seeds")
        sp.add_argument("--known", action="append", help="extra known-triple file for filtering")
        sp.add_argument("--tie-mode", choices=TIE_MODES, default="average")
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("evaluate", help="filtered ranking of enclosing and bridging links")
    sp.add_argument("--ckpt", required=True, action="append",
                    help="checkpoint (repeat once per seed to average distinct models)")
    eval_inputs(sp)
    sp.add_argument("--patterns", nargs="+", choices=PATTERNS, default=list(PATTERNS))
    common(sp, config=False)
    sp.set_defaults(func=cmd_evaluate, seed=0)

    sp = sub.add_parser("ablate", help="train and evaluate full, -R, -C and -N variants")
    eval_inputs(sp)
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    def inspect_inputs(sp):
        sp.add_argument("--train", required=True)
        sp.add_argument("--dekg")

    sp = sub.add_parser("inspect-subgraph", help="print the labelled subgraph of one link")
    inspect_inputs(sp)
    sp.add_argument("--ckpt", help="take t, node cap and labeling mode from a checkpoint")
    sp.add_argument("--triple", required=True, help="'head relation tail' tokens")
    sp.add_argument("--out", help="also write the text to this file")
    common(sp, workers=False)
    sp.set_defaults(func=cmd_inspect_subgraph)

    sp = sub.add_parser("export-embeddings", help="dump semantic and topological embeddings as CSV")
    inspect_inputs(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--links", required=True, help="TSV of links to export")
    sp.add_argument("--out", required=True)
    common(sp, config=False, workers=False)
    sp.set_defaults(func=cmd_export_embeddings)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        for cls, code in ERROR_CODES:
            if isinstance(exc, cls):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise


def main() -> None:
    sys.exit(run())
