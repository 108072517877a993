"""Inductive link prediction for knowledge graphs with disconnected emerging parts."""
from .config import TrainConfig
from .kg import EvalSet, KnowledgeGraph, LinkClass, Triple, Vocab, build_eval_set, classify_link, load_triples
from .model import DekgIlp
from .training import train
from .evaluation import evaluate, filtered_rank

__all__ = [
    "TrainConfig", "EvalSet", "KnowledgeGraph", "LinkClass", "Triple", "Vocab",
    "build_eval_set", "classify_link", "load_triples", "DekgIlp", "train", "evaluate",
    "filtered_rank",
]
__version__ = "0.1.0"
