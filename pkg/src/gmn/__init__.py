"""Pair-space metric learning for cross-domain retrieval on embedding vectors.

A small encoder maps input embeddings to instance features; a two-layer metric
network scores pair features built from two instance features. Training adds
channel-dropout perturbation and a pair-identity center loss; evaluation ranks
a gallery for each probe under feature-distance or metric-network protocols.
"""
from .data import Dataset, SyntheticSpec, generate_synthetic, load_embeddings, save_embeddings, split_probe_gallery
from .errors import GMNError
from .evaluator import EvalConfig, EvalReport, Protocol, domain_gap_diagnostic, evaluate
from .pairs import PairOp, PairSamplingScheme, pair_feature
from .trainer import TrainConfig, TrainState, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "SyntheticSpec", "generate_synthetic", "load_embeddings", "save_embeddings",
    "split_probe_gallery", "GMNError", "EvalConfig", "EvalReport", "Protocol",
    "domain_gap_diagnostic", "evaluate", "PairOp", "PairSamplingScheme", "pair_feature",
    "TrainConfig", "TrainState", "train", "__version__",
]
