"""Arbitrary-ratio feature compression.

A causal transformer turns a D-dim feature into T generated tokens whose every
token-aligned prefix is itself a usable code, so one trained model serves any
compression ratio on the grid j/T.
"""

from .arc import ArcConfig, ArcModel, arc_forward_loss, arc_generate
from .decoderpool import DecoderPool, reconstruct, reconstruction_losses, route
from .ergc import build_graph, ergc_loss, relation_score
from .featureio import FeatureDataset, SynthConfig, generate_synthetic, split_pairs
from .mos import MosConfig, MosModel, make_solutions, mos_forward_loss, mos_refine
from .schedule import BetaSchedule, alpha_at, sample_batch_ratios, sample_ratio
from .tokenizer import detokenize, ratio_to_token_count, tokenize, truncate
from .trainer import Checkpoint, TrainConfig, compress, load_checkpoint, save_checkpoint, train_arc, train_mos

__version__ = "0.1.0"

__all__ = [
    "ArcConfig", "ArcModel", "BetaSchedule", "Checkpoint", "DecoderPool", "FeatureDataset", "MosConfig",
    "MosModel", "SynthConfig", "TrainConfig", "alpha_at", "arc_forward_loss", "arc_generate", "build_graph",
    "compress", "detokenize", "ergc_loss", "generate_synthetic", "load_checkpoint", "make_solutions",
    "mos_forward_loss", "mos_refine", "ratio_to_token_count", "reconstruct", "reconstruction_losses",
    "relation_score", "route", "sample_batch_ratios", "sample_ratio", "save_checkpoint", "split_pairs",
    "tokenize", "train_arc", "train_mos", "truncate",
]
