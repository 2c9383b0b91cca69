"""Retrieval-grounded chain-of-thought features for recommendation models.

The pipeline: split an interaction log (data), sample training examples
and attach reasoning traces (cotstore), retrieve balanced leakage-free
neighbors per query and encode them with a small causal decoder
(incontext), fuse the resulting feature into a recommendation backbone
(backbones), and train against the combined objective (training).
"""

from __future__ import annotations

from .backbones import BACKBONES, build_backbone, collate_features
from .cotstore import (CoTRecord, CoTStore, FileCoTProvider, RetrievalConfig,
                       SyntheticCoTProvider, build_cot_records, read_store,
                       sample_subset, write_store)
from .data import (DatasetSplit, Example, Interaction, Vocab, build_splits,
                   load_interactions, log_stats, read_split_dir, render_text,
                   sample_negatives, write_split_dir)
from .errors import DataError, NumericalError
from .incontext import (ContextEncoder, ICTSequence, IctConfig, assemble,
                        cf_feature, collate, mean_pool_feature, query_payload,
                        recon_loss)
from .metrics import (MetricsReport, auc, hit_at_k, logloss, ndcg_at_k,
                      relaimpr, topk_metrics)
from .synth import SynthConfig, generate, write_interactions
from .textenc import FileEncoder, SyntheticEncoder, cosine, make_encoder
from .training import (Adam, EarlyStopper, Model, TrainConfig, TrainResult,
                       bce_with_logits, evaluate_model, run_ablation,
                       run_length_sweep, sampled_softmax, train)

__version__ = "0.1.0"

__all__ = [
    "Adam", "BACKBONES", "ContextEncoder", "CoTRecord", "CoTStore",
    "DataError", "DatasetSplit", "EarlyStopper", "Example", "FileCoTProvider",
    "FileEncoder", "ICTSequence", "IctConfig", "Interaction", "MetricsReport",
    "Model", "NumericalError", "RetrievalConfig", "SynthConfig",
    "SyntheticCoTProvider", "SyntheticEncoder", "TrainConfig", "TrainResult",
    "Vocab", "assemble", "auc", "bce_with_logits", "build_backbone",
    "build_cot_records", "build_splits", "cf_feature", "collate",
    "collate_features", "cosine", "evaluate_model", "generate", "hit_at_k",
    "load_interactions", "log_stats", "logloss", "make_encoder",
    "mean_pool_feature", "ndcg_at_k", "query_payload", "read_split_dir",
    "read_store", "recon_loss", "relaimpr", "render_text", "run_ablation",
    "run_length_sweep", "sample_negatives", "sample_subset", "sampled_softmax",
    "topk_metrics", "train", "write_interactions", "write_split_dir",
    "write_store",
]
