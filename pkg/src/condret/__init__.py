"""Conditional user-to-item retrieval toolkit.

Train a two-tower model whose user tower can consume a topic condition,
index item embeddings for (approximate) nearest-neighbor serving with
optional streaming filters, and compare against unconditioned and
popularity baselines.
"""

__version__ = "0.1.0"

from .ann.graph import AnnConfig
from .data import Dataset, GenConfig, generate_synthetic, load_dataset, save_dataset
from .model import ModelParams, TowerConfig, load_checkpoint, save_checkpoint, score
from .retrieval import (
    ItemIndex,
    RetrievalResult,
    build_ann,
    build_index,
    exact_topk,
    load_index,
    popularity_index_retrieve,
    postfilter_oracle,
    save_index,
    streaming_filtered_search,
)
from .train import TrainConfig, TrainReport, grad_check, train

__all__ = [
    "AnnConfig",
    "Dataset",
    "GenConfig",
    "ItemIndex",
    "ModelParams",
    "RetrievalResult",
    "TowerConfig",
    "TrainConfig",
    "TrainReport",
    "build_ann",
    "build_index",
    "exact_topk",
    "generate_synthetic",
    "grad_check",
    "load_checkpoint",
    "load_dataset",
    "load_index",
    "popularity_index_retrieve",
    "postfilter_oracle",
    "save_checkpoint",
    "save_dataset",
    "save_index",
    "score",
    "streaming_filtered_search",
    "train",
]
