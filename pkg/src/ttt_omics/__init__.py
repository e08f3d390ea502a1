"""Multimodal single-cell fusion with test-time-training sequence layers.

A numpy library that embeds genome-ordered gene/protein tokens, pretrains
a masked autoencoder built from TTT blocks (sequence layers whose hidden
state is a fast weight updated by per-token gradient steps), fuses the
two modalities, and evaluates the resulting cell embeddings with a
kNN-graph / Leiden / ten-metric pipeline.
"""

from .autodiff import Tape, TensorNode, backward, finite_difference_gradient
from .cluster import (KnnGraph, MetricReport, Partition, build_knn,
                      geometry_metrics, information_metrics, leiden_cluster,
                      modularity, pair_counting_metrics)
from .data import (ExpressionMatrix, clr_normalize, generate_synthetic,
                   load_matrix, rna_normalize, select_hvg)
from .embedding import (FeatureOrdering, GeneOrderTable, MaskPlan, TokenSequence,
                        apply_mask, build_tokens, load_gene_order, make_mask_plan,
                        sort_features, sort_proteins)
from .errors import (ConfigError, ContractError, DimensionError, ParseError,
                     TttOmicsError)
from .model import (FusionModel, FusionOutputs, ModelConfig, cell_representation,
                    decode_modality, encode_modality, fuse_with_residual,
                    fusion_ttt, fusion_variant)
from .training import (LabelSet, PairedDataset, StageConfig, classification_head,
                       loss_classification, loss_pretrain, optimizer_step,
                       run_stage, split_labels)
from .ttt import (TTTBlockParams, TTTLayerParams, TTTState, forward_sequence,
                  inner_loss, state_update, ttt_block_forward)

__version__ = "0.1.0"

__all__ = [
    "Tape", "TensorNode", "backward", "finite_difference_gradient",
    "KnnGraph", "MetricReport", "Partition", "build_knn", "geometry_metrics",
    "information_metrics", "leiden_cluster", "modularity", "pair_counting_metrics",
    "ExpressionMatrix", "clr_normalize", "generate_synthetic", "load_matrix",
    "rna_normalize", "select_hvg",
    "FeatureOrdering", "GeneOrderTable", "MaskPlan", "TokenSequence", "apply_mask",
    "build_tokens", "load_gene_order", "make_mask_plan", "sort_features", "sort_proteins",
    "ConfigError", "ContractError", "DimensionError", "ParseError", "TttOmicsError",
    "FusionModel", "FusionOutputs", "ModelConfig", "cell_representation",
    "decode_modality", "encode_modality", "fuse_with_residual", "fusion_ttt",
    "fusion_variant",
    "LabelSet", "PairedDataset", "StageConfig", "classification_head",
    "loss_classification", "loss_pretrain", "optimizer_step", "run_stage", "split_labels",
    "TTTBlockParams", "TTTLayerParams", "TTTState", "forward_sequence", "inner_loss",
    "state_update", "ttt_block_forward",
]
