"""Interpretable prototype-attention classification head.

Prototypes and input embeddings are treated as graph nodes; multi-head
sigmoid attention constructs weighted edges between them, and a single linear
layer classifies the concatenated per-head prototype mixtures. Decisions
decompose exactly into per-edge contributions, so every prediction can be
explained by its activated prototypes and their attention weights.
"""

from .dataio import EmbeddingDataset, SyntheticSpec, gen_synthetic, read_gape, split, write_gape
from .errors import DataFormatError, NumericalError
from .interpret import (EmbeddingMap2D, ExplanationReport, ProjectionResult,
                        distinguishness, explain, orthogonality,
                        project_prototypes, tsne_embed)
from .model import (ForwardTrace, HeadTrace, ModelConfig, ModelParams, forward,
                    forward_batch, head_forward, init_params, load_checkpoint,
                    predict, predict_batch, save_checkpoint)
from .training import (AdamState, GradientSet, LossBreakdown, LossWeights,
                       TrainConfig, adam_step, backward, composite_loss,
                       finite_diff_check, loss_accuracy, loss_diversity,
                       loss_proximity, train)

__version__ = "0.1.0"

__all__ = [
    "EmbeddingDataset", "SyntheticSpec", "gen_synthetic", "read_gape", "split",
    "write_gape", "DataFormatError", "NumericalError", "EmbeddingMap2D",
    "ExplanationReport", "ProjectionResult", "distinguishness", "explain",
    "orthogonality", "project_prototypes", "tsne_embed", "ForwardTrace",
    "HeadTrace", "ModelConfig", "ModelParams", "forward", "forward_batch",
    "head_forward", "init_params", "load_checkpoint", "predict",
    "predict_batch", "save_checkpoint", "AdamState", "GradientSet",
    "LossBreakdown", "LossWeights", "TrainConfig", "adam_step", "backward",
    "composite_loss", "finite_diff_check", "loss_accuracy", "loss_diversity",
    "loss_proximity", "train",
]
