"""Representation erasure for interpreting neural text models."""

from .autodiff import ContractError, DimensionError, Tensor, Tape, grad_check
from .data import Dataset, Example, SyntheticSpec, generate, split
from .embeddings import ConfigError, EmbeddingTable, ParseError, Vocabulary
from .erasure import (
    ErasureSpec,
    ImportanceReport,
    concentration,
    dimension_importance,
    importance,
    layer_importance,
    signed_log,
    word_type_ranking,
)
from .models import ModelConfig, TrainedModel, evaluate, load, save, train

__version__ = "0.1.0"
