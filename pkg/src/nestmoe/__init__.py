"""Token-difficulty-routed nested-expert adaptation of a dense LM."""

from .adapt import AdaptConfig, adapt, adapt_forward, attach_nested, build_family, combined_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import Corpus, ingest_corpus, synthesize_corpus
from .errors import CheckpointError, ConfigError, ContractError, ShapeError
from .labels import derive_labels, label_distribution, similarity, similarity_matrix
from .model import ModelConfig, TransformerLm, forward_dense, lm_loss, pretrain
from .nested import (
    NestedMlp,
    all_expert_outputs,
    expert_forward,
    expert_widths,
    importance_scores,
    reorder_mlp,
)
from .optim import AdamW
from .router import Router, predict_expert, router_forward, router_loss, router_param_count
from .tensor import Graph, Tensor

__version__ = "0.1.0"
