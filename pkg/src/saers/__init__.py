"""SAERS: semantic-attribute explainable recommender engine.

Items are projected into a semantic-attribute space by localizing each
attribute on the product image (Grad-AAM + ROI pooling) and transferring the
pooled features through per-attribute matrices.  User preferences over
attributes are learned with an attention MLP under BPR pairwise ranking, and
every recommendation can be explained with ranked attribute weights, class
labels and bounding boxes.
"""

from saers.errors import CheckpointError, DataError, SaersError, TensorFormatError
from saers.tensor_store import (
    FeatureCatalog,
    InteractionDataset,
    ItemFeatures,
    SplitDataset,
    load_feature_manifest,
    load_interactions,
    read_tensor,
    split_leave_one_out,
    write_tensor,
)
from saers.model import ModelConfig, ModelParams, init_params
from saers.optimizer import TrainHyper, bpr_loss, finite_diff_check
from saers.training import TrainConfig, TrainStats, train
from saers.evaluation import EvalReport, auc, make_baseline, ndcg_at_n
from saers.explanation import Explanation, explain, write_explanation

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "DataError",
    "EvalReport",
    "Explanation",
    "FeatureCatalog",
    "InteractionDataset",
    "ItemFeatures",
    "ModelConfig",
    "ModelParams",
    "SaersError",
    "SplitDataset",
    "TensorFormatError",
    "TrainConfig",
    "TrainHyper",
    "TrainStats",
    "auc",
    "bpr_loss",
    "explain",
    "finite_diff_check",
    "init_params",
    "load_feature_manifest",
    "load_interactions",
    "make_baseline",
    "ndcg_at_n",
    "read_tensor",
    "split_leave_one_out",
    "train",
    "write_explanation",
    "write_tensor",
]
