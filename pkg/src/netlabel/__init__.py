"""netlabel: joint binary labeling of photo networks from social metadata.

Items are nodes of a graph whose edges come from shared relational metadata
(tags, groups, collections, galleries, locations, uploaders, contacts). A
category model scores the whole labeling at once; with nonnegative edge
parameters the exact argmax is a single s-t min cut, and parameters are
trained by constraint generation under the balanced error rate.
"""

from .data import Dataset, PhotoRecord, UserRecord, load_dataset, save_dataset
from .evaluation import average_precision, balanced_error_score, weight_importance
from .learning import (
    TrainConfig,
    ber_loss,
    train_category,
    train_flat,
)
from .model import (
    CategoryModel,
    InstanceGraph,
    joint_score,
    map_infer,
    map_infer_augmented,
)
from .synthetic import SyntheticSpec, generate_synthetic

__all__ = [
    "Dataset",
    "PhotoRecord",
    "UserRecord",
    "load_dataset",
    "save_dataset",
    "average_precision",
    "balanced_error_score",
    "weight_importance",
    "TrainConfig",
    "ber_loss",
    "train_category",
    "train_flat",
    "CategoryModel",
    "InstanceGraph",
    "joint_score",
    "map_infer",
    "map_infer_augmented",
    "SyntheticSpec",
    "generate_synthetic",
]

__version__ = "0.1.0"
