"""Open-set semi-supervised shape detection sandbox.

A small two-stage detector trained with a teacher-student pipeline, a
class-keyed embedding memory pool feeding a contrastive loss, and an
uncertainty-weighted classification loss that teaches the model to emit an
explicit "unknown" class for out-of-distribution objects.
"""

from .geometry import BoundingBox, Detection, iou, iou_matrix, nms
from .labels import LabelSpace, restricted_class_set
from .losses import (
    LossWeights,
    ProposalBatch,
    compose_total_loss,
    feature_contrastive_loss,
    restricted_softmax,
    uncertainty_classification_loss,
    uncertainty_weight,
)
from .pool import EmbeddingPool, PooledEmbedding, admission_score
from .shapes import SHAPE_CLASSES, ShapeImage, augment, render_image
from .splits import SplitConfig, build_splits

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Detection",
    "EmbeddingPool",
    "LabelSpace",
    "LossWeights",
    "PooledEmbedding",
    "ProposalBatch",
    "SHAPE_CLASSES",
    "ShapeImage",
    "SplitConfig",
    "admission_score",
    "augment",
    "build_splits",
    "compose_total_loss",
    "feature_contrastive_loss",
    "iou",
    "iou_matrix",
    "nms",
    "render_image",
    "restricted_class_set",
    "restricted_softmax",
    "uncertainty_classification_loss",
    "uncertainty_weight",
    "__version__",
]
