"""Training-time decision machinery for open-vocabulary DETR detectors.

Set matching with wildcard and conditional queries, denoising query
synthesis, Weibull foreground estimation, proposal selection, iterative
pseudo-labeling and detection metrics, all on plain boxes and embeddings.
"""

from .geometry import Box, BoxFormat, convert, giou, iou
from .matcher import WILDCARD, Assignment, QueryAssignment, UnknownObject, hungarian

__version__ = "0.1.0"

__all__ = [
    "WILDCARD",
    "Assignment",
    "Box",
    "BoxFormat",
    "QueryAssignment",
    "UnknownObject",
    "convert",
    "giou",
    "hungarian",
    "iou",
]
