"""Via-pattern similarity analysis and cell-substitution screening for SEM
images of standard cell libraries."""

from .geometry import (
    MATCHING_RADIUS,
    AlignmentResult,
    NodeConfig,
    Orientation,
    ViaSet,
    align,
    canonicalize,
    similarity_score,
)

__version__ = "0.1.0"

__all__ = [
    "MATCHING_RADIUS",
    "AlignmentResult",
    "NodeConfig",
    "Orientation",
    "ViaSet",
    "align",
    "canonicalize",
    "similarity_score",
    "__version__",
]
