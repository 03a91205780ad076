"""Two-stage box refinement: context voxels, regression targets, the CNN and its training."""
from .targets import (
    CONTEXT_GRID,
    CONTEXT_SCALE,
    CanonicalAnchor,
    ContextBox,
    ContextVoxels,
    NonPositiveWidth,
    NoValidSolution,
    decode_box,
    encode_targets,
    expand_context,
    sparse_context,
    voxelize_context,
)
from .network import NetConfig, ParamsFormatError, RefineNet, ShapeMismatch

__all__ = [
    "CONTEXT_GRID", "CONTEXT_SCALE", "CanonicalAnchor", "ContextBox", "ContextVoxels",
    "NonPositiveWidth", "NoValidSolution", "decode_box", "encode_targets", "expand_context",
    "sparse_context", "voxelize_context", "NetConfig", "ParamsFormatError", "RefineNet", "ShapeMismatch",
]
