"""Deeply-fused convolutional networks: construction, training, analysis."""

from .layers import (
    BatchNorm2d,
    Conv2d,
    Fuse,
    GlobalAvgPool,
    GradBundle,
    MaxPool2,
    ReLU,
    ShapeError,
    avgpool_global,
    backward,
    batchnorm,
    conv2d,
    elementwise_fuse,
    linear_classifier,
    maxpool2,
    relu,
    softmax_probs,
    softmax_xent,
)
from .netspec import (
    BlockDivision,
    Diagnostic,
    FusedNetSpec,
    FusionKind,
    Member,
    NetworkSpec,
    SpecError,
    StageDef,
    builtin_catalog,
    fused_spec_from_name,
    parse_spec,
    scale_width,
    serialize,
    validate,
)

__version__ = "0.1.0"
