"""Structural self-attention variants with verified kernels, manual
gradients, cost accounting, and kernel visualization."""

from . import autodiff, backend, channelwise, inspect, tensor
from .attention import (
    ConvSAParams,
    SAWeights,
    SOFTMAX_FLAT,
    SOFTMAX_PER_QUERY,
    StructParams,
    convsa,
    multihead,
    sqka_scores,
    structsa_contextual,
    structsa_scalar,
    vanilla_sa,
)
from .channelwise import (
    ChannelwiseConvParams,
    ChannelwiseParams,
    CostLedger,
    convsa_channelwise,
    structsa_channelwise_efficient,
    structsa_channelwise_naive,
)
from .tensor import (
    DimensionError,
    Grid,
    TensorFileError,
    gather_contexts,
    matmul,
    read_stns,
    roll_tokens,
    scatter_contexts,
    softmax_flat,
    write_stns,
)

__version__ = "0.1.0"

__all__ = [
    "ConvSAParams",
    "ChannelwiseConvParams",
    "ChannelwiseParams",
    "CostLedger",
    "DimensionError",
    "Grid",
    "SAWeights",
    "SOFTMAX_FLAT",
    "SOFTMAX_PER_QUERY",
    "StructParams",
    "TensorFileError",
    "autodiff",
    "backend",
    "channelwise",
    "convsa",
    "convsa_channelwise",
    "gather_contexts",
    "inspect",
    "matmul",
    "multihead",
    "read_stns",
    "roll_tokens",
    "scatter_contexts",
    "softmax_flat",
    "sqka_scores",
    "structsa_channelwise_efficient",
    "structsa_channelwise_naive",
    "structsa_contextual",
    "structsa_scalar",
    "tensor",
    "vanilla_sa",
    "write_stns",
    "__version__",
]
