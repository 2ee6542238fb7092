"""Validated run configuration and seeded parameter construction.

Initialization convention: every tensor is drawn uniformly from
[-1/sqrt(fan_in), +1/sqrt(fan_in)], where fan_in is the number of input
scalars contracted into one output scalar (C for projections, M for window
patterns and taps, D for score aggregators, M*C for channel-wise patterns).
Draws happen in a documented fixed order from one seeded generator, in
float64, then cast to the configured dtype, so parameter sets are
reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..attention import (
    SOFTMAX_DOMAINS,
    SOFTMAX_FLAT,
    ConvSAParams,
    SAWeights,
    StructParams,
    VALUE_CONTEXTUAL,
    VALUE_SCALAR,
)
from ..channelwise import ChannelwiseConvParams, ChannelwiseParams
from ..tensor import PADDINGS, Grid

VARIANT_VANILLA = "vanilla"
VARIANT_CONVSA = "convsa"
VARIANT_STRUCT_SCALAR = "structsa-scalar"
VARIANT_STRUCT_CONTEXTUAL = "structsa-contextual"
VARIANT_CW_NAIVE = "channelwise-naive"
VARIANT_CW_EFFICIENT = "channelwise-efficient"
VARIANT_CWCONV = "convsa-channelwise"

VARIANTS = (
    VARIANT_VANILLA,
    VARIANT_CONVSA,
    VARIANT_STRUCT_SCALAR,
    VARIANT_STRUCT_CONTEXTUAL,
    VARIANT_CW_NAIVE,
    VARIANT_CW_EFFICIENT,
    VARIANT_CWCONV,
)

DTYPES = {"f32": np.float32, "f64": np.float64}


class ConfigError(ValueError):
    """Invalid run configuration."""


class NumericGateError(RuntimeError):
    """A numeric acceptance gate failed (gradient check, cost formula, training)."""


def parse_extents(text, label="grid"):
    """Parse '16' or '4x4' or '2x4x4' into an extent tuple."""
    parts = str(text).lower().replace("*", "x").split("x")
    try:
        extents = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{label}: cannot parse extents from {text!r}") from None
    if any(e < 1 for e in extents):
        raise ConfigError(f"{label}: extents must be positive, got {text!r}")
    return extents


@dataclass
class RunConfig:
    """Everything a CLI command needs to rebuild a run deterministically."""

    variant: str = VARIANT_STRUCT_CONTEXTUAL
    extents: tuple = (16,)
    kernel_extents: tuple = (3,)
    padding: str = "zero"
    structure_dim: int = 4
    heads: int = 1
    softmax_domain: str = SOFTMAX_FLAT
    scale: float = 1.0
    dtype: str = "f64"
    seed: int = 0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: unknown variant {self.variant!r}; choices: {', '.join(VARIANTS)}")
        if not 1 <= len(self.extents) <= 3:
            raise ConfigError(f"grid: rank must be between 1 and 3, got {len(self.extents)} axes")
        if any(e < 1 for e in self.extents):
            raise ConfigError(f"grid: extents must be positive, got {self.extents}")
        if len(self.kernel_extents) != len(self.extents):
            raise ConfigError(
                f"kernel: rank {len(self.kernel_extents)} does not match grid rank {len(self.extents)}"
            )
        if any(k < 1 or k % 2 == 0 for k in self.kernel_extents):
            raise ConfigError(f"kernel: extents must be odd and positive, got {self.kernel_extents}")
        if any(k > e for k, e in zip(self.kernel_extents, self.extents)):
            raise ConfigError(
                f"kernel: extents {self.kernel_extents} exceed grid extents {self.extents}"
            )
        if self.padding not in PADDINGS:
            raise ConfigError(f"padding: unknown padding {self.padding!r}; choices: {', '.join(PADDINGS)}")
        if self.structure_dim < 1:
            raise ConfigError(f"structure-dim: must be >= 1, got {self.structure_dim}")
        if self.heads < 1:
            raise ConfigError(f"heads: must be >= 1, got {self.heads}")
        if self.softmax_domain not in SOFTMAX_DOMAINS:
            raise ConfigError(
                f"softmax-domain: unknown domain {self.softmax_domain!r}; choices: {', '.join(SOFTMAX_DOMAINS)}"
            )
        if not math.isfinite(self.scale):
            raise ConfigError(f"scale: must be finite, got {self.scale}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype: unknown dtype {self.dtype!r}; choices: {', '.join(DTYPES)}")
        if self.seed < 0:
            raise ConfigError(f"seed: must be >= 0, got {self.seed}")
        return self

    def grid(self):
        return Grid(extents=self.extents, kernel_extents=self.kernel_extents, padding=self.padding)

    def numpy_dtype(self):
        return DTYPES[self.dtype]


def _draw(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _draw_base(rng, channels, scale, dtype):
    # Draw order is part of the format: query, key, value.
    return SAWeights(
        w_query=_draw(rng, (channels, channels), channels, dtype),
        w_key=_draw(rng, (channels, channels), channels, dtype),
        w_value=_draw(rng, (channels, channels), channels, dtype),
        scale=scale,
    )


def init_params(config, channels, rng=None):
    """Build one head's parameter bundle for the configured variant."""
    config.validate()
    if channels < 1:
        raise ConfigError(f"channels: must be >= 1, got {channels}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    dtype = config.numpy_dtype()
    grid = config.grid()
    m = grid.window_size
    d = config.structure_dim
    base = _draw_base(rng, channels, config.scale, dtype)
    if config.variant == VARIANT_VANILLA:
        return base
    if config.variant == VARIANT_CONVSA:
        return ConvSAParams(
            base=base,
            key_taps=_draw(rng, (m, 1), m, dtype),
            value_taps=_draw(rng, (m, 1), m, dtype),
            grid=grid,
        )
    if config.variant in (VARIANT_STRUCT_SCALAR, VARIANT_STRUCT_CONTEXTUAL):
        scalar = config.variant == VARIANT_STRUCT_SCALAR
        return StructParams(
            base=base,
            pattern_kernels=_draw(rng, (m, d), m, dtype),
            aggregators=_draw(rng, (1 if scalar else m, d), d, dtype),
            grid=grid,
            value_mode=VALUE_SCALAR if scalar else VALUE_CONTEXTUAL,
            softmax_domain=config.softmax_domain,
        )
    if config.variant in (VARIANT_CW_NAIVE, VARIANT_CW_EFFICIENT):
        return ChannelwiseParams(
            base=base,
            pattern_kernels=_draw(rng, (d, m, channels), m * channels, dtype),
            aggregators=_draw(rng, (d, m, channels), d, dtype),
            grid=grid,
            softmax_domain=config.softmax_domain,
        )
    if config.variant == VARIANT_CWCONV:
        return ChannelwiseConvParams(
            base=base,
            key_taps=_draw(rng, (m, channels), m, dtype),
            value_taps=_draw(rng, (m, channels), m, dtype),
            grid=grid,
        )
    raise ConfigError(f"variant: unknown variant {config.variant!r}")


def build_params(config, channels):
    """Per-head parameter list (heads > 1) or a single bundle (heads == 1)."""
    config.validate()
    if channels % config.heads != 0:
        raise ConfigError(f"heads: {channels} channels are not divisible by {config.heads} heads")
    rng = np.random.default_rng(config.seed)
    width = channels // config.heads
    if config.heads == 1:
        return init_params(config, width, rng)
    return [init_params(config, width, rng) for _ in range(config.heads)]
