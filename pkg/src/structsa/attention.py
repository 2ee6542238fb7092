"""Self-attention variants built on query-key correlation windows.

The family shares one skeleton: project tokens to queries/keys/values,
correlate each query against the key window of every token, normalize the
scores, and aggregate values. The variants differ in how many structure
channels score each window (D), how scores are normalized, and whether the
value aggregation touches single tokens or whole windows:

- `vanilla_sa`: plain dot-product attention, one score per (query, key).
- `sqka_scores`: window correlations against D learned patterns, giving an
  (N, D) score map per query.
- `structsa_scalar`: SQKA scores collapsed to one scalar per (i, j) by a
  (1, D) aggregator; values are single token rows.
- `structsa_contextual`: a (M, D) aggregator turns the scores into a length-M
  dynamic kernel per (i, j) that is applied to the value window.
- `convsa`: keys and values are first collapsed by fixed window taps, which
  is equivalent to rank-one dynamic kernels.
- `multihead`: channel-partitioned composition of any of the above.

Score normalization: "flat" applies one softmax over all N*D entries of a
query's score map (the default for the struct variants); "per-query" runs D
independent softmaxes over the N tokens (always used by `convsa`, where
D collapses to 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .tensor import (
    DimensionError,
    Grid,
    check_dtype,
    check_finite,
    require,
)

SOFTMAX_FLAT = "flat"
SOFTMAX_PER_QUERY = "per-query"
SOFTMAX_DOMAINS = (SOFTMAX_FLAT, SOFTMAX_PER_QUERY)

VALUE_SCALAR = "scalar"
VALUE_CONTEXTUAL = "contextual"
VALUE_MODES = (VALUE_SCALAR, VALUE_CONTEXTUAL)


@dataclass(frozen=True)
class SAWeights:
    """Square query/key/value projections plus a logit scale factor."""

    w_query: np.ndarray
    w_key: np.ndarray
    w_value: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        for label, w in (("w_query", self.w_query), ("w_key", self.w_key), ("w_value", self.w_value)):
            w = np.asarray(w)
            require(w.ndim == 2 and w.shape[0] == w.shape[1], f"SAWeights.{label}: expected square matrix, got {w.shape}")
        require(
            self.w_query.shape == self.w_key.shape == self.w_value.shape,
            "SAWeights: projection shapes differ",
        )
        check_dtype("SAWeights", self.w_query, self.w_key, self.w_value)
        if not math.isfinite(self.scale):
            raise ValueError(f"SAWeights.scale must be finite, got {self.scale}")

    @property
    def channels(self):
        return self.w_query.shape[0]

    @property
    def dtype(self):
        return self.w_query.dtype


@dataclass(frozen=True)
class StructParams:
    """Parameters for the structure-aware variants.

    pattern_kernels: (M, D) correlation patterns scored against each window.
    aggregators: (1, D) in scalar mode, (M, D) in contextual mode; they map
        the D normalized scores of a pair to its dynamic value kernel.
    """

    base: SAWeights
    pattern_kernels: np.ndarray
    aggregators: np.ndarray
    grid: Grid
    value_mode: str = VALUE_CONTEXTUAL
    softmax_domain: str = SOFTMAX_FLAT

    def __post_init__(self):
        pk = np.asarray(self.pattern_kernels)
        ag = np.asarray(self.aggregators)
        require(pk.ndim == 2, f"StructParams.pattern_kernels: expected (M, D), got shape {pk.shape}")
        require(
            pk.shape[0] == self.grid.window_size,
            f"StructParams.pattern_kernels: {pk.shape[0]} rows but grid window has {self.grid.window_size} slots",
        )
        require(pk.shape[1] >= 1, "StructParams.pattern_kernels: D must be >= 1")
        if self.value_mode not in VALUE_MODES:
            raise DimensionError(f"StructParams.value_mode: unknown mode {self.value_mode!r}")
        expected_rows = 1 if self.value_mode == VALUE_SCALAR else self.grid.window_size
        require(
            ag.ndim == 2 and ag.shape == (expected_rows, pk.shape[1]),
            f"StructParams.aggregators: expected ({expected_rows}, {pk.shape[1]}) in {self.value_mode} mode, got {ag.shape}",
        )
        if self.softmax_domain not in SOFTMAX_DOMAINS:
            raise DimensionError(f"StructParams.softmax_domain: unknown domain {self.softmax_domain!r}")
        check_dtype("StructParams", self.base.w_query, pk, ag)

    @property
    def structure_dim(self):
        return self.pattern_kernels.shape[1]


@dataclass(frozen=True)
class ConvSAParams:
    """Fixed window taps collapsing keys and values to one row per token."""

    base: SAWeights
    key_taps: np.ndarray
    value_taps: np.ndarray
    grid: Grid

    def __post_init__(self):
        m = self.grid.window_size
        for label, taps in (("key_taps", self.key_taps), ("value_taps", self.value_taps)):
            t = np.asarray(taps)
            require(t.shape == (m, 1), f"ConvSAParams.{label}: expected ({m}, 1) column, got {t.shape}")
        check_dtype("ConvSAParams", self.base.w_query, self.key_taps, self.value_taps)


def _softmax_over(z, axes):
    m = z.max(axis=axes, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axes, keepdims=True)


def softmax_backward(a, d_a, axes):
    """Adjoint of `_softmax_over` for a stored output `a`."""
    inner = (a * d_a).sum(axis=axes, keepdims=True)
    return a * (d_a - inner)


def normalize_scores(logits, domain):
    """Normalize (B, N, N, D) score logits per query over the chosen domain."""
    if domain == SOFTMAX_FLAT:
        return _softmax_over(logits, (2, 3))
    if domain == SOFTMAX_PER_QUERY:
        return _softmax_over(logits, (2,))
    raise DimensionError(f"unknown softmax domain {domain!r}")


def score_domain_axes(domain):
    return (2, 3) if domain == SOFTMAX_FLAT else (2,)


def _project(xb, w):
    return np.einsum("bnc,co->bno", xb, w, optimize=False)


def _gather_batch(xb, grid):
    nbr, valid = grid.neighbor_table()
    return backend.get().gather(
        np.ascontiguousarray(xb), nbr, np.ascontiguousarray(valid, dtype=np.uint8), backend.thread_count()
    )


def _check_input(x, channels, grid=None, name="attention"):
    x = np.asarray(x)
    require(x.ndim == 2, f"{name}: expected (N, C) input, got shape {x.shape}")
    require(x.shape[1] == channels, f"{name}: input has {x.shape[1]} channels, weights expect {channels}")
    if grid is not None:
        require(
            x.shape[0] == grid.n_tokens,
            f"{name}: input has {x.shape[0]} tokens, grid expects {grid.n_tokens}",
        )
    check_finite(name, x)
    return np.ascontiguousarray(x)


def _vanilla_forward(xb, w):
    q = _project(xb, w.w_query)
    k = _project(xb, w.w_key)
    v = _project(xb, w.w_value)
    logits = np.einsum("bic,bjc->bij", q, k, optimize=False)
    if w.scale != 1.0:
        logits *= q.dtype.type(w.scale)
    a = _softmax_over(logits, (2,))
    y = np.einsum("bij,bjc->bic", a, v, optimize=False)
    cache = {"x": xb, "q": q, "k": k, "v": v, "a": a}
    return y, cache


def _struct_forward(xb, p):
    km = backend.get()
    threads = backend.thread_count()
    q = _project(xb, p.base.w_query)
    kfull = _project(xb, p.base.w_key)
    kctx = _gather_batch(kfull, p.grid)
    pk = np.ascontiguousarray(p.pattern_kernels)
    logits = km.sqka_logits(q, kctx, pk, float(p.base.scale), threads)
    a = normalize_scores(logits, p.softmax_domain)
    cache = {"x": xb, "q": q, "kctx": kctx, "a": a}
    if p.value_mode == VALUE_SCALAR:
        vfull = _project(xb, p.base.w_value)
        y = km.aggregate_scalar(a, np.ascontiguousarray(p.aggregators[0]), vfull, threads)
        cache["v"] = vfull
    else:
        vfull = _project(xb, p.base.w_value)
        vctx = _gather_batch(vfull, p.grid)
        y = km.aggregate_contextual(a, np.ascontiguousarray(p.aggregators), vctx, threads)
        cache["vctx"] = vctx
    return y, cache


def _convsa_forward(xb, p):
    km = backend.get()
    threads = backend.thread_count()
    q = _project(xb, p.base.w_query)
    kctx = _gather_batch(_project(xb, p.base.w_key), p.grid)
    vctx = _gather_batch(_project(xb, p.base.w_value), p.grid)
    logits = km.sqka_logits(q, kctx, np.ascontiguousarray(p.key_taps), float(p.base.scale), threads)
    a = normalize_scores(logits, SOFTMAX_PER_QUERY)
    y = km.aggregate_contextual(a, np.ascontiguousarray(p.value_taps), vctx, threads)
    cache = {"x": xb, "q": q, "kctx": kctx, "vctx": vctx, "a": a}
    return y, cache


def vanilla_sa(x, w):
    """Dot-product self-attention: softmax(scale * q_i k_j^T) applied to v."""
    x = _check_input(x, w.channels, name="vanilla_sa")
    check_dtype("vanilla_sa", x, w.w_query)
    y, _ = _vanilla_forward(x[None], w)
    return y[0]


def sqka_scores(x, p, i):
    """Normalized structure score map of query i, shape (N, D)."""
    x = _check_input(x, p.base.channels, p.grid, name="sqka_scores")
    check_dtype("sqka_scores", x, p.base.w_query)
    n = x.shape[0]
    if not 0 <= int(i) < n:
        raise DimensionError(f"sqka_scores: query index {i} out of range for {n} tokens")
    _, cache = _struct_forward(x[None], p)
    return np.ascontiguousarray(cache["a"][0, int(i)])


def structsa_scalar(x, p):
    """Structure-aware attention with scalar pair weights on token values."""
    require(p.value_mode == VALUE_SCALAR, "structsa_scalar: params are not in scalar value mode")
    x = _check_input(x, p.base.channels, p.grid, name="structsa_scalar")
    check_dtype("structsa_scalar", x, p.base.w_query)
    y, _ = _struct_forward(x[None], p)
    return y[0]


def structsa_contextual(x, p):
    """Structure-aware attention with per-pair dynamic kernels on value windows."""
    require(p.value_mode == VALUE_CONTEXTUAL, "structsa_contextual: params are not in contextual value mode")
    x = _check_input(x, p.base.channels, p.grid, name="structsa_contextual")
    check_dtype("structsa_contextual", x, p.base.w_query)
    y, _ = _struct_forward(x[None], p)
    return y[0]


def convsa(x, p):
    """Attention over tap-collapsed keys, spreading scores with fixed value taps.

    Equivalent to `structsa_contextual` with D=1, pattern kernel = key taps,
    aggregator = value taps, and per-query normalization.
    """
    x = _check_input(x, p.base.channels, p.grid, name="convsa")
    check_dtype("convsa", x, p.base.w_query)
    y, _ = _convsa_forward(x[None], p)
    return y[0]


def dispatch(x, params):
    """Run the variant implied by a parameter bundle."""
    from .channelwise import ChannelwiseConvParams, ChannelwiseParams, convsa_channelwise, structsa_channelwise_efficient

    if isinstance(params, SAWeights):
        return vanilla_sa(x, params)
    if isinstance(params, StructParams):
        if params.value_mode == VALUE_SCALAR:
            return structsa_scalar(x, params)
        return structsa_contextual(x, params)
    if isinstance(params, ConvSAParams):
        return convsa(x, params)
    if isinstance(params, ChannelwiseParams):
        return structsa_channelwise_efficient(x, params)
    if isinstance(params, ChannelwiseConvParams):
        return convsa_channelwise(x, params.key_taps, params.value_taps, params.base, params.grid)
    raise DimensionError(f"dispatch: unknown parameter bundle {type(params).__name__}")


def _head_channels(params):
    if isinstance(params, SAWeights):
        return params.channels
    return params.base.channels


def multihead(x, per_head, attention_op=None):
    """Split channels into len(per_head) equal groups, run one attention per
    group, and concatenate the outputs. No output projection is applied."""
    x = np.asarray(x)
    require(x.ndim == 2, f"multihead: expected (N, C) input, got shape {x.shape}")
    if not isinstance(per_head, (list, tuple)):
        per_head = [per_head]
    heads = len(per_head)
    require(heads >= 1, "multihead: need at least one head")
    c = x.shape[1]
    require(c % heads == 0, f"multihead: {c} channels not divisible by {heads} heads")
    width = c // heads
    op = attention_op if attention_op is not None else dispatch
    outputs = []
    for h, params in enumerate(per_head):
        require(
            _head_channels(params) == width,
            f"multihead: head {h} expects {_head_channels(params)} channels, slice has {width}",
        )
        lo = h * width
        outputs.append(op(np.ascontiguousarray(x[:, lo:lo + width]), params))
    return np.concatenate(outputs, axis=1)
