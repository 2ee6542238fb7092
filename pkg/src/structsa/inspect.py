"""Introspection of the dynamic kernels the attention variants induce.

`extract_kernels` recovers, for every (query, key) pair, the effective
weights multiplied onto the values: a scalar for `structsa_scalar`, a
length-M window kernel for `convsa`/`structsa_contextual`, and an (M, C)
per-channel kernel for the channel-wise form. `recombine` applies a field
back to the values and must reproduce the forward output.

`merge_attention_map` collapses a window-kernel field to one score per
(i, j): slot m of the kernel at key position (j - center + m) contributes
to position j, with out-of-range positions handled by the grid's padding
(zero padding skips them, circular wraps). On multi-axis grids the slot
index is the usual lexicographic offset.

`export_pgm` writes binary 8-bit PGM images with per-image min-max
normalization; a constant map becomes mid-gray (128).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention, channelwise
from .attention import ConvSAParams, StructParams, VALUE_SCALAR
from .channelwise import ChannelwiseParams
from .tensor import DimensionError, Grid, require

VARIANT_CONVSA = "convsa"
VARIANT_SCALAR = "structsa_scalar"
VARIANT_CONTEXTUAL = "structsa_contextual"
VARIANT_CHANNELWISE = "channelwise"


@dataclass(frozen=True)
class KernelField:
    """Per-pair dynamic kernels for one input.

    kernels: (N, N) scalars, (N, N, M) window kernels, or (N, N, M, C)
        per-channel window kernels, indexed [query, key, ...].
    """

    kernels: np.ndarray
    grid: Grid
    variant: str

    def __post_init__(self):
        n = self.grid.n_tokens
        k = np.asarray(self.kernels)
        if self.variant == VARIANT_SCALAR:
            require(k.shape == (n, n), f"KernelField: scalar field expects ({n}, {n}), got {k.shape}")
        elif self.variant in (VARIANT_CONVSA, VARIANT_CONTEXTUAL):
            expected = (n, n, self.grid.window_size)
            require(k.shape == expected, f"KernelField: window field expects {expected}, got {k.shape}")
        elif self.variant == VARIANT_CHANNELWISE:
            require(
                k.ndim == 4 and k.shape[:3] == (n, n, self.grid.window_size),
                f"KernelField: channel field expects ({n}, {n}, {self.grid.window_size}, C), got {k.shape}",
            )
        else:
            raise DimensionError(f"KernelField: unknown variant {self.variant!r}")


@dataclass(frozen=True)
class MergedMap:
    """Window kernels folded to a single attention score per (query, key)."""

    scores: np.ndarray
    grid: Grid

    def __post_init__(self):
        n = self.grid.n_tokens
        require(np.asarray(self.scores).shape == (n, n), f"MergedMap: expected ({n}, {n}) scores")


def _struct_scores(x, p):
    _, cache = attention._struct_forward(np.ascontiguousarray(x)[None], p)
    return cache["a"][0]


def extract_kernels(x, params, variant=None):
    """Compute the dynamic kernel field a parameter bundle induces on x."""
    if isinstance(params, ConvSAParams):
        inferred = VARIANT_CONVSA
    elif isinstance(params, StructParams):
        inferred = VARIANT_SCALAR if params.value_mode == VALUE_SCALAR else VARIANT_CONTEXTUAL
    elif isinstance(params, ChannelwiseParams):
        inferred = VARIANT_CHANNELWISE
    else:
        raise DimensionError(f"extract_kernels: unsupported params {type(params).__name__}")
    if variant is not None and variant != inferred:
        raise DimensionError(f"extract_kernels: params imply {inferred!r}, requested {variant!r}")

    if inferred == VARIANT_CONVSA:
        x = attention._check_input(x, params.base.channels, params.grid, name="extract_kernels")
        _, cache = attention._convsa_forward(x[None], params)
        a = cache["a"][0, :, :, 0]
        kernels = np.einsum("ij,md->ijm", a, params.value_taps, optimize=False)
    elif inferred == VARIANT_SCALAR:
        x = attention._check_input(x, params.base.channels, params.grid, name="extract_kernels")
        a = _struct_scores(x, params)
        kernels = np.einsum("ijd,d->ij", a, params.aggregators[0], optimize=False)
    elif inferred == VARIANT_CONTEXTUAL:
        x = attention._check_input(x, params.base.channels, params.grid, name="extract_kernels")
        a = _struct_scores(x, params)
        kernels = np.einsum("ijd,md->ijm", a, params.aggregators, optimize=False)
    else:
        x = attention._check_input(x, params.base.channels, params.grid, name="extract_kernels")
        _, cache = channelwise._cw_forward(x[None], params, channelwise.ROUTE_EFFICIENT)
        a = cache["a"][0]
        kernels = np.einsum("ijd,dmc->ijmc", a, params.aggregators, optimize=False)
    return KernelField(kernels=kernels, grid=params.grid, variant=inferred)


def recombine(field, x, params):
    """Apply a kernel field to the values of x; reproduces the forward output."""
    from .tensor import gather_contexts, matmul

    v_full = matmul(np.asarray(x), params.base.w_value)
    k = field.kernels
    if field.variant == VARIANT_SCALAR:
        return np.einsum("ij,jc->ic", k, v_full, optimize=False)
    v_ctx = gather_contexts(v_full, field.grid)
    if field.variant == VARIANT_CHANNELWISE:
        return np.einsum("ijmc,jmc->ic", k, v_ctx, optimize=False)
    return np.einsum("ijm,jmc->ic", k, v_ctx, optimize=False)


def merge_attention_map(field):
    """Fold window kernels into one effective score per (query, key)."""
    k = np.asarray(field.kernels)
    if field.variant == VARIANT_SCALAR or k.ndim == 2:
        raise DimensionError("merge_attention_map: scalar fields have no window axis to merge")
    require(k.ndim == 3, "merge_attention_map: expected a shared window-kernel field (N, N, M)")
    nbr, valid = field.grid.neighbor_table()
    m = field.grid.window_size
    scores = np.zeros(k.shape[:2], dtype=k.dtype)
    for slot in range(m):
        contrib = k[:, nbr[:, slot], slot]
        scores += np.where(valid[:, slot][None, :], contrib, 0)
    return MergedMap(scores=scores, grid=field.grid)


def merge_channel(field, channel):
    """Merge one channel of a per-channel kernel field."""
    require(field.variant == VARIANT_CHANNELWISE, "merge_channel: field is not channel-wise")
    c = np.asarray(field.kernels).shape[3]
    if not 0 <= int(channel) < c:
        raise DimensionError(f"merge_channel: channel {channel} out of range for {c} channels")
    shared = KernelField(
        kernels=np.ascontiguousarray(field.kernels[:, :, :, int(channel)]),
        grid=field.grid,
        variant=VARIANT_CONTEXTUAL,
    )
    return merge_attention_map(shared)


def pgm_bytes(values):
    """Encode a 2D map as binary PGM (P5, maxval 255) with min-max scaling."""
    arr = np.asarray(values, dtype=np.float64)
    require(arr.ndim == 2 and arr.size > 0, f"pgm_bytes: expected a non-empty 2D map, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("pgm_bytes: non-finite scores")
    lo = arr.min()
    hi = arr.max()
    if hi > lo:
        pixels = np.rint((arr - lo) / (hi - lo) * 255.0)
    else:
        pixels = np.full(arr.shape, 128.0)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    return header + pixels.astype(np.uint8).tobytes()


def export_pgm(values, path):
    data = pgm_bytes(values)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IOError(f"export_pgm: {exc}") from exc


def export_map(merged, path, query=None):
    """Write a merged map as PGM: the full (N, N) matrix, or one query row
    laid out spatially when `query` is given."""
    scores = np.asarray(merged.scores)
    if query is None:
        export_pgm(scores, path)
        return
    n = merged.grid.n_tokens
    if not 0 <= int(query) < n:
        raise DimensionError(f"export_map: query {query} out of range for {n} tokens")
    row = scores[int(query)]
    extents = merged.grid.extents
    if len(extents) == 1:
        image = row[None, :]
    elif len(extents) == 2:
        image = row.reshape(extents)
    else:
        image = row.reshape(extents[0], extents[1] * extents[2])
    export_pgm(image, path)


def merged_map_csv(merged, path):
    """Dump a merged map as 'i,j,score' rows (row-major, repr formatting)."""
    scores = np.asarray(merged.scores)
    lines = ["i,j,score"]
    n = scores.shape[0]
    for i in range(n):
        for j in range(n):
            lines.append(f"{i},{j},{float(scores[i, j])!r}")
    text = "\n".join(lines) + "\n"
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise IOError(f"merged_map_csv: {exc}") from exc
