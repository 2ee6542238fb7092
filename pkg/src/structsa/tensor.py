"""Dense tensor substrate shared by the attention modules.

Everything operates on C-contiguous numpy arrays in float32 or float64.
`Grid` describes a 1-3 dimensional token layout together with an odd-extent
correlation window and a padding rule; `gather_contexts` materializes the
window rows for every token. `write_stns`/`read_stns` implement the binary
tensor file format used by the CLI (bit-exact round trips).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

PAD_ZERO = "zero"
PAD_CIRCULAR = "circular"
PADDINGS = (PAD_ZERO, PAD_CIRCULAR)

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class DimensionError(ValueError):
    """A shape, extent, or dtype contract was violated."""


class TensorFileError(IOError):
    """Malformed, truncated, or unsupported tensor file."""


def require(condition, message):
    if not condition:
        raise DimensionError(message)


def as_tensor(values, dtype=None):
    """Coerce to a C-contiguous float32/float64 array (float64 by default)."""
    arr = np.asarray(values, dtype=dtype)
    if arr.dtype not in SUPPORTED_DTYPES:
        arr = arr.astype(np.float64)
    return np.ascontiguousarray(arr)


def check_dtype(name, *arrays):
    """All arrays must share one supported float dtype."""
    dtypes = {np.asarray(a).dtype for a in arrays}
    for dt in dtypes:
        require(dt in SUPPORTED_DTYPES, f"{name}: unsupported dtype {dt}, expected float32 or float64")
    require(len(dtypes) == 1, f"{name}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def check_finite(name, arr):
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: non-finite values present")


def matmul(a, b):
    """Matrix product with a fixed accumulation order (sequential over the
    contracted index), so results are reproducible and match a scalar
    triple-loop exactly in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    require(a.ndim == 2 and b.ndim == 2, f"matmul: expected matrices, got {a.ndim}d x {b.ndim}d")
    require(
        a.shape[1] == b.shape[0],
        f"matmul: inner dimensions differ, {a.shape} x {b.shape}",
    )
    check_dtype("matmul", a, b)
    return np.einsum("ij,jk->ik", a, b, optimize=False)


def softmax_flat(x):
    """Numerically stable softmax over every entry of the tensor at once.

    The output has the same shape as the input, is nonnegative, and sums
    to 1 over all entries.
    """
    arr = np.asarray(x)
    if arr.size == 0:
        raise DimensionError("softmax_flat: empty tensor")
    check_dtype("softmax_flat", arr)
    check_finite("softmax_flat", arr)
    shifted = arr - arr.max()
    e = np.exp(shifted)
    return e / e.sum()


@dataclass(frozen=True)
class Grid:
    """Spatial layout of tokens plus the correlation window geometry.

    extents: per-axis token counts (1 to 3 axes).
    kernel_extents: per-axis window sizes, each odd and no larger than the
        matching grid extent.
    padding: "zero" drops out-of-range neighbors, "circular" wraps them.
    """

    extents: tuple
    kernel_extents: tuple
    padding: str = PAD_ZERO

    def __post_init__(self):
        extents = tuple(int(e) for e in self.extents)
        kernels = tuple(int(k) for k in self.kernel_extents)
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "kernel_extents", kernels)
        require(1 <= len(extents) <= 3, f"grid: rank must be 1-3, got {len(extents)}")
        require(len(kernels) == len(extents), "grid: kernel rank differs from grid rank")
        for e in extents:
            require(e >= 1, f"grid: extents must be positive, got {extents}")
        for k, e in zip(kernels, extents):
            require(k >= 1 and k % 2 == 1, f"grid: kernel extents must be odd and positive, got {kernels}")
            require(k <= e, f"grid: kernel extent {k} exceeds grid extent {e}")
        if self.padding not in PADDINGS:
            raise DimensionError(f"grid: unknown padding {self.padding!r}, expected one of {PADDINGS}")

    @property
    def ndim(self):
        return len(self.extents)

    @property
    def n_tokens(self):
        return int(np.prod(self.extents))

    @property
    def window_size(self):
        return int(np.prod(self.kernel_extents))

    @property
    def center_slot(self):
        # All kernel extents are odd, so the zero offset sits at the middle
        # of the lexicographic slot ordering.
        return self.window_size // 2

    def offsets(self):
        """Window slot offsets, lexicographic over axes, shape (M, ndim)."""
        return _offsets(self.kernel_extents)

    def neighbor_table(self):
        """Per-token window sources: (indices (N, M) int64, valid (N, M) bool).

        Invalid slots (zero padding, out of range) carry index 0 and
        valid=False; callers must mask them.
        """
        return _neighbor_table(self.extents, self.kernel_extents, self.padding)


@lru_cache(maxsize=128)
def _offsets(kernel_extents):
    axes = [np.arange(-(k // 2), k // 2 + 1) for k in kernel_extents]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1).reshape(-1, len(kernel_extents))


@lru_cache(maxsize=128)
def _neighbor_table(extents, kernel_extents, padding):
    ndim = len(extents)
    n = int(np.prod(extents))
    offs = _offsets(kernel_extents)  # (M, ndim)
    coords = np.stack(np.unravel_index(np.arange(n), extents), axis=-1)  # (N, ndim)
    pos = coords[:, None, :] + offs[None, :, :]  # (N, M, ndim)
    ext = np.asarray(extents)
    if padding == PAD_CIRCULAR:
        pos = pos % ext
        valid = np.ones(pos.shape[:2], dtype=bool)
    else:
        valid = ((pos >= 0) & (pos < ext)).all(axis=-1)
        pos = np.clip(pos, 0, ext - 1)
    idx = np.ravel_multi_index(tuple(pos[..., a] for a in range(ndim)), extents)
    idx = np.where(valid, idx, 0).astype(np.int64)
    idx.setflags(write=False)
    valid.setflags(write=False)
    return idx, valid


def gather_contexts(x, grid):
    """Stack each token's correlation window rows: (N, C) -> (N, M, C).

    Slot m of row j holds the token at spatial offset `grid.offsets()[m]`
    from j; zero padding writes zero rows for out-of-range offsets.
    """
    from . import backend

    x = np.asarray(x)
    require(x.ndim == 2, f"gather_contexts: expected (N, C) input, got shape {x.shape}")
    require(
        x.shape[0] == grid.n_tokens,
        f"gather_contexts: grid has {grid.n_tokens} tokens but input has {x.shape[0]} rows",
    )
    check_dtype("gather_contexts", x)
    nbr, valid = grid.neighbor_table()
    out = backend.get().gather(
        np.ascontiguousarray(x)[None],
        nbr,
        np.ascontiguousarray(valid, dtype=np.uint8),
        backend.thread_count(),
    )
    return out[0]


def scatter_contexts(d_contexts, grid):
    """Adjoint of `gather_contexts`: accumulate (N, M, C) window grads back
    onto the (N, C) token rows. Zero-padded slots contribute nothing."""
    d = np.asarray(d_contexts)
    require(d.ndim == 3, f"scatter_contexts: expected (N, M, C), got shape {d.shape}")
    require(d.shape[0] == grid.n_tokens and d.shape[1] == grid.window_size,
            f"scatter_contexts: shape {d.shape} does not match grid ({grid.n_tokens}, {grid.window_size}, C)")
    nbr, valid = grid.neighbor_table()
    jj, mm = np.nonzero(valid)
    out = np.zeros((d.shape[0], d.shape[2]), dtype=d.dtype)
    np.add.at(out, nbr[jj, mm], d[jj, mm])
    return out


def roll_tokens(x, grid, shifts):
    """Cyclically translate token rows on the grid by per-axis amounts."""
    x = np.asarray(x)
    require(x.ndim == 2 and x.shape[0] == grid.n_tokens, f"roll_tokens: bad shape {x.shape}")
    shifts = tuple(int(s) for s in shifts)
    require(len(shifts) == grid.ndim, "roll_tokens: one shift per grid axis required")
    spatial = x.reshape(*grid.extents, x.shape[1])
    rolled = np.roll(spatial, shifts, axis=tuple(range(grid.ndim)))
    return np.ascontiguousarray(rolled.reshape(x.shape))


_STNS_MAGIC = b"STNS"
_STNS_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def write_stns(path, arr):
    """Write a float tensor: magic 'STNS', u32 version, u8 dtype code
    (1=f32, 2=f64), u8 ndim, ndim u64 little-endian extents, then raw
    little-endian scalars in row-major order."""
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise TensorFileError(f"write_stns: unsupported dtype {arr.dtype}")
    if arr.ndim < 1:
        raise TensorFileError("write_stns: zero-dimensional tensors are not supported")
    code = _DTYPE_CODES[arr.dtype]
    header = _STNS_MAGIC + struct.pack("<IBB", _STNS_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_CODE_DTYPES[code], copy=False).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise TensorFileError(f"write_stns: {exc}") from exc


def read_stns(path):
    """Read a tensor written by `write_stns`; round trips are bit-exact."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise TensorFileError(f"read_stns: {exc}") from exc
    if len(blob) < 10:
        raise TensorFileError("read_stns: file too short for header")
    if blob[:4] != _STNS_MAGIC:
        raise TensorFileError(f"read_stns: bad magic {blob[:4]!r}")
    version, code, ndim = struct.unpack_from("<IBB", blob, 4)
    if version != _STNS_VERSION:
        raise TensorFileError(f"read_stns: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise TensorFileError(f"read_stns: unknown dtype code {code}")
    if ndim < 1:
        raise TensorFileError("read_stns: zero-dimensional tensor")
    offset = 10
    if len(blob) < offset + 8 * ndim:
        raise TensorFileError("read_stns: truncated extent list")
    shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
    offset += 8 * ndim
    for e in shape:
        if e < 1:
            raise TensorFileError(f"read_stns: non-positive extent {e}")
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise TensorFileError(
            f"read_stns: payload is {len(blob) - offset} bytes, expected {expected}"
        )
    data = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    return np.ascontiguousarray(data.reshape(shape).astype(dtype.newbyteorder("="), copy=True))
