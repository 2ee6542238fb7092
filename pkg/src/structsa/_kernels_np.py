"""Numpy kernels: reference semantics for the attention hot loops.

Same call surface as the compiled module `structsa._kernels`; the `threads`
argument is accepted for parity and ignored (numpy einsum here is
single-threaded and deterministic). All einsums run unoptimized so the
accumulation order is fixed.

Shapes use a leading batch axis: x (B, N, C), window contexts (B, N, M, C),
score maps (B, N, N, D).
"""

from __future__ import annotations

import numpy as np


def gather(x, nbr, valid, threads=1):
    out = np.ascontiguousarray(x[:, nbr, :])
    mask = np.asarray(valid, dtype=bool)
    if not mask.all():
        out[:, ~mask, :] = 0
    return out


def sqka_logits(q, kctx, kernels, scale, threads=1):
    logits = np.einsum("bic,bjmc,md->bijd", q, kctx, kernels, optimize=False)
    if scale != 1.0:
        logits *= q.dtype.type(scale)
    return logits


def aggregate_contextual(a, aggr, vctx, threads=1):
    return np.einsum("bijd,md,bjmc->bic", a, aggr, vctx, optimize=False)


def aggregate_scalar(a, aggr, v, threads=1):
    return np.einsum("bijd,d,bjc->bic", a, aggr, v, optimize=False)


def cw_logits_naive(q, kctx, kernels, scale, threads=1):
    # Materializes every per-pair channel-wise correlation map, the
    # memory-hungry route: (B, N, N, M, C) scalars.
    corr = q[:, :, None, None, :] * kctx[:, None, :, :, :]
    logits = np.einsum("bijmc,dmc->bijd", corr, kernels, optimize=False)
    if scale != 1.0:
        logits *= q.dtype.type(scale)
    return logits, int(corr.size)


def cw_logits_efficient(q, kctx, kernels, scale, threads=1):
    # Contracts the window axis against the kernels once per key token,
    # then correlates queries against the (B, N, D, C) result.
    g = np.einsum("bjmc,dmc->bjdc", kctx, kernels, optimize=False)
    logits = np.einsum("bic,bjdc->bijd", q, g, optimize=False)
    if scale != 1.0:
        logits *= q.dtype.type(scale)
    return logits, int(g.size)


def cw_aggregate_naive(a, aggr, vctx, threads=1):
    kappa = np.einsum("bijd,dmc->bijmc", a, aggr, optimize=False)
    return np.einsum("bijmc,bjmc->bic", kappa, vctx, optimize=False)


def cw_aggregate_efficient(a, aggr, vctx, threads=1):
    w = np.einsum("dmc,bjmc->bjdc", aggr, vctx, optimize=False)
    return np.einsum("bijd,bjdc->bic", a, w, optimize=False)
