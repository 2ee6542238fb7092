"""Randomized gradient checking shared by the CLI and the acceptance tests.

Each configuration draws a small random geometry (N <= 12 tokens, C <= 6
channels, window extents <= 3 per axis, D <= 3), random padding, softmax
domain, and scale, then compares every analytic gradient leaf against
central finite differences through the real forward op.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff
from .config import RunConfig, build_params, init_params

CHECK_OPS = (
    autodiff.OP_VANILLA,
    autodiff.OP_STRUCT_SCALAR,
    autodiff.OP_STRUCT_CONTEXTUAL,
    autodiff.OP_CONVSA,
    autodiff.OP_CW_NAIVE,
    autodiff.OP_CW_EFFICIENT,
    autodiff.OP_CWCONV,
    autodiff.OP_MULTIHEAD,
)

VARIANT_FOR_OP = {
    autodiff.OP_VANILLA: "vanilla",
    autodiff.OP_STRUCT_SCALAR: "structsa-scalar",
    autodiff.OP_STRUCT_CONTEXTUAL: "structsa-contextual",
    autodiff.OP_CONVSA: "convsa",
    autodiff.OP_CW_NAIVE: "channelwise-naive",
    autodiff.OP_CW_EFFICIENT: "channelwise-efficient",
    autodiff.OP_CWCONV: "convsa-channelwise",
    autodiff.OP_MULTIHEAD: "structsa-contextual",
}


def sample_config(rng, op_id):
    """Draw one random small geometry for an op (always float64)."""
    if int(rng.integers(2)) == 0:
        extents = (int(rng.integers(4, 13)),)
        kernels = (int(rng.choice([1, 3])),)
    else:
        extents = (3, int(rng.integers(3, 5)))
        kernels = (int(rng.choice([1, 3])), int(rng.choice([1, 3])))
    config = RunConfig(
        variant=VARIANT_FOR_OP[op_id],
        extents=extents,
        kernel_extents=kernels,
        padding="zero" if int(rng.integers(2)) == 0 else "circular",
        structure_dim=int(rng.integers(1, 4)),
        heads=2 if op_id == autodiff.OP_MULTIHEAD else 1,
        softmax_domain="flat" if int(rng.integers(2)) == 0 else "per-query",
        scale=float(rng.choice([1.0, 0.7])),
        dtype="f64",
        seed=int(rng.integers(0, 2**31)),
    ).validate()
    if op_id == autodiff.OP_MULTIHEAD:
        channels = 2 * int(rng.integers(1, 4))
    else:
        channels = int(rng.integers(2, 7))
    return config, channels


def check_op(op_id, rng, step=1e-5, corrupt=False):
    """Compare analytic and finite-difference gradients for one random draw.

    Returns {leaf path: relative error}. `corrupt` perturbs one analytic
    entry, a hook for verifying that the check can fail.
    """
    config, channels = sample_config(rng, op_id)
    if op_id == autodiff.OP_MULTIHEAD:
        params = build_params(config, channels)
        if not isinstance(params, list):
            params = [params]
    else:
        params = init_params(config, channels)
    n = config.grid().n_tokens
    data_rng = np.random.default_rng(config.seed ^ 0x5EED)
    x = data_rng.uniform(-1.0, 1.0, size=(n, channels))
    upstream = data_rng.uniform(-1.0, 1.0, size=(n, channels))
    analytic = autodiff.backward(op_id, x, params, upstream)
    if corrupt:
        bad = analytic.d_x.copy()
        bad.flat[0] += 1e-3 * max(1.0, float(np.abs(bad).max()))
        analytic = autodiff.GradBundle(bad, analytic.d_params)
    reference = autodiff.fd_gradient(op_id, x, params, upstream, step=step)
    return autodiff.compare_bundles(analytic, reference)


def run(ops=CHECK_OPS, configs=20, seed=0, step=1e-5, corrupt=False):
    """Run `configs` random draws for each op.

    Returns (records, worst): records are (op_id, config index, leaf, error)
    tuples; worst is the largest error seen.
    """
    rng = np.random.default_rng(seed)
    records = []
    worst = 0.0
    for index in range(configs):
        for op_id in ops:
            errors = check_op(op_id, rng, step=step, corrupt=corrupt)
            for leaf, err in errors.items():
                records.append((op_id, index, leaf, err))
                worst = max(worst, err)
    return records, worst
