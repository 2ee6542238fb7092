"""Reverse-mode gradients for every forward op, written as explicit adjoints.

There is no tape: `backward` reruns the forward pass to rebuild the needed
intermediates, then applies hand-derived adjoint contractions. `fd_gradient`
is the independent oracle, differencing the actual forward with central
finite differences; it never touches the adjoint code.

Parameter gradients are keyed by dotted field paths ("base.w_query",
"pattern_kernels", "head0.base.w_key", ...), the same keys `param_leaves`
produces, so analytic and finite-difference bundles can be compared leaf by
leaf. Gradients are taken with respect to tensors only; configuration
scalars such as the logit scale are not differentiated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import attention, channelwise, tensor
from .attention import (
    SOFTMAX_PER_QUERY,
    ConvSAParams,
    SAWeights,
    StructParams,
    VALUE_SCALAR,
    score_domain_axes,
    softmax_backward,
)
from .channelwise import ChannelwiseConvParams, ChannelwiseParams
from .tensor import DimensionError, Grid, require

OP_VANILLA = "vanilla_sa"
OP_STRUCT_SCALAR = "structsa_scalar"
OP_STRUCT_CONTEXTUAL = "structsa_contextual"
OP_CONVSA = "convsa"
OP_CW_NAIVE = "channelwise_naive"
OP_CW_EFFICIENT = "channelwise_efficient"
OP_CWCONV = "convsa_channelwise"
OP_MULTIHEAD = "multihead"
OP_MATMUL = "matmul"
OP_SOFTMAX_FLAT = "softmax_flat"

OP_IDS = (
    OP_VANILLA,
    OP_STRUCT_SCALAR,
    OP_STRUCT_CONTEXTUAL,
    OP_CONVSA,
    OP_CW_NAIVE,
    OP_CW_EFFICIENT,
    OP_CWCONV,
    OP_MULTIHEAD,
    OP_MATMUL,
    OP_SOFTMAX_FLAT,
)


@dataclass
class GradBundle:
    """Input gradient plus parameter gradients keyed by dotted leaf path."""

    d_x: np.ndarray
    d_params: dict


def param_leaves(params, prefix=""):
    """Flatten a parameter bundle to {dotted path: array}. Grids, strings,
    and plain scalars are configuration, not parameters, and are skipped."""
    if params is None:
        return {}
    if isinstance(params, np.ndarray):
        return {prefix or "b": params}
    if isinstance(params, (list, tuple)):
        leaves = {}
        for k, item in enumerate(params):
            leaves.update(param_leaves(item, f"{prefix}head{k}."))
        return leaves
    if dataclasses.is_dataclass(params):
        leaves = {}
        for f in dataclasses.fields(params):
            value = getattr(params, f.name)
            if isinstance(value, np.ndarray):
                leaves[prefix + f.name] = value
            elif dataclasses.is_dataclass(value) and not isinstance(value, Grid):
                leaves.update(param_leaves(value, prefix + f.name + "."))
        return leaves
    raise TypeError(f"param_leaves: unsupported bundle {type(params).__name__}")


def replace_leaf(params, path, value):
    """Return a copy of the bundle with one leaf tensor replaced."""
    if isinstance(params, np.ndarray):
        return value
    if isinstance(params, (list, tuple)):
        require(path.startswith("head"), f"replace_leaf: bad multi-head path {path!r}")
        head, rest = path.split(".", 1)
        k = int(head[len("head"):])
        items = list(params)
        items[k] = replace_leaf(items[k], rest, value)
        return type(params)(items)
    if dataclasses.is_dataclass(params):
        if "." in path:
            field_name, rest = path.split(".", 1)
            child = getattr(params, field_name)
            if isinstance(child, np.ndarray):
                raise KeyError(f"replace_leaf: {field_name} is a leaf, cannot descend into {path!r}")
            return dataclasses.replace(params, **{field_name: replace_leaf(child, rest, value)})
        return dataclasses.replace(params, **{path: value})
    raise TypeError(f"replace_leaf: unsupported bundle {type(params).__name__}")


def forward(op_id, x, params):
    """Run the forward op named by `op_id` (the op set `backward` covers)."""
    if op_id == OP_MATMUL:
        return tensor.matmul(x, params)
    if op_id == OP_SOFTMAX_FLAT:
        return tensor.softmax_flat(x)
    if op_id == OP_VANILLA:
        return attention.vanilla_sa(x, params)
    if op_id == OP_STRUCT_SCALAR:
        return attention.structsa_scalar(x, params)
    if op_id == OP_STRUCT_CONTEXTUAL:
        return attention.structsa_contextual(x, params)
    if op_id == OP_CONVSA:
        return attention.convsa(x, params)
    if op_id == OP_CW_NAIVE:
        return channelwise.structsa_channelwise_naive(x, params)
    if op_id == OP_CW_EFFICIENT:
        return channelwise.structsa_channelwise_efficient(x, params)
    if op_id == OP_CWCONV:
        return channelwise.convsa_channelwise(x, params.key_taps, params.value_taps, params.base, params.grid)
    if op_id == OP_MULTIHEAD:
        return attention.multihead(x, params)
    raise ValueError(f"forward: unknown op {op_id!r}")


def _proj_backward(xb, w, d_out):
    d_x = np.einsum("bno,co->bnc", d_out, w, optimize=False)
    d_w = np.einsum("bnc,bno->co", xb, d_out, optimize=False)
    return d_x, d_w


def _scatter_batch(d_ctx, grid):
    b, n, m, c = d_ctx.shape
    nbr, valid = grid.neighbor_table()
    jj, mm = np.nonzero(valid)
    acc = np.zeros((n, b, c), dtype=d_ctx.dtype)
    np.add.at(acc, nbr[jj, mm], np.moveaxis(d_ctx[:, jj, mm], 0, 1))
    return np.ascontiguousarray(np.moveaxis(acc, 0, 1))


def _base_backward(cache, base, d_q, d_kfull, d_vfull):
    xb = cache["x"]
    d_x1, d_wq = _proj_backward(xb, base.w_query, d_q)
    d_x2, d_wk = _proj_backward(xb, base.w_key, d_kfull)
    d_x3, d_wv = _proj_backward(xb, base.w_value, d_vfull)
    return d_x1 + d_x2 + d_x3, {"w_query": d_wq, "w_key": d_wk, "w_value": d_wv}


def vanilla_backward_batch(w, cache, d_y):
    a, q, k, v = cache["a"], cache["q"], cache["k"], cache["v"]
    s = q.dtype.type(w.scale)
    d_a = np.einsum("bic,bjc->bij", d_y, v, optimize=False)
    d_v = np.einsum("bij,bic->bjc", a, d_y, optimize=False)
    d_l = softmax_backward(a, d_a, (2,))
    d_q = s * np.einsum("bij,bjc->bic", d_l, k, optimize=False)
    d_k = s * np.einsum("bij,bic->bjc", d_l, q, optimize=False)
    d_x, d_base = _base_backward(cache, w, d_q, d_k, d_v)
    return d_x, d_base


def struct_backward_batch(p, cache, d_y):
    a, q, kctx = cache["a"], cache["q"], cache["kctx"]
    s = q.dtype.type(p.base.scale)
    pk = p.pattern_kernels
    if p.value_mode == VALUE_SCALAR:
        v = cache["v"]
        uv = p.aggregators[0]
        d_a = np.einsum("bic,d,bjc->bijd", d_y, uv, v, optimize=False)
        d_uv = np.einsum("bijd,bjc,bic->d", a, v, d_y, optimize=False)[None, :]
        d_vfull = np.einsum("bijd,d,bic->bjc", a, uv, d_y, optimize=False)
    else:
        vctx = cache["vctx"]
        uv = p.aggregators
        d_a = np.einsum("bic,md,bjmc->bijd", d_y, uv, vctx, optimize=False)
        d_uv = np.einsum("bijd,bjmc,bic->md", a, vctx, d_y, optimize=False)
        d_vctx = np.einsum("bijd,md,bic->bjmc", a, uv, d_y, optimize=False)
        d_vfull = _scatter_batch(d_vctx, p.grid)
    d_l = softmax_backward(a, d_a, score_domain_axes(p.softmax_domain))
    d_q = s * np.einsum("bijd,bjmc,md->bic", d_l, kctx, pk, optimize=False)
    d_kctx = s * np.einsum("bijd,bic,md->bjmc", d_l, q, pk, optimize=False)
    d_pk = s * np.einsum("bijd,bic,bjmc->md", d_l, q, kctx, optimize=False)
    d_kfull = _scatter_batch(d_kctx, p.grid)
    d_x, d_base = _base_backward(cache, p.base, d_q, d_kfull, d_vfull)
    d_params = {f"base.{k}": v for k, v in d_base.items()}
    d_params["pattern_kernels"] = d_pk
    d_params["aggregators"] = d_uv
    return d_x, d_params


def convsa_backward_batch(p, cache, d_y):
    a, q, kctx, vctx = cache["a"], cache["q"], cache["kctx"], cache["vctx"]
    s = q.dtype.type(p.base.scale)
    kt, vt = p.key_taps, p.value_taps
    d_a = np.einsum("bic,md,bjmc->bijd", d_y, vt, vctx, optimize=False)
    d_vt = np.einsum("bijd,bjmc,bic->md", a, vctx, d_y, optimize=False)
    d_vctx = np.einsum("bijd,md,bic->bjmc", a, vt, d_y, optimize=False)
    d_l = softmax_backward(a, d_a, (2,))
    d_q = s * np.einsum("bijd,bjmc,md->bic", d_l, kctx, kt, optimize=False)
    d_kctx = s * np.einsum("bijd,bic,md->bjmc", d_l, q, kt, optimize=False)
    d_kt = s * np.einsum("bijd,bic,bjmc->md", d_l, q, kctx, optimize=False)
    d_x, d_base = _base_backward(cache, p.base, d_q, _scatter_batch(d_kctx, p.grid), _scatter_batch(d_vctx, p.grid))
    d_params = {f"base.{k}": v for k, v in d_base.items()}
    d_params["key_taps"] = d_kt
    d_params["value_taps"] = d_vt
    return d_x, d_params


def cw_backward_batch(p, cache, d_y, route=channelwise.ROUTE_EFFICIENT):
    """Channel-wise adjoint; contraction order follows the forward route."""
    a, q, kctx, vctx = cache["a"], cache["q"], cache["kctx"], cache["vctx"]
    s = q.dtype.type(p.base.scale)
    hk, hv = p.pattern_kernels, p.aggregators
    if route == channelwise.ROUTE_NAIVE:
        d_a = np.einsum("bic,dmc,bjmc->bijd", d_y, hv, vctx, optimize=False)
        d_hv = np.einsum("bijd,bic,bjmc->dmc", a, d_y, vctx, optimize=False)
        d_vctx = np.einsum("bijd,dmc,bic->bjmc", a, hv, d_y, optimize=False)
        d_l = softmax_backward(a, d_a, score_domain_axes(p.softmax_domain))
        d_q = s * np.einsum("bijd,bjmc,dmc->bic", d_l, kctx, hk, optimize=False)
        d_kctx = s * np.einsum("bijd,bic,dmc->bjmc", d_l, q, hk, optimize=False)
        d_hk = s * np.einsum("bijd,bic,bjmc->dmc", d_l, q, kctx, optimize=False)
    else:
        w = np.einsum("dmc,bjmc->bjdc", hv, vctx, optimize=False)
        d_a = np.einsum("bic,bjdc->bijd", d_y, w, optimize=False)
        d_w = np.einsum("bijd,bic->bjdc", a, d_y, optimize=False)
        d_hv = np.einsum("bjdc,bjmc->dmc", d_w, vctx, optimize=False)
        d_vctx = np.einsum("bjdc,dmc->bjmc", d_w, hv, optimize=False)
        d_l = softmax_backward(a, d_a, score_domain_axes(p.softmax_domain))
        g = np.einsum("bjmc,dmc->bjdc", kctx, hk, optimize=False)
        d_q = s * np.einsum("bijd,bjdc->bic", d_l, g, optimize=False)
        d_g = s * np.einsum("bijd,bic->bjdc", d_l, q, optimize=False)
        d_kctx = np.einsum("bjdc,dmc->bjmc", d_g, hk, optimize=False)
        d_hk = np.einsum("bjdc,bjmc->dmc", d_g, kctx, optimize=False)
    d_x, d_base = _base_backward(cache, p.base, d_q, _scatter_batch(d_kctx, p.grid), _scatter_batch(d_vctx, p.grid))
    d_params = {f"base.{k}": v for k, v in d_base.items()}
    d_params["pattern_kernels"] = d_hk
    d_params["aggregators"] = d_hv
    return d_x, d_params


def cwconv_backward_batch(p, cache, d_y):
    a, q, kctx, vctx = cache["a"], cache["q"], cache["kctx"], cache["vctx"]
    s = q.dtype.type(p.base.scale)
    kt, vt = p.key_taps, p.value_taps
    a2 = a[..., 0]
    u = np.einsum("mc,bjmc->bjc", vt, vctx, optimize=False)
    d_a2 = np.einsum("bic,bjc->bij", d_y, u, optimize=False)
    d_u = np.einsum("bij,bic->bjc", a2, d_y, optimize=False)
    d_vt = np.einsum("bjc,bjmc->mc", d_u, vctx, optimize=False)
    d_vctx = np.einsum("bjc,mc->bjmc", d_u, vt, optimize=False)
    d_l = softmax_backward(a, d_a2[..., None], (2,))[..., 0]
    d_q = s * np.einsum("bij,bjmc,mc->bic", d_l, kctx, kt, optimize=False)
    d_kctx = s * np.einsum("bij,bic,mc->bjmc", d_l, q, kt, optimize=False)
    d_kt = s * np.einsum("bij,bic,bjmc->mc", d_l, q, kctx, optimize=False)
    d_x, d_base = _base_backward(cache, p.base, d_q, _scatter_batch(d_kctx, p.grid), _scatter_batch(d_vctx, p.grid))
    d_params = {f"base.{k}": v for k, v in d_base.items()}
    d_params["key_taps"] = d_kt
    d_params["value_taps"] = d_vt
    return d_x, d_params


def _check_upstream(upstream, y, name):
    upstream = np.asarray(upstream)
    require(
        upstream.shape == y.shape,
        f"{name}: upstream shape {upstream.shape} does not match output shape {y.shape}",
    )
    return upstream


def backward(op_id, x, params, upstream):
    """Analytic reverse-mode gradients of <upstream, op(x, params)>."""
    x = np.asarray(x)
    if op_id == OP_MATMUL:
        y = tensor.matmul(x, params)
        upstream = _check_upstream(upstream, y, op_id)
        d_x = np.einsum("io,jo->ij", upstream, params, optimize=False)
        d_b = np.einsum("ij,io->jo", x, upstream, optimize=False)
        return GradBundle(d_x, {"b": d_b})
    if op_id == OP_SOFTMAX_FLAT:
        a = tensor.softmax_flat(x)
        upstream = _check_upstream(upstream, a, op_id)
        d_x = a * (upstream - (a * upstream).sum())
        return GradBundle(d_x, {})
    if op_id == OP_MULTIHEAD:
        y = attention.multihead(x, params)
        upstream = _check_upstream(upstream, y, op_id)
        heads = len(params)
        width = x.shape[1] // heads
        d_x = np.zeros_like(x)
        d_params = {}
        for k, head in enumerate(params):
            lo = k * width
            sub = backward(_op_for_params(head), np.ascontiguousarray(x[:, lo:lo + width]), head,
                           np.ascontiguousarray(upstream[:, lo:lo + width]))
            d_x[:, lo:lo + width] = sub.d_x
            d_params.update({f"head{k}.{path}": g for path, g in sub.d_params.items()})
        return GradBundle(d_x, d_params)

    xb = np.ascontiguousarray(x)[None]
    if op_id == OP_VANILLA:
        y, cache = attention._vanilla_forward(xb, params)
        upstream = _check_upstream(upstream, y[0], op_id)
        d_x, d_params = vanilla_backward_batch(params, cache, upstream[None])
    elif op_id in (OP_STRUCT_SCALAR, OP_STRUCT_CONTEXTUAL):
        expected = VALUE_SCALAR if op_id == OP_STRUCT_SCALAR else attention.VALUE_CONTEXTUAL
        require(params.value_mode == expected, f"{op_id}: params are in {params.value_mode} value mode")
        y, cache = attention._struct_forward(xb, params)
        upstream = _check_upstream(upstream, y[0], op_id)
        d_x, d_params = struct_backward_batch(params, cache, upstream[None])
    elif op_id == OP_CONVSA:
        y, cache = attention._convsa_forward(xb, params)
        upstream = _check_upstream(upstream, y[0], op_id)
        d_x, d_params = convsa_backward_batch(params, cache, upstream[None])
    elif op_id in (OP_CW_NAIVE, OP_CW_EFFICIENT):
        route = channelwise.ROUTE_NAIVE if op_id == OP_CW_NAIVE else channelwise.ROUTE_EFFICIENT
        y, cache = channelwise._cw_forward(xb, params, route)
        upstream = _check_upstream(upstream, y[0], op_id)
        d_x, d_params = cw_backward_batch(params, cache, upstream[None], route)
    elif op_id == OP_CWCONV:
        y, cache = channelwise._cwconv_forward(xb, params)
        upstream = _check_upstream(upstream, y[0], op_id)
        d_x, d_params = cwconv_backward_batch(params, cache, upstream[None])
    else:
        raise ValueError(f"backward: unknown op {op_id!r}")
    return GradBundle(d_x[0], d_params)


def _op_for_params(params):
    if isinstance(params, SAWeights):
        return OP_VANILLA
    if isinstance(params, StructParams):
        return OP_STRUCT_SCALAR if params.value_mode == VALUE_SCALAR else OP_STRUCT_CONTEXTUAL
    if isinstance(params, ConvSAParams):
        return OP_CONVSA
    if isinstance(params, ChannelwiseParams):
        return OP_CW_EFFICIENT
    if isinstance(params, ChannelwiseConvParams):
        return OP_CWCONV
    raise TypeError(f"no op for parameter bundle {type(params).__name__}")


def _leaves_for(op_id, params):
    if op_id == OP_MATMUL:
        return {"b": np.asarray(params)}
    if op_id == OP_SOFTMAX_FLAT:
        return {}
    return param_leaves(params)


def _require_f64(op_id, x, leaves):
    require(np.asarray(x).dtype == np.float64, f"fd_gradient({op_id}): x must be float64")
    for path, leaf in leaves.items():
        require(leaf.dtype == np.float64, f"fd_gradient({op_id}): leaf {path} must be float64")


def fd_gradient(op_id, x, params, upstream, step=1e-5):
    """Central-difference gradients of <upstream, op(x, params)>.

    Float64 only. The objective is differenced through the real forward op,
    one scalar at a time; the analytic adjoints are never consulted.
    """
    if not step > 0:
        raise ValueError(f"fd_gradient: step must be positive, got {step}")
    x = np.asarray(x)
    upstream = np.asarray(upstream, dtype=np.float64)
    leaves = _leaves_for(op_id, params)
    _require_f64(op_id, x, leaves)

    def objective(x_value, bundle):
        return float(np.sum(upstream * forward(op_id, x_value, bundle)))

    def diff_array(arr, rebuild):
        grad = np.zeros_like(arr)
        work = arr.copy()
        flat = work.reshape(-1)
        gflat = grad.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + step
            f_plus = rebuild(work)
            flat[k] = original - step
            f_minus = rebuild(work)
            flat[k] = original
            gflat[k] = (f_plus - f_minus) / (2.0 * step)
        return grad

    d_x = diff_array(x, lambda arr: objective(arr, params))
    d_params = {}
    for path in leaves:
        if op_id == OP_MATMUL:
            d_params[path] = diff_array(leaves[path], lambda arr: objective(x, arr))
        else:
            d_params[path] = diff_array(
                leaves[path], lambda arr, p=path: objective(x, replace_leaf(params, p, arr.copy()))
            )
    return GradBundle(d_x, d_params)


def relative_error(analytic, reference):
    """Max elementwise deviation scaled by the larger tensor magnitude,
    floored at 1 so near-zero gradients compare absolutely."""
    analytic = np.asarray(analytic)
    reference = np.asarray(reference)
    require(analytic.shape == reference.shape, "relative_error: shape mismatch")
    scale = max(1.0, float(np.abs(analytic).max(initial=0.0)), float(np.abs(reference).max(initial=0.0)))
    return float(np.abs(analytic - reference).max(initial=0.0)) / scale


def compare_bundles(analytic, reference):
    """Per-leaf relative errors between two gradient bundles ('x' plus params)."""
    require(set(analytic.d_params) == set(reference.d_params),
            "compare_bundles: parameter sets differ")
    errors = {"x": relative_error(analytic.d_x, reference.d_x)}
    for path in analytic.d_params:
        errors[path] = relative_error(analytic.d_params[path], reference.d_params[path])
    return errors
