"""Channel-wise structure attention: per-channel correlation patterns and
per-channel dynamic value kernels, in two algebraically identical routes.

The naive route materializes the full per-pair channel-wise correlation map
(the query row broadcast against every key window) before contracting it
with the pattern kernels: N^2 * M * C correlation scalars. The efficient
route contracts each key window against the kernels once per token first,
so only N * C * D correlation scalars ever exist; queries then correlate
against that shared result.

`CostLedger` records both routes' work. Counting convention:

- flops: scalar multiply-accumulate operations in the correlation, score,
  kernel, and aggregation contractions. Projections, gathers, and softmax
  exponentials are not counted.
- intermediate_elems: scalars materialized in tensors that hold correlation
  values (query-key window products, or window-kernel contractions). Score
  maps, dynamic kernels, and value-side contractions are not correlation
  intermediates and are never counted.

Under this convention the naive route records exactly N^2*M*C intermediate
elements and the efficient route exactly N*C*D, an N*M/D reduction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .attention import (
    SOFTMAX_DOMAINS,
    SOFTMAX_FLAT,
    SOFTMAX_PER_QUERY,
    SAWeights,
    _check_input,
    _gather_batch,
    _project,
    normalize_scores,
)
from .tensor import DimensionError, Grid, check_dtype, require

ROUTE_NAIVE = "naive"
ROUTE_EFFICIENT = "efficient"


@dataclass
class CostLedger:
    """Per-phase multiply-accumulate and correlation-intermediate counters.

    Counters only ever increase; phase labels follow insertion order.
    """

    flops: dict = field(default_factory=dict)
    intermediate_elems: dict = field(default_factory=dict)

    def add_flops(self, phase, count):
        count = int(count)
        if count < 0:
            raise ValueError(f"CostLedger.add_flops: negative count {count}")
        self.flops[phase] = self.flops.get(phase, 0) + count
        self.intermediate_elems.setdefault(phase, 0)

    def add_intermediates(self, phase, count):
        count = int(count)
        if count < 0:
            raise ValueError(f"CostLedger.add_intermediates: negative count {count}")
        self.intermediate_elems[phase] = self.intermediate_elems.get(phase, 0) + count
        self.flops.setdefault(phase, 0)

    def total_flops(self):
        return sum(self.flops.values())

    def total_intermediates(self):
        return sum(self.intermediate_elems.values())

    def phases(self):
        seen = list(self.flops)
        for phase in self.intermediate_elems:
            if phase not in self.flops:
                seen.append(phase)
        return seen

    def rows(self):
        return [
            (phase, self.flops.get(phase, 0), self.intermediate_elems.get(phase, 0))
            for phase in self.phases()
        ]

    def to_csv(self):
        lines = ["phase,flops,intermediate_elems"]
        lines += [f"{p},{f},{i}" for p, f, i in self.rows()]
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())


@dataclass(frozen=True)
class ChannelwiseParams:
    """Per-channel structure parameters.

    pattern_kernels: (D, M, C) correlation patterns, one (M, C) map per
        structure channel.
    aggregators: (D, M, C) per-channel dynamic-kernel generators.
    """

    base: SAWeights
    pattern_kernels: np.ndarray
    aggregators: np.ndarray
    grid: Grid
    softmax_domain: str = SOFTMAX_FLAT

    def __post_init__(self):
        m = self.grid.window_size
        c = self.base.channels
        pk = np.asarray(self.pattern_kernels)
        ag = np.asarray(self.aggregators)
        require(
            pk.ndim == 3 and pk.shape[1:] == (m, c),
            f"ChannelwiseParams.pattern_kernels: expected (D, {m}, {c}), got {pk.shape}",
        )
        require(pk.shape[0] >= 1, "ChannelwiseParams.pattern_kernels: D must be >= 1")
        require(
            ag.shape == pk.shape,
            f"ChannelwiseParams.aggregators: expected {pk.shape}, got {ag.shape}",
        )
        if self.softmax_domain not in SOFTMAX_DOMAINS:
            raise DimensionError(f"ChannelwiseParams.softmax_domain: unknown domain {self.softmax_domain!r}")
        check_dtype("ChannelwiseParams", self.base.w_query, pk, ag)

    @property
    def structure_dim(self):
        return self.pattern_kernels.shape[0]


@dataclass(frozen=True)
class ChannelwiseConvParams:
    """Per-channel window taps (unshared across channels) for the conv form."""

    base: SAWeights
    key_taps: np.ndarray
    value_taps: np.ndarray
    grid: Grid

    def __post_init__(self):
        m = self.grid.window_size
        c = self.base.channels
        for label, taps in (("key_taps", self.key_taps), ("value_taps", self.value_taps)):
            t = np.asarray(taps)
            require(t.shape == (m, c), f"ChannelwiseConvParams.{label}: expected ({m}, {c}), got {t.shape}")
        check_dtype("ChannelwiseConvParams", self.base.w_query, self.key_taps, self.value_taps)


def naive_cost_formula(n, c, m, d):
    """Closed-form ledger contents for one naive-route forward."""
    return {
        "correlation": {"flops": n * n * m * c, "intermediate_elems": n * n * m * c},
        "scores": {"flops": n * n * m * c * d, "intermediate_elems": 0},
        "kernels": {"flops": n * n * d * m * c, "intermediate_elems": 0},
        "aggregate": {"flops": n * n * m * c, "intermediate_elems": 0},
    }


def efficient_cost_formula(n, c, m, d):
    """Closed-form ledger contents for one efficient-route forward."""
    return {
        "kcontract": {"flops": n * m * c * d, "intermediate_elems": n * c * d},
        "scores": {"flops": n * n * c * d, "intermediate_elems": 0},
        "vcontract": {"flops": n * m * c * d, "intermediate_elems": 0},
        "aggregate": {"flops": n * n * c * d, "intermediate_elems": 0},
    }


def intermediate_ratio(n, m, d):
    """Exact naive/efficient correlation-intermediate ratio: N*M/D."""
    from fractions import Fraction

    return Fraction(n * m, d)


def _cw_forward(xb, p, route, ledger=None):
    km = backend.get()
    threads = backend.thread_count()
    b, n, c = xb.shape
    d = p.structure_dim
    m = p.grid.window_size
    q = _project(xb, p.base.w_query)
    kctx = _gather_batch(_project(xb, p.base.w_key), p.grid)
    vctx = _gather_batch(_project(xb, p.base.w_value), p.grid)
    pk = np.ascontiguousarray(p.pattern_kernels)
    ag = np.ascontiguousarray(p.aggregators)
    scale = float(p.base.scale)
    if route == ROUTE_NAIVE:
        logits, produced = km.cw_logits_naive(q, kctx, pk, scale, threads)
        if ledger is not None:
            ledger.add_intermediates("correlation", produced)
            ledger.add_flops("correlation", b * n * n * m * c)
            ledger.add_flops("scores", b * n * n * m * c * d)
    elif route == ROUTE_EFFICIENT:
        logits, produced = km.cw_logits_efficient(q, kctx, pk, scale, threads)
        if ledger is not None:
            ledger.add_intermediates("kcontract", produced)
            ledger.add_flops("kcontract", b * n * m * c * d)
            ledger.add_flops("scores", b * n * n * c * d)
    else:
        raise DimensionError(f"unknown channel-wise route {route!r}")
    a = normalize_scores(logits, p.softmax_domain)
    if route == ROUTE_NAIVE:
        y = km.cw_aggregate_naive(a, ag, vctx, threads)
        if ledger is not None:
            ledger.add_flops("kernels", b * n * n * d * m * c)
            ledger.add_flops("aggregate", b * n * n * m * c)
    else:
        y = km.cw_aggregate_efficient(a, ag, vctx, threads)
        if ledger is not None:
            ledger.add_flops("vcontract", b * n * m * c * d)
            ledger.add_flops("aggregate", b * n * n * c * d)
    cache = {"x": xb, "q": q, "kctx": kctx, "vctx": vctx, "a": a}
    return y, cache


def structsa_channelwise_naive(x, p, ledger=None):
    """Channel-wise structure attention via full correlation-map materialization."""
    x = _check_input(x, p.base.channels, p.grid, name="structsa_channelwise_naive")
    check_dtype("structsa_channelwise_naive", x, p.base.w_query)
    y, _ = _cw_forward(x[None], p, ROUTE_NAIVE, ledger)
    return y[0]


def structsa_channelwise_efficient(x, p, ledger=None):
    """Channel-wise structure attention via the reordered window contraction."""
    x = _check_input(x, p.base.channels, p.grid, name="structsa_channelwise_efficient")
    check_dtype("structsa_channelwise_efficient", x, p.base.w_query)
    y, _ = _cw_forward(x[None], p, ROUTE_EFFICIENT, ledger)
    return y[0]


def _cwconv_forward(xb, p):
    km = backend.get()
    threads = backend.thread_count()
    q = _project(xb, p.base.w_query)
    kctx = _gather_batch(_project(xb, p.base.w_key), p.grid)
    vctx = _gather_batch(_project(xb, p.base.w_value), p.grid)
    kt = np.ascontiguousarray(np.asarray(p.key_taps)[None])  # (1, M, C)
    vt = np.ascontiguousarray(np.asarray(p.value_taps)[None])
    logits, _ = km.cw_logits_efficient(q, kctx, kt, float(p.base.scale), threads)
    a = normalize_scores(logits, SOFTMAX_PER_QUERY)
    y = km.cw_aggregate_efficient(a, vt, vctx, threads)
    cache = {"x": xb, "q": q, "kctx": kctx, "vctx": vctx, "a": a}
    return y, cache


def convsa_channelwise(x, key_taps, value_taps, base, grid):
    """Conv-style attention with per-channel (unshared) window taps.

    With taps constant across channels this reduces to `convsa`; it also
    equals the channel-wise struct form with D=1 and per-query scores.
    """
    p = ChannelwiseConvParams(base=base, key_taps=np.asarray(key_taps), value_taps=np.asarray(value_taps), grid=grid)
    x = _check_input(x, base.channels, grid, name="convsa_channelwise")
    check_dtype("convsa_channelwise", x, base.w_query)
    y, _ = _cwconv_forward(x[None], p)
    return y[0]
