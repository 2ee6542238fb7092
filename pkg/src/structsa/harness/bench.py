"""Benchmark sweeps over the two channel-wise routes and both kernel backends.

Every case runs the naive and efficient routes, checks the measured ledger
against the closed-form cost model (per-phase flops and correlation
intermediates, plus the exact N*M/D intermediate ratio and route agreement),
and emits one CSV row per (backend, route). Wall times are measured unless
timing is disabled, which zeroes the column so output bytes are
reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import backend
from ..channelwise import (
    CostLedger,
    ROUTE_EFFICIENT,
    ROUTE_NAIVE,
    efficient_cost_formula,
    naive_cost_formula,
    structsa_channelwise_efficient,
    structsa_channelwise_naive,
)
from .config import ConfigError, NumericGateError, RunConfig, init_params

CSV_HEADER = "backend,route,n,c,m,d,wall_time_s,flops,intermediate_elems"


@dataclass(frozen=True)
class BenchCase:
    n: int
    c: int
    m: int
    d: int


def parse_case(text):
    parts = str(text).split(",")
    if len(parts) != 4:
        raise ConfigError(f"sweep: expected 'N,C,M,D', got {text!r}")
    try:
        n, c, m, d = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"sweep: non-integer entry in {text!r}") from None
    if min(n, c, m, d) < 1:
        raise ConfigError(f"sweep: all of N,C,M,D must be >= 1 in {text!r}")
    if m % 2 == 0 or m > n:
        raise ConfigError(f"sweep: window M must be odd and <= N in {text!r}")
    return BenchCase(n=n, c=c, m=m, d=d)


def _ledger_matches(ledger, formula):
    phases = {phase for phase in ledger.phases()} | set(formula)
    for phase in phases:
        expected = formula.get(phase, {"flops": 0, "intermediate_elems": 0})
        if ledger.flops.get(phase, 0) != expected["flops"]:
            return False
        if ledger.intermediate_elems.get(phase, 0) != expected["intermediate_elems"]:
            return False
    return True


def resolve_backends(requested):
    if requested == "both":
        return backend.available()
    if requested == "current":
        return (backend.name(),)
    if requested in backend.available():
        return (requested,)
    raise ConfigError(
        f"backends: {requested!r} not available; choices: current, both, " + ", ".join(backend.available())
    )


def run_case(case, backend_name, seed=0, dtype="f64", timing=True):
    """Run both routes for one case on one backend; returns two CSV rows."""
    if case.n < 1 or case.c < 1 or case.d < 1:
        raise ConfigError(f"sweep: N, C, D must be positive in {case}")
    if case.m < 1 or case.m % 2 == 0 or case.m > case.n:
        raise ConfigError(f"sweep: M must be odd, positive, and <= N in {case}")
    config = RunConfig(
        variant="channelwise-naive",
        extents=(case.n,),
        kernel_extents=(case.m,),
        structure_dim=case.d,
        dtype=dtype,
        seed=seed,
    ).validate()
    params = init_params(config, case.c)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(-1.0, 1.0, size=(case.n, case.c)).astype(config.numpy_dtype())

    rows = []
    outputs = {}
    ledgers = {}
    with backend.using(backend_name):
        for route, op in ((ROUTE_NAIVE, structsa_channelwise_naive), (ROUTE_EFFICIENT, structsa_channelwise_efficient)):
            ledger = CostLedger()
            start = time.perf_counter()
            outputs[route] = op(x, params, ledger)
            wall = time.perf_counter() - start if timing else 0.0
            ledgers[route] = ledger
            rows.append(
                f"{backend_name},{route},{case.n},{case.c},{case.m},{case.d},"
                f"{wall:.6f},{ledger.total_flops()},{ledger.total_intermediates()}"
            )

    if not _ledger_matches(ledgers[ROUTE_NAIVE], naive_cost_formula(case.n, case.c, case.m, case.d)):
        raise NumericGateError(f"bench: naive ledger deviates from cost formula for {case}")
    if not _ledger_matches(ledgers[ROUTE_EFFICIENT], efficient_cost_formula(case.n, case.c, case.m, case.d)):
        raise NumericGateError(f"bench: efficient ledger deviates from cost formula for {case}")
    naive_total = ledgers[ROUTE_NAIVE].total_intermediates()
    efficient_total = ledgers[ROUTE_EFFICIENT].total_intermediates()
    if naive_total * case.d != efficient_total * case.n * case.m:
        raise NumericGateError(f"bench: intermediate ratio is not N*M/D for {case}")
    tol = 1e-10 if dtype == "f64" else 1e-5
    gap = float(np.abs(outputs[ROUTE_NAIVE] - outputs[ROUTE_EFFICIENT]).max())
    if gap > tol:
        raise NumericGateError(f"bench: routes disagree by {gap:.3e} for {case}")
    return rows


def run_sweep(cases, backends=("current",), seed=0, dtype="f64", timing=True):
    names = []
    for requested in backends:
        for name in resolve_backends(requested):
            if name not in names:
                names.append(name)
    rows = [CSV_HEADER]
    for case in cases:
        for name in names:
            rows.extend(run_case(case, name, seed=seed, dtype=dtype, timing=timing))
    return rows
