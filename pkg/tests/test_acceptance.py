"""Acceptance gate: nine checks, one PASS/FAIL line each.

Every check is self-contained, pins its seeds, and carries a wall-clock
budget. Oracles live in tests/oracles.py and are plain-loop re-derivations,
not calls back into the library.
"""

import time
from contextlib import contextmanager
from fractions import Fraction

import numpy as np

import oracles
from structsa import attention, channelwise, inspect as inspect_mod
from structsa.attention import (
    SOFTMAX_PER_QUERY,
    VALUE_CONTEXTUAL,
    VALUE_SCALAR,
    ConvSAParams,
    SAWeights,
    StructParams,
)
from structsa.channelwise import ChannelwiseParams
from structsa.harness import gradcheck
from structsa.harness.cli import main
from structsa.tensor import Grid, gather_contexts, read_stns, roll_tokens, write_stns


@contextmanager
def criterion(capsys, number, label, budget=None):
    start = time.perf_counter()
    status = "FAIL"
    try:
        yield
        elapsed = time.perf_counter() - start
        if budget is not None:
            assert elapsed < budget, (
                f"criterion {number} took {elapsed:.2f}s, budget {budget:.0f}s")
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - start
        with capsys.disabled():
            print(f"acceptance {number} {status} {label} [{elapsed:.2f}s]")


def draw_base(rng, channels, dtype=np.float64):
    lim = 1.0 / np.sqrt(channels)

    def w():
        return rng.uniform(-lim, lim, (channels, channels)).astype(dtype)

    return SAWeights(w_query=w(), w_key=w(), w_value=w(),
                     scale=1.0 / np.sqrt(channels))


def row_softmax(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_criterion_1_reduction_to_vanilla(capsys):
    with criterion(capsys, 1, "scalar variant with unit weights collapses to vanilla", 10.0):
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(50):
            n = int(rng.integers(2, 33))
            c = int(rng.integers(1, 17))
            base = draw_base(rng, c)
            x = rng.uniform(-1.0, 1.0, (n, c))
            p = StructParams(
                base=base,
                pattern_kernels=np.ones((1, 1)),
                aggregators=np.ones((1, 1)),
                grid=Grid((n,), (1,), "zero"),
                value_mode=VALUE_SCALAR,
                softmax_domain=SOFTMAX_PER_QUERY,
            )
            diff = np.abs(attention.structsa_scalar(x, p)
                          - attention.vanilla_sa(x, base)).max()
            worst = max(worst, float(diff))
        assert worst <= 1e-6, f"worst deviation {worst:.3e}"


def test_criterion_2_convsa_inside_structsa(capsys):
    with criterion(capsys, 2, "convsa equals contextual D=1 and its composition route", 10.0):
        rng = np.random.default_rng(202)
        worst_struct = 0.0
        worst_comp = 0.0
        for _ in range(50):
            n = int(rng.integers(4, 25))
            c = int(rng.integers(2, 9))
            padding = "zero" if int(rng.integers(2)) == 0 else "circular"
            grid = Grid((n,), (3,), padding)
            base = draw_base(rng, c)
            key_taps = rng.uniform(-1.0, 1.0, (3, 1))
            value_taps = rng.uniform(-1.0, 1.0, (3, 1))
            x = rng.uniform(-1.0, 1.0, (n, c))
            y = attention.convsa(
                x, ConvSAParams(base=base, key_taps=key_taps,
                                value_taps=value_taps, grid=grid))

            shared = StructParams(
                base=base,
                pattern_kernels=key_taps,
                aggregators=value_taps,
                grid=grid,
                value_mode=VALUE_CONTEXTUAL,
                softmax_domain=SOFTMAX_PER_QUERY,
            )
            diff = np.abs(y - attention.structsa_contextual(x, shared)).max()
            worst_struct = max(worst_struct, float(diff))

            # composition route: collapse key and value windows with the
            # taps first, then run plain attention on the collapsed rows
            q = x @ base.w_query
            k_ctx = gather_contexts(x @ base.w_key, grid)
            v_ctx = gather_contexts(x @ base.w_value, grid)
            k_conv = np.einsum("nmc,mz->nc", k_ctx, key_taps)
            v_conv = np.einsum("nmc,mz->nc", v_ctx, value_taps)
            a = row_softmax(base.scale * (q @ k_conv.T))
            diff = np.abs(y - a @ v_conv).max()
            worst_comp = max(worst_comp, float(diff))
        assert worst_struct <= 1e-6, f"struct route deviation {worst_struct:.3e}"
        assert worst_comp <= 1e-6, f"composition route deviation {worst_comp:.3e}"


def test_criterion_3_channelwise_routes_and_costs(capsys):
    with criterion(capsys, 3, "channel-wise route agreement and exact cost ledger", 60.0):
        rng = np.random.default_rng(303)
        cases = [
            ((16,), (3,), "zero", 4, 2, "flat", np.float64, 1e-10),
            ((32,), (3,), "circular", 8, 4, "per-query", np.float64, 1e-10),
            ((64,), (3,), "zero", 16, 8, "flat", np.float64, 1e-10),
            ((8, 8), (3, 3), "circular", 8, 3, "flat", np.float64, 1e-10),
            ((64,), (3,), "zero", 16, 8, "flat", np.float32, 1e-5),
        ]
        for extents, kext, padding, c, d, domain, dtype, tol in cases:
            grid = Grid(extents, kext, padding)
            m = grid.window_size
            p = ChannelwiseParams(
                base=draw_base(rng, c, dtype),
                pattern_kernels=rng.uniform(-1, 1, (d, m, c)).astype(dtype),
                aggregators=rng.uniform(-1, 1, (d, m, c)).astype(dtype),
                grid=grid,
                softmax_domain=domain,
            )
            x = rng.uniform(-1.0, 1.0, (grid.n_tokens, c)).astype(dtype)
            y_naive = channelwise.structsa_channelwise_naive(x, p)
            y_eff = channelwise.structsa_channelwise_efficient(x, p)
            diff = float(np.abs(y_naive - y_eff).max())
            assert diff <= tol, f"{dtype} route deviation {diff:.3e} at N={grid.n_tokens}"

        def run_with_ledgers(n, c, m, d):
            grid = Grid((n,), (m,), "zero")
            p = ChannelwiseParams(
                base=draw_base(rng, c),
                pattern_kernels=rng.uniform(-1, 1, (d, m, c)),
                aggregators=rng.uniform(-1, 1, (d, m, c)),
                grid=grid,
                softmax_domain="flat",
            )
            x = rng.uniform(-1.0, 1.0, (n, c))
            led_naive = channelwise.CostLedger()
            led_eff = channelwise.CostLedger()
            channelwise.structsa_channelwise_naive(x, p, led_naive)
            channelwise.structsa_channelwise_efficient(x, p, led_eff)
            return led_naive, led_eff

        led_naive, led_eff = run_with_ledgers(16, 4, 3, 2)
        as_dict = lambda led: {phase: {"flops": f, "intermediate_elems": e}
                               for phase, f, e in led.rows()}
        assert as_dict(led_naive) == channelwise.naive_cost_formula(16, 4, 3, 2)
        assert as_dict(led_eff) == channelwise.efficient_cost_formula(16, 4, 3, 2)

        led_naive, led_eff = run_with_ledgers(128, 16, 3, 4)
        measured = Fraction(led_naive.total_intermediates(),
                            led_eff.total_intermediates())
        assert measured == channelwise.intermediate_ratio(128, 3, 4)
        assert measured == Fraction(128 * 3, 4)


def test_criterion_4_gradient_check(capsys):
    with criterion(capsys, 4, "analytic gradients match finite differences", 120.0):
        records, worst = gradcheck.run(ops=gradcheck.CHECK_OPS, configs=20, seed=0)
        assert worst <= 1e-6, f"worst relative error {worst:.3e}"
        assert {op for op, _, _, _ in records} == set(gradcheck.CHECK_OPS)
        assert {index for _, index, _, _ in records} == set(range(20))
        assert "x" in {leaf for _, _, leaf, _ in records}


def test_criterion_5_kernel_structure(capsys):
    with criterion(capsys, 5, "convsa kernels are rank-1, struct kernels are diverse", 10.0):
        rng = np.random.default_rng(505)
        for _ in range(20):
            n = int(rng.integers(6, 17))
            c = int(rng.integers(2, 7))
            padding = "zero" if int(rng.integers(2)) == 0 else "circular"
            grid = Grid((n,), (3,), padding)
            p = ConvSAParams(
                base=draw_base(rng, c),
                key_taps=rng.uniform(-1.0, 1.0, (3, 1)),
                value_taps=rng.uniform(-1.0, 1.0, (3, 1)),
                grid=grid,
            )
            x = rng.uniform(-1.0, 1.0, (n, c))
            k = inspect_mod.extract_kernels(x, p).kernels.reshape(-1, 3)
            u = p.value_taps[:, 0]
            norms = np.linalg.norm(k, axis=1)
            live = norms > 1e-9
            cos = (k[live] @ u) / (norms[live] * np.linalg.norm(u))
            assert live.any()
            assert np.abs(np.abs(cos) - 1.0).max() <= 1e-6

        # pinned witness: with D=3 the kernels are not all colinear
        rng = np.random.default_rng(7)
        n, c, d = 16, 6, 3
        grid = Grid((n,), (3,), "circular")
        p = StructParams(
            base=draw_base(rng, c),
            pattern_kernels=rng.uniform(-1.0, 1.0, (3, d)),
            aggregators=rng.uniform(-1.0, 1.0, (3, d)),
            grid=grid,
        )
        x = rng.uniform(-1.0, 1.0, (n, c))
        k = inspect_mod.extract_kernels(x, p).kernels.reshape(-1, 3)
        k = k / np.linalg.norm(k, axis=1, keepdims=True)
        min_cos = float(np.abs(k @ k.T).min())
        assert min_cos < 0.99, f"all kernel pairs colinear, min |cos|={min_cos:.4f}"


def test_criterion_6_equivariance(capsys):
    with criterion(capsys, 6, "permutation/shift equivariance plus a pinned witness", 30.0):
        rng = np.random.default_rng(606)
        n, c = 20, 8
        base = draw_base(rng, c)
        x = rng.uniform(-1.0, 1.0, (n, c))
        y = attention.vanilla_sa(x, base)
        for _ in range(20):
            perm = rng.permutation(n)
            diff = np.abs(attention.vanilla_sa(x[perm], base) - y[perm]).max()
            assert diff <= 1e-6

        n, c, d = 12, 6, 3
        grid = Grid((n,), (3,), "circular")
        base = draw_base(rng, c)
        pk = rng.uniform(-1.0, 1.0, (3, d))
        ag_scalar = rng.uniform(-1.0, 1.0, (1, d))
        ag_ctx = rng.uniform(-1.0, 1.0, (3, d))
        taps_k = rng.uniform(-1.0, 1.0, (3, 1))
        taps_v = rng.uniform(-1.0, 1.0, (3, 1))
        cw_pk = rng.uniform(-1.0, 1.0, (d, 3, c))
        cw_ag = rng.uniform(-1.0, 1.0, (d, 3, c))
        cwc_k = rng.uniform(-1.0, 1.0, (3, c))
        cwc_v = rng.uniform(-1.0, 1.0, (3, c))
        variants = {
            "vanilla": lambda z: attention.vanilla_sa(z, base),
            "structsa-scalar": lambda z: attention.structsa_scalar(
                z, StructParams(base=base, pattern_kernels=pk, aggregators=ag_scalar,
                                grid=grid, value_mode=VALUE_SCALAR)),
            "structsa-contextual": lambda z: attention.structsa_contextual(
                z, StructParams(base=base, pattern_kernels=pk, aggregators=ag_ctx,
                                grid=grid)),
            "convsa": lambda z: attention.convsa(
                z, ConvSAParams(base=base, key_taps=taps_k, value_taps=taps_v,
                                grid=grid)),
            "channelwise-naive": lambda z: channelwise.structsa_channelwise_naive(
                z, ChannelwiseParams(base=base, pattern_kernels=cw_pk,
                                     aggregators=cw_ag, grid=grid)),
            "channelwise-efficient": lambda z: channelwise.structsa_channelwise_efficient(
                z, ChannelwiseParams(base=base, pattern_kernels=cw_pk,
                                     aggregators=cw_ag, grid=grid)),
            "convsa-channelwise": lambda z: channelwise.convsa_channelwise(
                z, cwc_k, cwc_v, base, grid),
        }
        x = rng.uniform(-1.0, 1.0, (n, c))
        shift = (5,)
        xs = roll_tokens(x, grid, shift)
        for name, fn in variants.items():
            diff = np.abs(fn(xs) - roll_tokens(fn(x), grid, shift)).max()
            assert diff <= 1e-6, f"{name}: shift deviation {diff:.3e}"

        # pinned witness: window structure is not permutation invariant
        perm = np.random.default_rng(66).permutation(n)
        struct = variants["structsa-contextual"]
        witness = float(np.abs(struct(x[perm]) - struct(x)[perm]).max())
        assert witness > 1e-3, f"witness deviation only {witness:.3e}"


def test_criterion_7_merged_maps(capsys):
    with criterion(capsys, 7, "kernel merging matches the overlap oracle exactly", 5.0):
        rng = np.random.default_rng(707)
        layouts = [
            ((9,), (3,), "zero"),
            ((9,), (3,), "circular"),
            ((4, 5), (3, 3), "zero"),
            ((4, 5), (3, 3), "circular"),
        ]
        for extents, kext, padding in layouts:
            grid = Grid(extents, kext, padding)
            k = rng.uniform(-1.0, 1.0, (grid.n_tokens, grid.n_tokens,
                                        grid.window_size))
            merged = inspect_mod.merge_attention_map(
                inspect_mod.KernelField(k, grid, inspect_mod.VARIANT_CONTEXTUAL))
            expected = oracles.merged_map_oracle(k, extents, kext, padding)
            np.testing.assert_array_equal(merged.scores, expected)

        grid = Grid((8,), (3,), "zero")
        merged = inspect_mod.merge_attention_map(
            inspect_mod.KernelField(np.ones((8, 8, 3)), grid,
                                    inspect_mod.VARIANT_CONTEXTUAL))
        counts = np.array([2.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 2.0])
        np.testing.assert_array_equal(merged.scores, np.tile(counts, (8, 1)))


def test_criterion_8_toy_training(capsys, tmp_path):
    with criterion(capsys, 8, "toy shift task reaches 0.99 accuracy, zero-lr control stays flat", 120.0):
        first = tmp_path / "run1.csv"
        second = tmp_path / "run2.csv"
        assert main(["toytrain", "--out", str(first)]) == 0
        assert main(["toytrain", "--out", str(second)]) == 0
        assert first.read_bytes() == second.read_bytes()
        step, _, acc = first.read_text().splitlines()[-1].split(",")
        assert int(step) <= 500
        assert float(acc) >= 0.99

        control = tmp_path / "control.csv"
        assert main(["toytrain", "--steps", "25", "--lr", "0",
                     "--out", str(control)]) == 2
        rows = [line.split(",") for line in
                control.read_text().splitlines()[1:]]
        assert len(rows) == 25
        assert len({row[2] for row in rows}) == 1
        assert float(rows[0][2]) <= 0.5


def test_criterion_9_determinism_and_formats(capsys, tmp_path):
    with criterion(capsys, 9, "byte-identical reruns, exact file formats"):
        src = tmp_path / "x.stns"
        rng = np.random.default_rng(909)
        write_stns(src, rng.uniform(-1.0, 1.0, (12, 6)))

        blobs = []
        for tag in ("a", "b"):
            out = tmp_path / f"y_{tag}.stns"
            assert main(["forward", "--grid", "12", "--seed", "5",
                         "--in", str(src), "--out", str(out)]) == 0
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]

        blobs = []
        for tag in ("a", "b"):
            out = tmp_path / f"bench_{tag}.csv"
            assert main(["bench", "--sweep", "12,4,3,2", "--no-timing",
                         "--out", str(out)]) == 0
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]

        listings = []
        for tag in ("a", "b"):
            out_dir = tmp_path / f"viz_{tag}"
            assert main(["visualize", "--variant", "convsa", "--grid", "12",
                         "--in", str(src), "--out-dir", str(out_dir)]) == 0
            listings.append(sorted((p.name, p.read_bytes())
                                   for p in out_dir.iterdir()))
        assert listings[0] == listings[1]
        assert all(blob.startswith(b"P5\n") for _, blob in listings[0])

        for dtype in (np.float32, np.float64):
            arr = rng.standard_normal((5, 7)).astype(dtype)
            arr[0, 0] = -0.0
            path = tmp_path / f"rt_{np.dtype(dtype).name}.stns"
            write_stns(path, arr)
            back = read_stns(path)
            assert back.dtype == arr.dtype
            assert back.tobytes() == arr.tobytes()

        golden = inspect_mod.pgm_bytes(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert golden == b"P5\n3 2\n255\n\x003f\x99\xcc\xff"
