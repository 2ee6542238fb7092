import numpy as np
import pytest

import oracles
from conftest import make_base
from structsa import attention, channelwise, inspect
from structsa.attention import (
    SOFTMAX_FLAT,
    SOFTMAX_PER_QUERY,
    VALUE_CONTEXTUAL,
    VALUE_SCALAR,
    ConvSAParams,
    StructParams,
)
from structsa.channelwise import ChannelwiseParams
from structsa.tensor import DimensionError, Grid


def contextual_params(rng, channels, grid, d):
    m = grid.window_size
    return StructParams(make_base(rng, channels), rng.uniform(-1, 1, (m, d)),
                        rng.uniform(-1, 1, (m, d)), grid, VALUE_CONTEXTUAL, SOFTMAX_FLAT)


class TestFieldValidation:
    def test_shapes_per_variant(self):
        g = Grid((5,), (3,), "zero")
        inspect.KernelField(np.zeros((5, 5)), g, inspect.VARIANT_SCALAR)
        inspect.KernelField(np.zeros((5, 5, 3)), g, inspect.VARIANT_CONVSA)
        inspect.KernelField(np.zeros((5, 5, 3, 2)), g, inspect.VARIANT_CHANNELWISE)
        with pytest.raises(DimensionError):
            inspect.KernelField(np.zeros((5, 5, 4)), g, inspect.VARIANT_CONTEXTUAL)
        with pytest.raises(DimensionError):
            inspect.KernelField(np.zeros((5, 5)), g, "mystery")


class TestExtractRecombine:
    def test_convsa_kernels_are_score_times_taps(self, rng):
        grid = Grid((8,), (3,), "circular")
        base = make_base(rng, 4)
        kt = rng.uniform(-1, 1, (3, 1))
        vt = rng.uniform(-1, 1, (3, 1))
        p = ConvSAParams(base, kt, vt, grid)
        x = rng.uniform(-1, 1, (8, 4))
        field = inspect.extract_kernels(x, p)
        assert field.variant == inspect.VARIANT_CONVSA
        # every kernel row is the scalar score times the shared tap column
        _, cache = attention._convsa_forward(x[None], p)
        a = cache["a"][0, :, :, 0]
        np.testing.assert_allclose(field.kernels, a[:, :, None] * vt[None, None, :, 0],
                                   rtol=1e-13, atol=1e-15)

    @pytest.mark.parametrize("builder", ["scalar", "contextual", "convsa", "channelwise"])
    def test_recombine_reproduces_forward(self, rng, builder):
        grid = Grid((3, 3), (3, 3), "zero")
        x = rng.uniform(-1, 1, (9, 4))
        if builder == "scalar":
            p = StructParams(make_base(rng, 4), rng.uniform(-1, 1, (9, 2)),
                             rng.uniform(-1, 1, (1, 2)), grid, VALUE_SCALAR, SOFTMAX_FLAT)
            y = attention.structsa_scalar(x, p)
        elif builder == "contextual":
            p = contextual_params(rng, 4, grid, 3)
            y = attention.structsa_contextual(x, p)
        elif builder == "convsa":
            p = ConvSAParams(make_base(rng, 4), rng.uniform(-1, 1, (9, 1)),
                             rng.uniform(-1, 1, (9, 1)), grid)
            y = attention.convsa(x, p)
        else:
            p = ChannelwiseParams(make_base(rng, 4), rng.uniform(-1, 1, (2, 9, 4)),
                                  rng.uniform(-1, 1, (2, 9, 4)), grid, SOFTMAX_FLAT)
            y = channelwise.structsa_channelwise_efficient(x, p)
        field = inspect.extract_kernels(x, p)
        np.testing.assert_allclose(inspect.recombine(field, x, p), y, rtol=1e-10, atol=1e-13)

    def test_variant_cross_check(self, rng):
        grid = Grid((6,), (3,), "zero")
        p = contextual_params(rng, 4, grid, 2)
        x = rng.uniform(-1, 1, (6, 4))
        inspect.extract_kernels(x, p, variant=inspect.VARIANT_CONTEXTUAL)
        with pytest.raises(DimensionError):
            inspect.extract_kernels(x, p, variant=inspect.VARIANT_SCALAR)
        with pytest.raises(DimensionError):
            inspect.extract_kernels(x, object())


class TestMergedMap:
    @pytest.mark.parametrize("padding", ["zero", "circular"])
    def test_matches_oracle(self, rng, padding):
        for extents, kernels in [((7,), (3,)), ((3, 4), (3, 3)), ((2, 3, 2), (1, 3, 1))]:
            grid = Grid(extents, kernels, padding)
            n, m = grid.n_tokens, grid.window_size
            kernels_field = rng.uniform(-1, 1, (n, n, m))
            field = inspect.KernelField(kernels_field, grid, inspect.VARIANT_CONTEXTUAL)
            got = inspect.merge_attention_map(field).scores
            want = oracles.merged_map_oracle(kernels_field, extents, grid.kernel_extents, padding)
            np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-15)

    def test_all_ones_window_counts(self):
        grid = Grid((8,), (3,), "zero")
        field = inspect.KernelField(np.ones((8, 8, 3)), grid, inspect.VARIANT_CONTEXTUAL)
        scores = inspect.merge_attention_map(field).scores
        assert np.all(scores[:, 1:-1] == 3.0)
        assert np.all(scores[:, [0, -1]] == 2.0)

    def test_scalar_field_rejected(self):
        grid = Grid((5,), (3,), "zero")
        field = inspect.KernelField(np.ones((5, 5)), grid, inspect.VARIANT_SCALAR)
        with pytest.raises(DimensionError):
            inspect.merge_attention_map(field)

    def test_merge_channel(self, rng):
        grid = Grid((6,), (3,), "circular")
        k = rng.uniform(-1, 1, (6, 6, 3, 4))
        field = inspect.KernelField(k, grid, inspect.VARIANT_CHANNELWISE)
        got = inspect.merge_channel(field, 2).scores
        want = oracles.merged_map_oracle(k[:, :, :, 2], (6,), (3,), "circular")
        np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-15)
        with pytest.raises(DimensionError):
            inspect.merge_channel(field, 4)
        shared = inspect.KernelField(k[..., 0], grid, inspect.VARIANT_CONTEXTUAL)
        with pytest.raises(DimensionError):
            inspect.merge_channel(shared, 0)


class TestPgm:
    def test_header_and_scaling(self):
        data = np.array([[0.0, 5.0], [10.0, 2.5]])
        blob = inspect.pgm_bytes(data)
        assert blob.startswith(b"P5\n2 2\n255\n")
        pixels = list(blob[len(b"P5\n2 2\n255\n"):])
        assert pixels == [0, 128, 255, 64]

    def test_constant_map_is_mid_gray(self):
        blob = inspect.pgm_bytes(np.full((1, 3), 9.0))
        assert blob.endswith(b"\x80\x80\x80")

    def test_golden_bytes(self):
        blob = inspect.pgm_bytes(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert blob == b"P5\n3 2\n255\n\x003f\x99\xcc\xff"

    def test_rejects_bad_input(self):
        with pytest.raises(DimensionError):
            inspect.pgm_bytes(np.zeros(4))
        with pytest.raises(DimensionError):
            inspect.pgm_bytes(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            inspect.pgm_bytes(np.array([[1.0, np.inf]]))

    def test_export_pgm_writes_file(self, tmp_path):
        path = tmp_path / "map.pgm"
        inspect.export_pgm(np.eye(3), path)
        assert path.read_bytes() == inspect.pgm_bytes(np.eye(3))


class TestExportMap:
    def test_full_matrix_and_query_rows(self, tmp_path, rng):
        grid = Grid((3, 4), (3, 3), "zero")
        scores = rng.uniform(0, 1, (12, 12))
        merged = inspect.MergedMap(scores, grid)
        full = tmp_path / "full.pgm"
        inspect.export_map(merged, full)
        assert full.read_bytes() == inspect.pgm_bytes(scores)
        row = tmp_path / "row.pgm"
        inspect.export_map(merged, row, query=5)
        assert row.read_bytes() == inspect.pgm_bytes(scores[5].reshape(3, 4))
        with pytest.raises(DimensionError):
            inspect.export_map(merged, row, query=12)

    def test_query_row_layout_1d_and_3d(self, tmp_path, rng):
        g1 = Grid((6,), (3,), "zero")
        m1 = inspect.MergedMap(rng.uniform(0, 1, (6, 6)), g1)
        p1 = tmp_path / "r1.pgm"
        inspect.export_map(m1, p1, query=2)
        assert p1.read_bytes().startswith(b"P5\n6 1\n255\n")
        g3 = Grid((2, 3, 2), (1, 1, 1), "zero")
        m3 = inspect.MergedMap(rng.uniform(0, 1, (12, 12)), g3)
        p3 = tmp_path / "r3.pgm"
        inspect.export_map(m3, p3, query=0)
        assert p3.read_bytes().startswith(b"P5\n6 2\n255\n")

    def test_csv_layout(self, tmp_path):
        grid = Grid((2,), (1,), "zero")
        merged = inspect.MergedMap(np.array([[1.0, 0.5], [0.25, 2.0]]), grid)
        path = tmp_path / "m.csv"
        inspect.merged_map_csv(merged, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "i,j,score"
        assert lines[1] == "0,0,1.0"
        assert lines[4] == "1,1,2.0"
