import numpy as np
import pytest

from flamecam.complexity import ComplexityReport, layer_complexity, model_complexity
from flamecam.model import (
    CONV, MAXPOOL, RELU, UPSAMPLE, LayerSpec, ModelGraph, build_unet,
)
from flamecam.prune import protected_conv_ids, remove_filters


class OpCounter:
    """Direct convolution that counts every multiply and add it performs."""

    def __init__(self):
        self.mults = 0
        self.adds = 0

    def conv(self, x, w, b):
        h, wd, cin = x.shape
        cout, _, k, _ = w.shape
        pad = k // 2
        out = np.zeros((h, wd, cout))
        for i in range(h):
            for j in range(wd):
                for co in range(cout):
                    acc = 0.0
                    for ci in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                si, sj = i + di - pad, j + dj - pad
                                v = x[si, sj, ci] if 0 <= si < h and 0 <= sj < wd else 0.0
                                acc += v * w[co, ci, di, dj]
                                self.mults += 1
                                self.adds += 1
                    out[i, j, co] = acc + b[co]
                    self.adds += 1
        return out


def conv_spec(cout, cin, k):
    return LayerSpec(id=1, kind=CONV, inputs=[0],
                     weight=np.zeros((cout, cin, k, k), np.float32),
                     bias=np.zeros(cout, np.float32))


class TestLayerComplexity:
    def test_conv_reference_figures(self):
        macs, flops = layer_complexity(conv_spec(8, 3, 3), (4, 4, 3), (4, 4, 8))
        assert macs == 3456
        assert flops == 7168

    def test_conv_matches_instrumented_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 4, 3))
        w = rng.normal(size=(8, 3, 3, 3))
        b = rng.normal(size=8)
        counter = OpCounter()
        counter.conv(x, w, b)
        macs, flops = layer_complexity(conv_spec(8, 3, 3), (4, 4, 3), (4, 4, 8))
        # the accounting counts exactly the multiplies the direct loop performs
        assert macs == counter.mults
        # the FLOPs convention treats the bias add as a full multiply-add, so
        # the figure is twice the loop's add count (one add per product plus
        # one per bias), not mults + adds
        assert flops == 2 * counter.adds
        assert counter.adds == counter.mults + 4 * 4 * 8

    def test_maxpool_reference_figures(self):
        spec = LayerSpec(id=1, kind=MAXPOOL, inputs=[0])
        macs, flops = layer_complexity(spec, (4, 4, 3), (2, 2, 3))
        assert (macs, flops) == (24, 48)

    def test_relu_uses_input_extent(self):
        spec = LayerSpec(id=1, kind=RELU, inputs=[0])
        macs, flops = layer_complexity(spec, (6, 5, 7), (6, 5, 7))
        assert flops == 6 * 5 * 7
        assert macs == flops // 2

    def test_zero_cost_kinds(self):
        for kind in ("upsample", "batchnorm", "concat", "softmax", "input"):
            spec = LayerSpec(id=1, kind=kind, inputs=[0] if kind != "input" else [])
            assert layer_complexity(spec, (4, 4, 2), (8, 8, 2)) == (0, 0)

    def test_conv_identity_flops_minus_two_macs(self):
        # FLOPs - 2*MACs = 2*H*W*Cout (the bias adds, counted twice)
        for cout, cin, k, h, w in [(8, 3, 3, 4, 4), (5, 2, 1, 7, 9), (16, 16, 3, 8, 8)]:
            macs, flops = layer_complexity(conv_spec(cout, cin, k), (h, w, cin), (h, w, cout))
            assert flops - 2 * macs == 2 * h * w * cout

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            layer_complexity(conv_spec(8, 3, 3), (4, 4, 5), (4, 4, 8))


class TestModelComplexity:
    def test_total_is_sum_of_rows(self, small_unet):
        report = model_complexity(small_unet)
        assert report.total_macs == sum(r.macs for r in report.rows)
        assert report.total_flops == sum(r.flops for r in report.rows)
        assert len(report.rows) == len(small_unet.layers)

    def test_recomputation_from_traced_shapes(self, small_unet):
        from flamecam.model import validate_graph
        shapes = validate_graph(small_unet)
        report = model_complexity(small_unet)
        expected_macs = 0
        for layer in small_unet.layers:
            if layer.kind == CONV:
                cout, cin, k, _ = layer.weight.shape
                h, w, _ = shapes[layer.id]
                expected_macs += h * w * cin * cout * k * k
            elif layer.kind == MAXPOOL:
                h, w, c = shapes[layer.id]
                expected_macs += (4 * h * w * c) // 2
            elif layer.kind in (RELU, "leaky_relu"):
                h, w, c = shapes[layer.inputs[0]]
                expected_macs += (h * w * c) // 2
        assert report.total_macs == expected_macs

    def test_pruning_strictly_reduces_macs(self, small_unet):
        protected = protected_conv_ids(small_unet)
        conv = next(l for l in small_unet.conv_layers() if l.id not in protected)
        pruned, _ = remove_filters(small_unet, [(conv.id, 0), (conv.id, 1)])
        assert model_complexity(pruned).total_macs < model_complexity(small_unet).total_macs
        assert model_complexity(pruned).total_flops < model_complexity(small_unet).total_flops

    def test_doubling_input_area_quadruples_conv_cost(self):
        g32 = build_unet(2, 8, (32, 32, 3), seed=0)
        g64 = build_unet(2, 8, (64, 64, 3), seed=0)
        r32 = model_complexity(g32)
        r64 = model_complexity(g64)
        conv32 = sum(r.macs for r in r32.rows if r.kind == CONV)
        conv64 = sum(r.macs for r in r64.rows if r.kind == CONV)
        assert conv64 == 4 * conv32

    def test_override_input_shape(self, small_unet):
        r = model_complexity(small_unet, input_shape=(64, 64, 3))
        assert r.input_shape == (64, 64, 3)
        assert r.total_macs == 4 * model_complexity(small_unet).total_macs

    def test_csv_and_table_carry_totals(self, small_unet):
        report = model_complexity(small_unet)
        csv_text = report.to_csv()
        assert csv_text.strip().splitlines()[-1].startswith("total")
        assert str(report.total_macs) in csv_text
        assert f"{report.total_macs:,}" in report.to_table()
