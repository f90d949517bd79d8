import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flamecam.infer import (
    PALETTE, colorize, conv2d_f32, forward_f32, forward_i8, postprocess,
    preprocess, quantize_tensor, softmax,
)
from flamecam.model import (
    CONV, GraphError, LayerSpec, ModelGraph, QuantParams, build_unet,
)
from flamecam.quantize import calibrate, quantize_model


def naive_conv2d(x, w, b):
    """Quadruple-loop direct convolution, same padding, stride 1."""
    h, wd, cin = x.shape
    cout, _, k, _ = w.shape
    pad = k // 2
    out = np.zeros((h, wd, cout))
    for i in range(h):
        for j in range(wd):
            for co in range(cout):
                acc = b[co]
                for ci in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            si, sj = i + di - pad, j + dj - pad
                            if 0 <= si < h and 0 <= sj < wd:
                                acc += x[si, sj, ci] * w[co, ci, di, dj]
                out[i, j, co] = acc
    return out


def conv_only_graph(weight, bias, input_shape):
    layers = [LayerSpec(id=0, kind="input"),
              LayerSpec(id=1, kind=CONV, inputs=[0], weight=weight, bias=bias)]
    return ModelGraph(layers=layers, input_shape=input_shape, num_classes=weight.shape[0])


class TestForwardF32:
    def test_identity_1x1_conv(self, rng):
        w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
        g = conv_only_graph(w, np.zeros(3, np.float32), (5, 5, 3))
        x = rng.uniform(-1, 1, (5, 5, 3)).astype(np.float32)
        np.testing.assert_allclose(forward_f32(g, x), x, atol=1e-6)

    def test_ones_kernel_equals_neighborhood_sum(self):
        x = np.arange(25, dtype=np.float32).reshape(5, 5, 1)
        w = np.ones((1, 1, 3, 3), dtype=np.float32)
        out = conv2d_f32(x, w, np.zeros(1, np.float32))
        expected = naive_conv2d(x, w, np.zeros(1))
        np.testing.assert_allclose(out, expected, atol=1e-4)

    def test_conv_matches_naive_oracle(self, rng):
        for _ in range(5):
            x = rng.normal(size=(6, 7, 3)).astype(np.float32)
            w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
            b = rng.normal(size=4).astype(np.float32)
            np.testing.assert_allclose(conv2d_f32(x, w, b), naive_conv2d(x, w, b),
                                       atol=1e-4)

    def test_full_network_matches_oracle_composition(self, small_unet, rng):
        # spot check: the first conv of the built network against the oracle
        x = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        record = {}
        forward_f32(small_unet, x, record=record)
        conv1 = small_unet.layers[1]
        np.testing.assert_allclose(record[conv1.id],
                                   naive_conv2d(x, conv1.weight, conv1.bias),
                                   atol=1e-4)

    def test_softmax_rows_sum_to_one(self, rng):
        logits = rng.normal(size=(8, 8, 4)).astype(np.float32) * 10
        s = softmax(logits)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)

    def test_rejects_shape_mismatch_and_nonfinite(self, small_unet):
        with pytest.raises(GraphError):
            forward_f32(small_unet, np.zeros((16, 16, 3), np.float32))
        bad = np.zeros((32, 32, 3), np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            forward_f32(small_unet, bad)


class TestForwardI8:
    def test_zero_input_zero_zeropoints(self):
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        g = conv_only_graph(w, np.zeros(1, np.float32), (4, 4, 1))
        conv = g.layers[1]
        conv.weight_q = np.array([[[[100]]]], dtype=np.int8)
        conv.weight_quant = QuantParams(scale=np.array([0.01]), zero_point=0, axis=0)
        conv.bias_q = np.zeros(1, np.int32)
        conv.out_quant = QuantParams(scale=0.01, zero_point=0)
        g.layers[0].out_quant = QuantParams(scale=0.1, zero_point=0)
        g.quantized = True
        g.input_quant = g.layers[0].out_quant
        xq = quantize_tensor(np.zeros((4, 4, 1), np.float32), g.input_quant)
        from flamecam.infer import conv2d_i8
        out = conv2d_i8(xq.data, g.input_quant, conv)
        assert np.all(out == 0)

    def test_requantization_arithmetic(self):
        # s_in = s_w = 0.1, s_out = 0.01, w = 1.0, input 0.5
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        g = conv_only_graph(w, np.zeros(1, np.float32), (1, 1, 1))
        conv = g.layers[1]
        conv.weight_q = np.array([[[[10]]]], dtype=np.int8)  # 1.0 / 0.1
        conv.weight_quant = QuantParams(scale=np.array([0.1]), zero_point=0, axis=0)
        conv.bias_q = np.zeros(1, np.int32)
        conv.out_quant = QuantParams(scale=0.01, zero_point=0)
        g.layers[0].out_quant = QuantParams(scale=0.1, zero_point=0)
        g.quantized = True
        g.input_quant = g.layers[0].out_quant
        xq = quantize_tensor(np.full((1, 1, 1), 0.5, np.float32), g.input_quant)
        from flamecam.infer import conv2d_i8
        out = conv2d_i8(xq.data, g.input_quant, conv)
        dequant = out[0, 0, 0] * 0.01
        assert abs(dequant - 0.5) <= 0.01  # within one output quantum

    def test_argmax_agreement_with_float_path(self, rng):
        from flamecam.synth import FlameSceneSpec, generate_scene
        from flamecam.model import build_band_segmenter

        graph = build_band_segmenter(input_shape=(240, 320, 3))
        frames = []
        for i in range(6):
            frame, _, _ = generate_scene(FlameSceneSpec(seed=100 + i))
            frames.append(preprocess(np.repeat(frame[:, :, None], 3, axis=2)))
        qgraph = quantize_model(graph, calibrate(graph, frames))
        agree = []
        for x in frames:
            mf = postprocess(forward_f32(graph, x))
            mq = postprocess(forward_i8(qgraph, quantize_tensor(x, qgraph.input_quant)))
            agree.append((mf == mq).mean())
        assert np.mean(agree) >= 0.99

    def test_dequantization_error_bound(self, rng):
        qp = QuantParams(scale=0.037, zero_point=-5)
        x = rng.uniform(-2, 2, 500).astype(np.float32)
        # stay inside the representable range for the bound to apply
        lo, hi = (-128 - qp.zero_point) * qp.scale, (127 - qp.zero_point) * qp.scale
        x = np.clip(x, lo, hi)
        back = quantize_tensor(x, qp).dequantize()
        assert np.abs(back - x).max() <= qp.scale / 2 + 1e-6


class TestPreprocess:
    def test_constant_frame(self):
        frame = np.full((480, 640, 3), 100, np.uint8)
        out = preprocess(frame)
        np.testing.assert_allclose(out, 100 / 255.0, atol=1e-7)
        assert out.shape == (240, 320, 3)

    def test_channel_swap(self):
        frame = np.zeros((480, 640, 3), np.uint8)
        frame[:, :, 0] = 10  # B
        frame[:, :, 1] = 20  # G
        frame[:, :, 2] = 30  # R
        out = preprocess(frame)
        np.testing.assert_allclose(out[0, 0] * 255, [30, 20, 10], atol=1e-5)

    def test_round_half_up_box_filter(self):
        frame = np.zeros((480, 640, 3), np.uint8)
        frame[0, 0] = frame[0, 1] = 0
        frame[1, 0] = frame[1, 1] = 255
        out = preprocess(frame)
        np.testing.assert_allclose(out[0, 0] * 255, 128, atol=1e-5)

    def test_wrong_shape_rejected(self):
        with pytest.raises(ValueError):
            preprocess(np.zeros((240, 320, 3), np.uint8))

    def test_preserves_mean_intensity_within_rounding(self, rng):
        frame = rng.integers(0, 256, (480, 640, 3)).astype(np.uint8)
        out = preprocess(frame)
        assert abs(out.mean() * 255 - frame.mean()) < 0.5


class TestPostprocess:
    def test_one_hot(self):
        probs = np.zeros((2, 2, 4), np.float32)
        probs[0, 0, 2] = 1
        probs[0, 1, 0] = 1
        probs[1, 0, 3] = 1
        probs[1, 1, 1] = 1
        np.testing.assert_array_equal(postprocess(probs), [[2, 0], [3, 1]])

    def test_uniform_ties_to_class_zero(self):
        probs = np.full((3, 3, 4), 0.25, np.float32)
        assert np.all(postprocess(probs) == 0)

    @given(arrays(np.float32, (4, 5, 4), elements=st.floats(0, 1, width=32)))
    @settings(max_examples=50, deadline=None)
    def test_matches_per_pixel_scan_oracle(self, probs):
        mask = postprocess(probs)
        for i in range(4):
            for j in range(5):
                best, best_p = 0, probs[i, j, 0]
                for c in range(1, 4):
                    if probs[i, j, c] > best_p:
                        best, best_p = c, probs[i, j, c]
                assert mask[i, j] == best


class TestColorize:
    def test_all_background_is_black(self):
        assert np.all(colorize(np.zeros((4, 4), np.uint8)) == 0)

    def test_palette_triples(self):
        mask = np.array([[0, 1], [2, 3]], np.uint8)
        rgb = colorize(mask)
        for c in range(4):
            np.testing.assert_array_equal(rgb[mask == c][0], PALETTE[c])

    def test_palette_inverse_recovers_mask(self, rng):
        mask = rng.integers(0, 4, (16, 16)).astype(np.uint8)
        rgb = colorize(mask)
        inverse = {v: k for k, v in PALETTE.items()}
        recovered = np.array([[inverse[tuple(px)] for px in row] for row in rgb], np.uint8)
        np.testing.assert_array_equal(recovered, mask)

    def test_out_of_range_class_rejected(self):
        with pytest.raises(ValueError):
            colorize(np.full((2, 2), 9, np.uint8))
