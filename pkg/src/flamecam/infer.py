"""Forward execution (float32 and int8) plus frame pre/postprocessing.

All kernels operate on channels-last (H, W, C) arrays. Convolutions are
same-padding, stride 1, via im2col + matmul. The int8 path accumulates in
32-bit, adds the pre-scaled int32 bias, and requantizes through a
double-precision multiplier s_in*s_w/s_out; softmax is computed in float
on dequantized logits.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import (
    BATCHNORM, CONCAT, CONV, INPUT, LEAKY_RELU, MAXPOOL, RELU, SOFTMAX, UPSAMPLE,
    GraphError, ModelGraph, QTensor, QuantParams,
)

PALETTE = {
    0: (0, 0, 0),        # background
    1: (200, 30, 30),    # outer zone
    2: (255, 150, 0),    # middle zone
    3: (255, 255, 80),   # central zone
}


def _im2col(x: np.ndarray, k: int, pad_value=0.0) -> np.ndarray:
    """(H, W, Cin) -> (H*W, Cin*k*k) patches for a same-padded, stride-1 conv."""
    h, w, cin = x.shape
    p = k // 2
    if p:
        xp = np.pad(x, ((p, p), (p, p), (0, 0)), constant_values=pad_value)
    else:
        xp = x
    cols = sliding_window_view(xp, (k, k), axis=(0, 1))  # (H, W, Cin, k, k)
    return cols.reshape(h * w, cin * k * k)


def conv2d_f32(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    cout, cin, k, _ = weight.shape
    h, w, _ = x.shape
    cols = _im2col(x.astype(np.float32), k)
    # weight (Cout, Cin, K, K) flattens to the same (Cin, K, K) patch order
    out = cols @ weight.reshape(cout, cin * k * k).T + bias
    return out.reshape(h, w, cout).astype(np.float32)


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))


def upsample2x(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def forward_f32(graph: ModelGraph, x: np.ndarray,
                record: dict[int, np.ndarray] | None = None) -> np.ndarray:
    """Run the float graph on one (H, W, C) frame; returns per-pixel class probs.

    When `record` is given, every layer's output (including the input) is
    stored in it keyed by layer id — used by calibration and APoZ scoring.
    """
    if graph.quantized:
        raise GraphError("float forward on a quantized graph")
    x = np.asarray(x, dtype=np.float32)
    if x.shape != tuple(graph.input_shape):
        raise GraphError(f"input shape {x.shape} != graph input {graph.input_shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in input frame")

    acts: dict[int, np.ndarray] = {}
    for layer in graph.layers:
        ins = [acts[i] for i in layer.inputs]
        k = layer.kind
        if k == INPUT:
            out = x
        elif k == CONV:
            out = conv2d_f32(ins[0], layer.weight, layer.bias)
        elif k == BATCHNORM:
            inv = layer.gamma / np.sqrt(layer.var + layer.eps)
            out = (ins[0] - layer.mean) * inv + layer.beta
        elif k == RELU:
            out = np.maximum(ins[0], 0.0)
        elif k == LEAKY_RELU:
            out = np.where(ins[0] >= 0, ins[0], layer.slope * ins[0])
        elif k == MAXPOOL:
            out = maxpool2x2(ins[0])
        elif k == UPSAMPLE:
            out = upsample2x(ins[0])
        elif k == CONCAT:
            out = np.concatenate(ins, axis=-1)
        elif k == SOFTMAX:
            out = softmax(ins[0])
        else:
            raise GraphError(f"unknown layer kind {k!r}")
        out = np.asarray(out, dtype=np.float32)
        acts[layer.id] = out
        if record is not None:
            record[layer.id] = out
    return acts[graph.layers[-1].id]


# ---------------------------------------------------------------------------
# int8 path
# ---------------------------------------------------------------------------

def quantize_tensor(x: np.ndarray, qp: QuantParams) -> QTensor:
    q = np.round(x / qp.scale) + qp.zero_point
    return QTensor(np.clip(q, -128, 127).astype(np.int8), qp)


def _requantize(q: np.ndarray, src: QuantParams, dst: QuantParams) -> np.ndarray:
    real = (q.astype(np.float64) - src.zero_point) * src.scale
    out = np.round(real / dst.scale) + dst.zero_point
    return np.clip(out, -128, 127).astype(np.int8)


def conv2d_i8(xq: np.ndarray, in_q: QuantParams, layer) -> np.ndarray:
    """Integer conv: int32 accumulate, pre-scaled int32 bias, requantize to out_quant."""
    cout, cin, k, _ = layer.weight_q.shape
    h, w, _ = xq.shape
    cols = _im2col(xq.astype(np.int64), k, pad_value=in_q.zero_point)
    wflat = layer.weight_q.reshape(cout, cin * k * k).astype(np.int64)
    acc = cols @ wflat.T
    # remove the input zero-point contribution: conv(x - zp) = conv(x) - zp * sum(w)
    acc -= int(in_q.zero_point) * wflat.sum(axis=1)
    acc += layer.bias_q.astype(np.int64)
    assert np.all(np.abs(acc) < 2 ** 31), "int32 accumulator bound violated"
    s_w = np.asarray(layer.weight_quant.scale, dtype=np.float64)
    mult = float(in_q.scale) * s_w / float(np.asarray(layer.out_quant.scale))
    out = np.round(acc * mult) + layer.out_quant.zero_point
    return np.clip(out, -128, 127).astype(np.int8).reshape(h, w, cout)


def forward_i8(graph: ModelGraph, x: QTensor) -> np.ndarray:
    """Run the int8 graph; returns float class probs (softmax on dequantized logits)."""
    if not graph.quantized:
        raise GraphError("int8 forward on a float graph")
    if x.data.shape != tuple(graph.input_shape):
        raise GraphError(f"input shape {x.data.shape} != graph input {graph.input_shape}")
    if x.quant is None:
        raise GraphError("int8 input lacks quant params")

    acts: dict[int, np.ndarray] = {}
    qps: dict[int, QuantParams] = {}
    for layer in graph.layers:
        k = layer.kind
        if k == INPUT:
            out, qp = x.data, graph.input_quant
        elif k == CONV:
            src = layer.inputs[0]
            out, qp = conv2d_i8(acts[src], qps[src], layer), layer.out_quant
        elif k in (RELU, LEAKY_RELU):
            src = layer.inputs[0]
            in_qp, qp = qps[src], layer.out_quant
            real = (acts[src].astype(np.float64) - in_qp.zero_point) * in_qp.scale
            real = np.maximum(real, 0.0) if k == RELU else np.where(real >= 0, real, layer.slope * real)
            out = np.clip(np.round(real / qp.scale) + qp.zero_point, -128, 127).astype(np.int8)
        elif k == MAXPOOL:
            src = layer.inputs[0]
            out = _requantize(maxpool2x2(acts[src]), qps[src], layer.out_quant)
            qp = layer.out_quant
        elif k == UPSAMPLE:
            src = layer.inputs[0]
            out, qp = upsample2x(acts[src]), qps[src]
        elif k == CONCAT:
            qp = layer.out_quant
            out = np.concatenate([_requantize(acts[i], qps[i], qp) for i in layer.inputs], axis=-1)
        elif k == SOFTMAX:
            src = layer.inputs[0]
            logits = (acts[src].astype(np.float32) - qps[src].zero_point) * np.float32(qps[src].scale)
            out, qp = softmax(logits), None
        else:
            raise GraphError(f"layer kind {k!r} not supported in int8 path")
        acts[layer.id], qps[layer.id] = out, qp
    return acts[graph.layers[-1].id]


# ---------------------------------------------------------------------------
# Frame pre/postprocessing
# ---------------------------------------------------------------------------

def preprocess(frame: np.ndarray) -> np.ndarray:
    """BGR (480, 640, 3) uint8 -> RGB (240, 320, 3) float32 in [0, 1].

    Downscale is an exact 2x2 box average with round-half-up.
    """
    if frame.shape != (480, 640, 3):
        raise ValueError(f"expected a (480, 640, 3) BGR frame, got {frame.shape}")
    blocks = (frame[0::2, 0::2].astype(np.uint16) + frame[0::2, 1::2]
              + frame[1::2, 0::2] + frame[1::2, 1::2])
    down = (blocks + 2) >> 2  # round-half-up of mean of 4
    # channel flip (BGR -> RGB) on the downscaled array is 4x cheaper
    return np.ascontiguousarray(down[:, :, ::-1]).astype(np.float32) * np.float32(1 / 255)


def postprocess(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ties break toward the lower class index."""
    return np.argmax(probs, axis=-1).astype(np.uint8)


def colorize(mask: np.ndarray) -> np.ndarray:
    if mask.max(initial=0) >= len(PALETTE):
        raise ValueError(f"class id {int(mask.max())} outside palette")
    lut = np.array([PALETTE[i] for i in range(len(PALETTE))], dtype=np.uint8)
    return lut[mask]
