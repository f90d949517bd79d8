"""Post-training quantization: cross-layer equalization, calibration, and
conversion of a float graph to the int8 execution form.

Scheme: symmetric per-output-channel int8 weights (zero-point 0),
asymmetric per-tensor int8 activations from calibrated ranges, int32 bias
at scale s_in * s_w.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .infer import forward_f32
from .model import (
    BATCHNORM, CONCAT, CONV, LEAKY_RELU, RELU,
    GraphError, ModelGraph, QuantParams,
)

HIST_BINS = 2048
SCALE_FLOOR = 1e-8


@dataclass
class TensorStats:
    min: float = math.inf
    max: float = -math.inf
    hist: np.ndarray = field(default_factory=lambda: np.zeros(HIST_BINS, dtype=np.int64))
    hist_lo: float = 0.0
    hist_hi: float = 0.0


@dataclass
class CalibrationStats:
    """Per-layer-output running min/max plus a fixed-range histogram."""

    per_layer: dict[int, TensorStats] = field(default_factory=dict)
    frames_seen: int = 0

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        """Associative/commutative union of two stats over the same graph."""
        out = CalibrationStats(frames_seen=self.frames_seen + other.frames_seen)
        for lid in set(self.per_layer) | set(other.per_layer):
            a, b = self.per_layer.get(lid), other.per_layer.get(lid)
            if a is None or b is None:
                src = a or b
                out.per_layer[lid] = TensorStats(src.min, src.max, src.hist.copy(),
                                                 src.hist_lo, src.hist_hi)
                continue
            merged = TensorStats(min(a.min, b.min), max(a.max, b.max))
            merged.hist_lo, merged.hist_hi = merged.min, merged.max
            for src in (a, b):
                merged.hist += _rebin(src, merged.hist_lo, merged.hist_hi)
            out.per_layer[lid] = merged
        return out


def _rebin(stats: TensorStats, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        out = np.zeros(HIST_BINS, dtype=np.int64)
        out[0] = stats.hist.sum()
        return out
    centers = stats.hist_lo + (np.arange(HIST_BINS) + 0.5) * (stats.hist_hi - stats.hist_lo) / HIST_BINS \
        if stats.hist_hi > stats.hist_lo else np.full(HIST_BINS, stats.hist_lo)
    idx = np.clip(((centers - lo) / (hi - lo) * HIST_BINS).astype(int), 0, HIST_BINS - 1)
    out = np.zeros(HIST_BINS, dtype=np.int64)
    np.add.at(out, idx, stats.hist)
    return out


def calibrate(graph: ModelGraph, frames) -> CalibrationStats:
    """Record min/max and a 2048-bin histogram for every layer output.

    Two instrumented float passes: the first fixes the ranges, the second
    fills histograms over those ranges.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("calibration needs at least one frame")
    stats = CalibrationStats(frames_seen=len(frames))
    recordings = []
    for frame in frames:
        record: dict[int, np.ndarray] = {}
        forward_f32(graph, frame, record=record)
        recordings.append(record)
        for lid, act in record.items():
            ts = stats.per_layer.setdefault(lid, TensorStats())
            ts.min = min(ts.min, float(act.min()))
            ts.max = max(ts.max, float(act.max()))
    for lid, ts in stats.per_layer.items():
        ts.hist_lo, ts.hist_hi = ts.min, ts.max
    for record in recordings:
        for lid, act in record.items():
            ts = stats.per_layer[lid]
            if ts.hist_hi > ts.hist_lo:
                idx = np.clip(((act.ravel() - ts.hist_lo) / (ts.hist_hi - ts.hist_lo)
                               * HIST_BINS).astype(int), 0, HIST_BINS - 1)
                np.add.at(ts.hist, idx, 1)
            else:
                ts.hist[0] += act.size
    return stats


def _percentile_range(ts: TensorStats, pct: float) -> tuple[float, float]:
    total = ts.hist.sum()
    if total == 0 or ts.hist_hi <= ts.hist_lo:
        return ts.min, ts.max
    cum = np.cumsum(ts.hist)
    lo_count = total * (100.0 - pct) / 100.0
    hi_count = total * pct / 100.0
    width = (ts.hist_hi - ts.hist_lo) / HIST_BINS
    lo_bin = int(np.searchsorted(cum, lo_count))
    hi_bin = int(np.searchsorted(cum, hi_count))
    lo = ts.hist_lo + lo_bin * width
    hi = ts.hist_lo + (hi_bin + 1) * width
    return max(lo, ts.min), min(hi, ts.max)


def _activation_params(lo: float, hi: float) -> QuantParams:
    # range extended to include 0 so the zero-point is exact
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if hi - lo < SCALE_FLOOR:
        return QuantParams(scale=SCALE_FLOOR, zero_point=0)
    scale = (hi - lo) / 255.0
    zp = int(np.clip(round(-128 - lo / scale), -128, 127))
    return QuantParams(scale=scale, zero_point=zp)


def quantize_model(graph: ModelGraph, stats: CalibrationStats,
                   scheme: str = "minmax") -> ModelGraph:
    """Produce the int8 graph: per-channel weights, per-tensor activations.

    scheme is "minmax" or "percentile" (99.9th, symmetric tail clip) for
    activation ranges.
    """
    if scheme not in ("minmax", "percentile"):
        raise ValueError(f"unknown calibration scheme {scheme!r}")
    if any(l.kind == BATCHNORM for l in graph.layers):
        raise GraphError("fold batchnorm before quantizing")
    g = graph.copy()
    for layer in g.layers:
        ts = stats.per_layer.get(layer.id)
        if ts is None:
            raise ValueError(f"no calibration stats for layer {layer.id}")
        lo, hi = (ts.min, ts.max) if scheme == "minmax" else _percentile_range(ts, 99.9)
        layer.out_quant = _activation_params(lo, hi)
        if layer.kind != CONV:
            continue
        w = layer.weight
        absmax = np.abs(w).max(axis=(1, 2, 3))
        w_scale = np.maximum(absmax / 127.0, SCALE_FLOOR)
        layer.weight_quant = QuantParams(scale=w_scale, zero_point=0, axis=0)
        layer.weight_q = np.clip(np.round(w / w_scale[:, None, None, None]),
                                 -128, 127).astype(np.int8)
        in_ts = stats.per_layer[layer.inputs[0]]
        in_lo, in_hi = (in_ts.min, in_ts.max) if scheme == "minmax" else _percentile_range(in_ts, 99.9)
        in_scale = _activation_params(in_lo, in_hi).scale
        bias_scale = in_scale * w_scale
        # saturate in double: floor-scaled (all-zero) filters can push the
        # quantized bias past the accumulator range, and float32 cannot
        # represent the int32 bounds exactly
        layer.bias_q = np.clip(np.round(layer.bias.astype(np.float64) / bias_scale),
                               -(2 ** 31 - 1), 2 ** 31 - 1).astype(np.int32)
    g.quantized = True
    input_id = g.layers[0].id
    g.input_quant = g.layers[0].out_quant if g.layers[0].out_quant else None
    if g.input_quant is None:
        ts = stats.per_layer[input_id]
        g.input_quant = _activation_params(ts.min, ts.max)
    return g


# ---------------------------------------------------------------------------
# Cross-layer equalization
# ---------------------------------------------------------------------------

def _eligible_pairs(graph: ModelGraph):
    """(conv A, activation, conv B) triples with a direct one-to-one channel feed."""
    index = {l.id: l for l in graph.layers}
    pairs = []
    for a in graph.layers:
        if a.kind != CONV:
            continue
        cons = graph.consumers(a.id)
        if len(cons) != 1 or cons[0].kind not in (RELU, LEAKY_RELU):
            continue
        act = cons[0]
        cons2 = graph.consumers(act.id)
        if len(cons2) != 1 or cons2[0].kind != CONV or cons2[0].inputs != [act.id]:
            continue
        pairs.append((a, cons2[0]))
    return pairs


def equalize_cross_layer(graph: ModelGraph, passes: int = 30) -> ModelGraph:
    """Balance per-channel weight ranges across consecutive conv pairs.

    For each eligible (conv -> (Leaky)ReLU -> conv) pair and channel i, with
    r1 = max|W1[i, :]| (bias included) and r2 = max|W2[:, i]|, scale channel i
    of the first conv by 1/sqrt(r1/r2) and the matching input channel of the
    second by sqrt(r1/r2). Positive homogeneity of the activation keeps the
    network function unchanged. Repeated for `passes` full sweeps.
    """
    if any(l.kind == BATCHNORM for l in graph.layers):
        raise GraphError("fold batchnorm before cross-layer equalization")
    g = graph.copy()
    for _ in range(passes):
        for a, b in _eligible_pairs(g):
            r1 = np.maximum(np.abs(a.weight).max(axis=(1, 2, 3)), np.abs(a.bias))
            r2 = np.abs(b.weight).max(axis=(0, 2, 3))
            s = np.sqrt(r1 / np.maximum(r2, 1e-30))
            s[(r1 < 1e-12) | (r2 < 1e-12)] = 1.0
            a.weight = (a.weight / s[:, None, None, None]).astype(np.float32)
            a.bias = (a.bias / s).astype(np.float32)
            b.weight = (b.weight * s[None, :, None, None]).astype(np.float32)
    return g
