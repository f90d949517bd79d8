"""Per-layer MACs/FLOPs accounting.

Conventions (deliberate, do not "fix"):
  * Conv:      MACs = H*W*Cin*Cout*K^2, FLOPs = 2*H*W*(Cin*K^2 + 1)*Cout,
               with H, W the output spatial dims and the +1 the bias add.
  * MaxPool:   FLOPs = K^2*Wout*Hout*Cin and MACs = FLOPs/2 — pooling does no
               multiplies; the halved-FLOPs figure is the standard approximation.
  * ReLU:      FLOPs = Win*Hin*Cin, MACs = FLOPs/2, same approximation.
  * Upsample (nearest), BatchNorm (folded at inference), Concat: zero — pure
    data movement. Softmax counted as zero here: it runs on the processor
    path, outside the accelerated model.
All counters are 64-bit.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .model import (
    BATCHNORM, CONCAT, CONV, INPUT, LEAKY_RELU, MAXPOOL, RELU, SOFTMAX, UPSAMPLE,
    LayerSpec, ModelGraph, infer_shapes, validate_graph,
)


@dataclass(frozen=True)
class ComplexityRow:
    layer_id: int
    kind: str
    out_shape: tuple[int, int, int]
    macs: int
    flops: int


@dataclass(frozen=True)
class ComplexityReport:
    rows: tuple[ComplexityRow, ...]
    input_shape: tuple[int, int, int]

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_id", "kind", "out_h", "out_w", "out_c", "macs", "flops"])
        for r in self.rows:
            w.writerow([r.layer_id, r.kind, *r.out_shape, r.macs, r.flops])
        w.writerow(["total", "", "", "", "", self.total_macs, self.total_flops])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'layer':>6} {'kind':<10} {'output':<16} {'MACs':>14} {'FLOPs':>14}"]
        for r in self.rows:
            shape = "x".join(map(str, r.out_shape))
            lines.append(f"{r.layer_id:>6} {r.kind:<10} {shape:<16} {r.macs:>14,} {r.flops:>14,}")
        lines.append(f"{'total':>6} {'':<10} {'':<16} {self.total_macs:>14,} {self.total_flops:>14,}")
        return "\n".join(lines)


def layer_complexity(spec: LayerSpec, in_shape: tuple[int, int, int],
                     out_shape: tuple[int, int, int]) -> tuple[int, int]:
    """(macs, flops) for one layer given its input and output shapes."""
    kind = spec.kind
    if kind == CONV:
        w = spec.weight if spec.weight is not None else spec.weight_q
        cout, cin, k, _ = w.shape
        h, wd = int(out_shape[0]), int(out_shape[1])
        if in_shape[2] != cin or out_shape[2] != cout:
            raise ValueError(f"layer {spec.id}: shapes inconsistent with conv weights")
        macs = h * wd * cin * cout * k * k
        flops = 2 * h * wd * (cin * k * k + 1) * cout
        return macs, flops
    if kind == MAXPOOL:
        k = 2
        hout, wout, cin = (int(v) for v in out_shape)
        if in_shape[2] != cin:
            raise ValueError(f"layer {spec.id}: pool channel mismatch")
        flops = k * k * wout * hout * cin
        return flops // 2, flops
    if kind in (RELU, LEAKY_RELU):
        hin, win, cin = (int(v) for v in in_shape)
        flops = win * hin * cin
        return flops // 2, flops
    if kind in (UPSAMPLE, BATCHNORM, CONCAT, SOFTMAX, INPUT):
        return 0, 0
    raise ValueError(f"layer {spec.id}: unknown kind {kind!r}")


def model_complexity(graph: ModelGraph, input_shape: tuple[int, int, int] | None = None) -> ComplexityReport:
    """Shape-propagate the graph and sum per-layer MACs/FLOPs."""
    if input_shape is not None and tuple(input_shape) != tuple(graph.input_shape):
        graph = graph.copy()
        graph.input_shape = tuple(input_shape)
    shapes = validate_graph(graph)
    rows = []
    for layer in graph.layers:
        in_shape = shapes[layer.inputs[0]] if layer.inputs else graph.input_shape
        macs, flops = layer_complexity(layer, in_shape, shapes[layer.id])
        rows.append(ComplexityRow(layer.id, layer.kind, shapes[layer.id], macs, flops))
    return ComplexityReport(rows=tuple(rows), input_shape=tuple(graph.input_shape))
