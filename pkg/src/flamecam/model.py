"""Model graph representation: layers, shape propagation, UNet builder, BN folding.

Graphs are treated as immutable after construction: every transform
(folding, pruning, quantization, equalization) returns a new graph, so a
graph can be shared freely across pipeline workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

CONV = "conv"
BATCHNORM = "batchnorm"
RELU = "relu"
LEAKY_RELU = "leaky_relu"
MAXPOOL = "maxpool"
UPSAMPLE = "upsample"
CONCAT = "concat"
SOFTMAX = "softmax"
INPUT = "input"

LAYER_KINDS = {CONV, BATCHNORM, RELU, LEAKY_RELU, MAXPOOL, UPSAMPLE, CONCAT, SOFTMAX, INPUT}


class GraphError(ValueError):
    """Raised when a model graph violates a structural invariant."""


@dataclass(frozen=True)
class QuantParams:
    """Affine int8 mapping real = scale * (q - zero_point).

    scale is a scalar for per-tensor params or a 1-D array (one entry per
    channel) for per-channel weight params. Weight params always use
    zero_point 0 (symmetric).
    """

    scale: float | np.ndarray
    zero_point: int = 0
    axis: int | None = None  # None = per-tensor, else the channel axis

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64)
        if np.any(s <= 0):
            raise ValueError("quant scale must be positive")
        if not (-128 <= int(np.min(np.asarray(self.zero_point)))
                and int(np.max(np.asarray(self.zero_point))) <= 127):
            raise ValueError("zero_point outside int8 range")

    @property
    def per_channel(self) -> bool:
        return self.axis is not None


@dataclass
class QTensor:
    """An int8/int32 payload together with the params that quantized it."""

    data: np.ndarray
    quant: QuantParams

    def dequantize(self) -> np.ndarray:
        scale = np.asarray(self.quant.scale, dtype=np.float32)
        return (self.data.astype(np.float32) - self.quant.zero_point) * scale


@dataclass
class LayerSpec:
    id: int
    kind: str
    inputs: list[int] = field(default_factory=list)

    # conv
    weight: np.ndarray | None = None  # (Cout, Cin, K, K) float32
    bias: np.ndarray | None = None  # (Cout,) float32

    # batchnorm
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    eps: float = 1e-5

    # leaky relu
    slope: float = 0.1

    # quantized conv payload (set by quantize_model)
    weight_q: np.ndarray | None = None  # int8, same shape as weight
    bias_q: np.ndarray | None = None  # int32, scale s_in * s_w
    weight_quant: QuantParams | None = None  # per-out-channel, zp 0

    # quant params of this layer's output activation
    out_quant: QuantParams | None = None

    def copy(self) -> "LayerSpec":
        def cp(a):
            return None if a is None else a.copy()

        return replace(
            self,
            inputs=list(self.inputs),
            weight=cp(self.weight), bias=cp(self.bias),
            gamma=cp(self.gamma), beta=cp(self.beta),
            mean=cp(self.mean), var=cp(self.var),
            weight_q=cp(self.weight_q), bias_q=cp(self.bias_q),
        )


@dataclass
class ModelGraph:
    """Topologically ordered DAG of layers with a single input and output."""

    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]  # (H, W, C)
    num_classes: int
    quantized: bool = False
    input_quant: QuantParams | None = None

    def layer(self, layer_id: int) -> LayerSpec:
        return self._index()[layer_id]

    def _index(self) -> dict[int, LayerSpec]:
        return {l.id: l for l in self.layers}

    def consumers(self, layer_id: int) -> list[LayerSpec]:
        return [l for l in self.layers if layer_id in l.inputs]

    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == CONV]

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            layers=[l.copy() for l in self.layers],
            input_shape=self.input_shape,
            num_classes=self.num_classes,
            quantized=self.quantized,
            input_quant=self.input_quant,
        )


def infer_shapes(graph: ModelGraph) -> dict[int, tuple[int, int, int]]:
    """Propagate (H, W, C) through the graph, checking consistency."""
    shapes: dict[int, tuple[int, int, int]] = {}
    for layer in graph.layers:
        ins = [shapes[i] for i in layer.inputs]
        k = layer.kind
        if k == INPUT:
            shape = graph.input_shape
        elif k == CONV:
            (h, w, c) = ins[0]
            cout, cin, kh, kw = layer.weight.shape if layer.weight is not None else layer.weight_q.shape
            if cin != c:
                raise GraphError(f"layer {layer.id}: conv expects {cin} input channels, got {c}")
            shape = (h, w, cout)
        elif k in (BATCHNORM, RELU, LEAKY_RELU, SOFTMAX):
            shape = ins[0]
            if k == BATCHNORM and layer.gamma is not None and len(layer.gamma) != shape[2]:
                raise GraphError(f"layer {layer.id}: batchnorm channel mismatch")
        elif k == MAXPOOL:
            (h, w, c) = ins[0]
            if h % 2 or w % 2:
                raise GraphError(f"layer {layer.id}: maxpool needs even spatial dims, got {h}x{w}")
            shape = (h // 2, w // 2, c)
        elif k == UPSAMPLE:
            (h, w, c) = ins[0]
            shape = (2 * h, 2 * w, c)
        elif k == CONCAT:
            hw = {(s[0], s[1]) for s in ins}
            if len(hw) != 1:
                raise GraphError(f"layer {layer.id}: concat inputs differ spatially: {sorted(hw)}")
            shape = (ins[0][0], ins[0][1], sum(s[2] for s in ins))
        else:
            raise GraphError(f"layer {layer.id}: unknown kind {k!r}")
        shapes[layer.id] = shape
    return shapes


def validate_graph(graph: ModelGraph) -> dict[int, tuple[int, int, int]]:
    """Check all structural invariants; returns the shape map on success."""
    if not graph.layers:
        raise GraphError("empty graph")
    seen: set[int] = set()
    for layer in graph.layers:
        if layer.kind not in LAYER_KINDS:
            raise GraphError(f"layer {layer.id}: unknown kind {layer.kind!r}")
        if layer.id in seen:
            raise GraphError(f"duplicate layer id {layer.id}")
        for i in layer.inputs:
            if i not in seen:
                raise GraphError(f"layer {layer.id}: input {i} is not an earlier layer")
        seen.add(layer.id)
    roots = [l for l in graph.layers if l.kind == INPUT]
    if len(roots) != 1 or graph.layers[0].kind != INPUT:
        raise GraphError("graph must start with exactly one input layer")
    consumed = {i for l in graph.layers for i in l.inputs}
    sinks = [l for l in graph.layers if l.id not in consumed]
    if len(sinks) != 1 or sinks[0].id != graph.layers[-1].id:
        raise GraphError("graph must end in exactly one output layer")
    for layer in graph.layers:
        if layer.kind == CONV:
            w = layer.weight if layer.weight is not None else layer.weight_q
            if w is None or w.ndim != 4:
                raise GraphError(f"layer {layer.id}: conv weight must be (Cout, Cin, K, K)")
            b = layer.bias if layer.bias is not None else layer.bias_q
            if b is None or len(b) != w.shape[0]:
                raise GraphError(f"layer {layer.id}: conv bias length must equal Cout")
            if graph.quantized and (layer.weight_q is None or layer.weight_quant is None):
                raise GraphError(f"layer {layer.id}: quantized graph conv lacks int8 weights")
    shapes = infer_shapes(graph)
    out_shape = shapes[graph.layers[-1].id]
    if out_shape[2] != graph.num_classes:
        raise GraphError(
            f"output has {out_shape[2]} channels, expected num_classes={graph.num_classes}")
    if graph.quantized and graph.input_quant is None:
        raise GraphError("quantized graph lacks input quant params")
    return shapes


# ---------------------------------------------------------------------------
# Deterministic weight streams
#
# Weights come from a counter-based shift-xor-multiply hash (splitmix64):
# value i of stream (seed, tag) is mix(seed ^ mix(tag) + i), mapped to
# uniforms and then normals via Box-Muller. Fully vectorized and
# bit-reproducible across platforms.
# ---------------------------------------------------------------------------

def _mix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
        x ^= x >> np.uint64(30)
        x *= np.uint64(0xBF58476D1CE4E5B9)
        x ^= x >> np.uint64(27)
        x *= np.uint64(0x94D049BB133111EB)
        x ^= x >> np.uint64(31)
    return x


def stream_uniform(seed: int, tag: int, n: int) -> np.ndarray:
    """n deterministic uniforms in [0, 1) for stream (seed, tag)."""
    base = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)) ^ _mix64(np.uint64(tag))
    with np.errstate(over="ignore"):
        counters = base + np.arange(n, dtype=np.uint64)
    return (_mix64(counters) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def stream_normal(seed: int, tag: int, n: int) -> np.ndarray:
    """n deterministic standard normals (Box-Muller over stream_uniform)."""
    m = (n + 1) // 2
    u1 = stream_uniform(seed, 2 * tag + 1, m)
    u2 = stream_uniform(seed, 2 * tag + 2, m)
    r = np.sqrt(-2.0 * np.log(1.0 - u1))
    theta = 2.0 * math.pi * u2
    out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
    return out[:n]


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def _init_conv(seed: int, tag: int, cout: int, cin: int, k: int):
    # Kaiming-style scaling for ReLU nets
    std = math.sqrt(2.0 / (cin * k * k))
    w = (stream_normal(seed, tag, cout * cin * k * k) * std).astype(np.float32)
    b = ((stream_uniform(seed, tag + 10_000, cout) - 0.5) * 0.1).astype(np.float32)
    return w.reshape(cout, cin, k, k), b


def _init_bn(seed: int, tag: int, c: int):
    gamma = (0.5 + stream_uniform(seed, tag + 20_000, c)).astype(np.float32)
    beta = ((stream_uniform(seed, tag + 30_000, c) - 0.5) * 0.2).astype(np.float32)
    mean = ((stream_uniform(seed, tag + 40_000, c) - 0.5) * 0.4).astype(np.float32)
    var = (0.5 + stream_uniform(seed, tag + 50_000, c)).astype(np.float32)
    return gamma, beta, mean, var


def build_unet(depth: int, base_filters: int, input_shape: tuple[int, int, int],
               num_classes: int = 4, with_batchnorm: bool = False,
               seed: int = 0) -> ModelGraph:
    """Build a seeded UNet: per level two 3x3 conv(+BN)+ReLU blocks, 2x2 pool,
    symmetric decoder with nearest upsampling and skip concats, 1x1 head + softmax.

    Filter count doubles per level from base_filters. Weights are
    deterministic per seed.
    """
    h, w, _ = input_shape
    if depth < 1:
        raise GraphError("depth must be >= 1")
    if base_filters < 1:
        raise GraphError("base_filters must be >= 1")
    if h % (1 << depth) or w % (1 << depth):
        raise GraphError(f"input {h}x{w} not divisible by 2^{depth}")

    layers: list[LayerSpec] = [LayerSpec(id=0, kind=INPUT)]
    next_id = 1
    tag = [0]

    def add(kind: str, inputs: list[int], **kw) -> int:
        nonlocal next_id
        layers.append(LayerSpec(id=next_id, kind=kind, inputs=inputs, **kw))
        next_id += 1
        return next_id - 1

    def conv_block(src: int, cin: int, cout: int, k: int = 3) -> int:
        tag[0] += 1
        wgt, b = _init_conv(seed, tag[0] * 100, cout, cin, k)
        lid = add(CONV, [src], weight=wgt, bias=b)
        if with_batchnorm:
            g, bt, mu, var = _init_bn(seed, tag[0] * 100, cout)
            lid = add(BATCHNORM, [lid], gamma=g, beta=bt, mean=mu, var=var)
        return add(RELU, [lid])

    skips: list[tuple[int, int]] = []  # (layer id, channels) per encoder level
    cur, cin = 0, input_shape[2]
    for level in range(depth):
        f = base_filters << level
        cur = conv_block(cur, cin, f)
        cur = conv_block(cur, f, f)
        skips.append((cur, f))
        cur = add(MAXPOOL, [cur])
        cin = f

    f = base_filters << depth
    cur = conv_block(cur, cin, f)
    cur = conv_block(cur, f, f)
    cin = f

    for level in reversed(range(depth)):
        skip_id, skip_c = skips[level]
        cur = add(UPSAMPLE, [cur])
        cur = add(CONCAT, [cur, skip_id])
        f = base_filters << level
        cur = conv_block(cur, cin + skip_c, f)
        cur = conv_block(cur, f, f)
        cin = f

    tag[0] += 1
    wgt, b = _init_conv(seed, tag[0] * 100, num_classes, cin, 1)
    cur = add(CONV, [cur], weight=wgt, bias=b)
    add(SOFTMAX, [cur])

    graph = ModelGraph(layers=layers, input_shape=input_shape, num_classes=num_classes)
    validate_graph(graph)
    return graph


def build_band_segmenter(input_shape: tuple[int, int, int] = (240, 320, 3),
                         band_centers=(20, 120, 180, 230),
                         width: float = 0.2, gain: float = 20.0) -> ModelGraph:
    """Analytic intensity-band segmenter used as a stand-in for a trained model.

    Two 1x1 convs: the hidden layer computes ReLU(+/-(v - center)) per class
    over the mean input channel, the head turns those into tent-shaped
    logits gain*(width - |v - center|), peaked at each class's band center.
    """
    n = len(band_centers)
    cin = input_shape[2]
    w1 = np.zeros((2 * n, cin, 1, 1), dtype=np.float32)
    b1 = np.zeros(2 * n, dtype=np.float32)
    for i, c in enumerate(band_centers):
        m = c / 255.0
        w1[2 * i, :, 0, 0] = 1.0 / cin
        b1[2 * i] = -m
        w1[2 * i + 1, :, 0, 0] = -1.0 / cin
        b1[2 * i + 1] = m
    w2 = np.zeros((n, 2 * n, 1, 1), dtype=np.float32)
    b2 = np.full(n, gain * width, dtype=np.float32)
    for i in range(n):
        w2[i, 2 * i, 0, 0] = -gain
        w2[i, 2 * i + 1, 0, 0] = -gain

    layers = [
        LayerSpec(id=0, kind=INPUT),
        LayerSpec(id=1, kind=CONV, inputs=[0], weight=w1, bias=b1),
        LayerSpec(id=2, kind=RELU, inputs=[1]),
        LayerSpec(id=3, kind=CONV, inputs=[2], weight=w2, bias=b2),
        LayerSpec(id=4, kind=SOFTMAX, inputs=[3]),
    ]
    graph = ModelGraph(layers=layers, input_shape=input_shape, num_classes=n)
    validate_graph(graph)
    return graph


# ---------------------------------------------------------------------------
# Parameter accounting and BN folding
# ---------------------------------------------------------------------------

def count_parameters(graph: ModelGraph) -> int:
    """Trainable scalars: conv weights+bias, BN gamma+beta (running stats excluded)."""
    total = 0
    for layer in graph.layers:
        if layer.kind == CONV:
            w = layer.weight if layer.weight is not None else layer.weight_q
            total += int(w.size) + int(w.shape[0])
        elif layer.kind == BATCHNORM:
            total += 2 * len(layer.gamma)
    return total


def fold_batchnorm(graph: ModelGraph) -> ModelGraph:
    """Fuse every BatchNorm into its preceding conv; returns a BN-free graph.

    W' = gamma * W / sqrt(var + eps) per output channel,
    b' = gamma * (b - mean) / sqrt(var + eps) + beta.
    """
    g = graph.copy()
    index = g._index()
    remap: dict[int, int] = {}
    kept: list[LayerSpec] = []
    for layer in g.layers:
        layer.inputs = [remap.get(i, i) for i in layer.inputs]
        if layer.kind != BATCHNORM:
            kept.append(layer)
            continue
        prev = index[layer.inputs[0]]
        if prev.kind != CONV:
            raise GraphError(f"layer {layer.id}: batchnorm does not follow a conv")
        inv = (layer.gamma / np.sqrt(layer.var + layer.eps)).astype(np.float32)
        prev.weight = (prev.weight * inv[:, None, None, None]).astype(np.float32)
        prev.bias = ((prev.bias - layer.mean) * inv + layer.beta).astype(np.float32)
        remap[layer.id] = prev.id
    g.layers = kept
    validate_graph(g)
    return g
