"""FLMCAM01 model archive: magic, JSON header, raw little-endian tensor payloads.

Layout:

    bytes 0..7    magic b"FLMCAM01"
    bytes 8..15   header length (unsigned 64-bit little-endian)
    header        UTF-8 JSON: graph metadata, layer list, tensor descriptors
                  with byte offsets relative to the payload section
    payload       raw tensor bytes, little-endian, in descriptor order

Round-trips are scalar-exact; quant params live in the header as JSON
numbers (repr round-trip, so bit-exact for float64 scales).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import LayerSpec, ModelGraph, QuantParams, validate_graph

MAGIC = b"FLMCAM01"

_DTYPES = {"float32": "<f4", "int8": "<i1", "int32": "<i4"}
_TENSOR_FIELDS = ("weight", "bias", "gamma", "beta", "mean", "var", "weight_q", "bias_q")


class ArchiveError(Exception):
    """Base error for malformed FLMCAM01 files."""


class BadMagicError(ArchiveError):
    pass


class TruncatedPayloadError(ArchiveError):
    pass


class HeaderMismatchError(ArchiveError):
    pass


def _qp_to_json(qp: QuantParams | None):
    if qp is None:
        return None
    scale = qp.scale.tolist() if isinstance(qp.scale, np.ndarray) else float(qp.scale)
    return {"scale": scale, "zero_point": int(qp.zero_point), "axis": qp.axis}


def _qp_from_json(obj) -> QuantParams | None:
    if obj is None:
        return None
    scale = obj["scale"]
    if isinstance(scale, list):
        scale = np.asarray(scale, dtype=np.float64)
    return QuantParams(scale=scale, zero_point=obj["zero_point"], axis=obj["axis"])


def _dtype_name(arr: np.ndarray) -> str:
    for name, code in _DTYPES.items():
        if arr.dtype == np.dtype(code).newbyteorder("="):
            return name
    raise ArchiveError(f"unsupported tensor dtype {arr.dtype}")


def write_model_archive(graph: ModelGraph, path) -> None:
    payloads: list[bytes] = []
    offset = 0
    layer_entries = []
    for layer in graph.layers:
        tensors = {}
        for name in _TENSOR_FIELDS:
            arr = getattr(layer, name)
            if arr is None:
                continue
            raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[_dtype_name(arr)])).tobytes()
            tensors[name] = {
                "dtype": _dtype_name(arr),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
            payloads.append(raw)
            offset += len(raw)
        layer_entries.append({
            "id": layer.id,
            "kind": layer.kind,
            "inputs": layer.inputs,
            "eps": layer.eps,
            "slope": layer.slope,
            "tensors": tensors,
            "weight_quant": _qp_to_json(layer.weight_quant),
            "out_quant": _qp_to_json(layer.out_quant),
        })
    header = {
        "format": "FLMCAM01",
        "input_shape": list(graph.input_shape),
        "num_classes": graph.num_classes,
        "quantized": graph.quantized,
        "input_quant": _qp_to_json(graph.input_quant),
        "payload_bytes": offset,
        "layers": layer_entries,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in payloads:
            f.write(raw)


def read_model_archive(path) -> ModelGraph:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise BadMagicError(f"bad magic {data[:8]!r}")
    if len(data) < 16:
        raise TruncatedPayloadError("file too short for header length")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header_bytes = data[16:16 + hlen]
    if len(header_bytes) < hlen:
        raise TruncatedPayloadError("truncated header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderMismatchError(f"unreadable header: {e}") from e
    payload = data[16 + hlen:]
    if len(payload) < header["payload_bytes"]:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} of {header['payload_bytes']} bytes")

    layers = []
    for entry in header["layers"]:
        fields = {}
        for name, desc in entry["tensors"].items():
            if name not in _TENSOR_FIELDS or desc["dtype"] not in _DTYPES:
                raise HeaderMismatchError(f"unknown tensor descriptor {name}/{desc.get('dtype')}")
            dt = np.dtype(_DTYPES[desc["dtype"]])
            expected = int(np.prod(desc["shape"])) * dt.itemsize
            if desc["nbytes"] != expected:
                raise HeaderMismatchError(
                    f"tensor {name} of layer {entry['id']}: {desc['nbytes']} bytes "
                    f"declared, shape implies {expected}")
            lo, hi = desc["offset"], desc["offset"] + desc["nbytes"]
            if hi > len(payload):
                raise TruncatedPayloadError(f"tensor {name} of layer {entry['id']} out of bounds")
            arr = np.frombuffer(payload[lo:hi], dtype=dt).reshape(desc["shape"])
            fields[name] = arr.astype(arr.dtype.newbyteorder("="))
        layers.append(LayerSpec(
            id=entry["id"], kind=entry["kind"], inputs=list(entry["inputs"]),
            eps=entry["eps"], slope=entry["slope"],
            weight_quant=_qp_from_json(entry.get("weight_quant")),
            out_quant=_qp_from_json(entry.get("out_quant")),
            **fields,
        ))
    graph = ModelGraph(
        layers=layers,
        input_shape=tuple(header["input_shape"]),
        num_classes=header["num_classes"],
        quantized=header["quantized"],
        input_quant=_qp_from_json(header.get("input_quant")),
    )
    try:
        validate_graph(graph)
    except Exception as e:
        raise HeaderMismatchError(f"archive decodes to an invalid graph: {e}") from e
    return graph
