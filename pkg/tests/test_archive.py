import numpy as np
import pytest

from flamecam.archive import (
    BadMagicError, HeaderMismatchError, TruncatedPayloadError,
    read_model_archive, write_model_archive,
)
from flamecam.infer import preprocess
from flamecam.model import CONV, build_unet
from flamecam.quantize import calibrate, quantize_model
from flamecam.synth import FlameSceneSpec, generate_scene


def graphs_equal(a, b):
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if (la.id, la.kind, la.inputs) != (lb.id, lb.kind, lb.inputs):
            return False
        for name in ("weight", "bias", "gamma", "beta", "mean", "var", "weight_q", "bias_q"):
            va, vb = getattr(la, name), getattr(lb, name)
            if (va is None) != (vb is None):
                return False
            if va is not None and not np.array_equal(va, vb):
                return False
    return (a.input_shape, a.num_classes, a.quantized) == (b.input_shape, b.num_classes, b.quantized)


@pytest.fixture(scope="module")
def unet():
    return build_unet(2, 4, (32, 32, 3), with_batchnorm=True, seed=5)


def test_round_trip_is_identity(tmp_path, unet):
    path = tmp_path / "m.flmcam"
    write_model_archive(unet, path)
    assert graphs_equal(read_model_archive(path), unet)


def test_bad_magic(tmp_path, unet):
    path = tmp_path / "m.flmcam"
    write_model_archive(unet, path)
    data = bytearray(path.read_bytes())
    data[:8] = b"NOTMAGIC"
    path.write_bytes(bytes(data))
    with pytest.raises(BadMagicError):
        read_model_archive(path)


def test_truncated_payload(tmp_path, unet):
    path = tmp_path / "m.flmcam"
    write_model_archive(unet, path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(TruncatedPayloadError):
        read_model_archive(path)


def test_header_payload_mismatch(tmp_path, unet):
    path = tmp_path / "m.flmcam"
    write_model_archive(unet, path)
    raw = path.read_bytes()
    # corrupt a declared tensor byte count inside the JSON header
    import json
    import struct
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    first_tensors = next(e for e in header["layers"] if e["tensors"])["tensors"]
    next(iter(first_tensors.values()))["nbytes"] += 4
    new_header = json.dumps(header).encode()
    path.write_bytes(raw[:8] + struct.pack("<Q", len(new_header)) + new_header + raw[16 + hlen:])
    with pytest.raises(HeaderMismatchError):
        read_model_archive(path)


def test_quantized_round_trip_bit_exact(tmp_path):
    # quantized graph round-trips with identical scales/zero-points;
    # re-serializing the read graph reproduces the archive byte-for-byte
    from flamecam.model import build_band_segmenter

    graph = build_band_segmenter(input_shape=(240, 320, 3))
    frame, _, _ = generate_scene(FlameSceneSpec(seed=1))
    x = preprocess(np.repeat(frame[:, :, None], 3, axis=2))
    qgraph = quantize_model(graph, calibrate(graph, [x]))

    p1, p2 = tmp_path / "a.flmcam", tmp_path / "b.flmcam"
    write_model_archive(qgraph, p1)
    loaded = read_model_archive(p1)
    for la, lb in zip(qgraph.layers, loaded.layers):
        if la.kind == CONV:
            np.testing.assert_array_equal(np.asarray(la.weight_quant.scale),
                                          np.asarray(lb.weight_quant.scale))
            assert la.weight_quant.zero_point == lb.weight_quant.zero_point
        if la.out_quant is not None:
            assert float(np.asarray(la.out_quant.scale)) == float(np.asarray(lb.out_quant.scale))
            assert la.out_quant.zero_point == lb.out_quant.zero_point
    write_model_archive(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
