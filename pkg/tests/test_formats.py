import numpy as np
import pytest
from conftest import random_image

from retide.errors import InvalidArgument
from retide.formats import (
    decode_weights,
    encode_weights,
    load_weights,
    read_png,
    save_weights,
    write_png,
)
from retide.model import WeightStore, build_retide_graph, build_unet_graph
from retide.quant import QuantizedModel


def test_weights_header_layout():
    g = build_unet_graph(1, 3, (8,))
    w = WeightStore.zeros(g)
    raw = encode_weights(w)
    assert raw[:4] == b"RTDW"
    assert raw[4:6] == b"\x01\x00"
    assert raw[6:8] == bytes([1, 3])
    assert int.from_bytes(raw[8:10], "little") == len(g.weighted)
    # first record: layer 0, f32, exp 0, dims (8, 1, 4, 4)
    rec = raw[10:30]
    assert rec[:2] == b"\x00\x00" and rec[2:4] == b"\x00\x00"
    assert [int.from_bytes(rec[4 + 4 * k:8 + 4 * k], "little") for k in range(4)] == [8, 1, 4, 4]


def test_fp32_roundtrip(tmp_path):
    g = build_retide_graph(3, 3)
    w = WeightStore.random(g, 1)
    save_weights(tmp_path / "w.rtdw", w)
    back = load_weights(tmp_path / "w.rtdw")
    assert isinstance(back, WeightStore)
    assert all(np.array_equal(back.kernels[i], w.kernels[i]) for i in g.weighted)


def test_quantized_roundtrip(small_qmodel):
    raw = encode_weights(small_qmodel)
    back = decode_weights(raw, small_qmodel.graph)
    assert isinstance(back, QuantizedModel)
    assert back == small_qmodel


def test_quantized_full_graph_roundtrip(rng):
    from conftest import random_qmodel

    _, _, qm = random_qmodel(rng, calib_size=64)
    assert decode_weights(encode_weights(qm)) == qm


def test_decode_errors(small_qmodel):
    raw = encode_weights(small_qmodel)
    g = small_qmodel.graph
    with pytest.raises(InvalidArgument):
        decode_weights(b"XXXX" + raw[4:], g)
    with pytest.raises(InvalidArgument):
        decode_weights(raw[:-1], g)
    with pytest.raises(InvalidArgument):
        decode_weights(raw + b"\0", g)
    with pytest.raises(InvalidArgument):
        decode_weights(raw, build_unet_graph(1, 3, (8, 16, 16)))


def test_png_roundtrip(tmp_path, rng):
    for c in (1, 3):
        t = random_image(rng, c, 20, 30)
        write_png(tmp_path / f"x{c}.png", t)
        back = read_png(tmp_path / f"x{c}.png")
        assert back.shape == t.shape
        want = np.rint(t.data * 255) / 255
        assert np.abs(back.data - want).max() < 1e-6
