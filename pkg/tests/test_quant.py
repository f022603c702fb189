import math

import numpy as np
import pytest
from conftest import random_image
from hypothesis import given, settings
from hypothesis import strategies as st

from retide.errors import InvalidArgument
from retide.model import LayerKind, WeightStore, build_unet_graph, forward_f32
from retide.quant import (
    CalibStats,
    QuantizedModel,
    calibrate,
    dequantize,
    fake_quantize,
    forward_fakequant,
    pick_scale,
    quantize_tensor,
)
from retide.tensor import TensorF32, TensorI8


def vec(*vals):
    return TensorF32(np.array(vals, np.float64).reshape(1, 1, 1, -1))


@pytest.mark.parametrize("maxabs,p", [(127, 0), (1.0, -6), (0, -7), (0.992, -7), (127.0001, 1), (254, 1)])
def test_pick_scale_examples(maxabs, p):
    assert pick_scale(maxabs) == p


def test_pick_scale_rejects_negative():
    with pytest.raises(InvalidArgument):
        pick_scale(-1.0)


@settings(max_examples=300)
@given(st.floats(min_value=1e-30, max_value=1e30, allow_nan=False))
def test_pick_scale_minimal(m):
    p = pick_scale(m)
    assert math.ldexp(127, p - 1) < m <= math.ldexp(127, p)


def test_quantize_examples():
    assert quantize_tensor(vec(0.5), -6).data.item() == 32
    assert quantize_tensor(vec(10.0), -6).data.item() == 127
    assert quantize_tensor(vec(-10.0), -6).data.item() == -128
    p = -3
    ties = vec(2.5 * 2 ** p, 3.5 * 2 ** p, -2.5 * 2 ** p, 0.5 * 2 ** p)
    assert quantize_tensor(ties, p).data.ravel().tolist() == [2, 4, -2, 0]


def test_dequantize_examples():
    assert dequantize(TensorI8(np.full((1, 1, 1, 1), 32), -6)).data.item() == 0.5
    assert dequantize(TensorI8(np.full((1, 1, 1, 1), -128), 0)).data.item() == -128.0


@settings(max_examples=100, deadline=None)
@given(st.integers(-12, 4), st.integers(0, 2 ** 32 - 1))
def test_roundtrip_half_ulp(p, seed):
    lim = 127 * 2.0 ** p
    x = np.random.default_rng(seed).uniform(-lim, lim, 257).astype(np.float32)
    back = dequantize(quantize_tensor(vec(*x), p)).data.ravel()
    assert np.all(np.abs(back.astype(np.float64) - x) <= 2.0 ** (p - 1))


@settings(max_examples=100, deadline=None)
@given(st.integers(-12, 4), st.integers(0, 2 ** 32 - 1))
def test_fake_quantize_idempotent(p, seed):
    x = vec(*np.random.default_rng(seed).normal(0, 200 * 2.0 ** p, 100))
    once = fake_quantize(x, p)
    assert fake_quantize(once, p) == once


def test_fake_quantize_grid_point_unchanged():
    x = vec(-128 * 2 ** -5, 3 * 2 ** -5, 0.0, 127 * 2 ** -5)
    assert fake_quantize(x, -5) == x


@settings(max_examples=50)
@given(st.lists(st.floats(-1e4, 1e4, width=32), min_size=2, max_size=50), st.integers(-10, 6))
def test_quantize_monotone(vals, p):
    x = np.sort(np.array(vals, np.float32))
    q = quantize_tensor(vec(*x), p).data.ravel()
    assert np.all(np.diff(q.astype(int)) >= 0)


def test_calib_stats_never_decrease():
    s = CalibStats()
    for v in (1.0, 0.5, 3.0, 2.0):
        before = s.maxabs
        s.observe(np.array([v, -v / 2]))
        assert s.maxabs >= before
    assert s.maxabs == 3.0 and s.count == 4


SMALL = (8, 16)


def small_graph():
    return build_unet_graph(3, 3, SMALL)


def test_calibrate_input_exponent():
    g = small_graph()
    w = WeightStore.random(g, 0)
    below = TensorF32(np.full((1, 3, 8, 8), 0.99, np.float32))
    assert calibrate(g, w, [below]).input_exp == -7
    full = TensorF32(np.ones((1, 3, 8, 8), np.float32))
    assert calibrate(g, w, [full]).input_exp == -6


def test_calibrate_zero_weights():
    g = small_graph()
    qm = calibrate(g, WeightStore.zeros(g), [TensorF32.zeros(1, 3, 8, 8)])
    assert all(k.scale_exp == -7 for k in qm.weights.values())
    assert all(s >= 0 for s in qm.shifts.values())
    assert set(qm.shifts) == set(g.weighted)


def test_calibrate_deterministic_and_order_free():
    rng = np.random.default_rng(5)
    g = small_graph()
    w = WeightStore.random(g, rng)
    imgs = [random_image(rng, 3, 16, 16) for _ in range(4)]
    a = calibrate(g, w, imgs)
    assert calibrate(g, w, imgs) == a
    assert calibrate(g, w, imgs[::-1]) == a
    assert calibrate(g, w, [imgs[2], imgs[0], imgs[3], imgs[1]]) == a


def test_calibrate_empty():
    g = small_graph()
    with pytest.raises(InvalidArgument):
        calibrate(g, WeightStore.zeros(g), [])


def test_calibrate_bad_dims():
    g = small_graph()
    with pytest.raises(InvalidArgument):
        calibrate(g, WeightStore.zeros(g), [TensorF32.zeros(1, 3, 6, 8)])


def test_quantized_model_invariants():
    rng = np.random.default_rng(9)
    g = small_graph()
    qm = calibrate(g, WeightStore.random(g, rng), [random_image(rng, 3, 16, 16)])
    for i, k in qm.weights.items():
        assert k.data.min() >= -128 and k.data.max() <= 127
        assert isinstance(qm.shifts[i], int)
    exps = qm.act_exps
    stage = [p for layer, p in zip(g.layers, exps) if layer.kind is LayerKind.LEAKY_RELU]
    for i, layer in enumerate(g.layers):
        if layer.kind is LayerKind.CONCAT_SKIP:
            assert exps[i] == max(stage[layer.skip_source - 1], exps[i - 1])
    bad = list(exps)
    bad[1] += 1  # LeakyReLU must keep its input exponent
    with pytest.raises(InvalidArgument):
        QuantizedModel(g, qm.weights, qm.input_exp, tuple(bad))


def test_percentile_clipping_is_not_finer_than_needed():
    rng = np.random.default_rng(2)
    g = small_graph()
    w = WeightStore.random(g, rng)
    imgs = [random_image(rng, 3, 16, 16)]
    full = calibrate(g, w, imgs)
    clipped = calibrate(g, w, imgs, percentile=99.0)
    assert all(c <= f for c, f in zip(clipped.act_exps, full.act_exps))


def test_fakequant_zero_input():
    rng = np.random.default_rng(4)
    g = small_graph()
    qm = calibrate(g, WeightStore.random(g, rng), [random_image(rng, 3, 16, 16)])
    assert not forward_fakequant(qm, TensorF32.zeros(1, 3, 16, 16)).data.any()


def test_fakequant_fine_scale_approaches_fp32():
    """All activation exponents at -20 with every activation inside +-127 * 2**-20.

    Kernels are drawn on their own int8 grid so they quantise losslessly; the
    remaining error is activation rounding, amplified layer by layer.
    """
    rng = np.random.default_rng(0)
    g = small_graph()
    p_w = -8
    kernels = {i: rng.integers(-127, 128, g.layers[i].weight_shape) * 2.0 ** p_w for i in g.weighted}
    ws = WeightStore(g, kernels)
    x = rng.random((1, 3, 16, 16))
    peak = [0.0]
    forward_f32(g, ws, TensorF32(x), observe=lambda i, t: peak.__setitem__(0, max(peak[0], np.abs(t.data).max())))
    x = x * (100 * 2.0 ** -20 / max(peak[0], 1.0))
    qweights = {i: TensorI8(np.rint(kernels[i] / 2.0 ** p_w).astype(np.int8), p_w) for i in g.weighted}
    qm = QuantizedModel(g, qweights, -20, tuple([-20] * len(g.layers)))
    ref = forward_f32(g, ws, TensorF32(x)).data.astype(np.float64)
    got = forward_fakequant(qm, TensorF32(x)).data.astype(np.float64)
    assert np.abs(got - ref).max() <= 1e-4
    assert np.abs(ref).max() > 0
