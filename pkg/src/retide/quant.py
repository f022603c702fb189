"""Post-training quantisation with symmetric power-of-two scales.

Every tensor gets one exponent ``p``: real = int8 code * 2**p, zero point 0.
Because all scales are powers of two, requantisation in the integer engine is
a rounded right shift and the fake-quant simulation below reproduces it
exactly in double precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import InvalidArgument
from .model import (
    LEAKY_SLOPE,
    LayerKind,
    ModelGraph,
    WeightStore,
    _conv,
    _deconv,
    check_input,
    forward_f32,
    walk,
)
from .tensor import SCALE_EXP_BOUND, TensorF32, TensorI8

QMIN, QMAX = -128, 127
DEFAULT_EXP = -7
# |acc| bound for one output element; asserted per model so int32 accumulators suffice
ACC_LIMIT = 1 << 31


def pick_scale(maxabs: float) -> int:
    """Smallest integer p with 127 * 2**p >= maxabs (``-7`` when maxabs is 0)."""
    if maxabs < 0 or not math.isfinite(maxabs):
        raise InvalidArgument(f"maxabs must be finite and >= 0, got {maxabs}")
    if maxabs == 0:
        return DEFAULT_EXP
    p = math.ceil(math.log2(maxabs / QMAX))
    # log2 can be off by one ulp near exact powers of two
    while math.ldexp(QMAX, p - 1) >= maxabs:
        p -= 1
    while math.ldexp(QMAX, p) < maxabs:
        p += 1
    return p


def _clamp_exp(p):
    return max(-SCALE_EXP_BOUND, min(SCALE_EXP_BOUND, int(p)))


def _quantize_array(x, p):
    scaled = np.asarray(x, np.float64) * math.ldexp(1.0, -p)
    return np.clip(np.rint(scaled), QMIN, QMAX)


def quantize_tensor(t: TensorF32, p: int) -> TensorI8:
    """clamp(round_half_even(x / 2**p), -128, 127), elementwise."""
    return TensorI8(_quantize_array(t.data, p).astype(np.int8), p)


def dequantize(t: TensorI8) -> TensorF32:
    return TensorF32(t.data.astype(np.float64) * math.ldexp(1.0, t.scale_exp))


def fake_quantize_array(x, p):
    """Quantise-dequantise in float64; the workhorse of :func:`forward_fakequant`."""
    return _quantize_array(x, p) * math.ldexp(1.0, p)


def fake_quantize(t: TensorF32, p: int) -> TensorF32:
    return TensorF32(fake_quantize_array(t.data, p))


@dataclass
class CalibStats:
    """Running max-absolute value of one tensor."""

    maxabs: float = 0.0
    count: int = 0
    percentile: float = 100.0

    def observe(self, values):
        a = np.abs(np.asarray(values, np.float64))
        if a.size:
            v = float(a.max()) if self.percentile >= 100 else float(np.percentile(a, self.percentile))
            self.maxabs = max(self.maxabs, v)
        self.count += 1


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    """INT8 weights plus one activation exponent per layer output.

    ``act_exps[i]`` is the exponent of layer ``i``'s output. LeakyReLU, ReLU
    and ClampOutput inherit their input's exponent; ConcatSkip takes the
    coarser (larger) exponent of its two operands.
    """

    graph: ModelGraph
    weights: dict
    input_exp: int
    act_exps: tuple
    shifts: dict = field(init=False)

    def __post_init__(self):
        g = self.graph
        if len(self.act_exps) != len(g.layers):
            raise InvalidArgument("need one activation exponent per layer")
        if set(self.weights) != set(g.weighted):
            raise InvalidArgument("weights must cover exactly the Conv/Deconv layers")
        object.__setattr__(self, "act_exps", tuple(int(p) for p in self.act_exps))
        for p in (self.input_exp, *self.act_exps):
            if not -SCALE_EXP_BOUND <= p <= SCALE_EXP_BOUND:
                raise InvalidArgument(f"activation exponent {p} outside [-32, 32]")
        shifts = {}
        in_exps = self.input_exps()
        for i, layer in enumerate(g.layers):
            p_out = self.act_exps[i]
            if layer.kind in (LayerKind.CONV, LayerKind.DECONV):
                w = self.weights[i]
                if not isinstance(w, TensorI8) or w.shape != layer.weight_shape:
                    raise InvalidArgument(f"layer {i}: bad quantised kernel")
                shift = p_out - (w.scale_exp + in_exps[i])
                if shift < 0:
                    raise InvalidArgument(f"layer {i}: negative requant shift {shift}")
                shifts[i] = shift
                # worst case: every tap at |128 * 128|
                taps = layer.in_ch * layer.kernel * layer.kernel
                if taps * 128 * 128 >= ACC_LIMIT:
                    raise InvalidArgument(f"layer {i}: {taps} taps may overflow an int32 accumulator")
            elif layer.kind is LayerKind.CONCAT_SKIP:
                pass
            elif p_out != in_exps[i]:
                raise InvalidArgument(f"layer {i} ({layer.kind.value}) must keep its input exponent")
        stage_exps = self._stage_exps()
        for i, layer in enumerate(g.layers):
            if layer.kind is LayerKind.CONCAT_SKIP:
                want = max(stage_exps[layer.skip_source - 1], in_exps[i])
                if self.act_exps[i] != want:
                    raise InvalidArgument(f"layer {i}: concat exponent must be {want}")
        object.__setattr__(self, "shifts", shifts)

    def input_exps(self):
        """Exponent of the tensor flowing *into* each layer."""
        return [self.input_exp, *self.act_exps[:-1]]

    def _stage_exps(self):
        return [p for layer, p in zip(self.graph.layers, self.act_exps) if layer.kind is LayerKind.LEAKY_RELU]

    def __eq__(self, other):
        if not isinstance(other, QuantizedModel):
            return NotImplemented
        return (
            self.graph == other.graph
            and self.input_exp == other.input_exp
            and self.act_exps == other.act_exps
            and self.weights.keys() == other.weights.keys()
            and all(self.weights[k] == other.weights[k] for k in self.weights)
        )


def derive_exponents(g: ModelGraph, weight_exps: dict, input_maxabs: float, layer_maxabs: dict):
    """Activation exponents from observed ranges, honouring the tying rules.

    A weighted layer's output exponent is never finer than its accumulator
    grid (input exponent + weight exponent) so the requant shift stays >= 0.
    """
    input_exp = _clamp_exp(pick_scale(input_maxabs))
    act = []
    stage_exps = []
    cur = input_exp
    for i, layer in enumerate(g.layers):
        if layer.kind in (LayerKind.CONV, LayerKind.DECONV):
            p = _clamp_exp(pick_scale(layer_maxabs.get(i, 0.0)))
            p = max(p, cur + weight_exps[i])
            if p > SCALE_EXP_BOUND:
                raise InvalidArgument(f"layer {i}: exponent {p} exceeds the sanity bound")
            cur = p
        elif layer.kind is LayerKind.CONCAT_SKIP:
            cur = max(stage_exps[layer.skip_source - 1], cur)
        act.append(cur)
        if layer.kind is LayerKind.LEAKY_RELU:
            stage_exps.append(cur)
    return input_exp, tuple(act)


def quantize_weights(w: WeightStore):
    out = {}
    for i, k in w.kernels.items():
        p = _clamp_exp(pick_scale(float(np.abs(k).max(initial=0.0))))
        out[i] = TensorI8(_quantize_array(k, p).astype(np.int8), p)
    return out


def calibrate(g: ModelGraph, w: WeightStore, calib_images: Iterable[TensorF32], percentile: float = 100.0):
    """Run the FP32 reference over the calibration set and fix every exponent."""
    if not 0 < percentile <= 100:
        raise InvalidArgument("percentile must be in (0, 100]")
    input_stats = CalibStats(percentile=percentile)
    stats = {i: CalibStats(percentile=percentile) for i in range(len(g.layers))}
    seen = 0
    for img in calib_images:
        check_input(g, img.shape)
        input_stats.observe(img.data)
        forward_f32(g, w, img, observe=lambda i, t: stats[i].observe(t.data))
        seen += 1
    if seen == 0:
        raise InvalidArgument("calibration set is empty")
    qweights = quantize_weights(w)
    input_exp, act = derive_exponents(
        g,
        {i: qw.scale_exp for i, qw in qweights.items()},
        input_stats.maxabs,
        {i: s.maxabs for i, s in stats.items()},
    )
    return QuantizedModel(g, qweights, input_exp, act)


def forward_fakequant(qm: QuantizedModel, x: TensorF32) -> TensorF32:
    """Float64 simulation of the integer engine.

    Input, weights and every layer output pass through fake quantisation with
    the model's exponents. All intermediate values are small integers times a
    power of two, so the double-precision sums are exact and the result equals
    the integer engine bit for bit.
    """
    g = qm.graph
    check_input(g, x.shape)
    exps = qm.act_exps
    in_exps = qm.input_exps()
    stage_exps = qm._stage_exps()
    L = LayerKind

    def step(i, layer, cur, skip):
        if layer.kind is L.CONV:
            return fake_quantize_array(_conv(cur, _dequant_kernel(qm.weights[i])), exps[i])
        if layer.kind is L.DECONV:
            return fake_quantize_array(_deconv(cur, _dequant_kernel(qm.weights[i])), exps[i])
        if layer.kind is L.LEAKY_RELU:
            return fake_quantize_array(np.where(cur >= 0, cur, LEAKY_SLOPE * cur), exps[i])
        if layer.kind is L.RELU:
            return fake_quantize_array(np.maximum(cur, 0.0), exps[i])
        if layer.kind is L.CONCAT_SKIP:
            target = exps[i]
            a = fake_quantize_array(skip, target) if stage_exps[layer.skip_source - 1] < target else skip
            b = fake_quantize_array(cur, target) if in_exps[i] < target else cur
            return np.concatenate([a, b], axis=1)
        return np.clip(cur, 0.0, 1.0)

    out = walk(g, fake_quantize_array(x.data, qm.input_exp), step)
    return TensorF32(out)


def _dequant_kernel(k: TensorI8):
    return k.data.astype(np.float64) * math.ldexp(1.0, k.scale_exp)
