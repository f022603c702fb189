"""Bit-accurate integer execution of a :class:`~retide.quant.QuantizedModel`.

Order inside every weighted layer is: int32 accumulation of int8 products,
rounded right shift (half to even) with saturation, then the activation at
the same exponent. LeakyReLU is multiply-by-26 followed by a rounded shift
by 8.

Accumulation runs through float64 BLAS. The operands are int8 and each sum
has at most 16 * 1024 terms, so every partial sum is an integer below 2**53
and the float result is the exact integer.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidArgument
from .model import KERNEL, LEAKY_NUM, LEAKY_SHIFT, PAD, STRIDE, LayerKind, check_input, walk
from .quant import ACC_LIMIT, QMAX, QMIN, QuantizedModel
from .tensor import TensorF32, TensorI8


def _shift_round(acc, shift):
    """round_half_even(acc / 2**shift) on int64 arrays, shift >= 0."""
    acc = np.asarray(acc, np.int64)
    if shift == 0:
        return acc
    shift = min(shift, 62)
    # floor((acc + half - 1 + lsb) / 2**shift), lsb = parity of the truncated quotient:
    # exact ties then round up only when the floor is odd
    out = (acc >> shift) & 1
    out += acc
    out += (np.int64(1) << (shift - 1)) - 1
    out >>= shift
    return out


def _saturate(v):
    return np.clip(v, QMIN, QMAX).astype(np.int8)


def requantize(acc, shift: int):
    """Rounded (half-to-even) arithmetic right shift, then clamp to int8.

    Works on scalars and arrays; scalars come back as Python ints.
    """
    if shift < 0:
        raise InvalidArgument(f"shift must be >= 0, got {shift}")
    out = _saturate(_shift_round(acc, shift))
    return int(out) if np.ndim(acc) == 0 else out


def leaky_relu_i8(q):
    """Identity for q >= 0, round_half_even(26 * q / 256) for q < 0."""
    q = np.asarray(q)
    neg = _saturate(_shift_round(q.astype(np.int64) * LEAKY_NUM, LEAKY_SHIFT))
    out = np.where(q >= 0, q, neg).astype(np.int8)
    return int(out) if out.ndim == 0 else out


def relu_i8(q):
    out = np.maximum(np.asarray(q), 0).astype(np.int8)
    return int(out) if out.ndim == 0 else out


def rescale_to(x: TensorI8, target_exp: int) -> TensorI8:
    if target_exp < x.scale_exp:
        raise InvalidArgument(f"cannot rescale from 2**{x.scale_exp} to the finer 2**{target_exp}")
    if target_exp == x.scale_exp:
        return x
    return TensorI8(_saturate(_shift_round(x.data, target_exp - x.scale_exp)), target_exp)


def _check_acc(acc):
    peak = int(np.abs(acc).max(initial=0))
    if peak >= ACC_LIMIT:
        raise OverflowError(f"accumulator magnitude {peak} exceeds int32")
    return acc.astype(np.int32)


def conv_accumulate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """int32 accumulator of a 4x4 stride-2 pad-1 convolution, one matmul per tap."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    oh, ow = h // STRIDE, wd // STRIDE
    if not x.any() or not w.any():
        return np.zeros((n, o, oh, ow), np.int32)
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    wf = w.astype(np.float64)
    acc = np.zeros((o, n, oh, ow))
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            taps = xp[:, :, ky:ky + STRIDE * oh:STRIDE, kx:kx + STRIDE * ow:STRIDE]
            acc += np.tensordot(wf[:, :, ky, kx], taps, axes=([1], [1]))
    return _check_acc(acc.transpose(1, 0, 2, 3))


def deconv_accumulate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """int32 accumulator of the transposed convolution, scattering one tap at a time."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    if not x.any() or not w.any():
        return np.zeros((n, o, STRIDE * h, STRIDE * wd), np.int32)
    xf = x.astype(np.float64)
    wf = w.astype(np.float64)
    full = np.zeros((o, n, STRIDE * h + 2 * PAD, STRIDE * wd + 2 * PAD))
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            full[:, :, ky:ky + STRIDE * h:STRIDE, kx:kx + STRIDE * wd:STRIDE] += np.tensordot(
                wf[:, :, ky, kx], xf, axes=([1], [1])
            )
    return _check_acc(full[:, :, PAD:-PAD, PAD:-PAD].transpose(1, 0, 2, 3))


def _check_shapes(x: TensorI8, w: TensorI8, transposed):
    if w.data.ndim != 4 or w.shape[2:] != (KERNEL, KERNEL) or x.c != w.shape[1]:
        raise InvalidArgument(f"input {x.shape} does not match kernel {w.shape}")
    if not transposed and (x.h % 2 or x.w % 2):
        raise InvalidArgument(f"strided conv needs even spatial dims, got {x.h}x{x.w}")


def conv2d_i8(x: TensorI8, w: TensorI8, shift: int) -> TensorI8:
    _check_shapes(x, w, transposed=False)
    acc = conv_accumulate(x.data, w.data)
    return TensorI8(requantize(acc, shift), x.scale_exp + w.scale_exp + shift)


def deconv2d_i8(x: TensorI8, w: TensorI8, shift: int) -> TensorI8:
    _check_shapes(x, w, transposed=True)
    acc = deconv_accumulate(x.data, w.data)
    return TensorI8(requantize(acc, shift), x.scale_exp + w.scale_exp + shift)


def forward_i8(qm: QuantizedModel, x: TensorF32) -> TensorF32:
    """Quantise the input, run every layer in integer arithmetic, dequantise and clamp."""
    g = qm.graph
    check_input(g, x.shape)
    L = LayerKind

    def step(i, layer, cur, skip):
        if layer.kind is L.CONV:
            return conv2d_i8(cur, qm.weights[i], qm.shifts[i])
        if layer.kind is L.DECONV:
            return deconv2d_i8(cur, qm.weights[i], qm.shifts[i])
        if layer.kind is L.LEAKY_RELU:
            return TensorI8(leaky_relu_i8(cur.data), cur.scale_exp)
        if layer.kind is L.RELU:
            return TensorI8(relu_i8(cur.data), cur.scale_exp)
        if layer.kind is L.CONCAT_SKIP:
            target = qm.act_exps[i]
            a, b = rescale_to(skip, target), rescale_to(cur, target)
            return TensorI8(np.concatenate([a.data, b.data], axis=1), target)
        return cur

    q_in = np.clip(np.rint(x.data.astype(np.float64) * 2.0 ** -qm.input_exp), QMIN, QMAX)
    out = walk(g, TensorI8(q_in.astype(np.int8), qm.input_exp), step)
    real = out.data.astype(np.float64) * 2.0 ** out.scale_exp
    return TensorF32(np.clip(real, 0.0, 1.0))
