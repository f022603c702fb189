"""ReTiDe-Net graph definition and the FP32 reference forward pass.

The generator is a bias-free U-Net: six 4x4 stride-2 convolutions on the way
down (LeakyReLU with slope 26/256 after each), six 4x4 stride-2 transposed
convolutions on the way up (ReLU after each but the last), and channel
concatenation skips from encoder stages 1..5 into the decoder. The final
transposed convolution is linear and its output is clamped to [0, 1].
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument
from .tensor import TensorF32, concat_channels

KERNEL = 4
STRIDE = 2
PAD = 1

LEAKY_NUM = 26
LEAKY_SHIFT = 8
LEAKY_SLOPE = LEAKY_NUM / (1 << LEAKY_SHIFT)  # 0.1015625, exact in binary

RETIDE_WIDTHS = (64, 128, 256, 512, 512, 512)


class LayerKind(str, enum.Enum):
    CONV = "Conv"
    DECONV = "Deconv"
    LEAKY_RELU = "LeakyReLU"
    RELU = "ReLU"
    CONCAT_SKIP = "ConcatSkip"
    CLAMP_OUTPUT = "ClampOutput"


WEIGHTED = (LayerKind.CONV, LayerKind.DECONV)


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_ch: int
    out_ch: int
    kernel: int = KERNEL
    stride: int = STRIDE
    pad: int = PAD
    skip_source: Optional[int] = None

    def __post_init__(self):
        if self.kind in WEIGHTED and (self.kernel, self.stride, self.pad) != (KERNEL, STRIDE, PAD):
            raise InvalidArgument("Conv/Deconv layers must use kernel 4, stride 2, pad 1")
        if (self.kind is LayerKind.CONCAT_SKIP) != (self.skip_source is not None):
            raise InvalidArgument("skip_source is required on ConcatSkip and only there")

    @property
    def weight_shape(self):
        return (self.out_ch, self.in_ch, self.kernel, self.kernel)


@dataclass(frozen=True)
class ModelGraph:
    """Ordered layer list.

    Each LeakyReLU closes an encoder stage; stages are numbered from 1 and a
    ConcatSkip with ``skip_source=i`` prepends stage ``i``'s output.
    """

    layers: tuple
    cin: int
    cout: int
    depth: int

    @property
    def weighted(self):
        """Indices of Conv/Deconv layers (these are also the weight ids)."""
        return [i for i, layer in enumerate(self.layers) if layer.kind in WEIGHTED]

    @property
    def granularity(self):
        """Spatial dims must be multiples of this for an exact round trip."""
        return 1 << self.depth

    def layer_shapes(self):
        return [(layer.kind.value, layer.in_ch, layer.out_ch) for layer in self.layers]


def build_unet_graph(cin: int, cout: int, widths: Sequence[int]) -> ModelGraph:
    """Symmetric conv/deconv U-Net with one stage per entry in ``widths``."""
    if cin < 1 or cout < 1 or not widths:
        raise InvalidArgument("need positive channel counts and at least one stage")
    L = LayerKind
    layers = []
    prev = cin
    for width in widths:
        layers.append(LayerSpec(L.CONV, prev, width))
        layers.append(LayerSpec(L.LEAKY_RELU, width, width))
        prev = width
    depth = len(widths)
    # decoder stage s maps back to encoder stage s-1's resolution
    for s in range(depth, 0, -1):
        out = widths[s - 2] if s > 1 else cout
        if s < depth:
            skip_ch = widths[s - 1]
            layers.append(LayerSpec(L.CONCAT_SKIP, skip_ch + prev, skip_ch + prev, skip_source=s))
            prev = skip_ch + prev
        layers.append(LayerSpec(L.DECONV, prev, out))
        if s > 1:
            layers.append(LayerSpec(L.RELU, out, out))
        prev = out
    layers.append(LayerSpec(L.CLAMP_OUTPUT, cout, cout))
    return ModelGraph(tuple(layers), cin, cout, depth)


def build_retide_graph(cin: int, cout: int) -> ModelGraph:
    """The six-stage ReTiDe-Net generator for grayscale (1) or colour (3) images."""
    if cin not in (1, 3) or cout not in (1, 3):
        raise InvalidArgument(f"unsupported channel counts cin={cin}, cout={cout}")
    return build_unet_graph(cin, cout, RETIDE_WIDTHS)


class WeightStore:
    """FP32 kernels keyed by layer index, each shaped (out_ch, in_ch, 4, 4)."""

    def __init__(self, graph: ModelGraph, kernels):
        self.graph = graph
        self.kernels = {}
        for idx in graph.weighted:
            if idx not in kernels:
                raise InvalidArgument(f"missing weights for layer {idx}")
            k = np.array(kernels[idx], dtype=np.float32)
            if k.shape != graph.layers[idx].weight_shape:
                raise InvalidArgument(
                    f"layer {idx}: kernel shape {k.shape} != {graph.layers[idx].weight_shape}"
                )
            k.flags.writeable = False
            self.kernels[idx] = k
        extra = set(kernels) - set(self.kernels)
        if extra:
            raise InvalidArgument(f"weights for non-weighted layers {sorted(extra)}")

    def __getitem__(self, idx):
        return self.kernels[idx]

    def __iter__(self):
        return iter(self.kernels)

    def __len__(self):
        return len(self.kernels)

    @classmethod
    def zeros(cls, graph):
        return cls(graph, {i: np.zeros(graph.layers[i].weight_shape, np.float32) for i in graph.weighted})

    @classmethod
    def random(cls, graph, rng=None, gain=1.0):
        """He-style initialisation; transposed convs use their 4-tap fan-in."""
        rng = np.random.default_rng(rng)
        kernels = {}
        for i in graph.weighted:
            layer = graph.layers[i]
            taps = 16 if layer.kind is LayerKind.CONV else 4
            std = gain * np.sqrt(2.0 / (layer.in_ch * taps))
            kernels[i] = rng.normal(0.0, std, layer.weight_shape).astype(np.float32)
        return cls(graph, kernels)


# --- dense kernels, dtype-generic (float32 for the reference, float64 for fake-quant)


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(2, 3))[:, :, ::STRIDE, ::STRIDE]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * KERNEL * KERNEL)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)


def _deconv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    o = w.shape[0]
    rows = x.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    contrib = (rows @ w.transpose(1, 0, 2, 3).reshape(c, -1)).reshape(n, h, wd, o, KERNEL, KERNEL)
    full = np.zeros((n, o, STRIDE * h + 2 * PAD, STRIDE * wd + 2 * PAD), contrib.dtype)
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            full[:, :, ky:ky + STRIDE * h:STRIDE, kx:kx + STRIDE * wd:STRIDE] += (
                contrib[..., ky, kx].transpose(0, 3, 1, 2)
            )
    return full[:, :, PAD:-PAD, PAD:-PAD]


def _check_conv_args(x, w, transposed):
    if w.ndim != 4 or w.shape[2:] != (KERNEL, KERNEL):
        raise InvalidArgument(f"kernel must be (out, in, 4, 4), got {w.shape}")
    if x.c != w.shape[1]:
        raise InvalidArgument(f"input has {x.c} channels, kernel expects {w.shape[1]}")
    if not transposed and (x.h % 2 or x.w % 2):
        raise InvalidArgument(f"strided conv needs even spatial dims, got {x.h}x{x.w}")


def conv2d_f32(x: TensorF32, w) -> TensorF32:
    """4x4 stride-2 pad-1 cross-correlation, no bias. Halves h and w."""
    w = np.asarray(w, np.float32)
    _check_conv_args(x, w, transposed=False)
    return TensorF32(_conv(x.data.astype(np.float64), w.astype(np.float64)))


def deconv2d_f32(x: TensorF32, w) -> TensorF32:
    """Transposed 4x4 stride-2 pad-1 convolution, the adjoint of conv2d_f32. Doubles h and w.

    ``w`` is laid out (out_ch, in_ch, 4, 4) like every other kernel here, so the
    adjoint of ``conv2d_f32(., k)`` is ``deconv2d_f32(., k.transpose(1, 0, 2, 3))``.
    """
    w = np.asarray(w, np.float32)
    _check_conv_args(x, w, transposed=True)
    return TensorF32(_deconv(x.data.astype(np.float64), w.astype(np.float64)))


def leaky_relu_f32(x: TensorF32) -> TensorF32:
    d = x.data
    return TensorF32(np.where(d >= 0, d, d * np.float32(LEAKY_SLOPE)))


def relu_f32(x: TensorF32) -> TensorF32:
    return TensorF32(np.maximum(x.data, np.float32(0.0)))


def check_input(g: ModelGraph, x_shape):
    n, c, h, w = x_shape
    if c != g.cin:
        raise InvalidArgument(f"model expects {g.cin} input channels, got {c}")
    m = g.granularity
    if h % m or w % m:
        raise InvalidArgument(f"spatial dims {h}x{w} must be multiples of {m}; pad via the tiler")


def walk(g: ModelGraph, x, step: Callable):
    """Run ``step(index, layer, value, skip)`` over the graph.

    ``skip`` is the saved encoder stage output for ConcatSkip layers and None
    otherwise. Returns the final value.
    """
    stages = []
    cur = x
    for i, layer in enumerate(g.layers):
        skip = stages[layer.skip_source - 1] if layer.kind is LayerKind.CONCAT_SKIP else None
        cur = step(i, layer, cur, skip)
        if layer.kind is LayerKind.LEAKY_RELU:
            stages.append(cur)
    return cur


def forward_f32(g: ModelGraph, w: WeightStore, x: TensorF32, observe=None) -> TensorF32:
    """FP32 reference forward pass.

    ``observe(index, tensor)``, if given, is called with every layer output;
    calibration uses it to collect activation ranges.
    """
    check_input(g, x.shape)
    L = LayerKind

    def step(i, layer, cur, skip):
        if layer.kind is L.CONV:
            out = conv2d_f32(cur, w[i])
        elif layer.kind is L.DECONV:
            out = deconv2d_f32(cur, w[i])
        elif layer.kind is L.LEAKY_RELU:
            out = leaky_relu_f32(cur)
        elif layer.kind is L.RELU:
            out = relu_f32(cur)
        elif layer.kind is L.CONCAT_SKIP:
            out = concat_channels(skip, cur)
        else:
            out = TensorF32(np.clip(cur.data, 0.0, 1.0))
        if observe is not None:
            observe(i, out if layer.kind is not L.CLAMP_OUTPUT else cur)
        return out

    return walk(g, x, step)


def count_ops(g: ModelGraph, h: int, w: int) -> int:
    """Arithmetic operations (a MAC counts as 2) of one forward pass at h x w.

    A strided conv applies its k*k*in_ch*out_ch taps at every output pixel.
    A transposed conv applies them at every *input* pixel (the scatter form),
    which is also where a multiply-counting naive implementation spends them.
    Activations, concatenation and clamping are free.
    """
    total = 0
    for layer in g.layers:
        k2 = layer.kernel * layer.kernel
        if layer.kind is LayerKind.CONV:
            h, w = h // layer.stride, w // layer.stride
            total += 2 * k2 * layer.in_ch * layer.out_ch * h * w
        elif layer.kind is LayerKind.DECONV:
            total += 2 * k2 * layer.in_ch * layer.out_ch * h * w
            h, w = h * layer.stride, w * layer.stride
    return total
