"""Planar NCHW tensor containers and geometry helpers.

Every module works on one canonical layout, ``(n, c, h, w)`` row-major.
Interleaved ``(h, w, c)`` pixels only appear at image I/O and wire boundaries,
see :func:`from_hwc` / :func:`to_hwc`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

SCALE_EXP_BOUND = 32


def _check_dims(shape):
    if len(shape) != 4:
        raise InvalidArgument(f"expected a 4-D (n, c, h, w) array, got shape {shape}")
    # c == 0 is tolerated so an empty-channel tensor can act as the concat identity
    n, c, h, w = shape
    if n < 1 or c < 0 or h < 1 or w < 1:
        raise InvalidArgument(f"tensor dimensions must be >= 1, got {shape}")


@dataclass(frozen=True, eq=False)
class TensorF32:
    """Real-valued planar tensor. ``data`` is a read-only float32 array."""

    data: np.ndarray

    def __post_init__(self):
        # a read-only view leaves the caller's array untouched
        arr = np.ascontiguousarray(self.data, dtype=np.float32).view()
        _check_dims(arr.shape)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, n, c, h, w):
        return cls(np.zeros((n, c, h, w), np.float32))

    @property
    def shape(self):
        return self.data.shape

    n = property(lambda self: self.data.shape[0])
    c = property(lambda self: self.data.shape[1])
    h = property(lambda self: self.data.shape[2])
    w = property(lambda self: self.data.shape[3])

    def __eq__(self, other):
        if not isinstance(other, TensorF32):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"TensorF32(shape={self.shape})"


@dataclass(frozen=True, eq=False)
class TensorI8:
    """Signed 8-bit planar tensor; real value = stored * 2**scale_exp."""

    data: np.ndarray
    scale_exp: int

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype != np.int8:
            if raw.size and (raw.min() < -128 or raw.max() > 127):
                raise InvalidArgument("TensorI8 values must lie in [-128, 127]")
            raw = raw.astype(np.int8)
        arr = np.ascontiguousarray(raw).view()
        _check_dims(arr.shape)
        if not -SCALE_EXP_BOUND <= int(self.scale_exp) <= SCALE_EXP_BOUND:
            raise InvalidArgument(f"scale_exp {self.scale_exp} outside [-32, 32]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "scale_exp", int(self.scale_exp))

    @property
    def shape(self):
        return self.data.shape

    n = property(lambda self: self.data.shape[0])
    c = property(lambda self: self.data.shape[1])
    h = property(lambda self: self.data.shape[2])
    w = property(lambda self: self.data.shape[3])

    def __eq__(self, other):
        if not isinstance(other, TensorI8):
            return NotImplemented
        return (
            self.scale_exp == other.scale_exp
            and self.shape == other.shape
            and bool(np.array_equal(self.data, other.data))
        )

    def __repr__(self):
        return f"TensorI8(shape={self.shape}, scale_exp={self.scale_exp})"


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle: top-left ``(x, y)`` and extent ``(w, h)``."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0 or self.w < 1 or self.h < 1:
            raise InvalidArgument(f"invalid rect {self}")

    @property
    def area(self):
        return self.w * self.h

    def slices(self):
        """(row slice, column slice) for indexing the trailing two axes."""
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)


def pad_reflect(t: TensorF32, top: int, bottom: int, left: int, right: int) -> TensorF32:
    """Reflect-pad the spatial axes without repeating the edge pixel."""
    pads = (top, bottom, left, right)
    if min(pads) < 0:
        raise InvalidArgument(f"negative padding {pads}")
    if max(top, bottom) >= t.h or max(left, right) >= t.w:
        raise InvalidArgument(f"padding {pads} must be smaller than the input ({t.h}x{t.w})")
    if not any(pads):
        return t
    out = np.pad(t.data, ((0, 0), (0, 0), (top, bottom), (left, right)), mode="reflect")
    return TensorF32(out)


def crop(t: TensorF32, r: Rect) -> TensorF32:
    if r.x + r.w > t.w or r.y + r.h > t.h:
        raise InvalidArgument(f"{r} does not fit inside {t.h}x{t.w}")
    rows, cols = r.slices()
    return TensorF32(t.data[:, :, rows, cols])


def concat_channels(a: TensorF32, b: TensorF32) -> TensorF32:
    """Stack ``b``'s channels after ``a``'s."""
    if (a.n, a.h, a.w) != (b.n, b.h, b.w):
        raise InvalidArgument(f"cannot concatenate {a.shape} and {b.shape}")
    return TensorF32(np.concatenate([a.data, b.data], axis=1))


def from_hwc(pixels: np.ndarray) -> TensorF32:
    """Interleaved ``(h, w)`` or ``(h, w, c)`` image to a ``(1, c, h, w)`` tensor.

    uint8 input is mapped to [0, 1] by dividing by 255; float input is taken as is.
    """
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InvalidArgument(f"expected an (h, w[, c]) image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / np.float32(255.0)
    return TensorF32(arr.transpose(2, 0, 1)[None])


def to_hwc(t: TensorF32, dtype=np.uint8) -> np.ndarray:
    """Inverse of :func:`from_hwc` for a single-image tensor.

    For uint8 output values are clipped to [0, 1], scaled by 255 and rounded
    half-to-even.
    """
    if t.n != 1:
        raise InvalidArgument("to_hwc expects a batch of one")
    hwc = t.data[0].transpose(1, 2, 0)
    if np.dtype(dtype) == np.uint8:
        return np.rint(np.clip(hwc, 0.0, 1.0) * np.float32(255.0)).astype(np.uint8)
    return np.ascontiguousarray(hwc, dtype=dtype)
