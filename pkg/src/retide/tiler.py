"""Split frames into overlapping model-sized tiles and stitch them back.

Tiles are ``T x T`` with stride ``S = T - V``. Tiles in the last row and
column are aligned to the bottom/right edge of the frame, so a frame is only
padded when it is smaller than one tile. Each tile keeps its centre: ``V/2``
pixels are trimmed from every interior edge, and the kept regions of
neighbours abut exactly, so reassembly writes each output pixel once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, ProtocolViolation
from .tensor import Rect, TensorF32, crop, pad_reflect

DEFAULT_TILE = 256
DEFAULT_OVERLAP = 32


@dataclass(frozen=True)
class TileRecord:
    index: int
    source: Rect  # in the padded frame
    keep: Rect  # within the tile
    dest: Rect  # in the output frame


@dataclass(frozen=True)
class TilePlan:
    width: int
    height: int
    tile: int
    overlap: int
    nx: int
    ny: int
    pad_right: int
    pad_bottom: int
    tiles: tuple

    @property
    def stride(self):
        return self.tile - self.overlap

    def __len__(self):
        return len(self.tiles)


def _axis_positions(extent, tile, stride, overlap):
    """Tile origins and [start, end) keep bounds along one axis of the padded frame."""
    padded = max(extent, tile)
    count = max(1, math.ceil((extent - tile) / stride) + 1)
    starts = [min(k * stride, padded - tile) for k in range(count)]
    half = overlap // 2
    bounds = []
    for k, s in enumerate(starts):
        lo = s + half if k > 0 else 0
        hi = starts[k + 1] + half if k + 1 < count else extent
        bounds.append((lo, hi))
    return starts, bounds, padded - extent


def plan_tiles(w: int, h: int, tile: int = DEFAULT_TILE, overlap: int = DEFAULT_OVERLAP) -> TilePlan:
    if w < 1 or h < 1:
        raise InvalidArgument(f"frame must be at least 1x1, got {w}x{h}")
    if tile < 64 or tile % 64:
        raise InvalidArgument(f"tile size {tile} must be a positive multiple of 64")
    if not 0 <= overlap < tile or overlap % 2:
        raise InvalidArgument(f"overlap {overlap} must be even and in [0, {tile})")
    stride = tile - overlap
    xs, xb, pad_r = _axis_positions(w, tile, stride, overlap)
    ys, yb, pad_b = _axis_positions(h, tile, stride, overlap)
    records = []
    for j, (y0, (ylo, yhi)) in enumerate(zip(ys, yb)):
        for i, (x0, (xlo, xhi)) in enumerate(zip(xs, xb)):
            records.append(
                TileRecord(
                    index=len(records),
                    source=Rect(x0, y0, tile, tile),
                    keep=Rect(xlo - x0, ylo - y0, xhi - xlo, yhi - ylo),
                    dest=Rect(xlo, ylo, xhi - xlo, yhi - ylo),
                )
            )
    return TilePlan(w, h, tile, overlap, len(xs), len(ys), pad_r, pad_b, tuple(records))


def pad_to(frame: TensorF32, bottom: int, right: int) -> TensorF32:
    """Reflect-pad beyond what a single reflection allows by reflecting repeatedly.

    A one-pixel axis has nothing to reflect and is replicated instead.
    """
    data = frame.data
    if bottom or right:
        if data.shape[2] == 1 and bottom:
            data = np.repeat(data, bottom + 1, axis=2)
            bottom = 0
        if data.shape[3] == 1 and right:
            data = np.repeat(data, right + 1, axis=3)
            right = 0
    t = TensorF32(data)
    while bottom or right:
        b = min(bottom, t.h - 1)
        r = min(right, t.w - 1)
        t = pad_reflect(t, 0, b, 0, r)
        bottom -= b
        right -= r
    return t


def _check_frame(frame: TensorF32, plan: TilePlan):
    if (frame.w, frame.h) != (plan.width, plan.height):
        raise InvalidArgument(f"frame is {frame.w}x{frame.h}, plan expects {plan.width}x{plan.height}")


def padded_frame(frame: TensorF32, plan: TilePlan) -> TensorF32:
    _check_frame(frame, plan)
    return pad_to(frame, plan.pad_bottom, plan.pad_right)


def iter_tiles(frame: TensorF32, plan: TilePlan):
    """Yield ``(index, tile)`` lazily; the server uses this to bound memory."""
    padded = padded_frame(frame, plan)
    for rec in plan.tiles:
        yield rec.index, crop(padded, rec.source)


def extract(frame: TensorF32, plan: TilePlan) -> list:
    """All tiles of ``plan``, in index order, each exactly ``tile x tile``."""
    return [t for _, t in iter_tiles(frame, plan)]


class Assembler:
    """Index-addressed canvas; tiles may be added in any order."""

    def __init__(self, plan: TilePlan, channels: int, batch: int = 1):
        self.plan = plan
        self.canvas = np.zeros((batch, channels, plan.height, plan.width), np.float32)
        self.seen = set()

    def put(self, index: int, tile: TensorF32):
        plan = self.plan
        if not 0 <= index < len(plan.tiles):
            raise ProtocolViolation(f"tile index {index} outside plan of {len(plan.tiles)}")
        if index in self.seen:
            raise ProtocolViolation(f"duplicate tile index {index}")
        if (tile.h, tile.w) != (plan.tile, plan.tile) or tile.shape[:2] != self.canvas.shape[:2]:
            raise InvalidArgument(f"tile {index} has shape {tile.shape}")
        rec = plan.tiles[index]
        kr, kc = rec.keep.slices()
        dr, dc = rec.dest.slices()
        self.canvas[:, :, dr, dc] = tile.data[:, :, kr, kc]
        self.seen.add(index)

    def result(self) -> TensorF32:
        missing = len(self.plan.tiles) - len(self.seen)
        if missing:
            first = min(set(range(len(self.plan.tiles))) - self.seen)
            raise ProtocolViolation(f"{missing} tile(s) missing, first is index {first}")
        return TensorF32(self.canvas)


def assemble(tiles, plan: TilePlan) -> TensorF32:
    """Stitch processed tiles back into a ``width x height`` frame.

    ``tiles`` is an iterable of ``(index, tile)`` pairs in any order.
    """
    asm = None
    for index, tile in tiles:
        if asm is None:
            asm = Assembler(plan, tile.c, tile.n)
        asm.put(index, tile)
    if asm is None:
        raise ProtocolViolation("no tiles to assemble")
    return asm.result()
