"""Split an 8K frame into overlapping tiles and stitch it back exactly."""
import numpy as np

from retide.tensor import TensorF32
from retide.tiler import assemble, extract, plan_tiles

plan = plan_tiles(7680, 4320, tile=256, overlap=32)
print(f"8K frame: {plan.nx} x {plan.ny} = {len(plan)} tiles of 256, stride {plan.stride}")

# Every output pixel comes from exactly one tile's kept centre.
canvas = np.zeros((plan.height, plan.width), np.uint8)
for rec in plan.tiles:
    rows, cols = rec.dest.slices()
    canvas[rows, cols] += 1
print("writes per pixel: min", canvas.min(), "max", canvas.max())

first, last = plan.tiles[0], plan.tiles[-1]
print("first tile", first.source, "keeps", first.keep)
print("last tile ", last.source, "keeps", last.keep)

# A frame smaller than one tile is reflect-padded, then cropped back.
rng = np.random.default_rng(1)
small = TensorF32(rng.random((1, 3, 30, 50), dtype=np.float32))
p = plan_tiles(small.w, small.h, tile=64, overlap=8)
tiles = extract(small, p)
print(f"50x30 at T=64: {len(tiles)} tiles, padding right={p.pad_right} bottom={p.pad_bottom}")
print("round trip exact:", assemble(enumerate(tiles), p) == small)
