import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retide.errors import InvalidArgument, ProtocolViolation
from retide.tensor import TensorF32
from retide.tiler import Assembler, assemble, extract, pad_to, plan_tiles


def expected_count(extent, tile, overlap):
    return max(1, math.ceil((extent - tile) / (tile - overlap)) + 1)


def write_counts(plan):
    """Brute-force coverage: how often each output pixel is written."""
    canvas = np.zeros((plan.height, plan.width), np.int64)
    for rec in plan.tiles:
        r, c = rec.dest.slices()
        canvas[r, c] += 1
    return canvas


def frame(rng, w, h, c=1):
    return TensorF32(rng.random((1, c, h, w), dtype=np.float32))


def test_single_tile_no_padding():
    p = plan_tiles(256, 256, 256, 32)
    assert len(p) == 1 and (p.pad_right, p.pad_bottom) == (0, 0)


def test_512_nine_tiles():
    p = plan_tiles(512, 512, 256, 32)
    assert (p.nx, p.ny, len(p)) == (3, 3, 9)


def test_8k_grid():
    p = plan_tiles(7680, 4320, 256, 32)
    nx, ny = math.ceil(7424 / 224) + 1, math.ceil(4064 / 224) + 1
    assert (p.nx, p.ny) == (nx, ny) == (35, 20)
    assert len(p) == 700
    assert (write_counts(p) == 1).all()


@pytest.mark.parametrize("tile,overlap", [(63, 0), (0, 0), (96, 0), (64, 64), (64, 3), (64, -2)])
def test_invalid_parameters(tile, overlap):
    with pytest.raises(InvalidArgument):
        plan_tiles(100, 100, tile, overlap)


def test_invalid_frame():
    with pytest.raises(InvalidArgument):
        plan_tiles(0, 5)


def test_one_tile_extract_is_padded_frame(rng):
    f = frame(rng, 64, 64)
    tiles = extract(f, plan_tiles(64, 64, 64, 0))
    assert len(tiles) == 1 and tiles[0] == f


def test_extract_dimension_mismatch(rng):
    with pytest.raises(InvalidArgument):
        extract(frame(rng, 10, 10), plan_tiles(11, 10, 64, 0))


def test_small_frame_reflect_padded(rng):
    f = frame(rng, 5, 3)
    (t,) = extract(f, plan_tiles(5, 3, 64, 8))
    assert t.shape == (1, 1, 64, 64)
    assert np.array_equal(t.data[0, 0, :3, :5], f.data[0, 0])
    # the first reflected column mirrors column 3 (edge pixel not repeated)
    assert np.array_equal(t.data[0, 0, :3, 5], f.data[0, 0, :, 3])


def test_pad_to_single_pixel_axes():
    t = pad_to(TensorF32(np.full((1, 1, 1, 1), 0.25)), 63, 63)
    assert t.shape == (1, 1, 64, 64) and np.all(t.data == 0.25)


def test_keep_regions_trim_half_overlap():
    p = plan_tiles(600, 300, 128, 16)
    for rec in p.tiles:
        assert rec.source.w == rec.source.h == 128
        if rec.source.x == 0:
            assert rec.keep.x == 0
        else:
            assert rec.keep.x >= 8
    assert (write_counts(p) == 1).all()


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 700), st.integers(1, 700),
    st.sampled_from([64, 128, 256]), st.integers(0, 31), st.integers(0, 2 ** 32 - 1),
)
def test_roundtrip_identity(w, h, tile, half_v, seed):
    overlap = min(2 * half_v, tile - 2)
    p = plan_tiles(w, h, tile, overlap)
    assert (p.nx, p.ny) == (expected_count(w, tile, overlap), expected_count(h, tile, overlap))
    assert (write_counts(p) == 1).all()
    f = frame(np.random.default_rng(seed), w, h)
    assert assemble(enumerate(extract(f, p)), p) == f


def test_roundtrip_large_random(rng):
    for _ in range(3):
        w, h = int(rng.integers(1, 4097)), int(rng.integers(1, 2161))
        p = plan_tiles(w, h, 256, 32)
        f = frame(rng, w, h)
        assert assemble(enumerate(extract(f, p)), p) == f


def test_shuffled_order(rng):
    f = frame(rng, 300, 200, c=3)
    p = plan_tiles(300, 200, 64, 8)
    pairs = list(enumerate(extract(f, p)))
    order = rng.permutation(len(pairs))
    assert assemble([pairs[i] for i in order], p) == assemble(pairs, p) == f


def test_missing_and_duplicate(rng):
    f = frame(rng, 200, 200)
    p = plan_tiles(200, 200, 64, 8)
    pairs = list(enumerate(extract(f, p)))
    with pytest.raises(ProtocolViolation):
        assemble(pairs[:-1], p)
    with pytest.raises(ProtocolViolation):
        assemble(pairs + pairs[:1], p)
    asm = Assembler(p, 1)
    with pytest.raises(ProtocolViolation):
        asm.put(len(p), pairs[0][1])
    with pytest.raises(ProtocolViolation):
        assemble([], p)
