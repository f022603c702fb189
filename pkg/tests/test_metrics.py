import math
import os

import numpy as np
import pytest
from conftest import random_image
from oracles import ref_ssim_plane

from retide.errors import InvalidArgument
from retide.formats import read_png
from retide.metrics import EvalReport, add_awgn, make_denoiser, psnr, run_bench, run_eval, ssim, to_luma
from retide.model import WeightStore, build_unet_graph, count_ops
from retide.quant import calibrate
from retide.tensor import TensorF32


def const(v, h=64, w=64, c=1):
    return TensorF32(np.full((1, c, h, w), v, np.float32))


def test_awgn_sigma_zero_identity(rng):
    x = random_image(rng, 3, 16, 16)
    assert add_awgn(x, 0, 1) == x


def test_awgn_determinism():
    x = const(0.5)
    assert add_awgn(x, 25, 7) == add_awgn(x, 25, 7)
    assert not add_awgn(x, 25, 7) == add_awgn(x, 25, 8)


def test_awgn_std_mid_gray():
    x = const(0.5, 1024, 1024)
    d = add_awgn(x, 25, 3).data.astype(np.float64) - 0.5
    assert 24.5 / 255 <= d.std() <= 25.5 / 255


def test_awgn_clipped_and_negative_sigma():
    y = add_awgn(const(0.0), 50, 0).data
    assert y.min() >= 0.0 and y.max() <= 1.0
    with pytest.raises(InvalidArgument):
        add_awgn(const(0.5), -1, 0)


def test_psnr_examples():
    assert psnr(const(0.3), const(0.3)) == math.inf
    assert psnr(const(0.0, 1, 1), const(1.0, 1, 1)) == 0.0
    noisy = add_awgn(const(0.5, 512, 512), 25, 1)
    assert abs(psnr(noisy, const(0.5, 512, 512)) - 20 * math.log10(255 / 25)) < 0.1
    with pytest.raises(InvalidArgument):
        psnr(const(0.1, 4, 4), const(0.1, 4, 5))


def test_metrics_symmetric(rng):
    a, b = random_image(rng, 3, 32, 32), random_image(rng, 3, 32, 32)
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_identical_is_one(rng):
    a = random_image(rng, 3, 40, 40)
    assert ssim(a, a) == 1.0


def test_ssim_constant_closed_form():
    lum = (2 * 0.25 * 0.75 + 1e-4) / (0.25 ** 2 + 0.75 ** 2 + 1e-4)
    assert ssim(const(0.25, 32, 32), const(0.75, 32, 32)) == pytest.approx(lum, abs=1e-9)
    assert abs(lum - 0.6003) < 5e-4


def test_ssim_inverted_binary_negative(rng):
    a = TensorF32((rng.random((1, 1, 32, 32)) > 0.5).astype(np.float32))
    assert ssim(a, TensorF32(1 - a.data)) < 0


def test_ssim_matches_reference(rng):
    a = random_image(rng, 2, 24, 29)
    b = TensorF32(np.clip(a.data + rng.normal(0, 0.1, a.shape), 0, 1))
    want = np.mean([ref_ssim_plane(a.data[0, c].astype(np.float64), b.data[0, c].astype(np.float64)) for c in range(2)])
    assert ssim(a, b) == pytest.approx(want, abs=1e-9)


def test_ssim_too_small():
    with pytest.raises(InvalidArgument):
        ssim(const(0.1, 10, 20), const(0.1, 10, 20))


def test_luma():
    rgb = TensorF32(np.stack([np.full((4, 4), v, np.float32) for v in (1.0, 0.0, 0.5)])[None])
    assert to_luma(rgb).data[0, 0, 0, 0] == pytest.approx(0.299 + 0.057)
    assert to_luma(const(0.2)) == const(0.2)


def test_report_math():
    r = EvalReport(frames=10, elapsed=2.0, ops=4 * 10 ** 9, watts=18.4)
    assert r.gops == 2.0 and r.fps == 5.0
    assert r.gops_per_watt == 2.0 / 18.4
    assert EvalReport(ops=1, elapsed=1.0).gops_per_watt is None


def _zero_model(cin=3):
    g = build_unet_graph(cin, cin, (8, 16))
    return calibrate(g, WeightStore.zeros(g), [TensorF32.zeros(1, cin, 8, 8)])


def test_eval_identity_and_zero_model(natural_dir):
    imgs = sorted(natural_dir.iterdir())[:3]
    data = [(p.name, read_png(p)) for p in imgs]
    ident = run_eval(lambda x: x, data, [25], seed=1)
    zero = run_eval(_zero_model(), [(n, t) for n, t in data if t.c == 3], [25], seed=1, tile=64, overlap=8)
    assert abs(ident.aggregate()[25][0] - 20.17) < 0.5
    # black output is a regression against simply returning the noisy input
    assert zero.aggregate()[25][0] < ident.aggregate()[25][0]


def test_eval_deterministic_and_csv(tmp_path, rng):
    data = [("a", random_image(rng, 1, 32, 32)), ("b", random_image(rng, 1, 20, 40))]
    r1 = run_eval(lambda x: x, data, [5, 15], seed=3)
    r2 = run_eval(lambda x: x, data, [5, 15], seed=3)
    assert [(r.psnr_db, r.ssim) for r in r1.records] == [(r.psnr_db, r.ssim) for r in r2.records]
    r1.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "image,sigma,psnr_db,ssim"
    assert len(lines) == 5 and lines[1].startswith("a,5,")


def test_eval_skips_unreadable(tmp_path, rng):
    from retide.formats import write_png

    write_png(tmp_path / "ok.png", random_image(rng, 3, 16, 16))
    (tmp_path / "bad.png").write_bytes(b"not a png")
    r = run_eval(lambda x: x, tmp_path, [25])
    assert r.skipped == ["bad.png"] and len(r.records) == 1
    with pytest.raises(InvalidArgument):
        run_eval(lambda x: x, [], [25])


def test_eval_gray_mode(rng):
    r = run_eval(lambda x: x, [("c", random_image(rng, 3, 16, 16))], [15], gray=True)
    assert len(r.records) == 1


def test_make_denoiser_paths(small_qmodel, rng):
    x = random_image(rng, 3, 40, 50)
    a = make_denoiser(small_qmodel, 64, 8, "int8")(x)
    b = make_denoiser(small_qmodel, 64, 8, "fakequant")(x)
    assert a == b
    g = build_unet_graph(3, 3, (8, 16))
    ws = WeightStore.random(g, 0)
    assert make_denoiser((g, ws), 64, 8, "fp32")(x).shape == x.shape
    with pytest.raises(InvalidArgument):
        make_denoiser(small_qmodel, path="fp16")


def test_bench_accounting(small_qmodel):
    r = run_bench(small_qmodel, 64, 64, iters=3, watts=18.4)
    assert r.ops == count_ops(small_qmodel.graph, 64, 64) * 3
    assert r.gops_per_watt == r.gops / 18.4
    tiled = run_bench(small_qmodel, 100, 70, iters=2, tile=64, overlap=8)
    assert tiled.ops == count_ops(small_qmodel.graph, 64, 64) * 4 * 2
    with pytest.raises(InvalidArgument):
        run_bench(small_qmodel, 64, 64, iters=0)


@pytest.mark.skipif((os.cpu_count() or 1) < 2, reason="scaling needs at least two cores")
def test_bench_two_workers_not_slower(small_qmodel):
    one = run_bench(small_qmodel, 512, 512, iters=2, workers=1, tile=64, overlap=8)
    two = run_bench(small_qmodel, 512, 512, iters=2, workers=2, tile=64, overlap=8)
    assert two.gops >= 0.9 * one.gops
