"""Noise synthesis, PSNR/SSIM and throughput accounting."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from skimage.metrics import structural_similarity

from .errors import InvalidArgument
from .formats import read_png
from .int8engine import forward_i8
from .model import ModelGraph, count_ops, forward_f32
from .quant import QuantizedModel, forward_fakequant
from .service import denoise_frame
from .tensor import TensorF32
from .tiler import DEFAULT_OVERLAP, DEFAULT_TILE, plan_tiles

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SSIM_WINDOW_SIGMA = 1.5
SSIM_MIN_SIDE = 11


def add_awgn(img: TensorF32, sigma: float, seed) -> TensorF32:
    """Add i.i.d. Gaussian noise of std ``sigma / 255`` and clip to [0, 1]."""
    if sigma < 0:
        raise InvalidArgument(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(img.shape) * (sigma / 255.0)
    return TensorF32(np.clip(img.data + noise, 0.0, 1.0))


def _pair(a: TensorF32, b: TensorF32):
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    return a.data.astype(np.float64), b.data.astype(np.float64)


def psnr(a: TensorF32, b: TensorF32) -> float:
    """Peak signal-to-noise ratio in dB for signals on [0, 1]."""
    x, y = _pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def ssim(a: TensorF32, b: TensorF32) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03, range 1),
    per channel and image, then averaged."""
    x, y = _pair(a, b)
    if min(a.h, a.w) < SSIM_MIN_SIDE:
        raise InvalidArgument(f"SSIM needs images of at least {SSIM_MIN_SIDE}x{SSIM_MIN_SIDE}")
    scores = [
        structural_similarity(
            x[n, c], y[n, c],
            data_range=1.0, gaussian_weights=True, sigma=SSIM_WINDOW_SIGMA,
            use_sample_covariance=False, K1=0.01, K2=0.03,
        )
        for n in range(x.shape[0])
        for c in range(x.shape[1])
    ]
    return float(np.mean(scores))


def to_luma(img: TensorF32) -> TensorF32:
    """BT.601 luma of an RGB tensor; single-channel input passes through."""
    if img.c == 1:
        return img
    if img.c != 3:
        raise InvalidArgument(f"expected 1 or 3 channels, got {img.c}")
    wts = np.array(LUMA_WEIGHTS, np.float64).reshape(1, 3, 1, 1)
    return TensorF32((img.data * wts).sum(axis=1, keepdims=True))


@dataclass
class EvalRecord:
    image: str
    sigma: float
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    frames: int = 0
    elapsed: float = 0.0
    ops: int = 0
    watts: Optional[float] = None

    @property
    def gops(self):
        return self.ops / self.elapsed / 1e9 if self.elapsed > 0 else math.nan

    @property
    def gops_per_watt(self):
        return self.gops / self.watts if self.watts else None

    @property
    def fps(self):
        return self.frames / self.elapsed if self.elapsed > 0 else math.nan

    def aggregate(self):
        """``{sigma: (mean psnr, mean ssim, count)}`` over images."""
        out = {}
        for s in sorted({r.sigma for r in self.records}):
            rows = [r for r in self.records if r.sigma == s]
            out[s] = (
                float(np.mean([r.psnr_db for r in rows])),
                float(np.mean([r.ssim for r in rows])),
                len(rows),
            )
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["image", "sigma", "psnr_db", "ssim"])
            for r in self.records:
                w.writerow([r.image, _fmt_sigma(r.sigma), f"{r.psnr_db:.4f}", f"{r.ssim:.6f}"])


def _fmt_sigma(s):
    return str(int(s)) if float(s).is_integer() else str(s)


def make_denoiser(model, tile=DEFAULT_TILE, overlap=DEFAULT_OVERLAP, path="int8", executor=None) -> Callable:
    """Frame -> frame callable through the tiler.

    ``model`` is a QuantizedModel (paths ``int8`` or ``fakequant``) or a
    ``(graph, weights)`` pair for the FP32 reference (path ``fp32``).
    """
    if path == "int8":
        forward = partial(forward_i8, model)
    elif path == "fakequant":
        forward = partial(forward_fakequant, model)
    elif path == "fp32":
        graph, weights = model
        forward = partial(forward_f32, graph, weights)
    else:
        raise InvalidArgument(f"unknown path {path!r}")
    return partial(denoise_frame, forward, tile=tile, overlap=overlap, executor=executor)


def list_images(directory):
    d = Path(directory)
    if not d.is_dir():
        raise InvalidArgument(f"{directory} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def run_eval(denoise, dataset, sigmas: Sequence[float], seed=0, gray=False, tile=DEFAULT_TILE,
             overlap=DEFAULT_OVERLAP) -> EvalReport:
    """Clean -> AWGN -> denoise -> PSNR/SSIM for every image and noise level.

    ``denoise`` is a QuantizedModel (run through the tiler and integer engine)
    or any frame -> frame callable. ``dataset`` is a directory of images or a
    sequence of ``(name, TensorF32)`` pairs. Noise for image ``i`` at level
    ``s`` is seeded from ``(seed, i, s)`` so every row is reproducible on its own.
    """
    if isinstance(denoise, QuantizedModel):
        denoise = make_denoiser(denoise, tile, overlap)
    report = EvalReport()
    if isinstance(dataset, (str, Path)):
        items = [(p.name, p) for p in list_images(dataset)]
    else:
        items = list(dataset)
    if not items:
        raise InvalidArgument("dataset is empty")
    t0 = time.perf_counter()
    for idx, (name, src) in enumerate(items):
        if isinstance(src, TensorF32):
            clean = src
        else:
            try:
                clean = read_png(src)
            except Exception as e:
                log.warning("skipping %s: %s", name, e)
                report.skipped.append(name)
                continue
        if gray:
            clean = to_luma(clean)
        for s in sigmas:
            noisy = add_awgn(clean, s, np.random.SeedSequence([seed, idx, int(round(s * 1000))]))
            out = denoise(noisy)
            report.records.append(EvalRecord(name, s, psnr(out, clean), ssim(out, clean)))
            report.frames += 1
    report.elapsed = time.perf_counter() - t0
    if report.skipped:
        log.warning("%d unreadable image(s) skipped", len(report.skipped))
    return report


def run_bench(model: QuantizedModel, width: int, height: int, iters: int = 10, workers: int = 1,
              watts: Optional[float] = None, tile: Optional[int] = None, overlap: int = DEFAULT_OVERLAP,
              warmup: float = 0.0, seed=0, forward=None) -> EvalReport:
    """Time ``iters`` frames through the integer engine.

    Frames whose dims are multiples of the model granularity run whole unless
    ``tile`` is given; others are tiled (default tile 256). ``warmup`` seconds
    of untimed inference come first. Parallelism is over tiles when tiling,
    otherwise over frames. Counted ops are exact integers.
    """
    if iters < 1 or workers < 1:
        raise InvalidArgument("iters and workers must be >= 1")
    g: ModelGraph = model.graph
    forward = forward or partial(forward_i8, model)
    rng = np.random.default_rng(seed)
    frame = TensorF32(rng.random((1, g.cin, height, width), dtype=np.float32))
    whole = tile is None and width % g.granularity == 0 and height % g.granularity == 0

    if whole:
        ops_per_frame = count_ops(g, height, width)
    else:
        tile = tile or DEFAULT_TILE
        ops_per_frame = count_ops(g, tile, tile) * len(plan_tiles(width, height, tile, overlap))

    with ThreadPoolExecutor(workers) as pool:
        if whole:
            def run_frames(n):
                list(pool.map(lambda _: forward(frame), range(n)))
        else:
            def run_frames(n):
                for _ in range(n):
                    denoise_frame(forward, frame, tile, overlap, pool)

        deadline = time.perf_counter() + warmup
        while time.perf_counter() < deadline:
            run_frames(1)
        t0 = time.perf_counter()
        run_frames(iters)
        elapsed = time.perf_counter() - t0

    return EvalReport(frames=iters, elapsed=elapsed, ops=ops_per_frame * iters, watts=watts)
