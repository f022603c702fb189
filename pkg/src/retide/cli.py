"""``retide`` command line: init, quantize, serve, denoise, eval, bench, addnoise.

Every option can also come from an environment variable ``RETIDE_<NAME>``
(for example ``RETIDE_WORKERS=4``). Precedence is flag > environment >
default. ``RETIDE_LOG`` sets the log level.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import formats
from .errors import InvalidArgument, RetideError
from .model import WeightStore, build_retide_graph
from .protocol import DEFAULT_MAX_PAYLOAD
from .quant import QuantizedModel, calibrate
from .tensor import TensorF32
from .tiler import DEFAULT_OVERLAP, DEFAULT_TILE

log = logging.getLogger("retide")

ENV_PREFIX = "RETIDE_"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class Config:
    model: Optional[str] = None
    listen: str = "127.0.0.1:7878"
    workers: int = os.cpu_count() or 1
    tile: int = DEFAULT_TILE
    overlap: int = DEFAULT_OVERLAP
    max_payload: int = DEFAULT_MAX_PAYLOAD
    seed: int = 1234

    @classmethod
    def resolve(cls, args, environ=None):
        """Merge parsed flags (None when absent) over ``RETIDE_*`` variables over defaults."""
        environ = os.environ if environ is None else environ
        cfg = cls()
        for name, default in vars(cls()).items():
            flag = getattr(args, name, None)
            env = environ.get(ENV_PREFIX + name.upper())
            if flag is not None:
                value = flag
            elif env is not None:
                kind = type(default) if default is not None else str
                try:
                    value = kind(env)
                except ValueError:
                    raise UsageError(f"{ENV_PREFIX}{name.upper()}={env!r} is not a valid {kind.__name__}")
            else:
                continue
            setattr(cfg, name, value)
        cfg.validate()
        return cfg

    def validate(self):
        if self.workers < 1:
            raise UsageError("--workers must be >= 1")
        if self.tile < 64 or self.tile % 64:
            raise UsageError("--tile must be a positive multiple of 64")
        if not 0 <= self.overlap < self.tile or self.overlap % 2:
            raise UsageError("--overlap must be even and smaller than --tile")
        if self.max_payload < 1:
            raise UsageError("--max-payload must be positive")


def parse_hostport(text):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def parse_size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"expected WxH, got {text!r}") from None
    return w, h


def parse_sigmas(text):
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated noise levels, got {text!r}") from None


def _load_quantized(path) -> QuantizedModel:
    model = formats.load_weights(path)
    if not isinstance(model, QuantizedModel):
        raise InvalidArgument(f"{path} holds FP32 weights; run `retide quantize` first")
    return model


def _tiling_flags(p):
    p.add_argument("--tile", type=int, help=f"tile size, multiple of 64 (default {DEFAULT_TILE})")
    p.add_argument("--overlap", type=int, help=f"tile overlap in pixels, even (default {DEFAULT_OVERLAP})")


def build_parser():
    parser = _Parser(prog="retide", description="INT8 ReTiDe-Net denoiser: quantise, serve, denoise, evaluate, benchmark.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("init", help="write synthetic FP32 weights")
    p.add_argument("--out", required=True, help="output .rtdw file")
    p.add_argument("--channels", type=int, choices=(1, 3), default=3, help="image channels (1 or 3)")
    p.add_argument("--seed", type=int, help="RNG seed")
    p.add_argument("--gain", type=float, default=1.0, help="scale on the He initialisation")

    p = sub.add_parser("quantize", help="calibrate FP32 weights into an INT8 model")
    p.add_argument("--weights", required=True, help="FP32 .rtdw file")
    p.add_argument("--calib", required=True, help="directory of calibration images")
    p.add_argument("--out", required=True, help="output quantised .rtdw file")
    p.add_argument("--percentile", type=float, default=100.0, help="range statistic percentile (default 100 = max)")
    p.add_argument("--crop", type=int, default=256, help="calibration crop size, multiple of 64")

    p = sub.add_parser("serve", help="run the denoise server")
    p.add_argument("--model", help="quantised .rtdw file")
    p.add_argument("--listen", help="HOST:PORT (default 127.0.0.1:7878)")
    p.add_argument("--workers", type=int, help="tile worker threads (default: logical cores)")
    p.add_argument("--max-payload", dest="max_payload", type=int, help="largest accepted payload in bytes")
    _tiling_flags(p)

    p = sub.add_parser("denoise", help="denoise one image locally or through a server")
    p.add_argument("--model", help="quantised .rtdw file (local mode)")
    p.add_argument("--server", help="HOST:PORT of a running server")
    p.add_argument("--in", dest="input", required=True, help="input image")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--workers", type=int, help="local tile worker threads")
    p.add_argument("--timeout", type=float, default=600.0, help="client timeout in seconds")
    _tiling_flags(p)

    p = sub.add_parser("eval", help="PSNR/SSIM benchmark over a directory of clean images")
    p.add_argument("--model", help="quantised .rtdw file")
    p.add_argument("--dataset", required=True, help="directory of clean images")
    p.add_argument("--sigma", default="15,25,50", help="comma-separated noise levels on the 0-255 scale")
    p.add_argument("--seed", type=int, help="noise seed")
    p.add_argument("--gray", action="store_true", help="evaluate on BT.601 luma")
    p.add_argument("--report", help="CSV output (image, sigma, psnr_db, ssim)")
    p.add_argument("--path", choices=("int8", "fakequant"), default="int8", help="inference path")
    _tiling_flags(p)

    p = sub.add_parser("bench", help="throughput in GOPS (and GOPS/W with --watts)")
    p.add_argument("--model", help="quantised .rtdw file")
    p.add_argument("--size", default="1920x1088", help="frame size WxH")
    p.add_argument("--iters", type=int, default=10, help="timed frames")
    p.add_argument("--workers", type=int, help="worker threads")
    p.add_argument("--watts", type=float, help="measured power draw for GOPS/W")
    p.add_argument("--warmup", type=float, default=0.0, help="untimed warm-up seconds")
    p.add_argument("--tile", type=int, help="force tiling with this tile size")
    p.add_argument("--overlap", type=int, help="tile overlap")

    p = sub.add_parser("addnoise", help="add Gaussian noise to an image")
    p.add_argument("--in", dest="input", required=True, help="clean image")
    p.add_argument("--out", required=True, help="noisy PNG")
    p.add_argument("--sigma", type=float, required=True, help="noise std on the 0-255 scale")
    p.add_argument("--seed", type=int, help="noise seed")
    return parser


def _require_model(cfg):
    if not cfg.model:
        raise UsageError("--model (or RETIDE_MODEL) is required")
    return cfg.model


def cmd_init(args, cfg):
    graph = build_retide_graph(args.channels, args.channels)
    formats.save_weights(args.out, WeightStore.random(graph, cfg.seed, args.gain))
    print(f"wrote synthetic weights to {args.out}")


def _calibration_crops(directory, cin, size):
    from .metrics import list_images, to_luma

    for path in list_images(directory):
        img = formats.read_png(path)
        if cin == 1:
            img = to_luma(img)
        elif img.c == 1:
            img = TensorF32(np.repeat(img.data, 3, axis=1))
        h = img.h - img.h % 64 if img.h >= 64 else 0
        w = img.w - img.w % 64 if img.w >= 64 else 0
        if not h or not w:
            log.warning("skipping %s: smaller than 64x64", path.name)
            continue
        h, w = min(h, size), min(w, size)
        top, left = (img.h - h) // 2, (img.w - w) // 2
        yield TensorF32(img.data[:, :, top:top + h, left:left + w])


def cmd_quantize(args, cfg):
    weights = formats.load_weights(args.weights)
    if not isinstance(weights, WeightStore):
        raise InvalidArgument(f"{args.weights} is already quantised")
    if args.crop < 64 or args.crop % 64:
        raise UsageError("--crop must be a positive multiple of 64")
    crops = _calibration_crops(args.calib, weights.graph.cin, args.crop)
    qm = calibrate(weights.graph, weights, crops, percentile=args.percentile)
    formats.save_weights(args.out, qm)
    print(f"wrote quantised model to {args.out} (input exponent {qm.input_exp})")


def cmd_serve(args, cfg):
    from .service import ServerConfig, serve

    qm = _load_quantized(_require_model(cfg))
    host, port = parse_hostport(cfg.listen)
    serve(qm, ServerConfig(host, port, cfg.workers, cfg.max_payload, cfg.tile, cfg.overlap))


def cmd_denoise(args, cfg):
    from concurrent.futures import ThreadPoolExecutor

    from .service import Client, denoise_pixels
    from .tensor import from_hwc, to_hwc

    img = formats.read_png(args.input)
    pixels = to_hwc(img, np.uint8)
    if args.server:
        host, port = parse_hostport(args.server)
        with Client(host, port, timeout=args.timeout) as client:
            out = client.submit_job(pixels, cfg.tile, cfg.overlap)
    else:
        qm = _load_quantized(_require_model(cfg))
        with ThreadPoolExecutor(cfg.workers) as pool:
            out = denoise_pixels(qm, pixels, cfg.tile, cfg.overlap, pool)
    formats.write_png(args.out, from_hwc(out))


def cmd_eval(args, cfg):
    from .metrics import make_denoiser, run_eval

    qm = _load_quantized(_require_model(cfg))
    if args.gray and qm.graph.cin != 1:
        raise InvalidArgument("--gray needs a single-channel model")
    denoise = make_denoiser(qm, cfg.tile, cfg.overlap, path=args.path)
    report = run_eval(denoise, args.dataset, parse_sigmas(args.sigma), cfg.seed, args.gray)
    if args.report:
        report.write_csv(args.report)
    for sigma, (p, s, n) in report.aggregate().items():
        print(f"sigma={sigma:g}: PSNR {p:.2f} dB  SSIM {s:.4f}  ({n} images)")
    if report.skipped:
        print(f"skipped {len(report.skipped)} unreadable image(s)")


def cmd_bench(args, cfg):
    from .metrics import run_bench

    qm = _load_quantized(_require_model(cfg))
    w, h = parse_size(args.size)
    tile = args.tile if args.tile is not None else None
    report = run_bench(qm, w, h, args.iters, cfg.workers, args.watts, tile, cfg.overlap, args.warmup, cfg.seed)
    print(f"frames {report.frames}  elapsed {report.elapsed:.3f} s  ops {report.ops}")
    print(f"throughput {report.gops:.3f} GOPS  ({report.fps:.3f} FPS)")
    if report.watts:
        print(f"energy efficiency {report.gops_per_watt:.3f} GOPS/W at {report.watts:g} W")


def cmd_addnoise(args, cfg):
    from .metrics import add_awgn

    img = formats.read_png(args.input)
    formats.write_png(args.out, add_awgn(img, args.sigma, cfg.seed))


COMMANDS = {
    "init": cmd_init,
    "quantize": cmd_quantize,
    "serve": cmd_serve,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "addnoise": cmd_addnoise,
}


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get(ENV_PREFIX + "LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = Config.resolve(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 0
    except (RetideError, OSError) as e:
        print(f"retide: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
