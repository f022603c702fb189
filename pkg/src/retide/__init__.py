"""INT8 fixed-point emulation of the ReTiDe-Net U-Net denoiser.

Public surface, by module:

- :mod:`retide.tensor`: planar tensors, padding, cropping, concatenation
- :mod:`retide.model`: graph construction, FP32 reference, op counting
- :mod:`retide.quant`: power-of-two PTQ calibration and the fake-quant simulator
- :mod:`retide.int8engine`: bit-accurate integer inference
- :mod:`retide.tiler`: overlapping tile plans and exact reassembly
- :mod:`retide.protocol` / :mod:`retide.service`: wire format, server, client
- :mod:`retide.metrics`: AWGN, PSNR/SSIM, evaluation and throughput harnesses
- :mod:`retide.formats`: RTDT/RTDW containers and PNG I/O
"""
from .errors import (
    IncompleteMessage,
    InvalidArgument,
    PayloadTooLarge,
    ProtocolViolation,
    RetideError,
    ServerError,
)
from .int8engine import forward_i8
from .model import ModelGraph, WeightStore, build_retide_graph, count_ops, forward_f32
from .quant import QuantizedModel, calibrate, forward_fakequant
from .tensor import Rect, TensorF32, TensorI8

__version__ = "0.1.0"

__all__ = [
    "IncompleteMessage",
    "InvalidArgument",
    "ModelGraph",
    "PayloadTooLarge",
    "ProtocolViolation",
    "QuantizedModel",
    "Rect",
    "RetideError",
    "ServerError",
    "TensorF32",
    "TensorI8",
    "WeightStore",
    "build_retide_graph",
    "calibrate",
    "count_ops",
    "forward_f32",
    "forward_fakequant",
    "forward_i8",
]
