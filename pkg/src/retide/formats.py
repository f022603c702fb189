"""On-disk formats: raw tensors (RTDT), weight containers (RTDW) and PNG images.

RTDT::

    magic "RTDT" | u8 dtype (0 f32, 1 i8) | i8 scale_exp | u16 reserved
    | u32 n, c, h, w | payload

RTDW::

    magic "RTDW" | u16 version = 1 | u8 cin | u8 cout | u16 record count
    then per record:
    u16 layer id | u8 dtype | i8 scale_exp | u32 dims[4] | payload

Everything is little-endian. Quantised models add one record with layer id
0xFFFF holding the activation exponent table as int8: the input exponent
followed by one exponent per graph layer.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .model import ModelGraph, WeightStore, build_retide_graph
from .quant import QuantizedModel
from .tensor import TensorF32, TensorI8, from_hwc, to_hwc

TENSOR_MAGIC = b"RTDT"
WEIGHTS_MAGIC = b"RTDW"
WEIGHTS_VERSION = 1
SCALE_TABLE_ID = 0xFFFF

DTYPE_F32 = 0
DTYPE_I8 = 1

_TENSOR_HEADER = struct.Struct("<4sBbH4I")
_WEIGHTS_HEADER = struct.Struct("<4sHBBH")
_RECORD_HEADER = struct.Struct("<HBb4I")

_NP_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_I8: np.dtype("i1")}


def _payload(arr, dtype_code):
    return np.ascontiguousarray(arr, _NP_DTYPES[dtype_code]).tobytes()


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise InvalidArgument(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_array(f, dtype_code, dims):
    if dtype_code not in _NP_DTYPES:
        raise InvalidArgument(f"unknown dtype code {dtype_code}")
    dt = _NP_DTYPES[dtype_code]
    count = int(np.prod(dims, dtype=np.int64))
    return np.frombuffer(_read_exact(f, count * dt.itemsize), dt).reshape(dims)


def encode_tensor(t) -> bytes:
    if isinstance(t, TensorI8):
        code, exp = DTYPE_I8, t.scale_exp
    elif isinstance(t, TensorF32):
        code, exp = DTYPE_F32, 0
    else:
        raise InvalidArgument(f"cannot encode {type(t).__name__}")
    return _TENSOR_HEADER.pack(TENSOR_MAGIC, code, exp, 0, *t.shape) + _payload(t.data, code)


def decode_tensor(buf: bytes):
    f = io.BytesIO(buf)
    magic, code, exp, _, *dims = _TENSOR_HEADER.unpack(_read_exact(f, _TENSOR_HEADER.size))
    if magic != TENSOR_MAGIC:
        raise InvalidArgument(f"bad tensor magic {magic!r}")
    arr = _read_array(f, code, dims)
    return TensorI8(arr, exp) if code == DTYPE_I8 else TensorF32(arr)


def save_tensor(path, t):
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path):
    return decode_tensor(Path(path).read_bytes())


def _record(layer_id, code, exp, arr):
    return _RECORD_HEADER.pack(layer_id, code, exp, *arr.shape) + _payload(arr, code)


def encode_weights(model) -> bytes:
    """Serialise a :class:`WeightStore` (FP32) or a :class:`QuantizedModel`."""
    if isinstance(model, QuantizedModel):
        g = model.graph
        recs = [_record(i, DTYPE_I8, k.scale_exp, k.data) for i, k in sorted(model.weights.items())]
        table = np.array([model.input_exp, *model.act_exps], np.int8).reshape(1, 1, 1, -1)
        recs.append(_record(SCALE_TABLE_ID, DTYPE_I8, 0, table))
    elif isinstance(model, WeightStore):
        g = model.graph
        recs = [_record(i, DTYPE_F32, 0, k) for i, k in sorted(model.kernels.items())]
    else:
        raise InvalidArgument(f"cannot serialise {type(model).__name__}")
    head = _WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, g.cin, g.cout, len(recs))
    return head + b"".join(recs)


def decode_weights(buf: bytes, graph: ModelGraph = None):
    """Inverse of :func:`encode_weights`.

    The graph is rebuilt from (cin, cout) unless one is passed in. Returns a
    :class:`QuantizedModel` when the file holds int8 kernels, else a
    :class:`WeightStore`.
    """
    f = io.BytesIO(buf)
    magic, version, cin, cout, count = _WEIGHTS_HEADER.unpack(_read_exact(f, _WEIGHTS_HEADER.size))
    if magic != WEIGHTS_MAGIC:
        raise InvalidArgument(f"bad weights magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise InvalidArgument(f"unsupported weights version {version}")
    g = graph if graph is not None else build_retide_graph(cin, cout)
    if (g.cin, g.cout) != (cin, cout):
        raise InvalidArgument("graph channels do not match the file")
    kernels, table, codes = {}, None, set()
    for _ in range(count):
        layer_id, code, exp, *dims = _RECORD_HEADER.unpack(_read_exact(f, _RECORD_HEADER.size))
        arr = _read_array(f, code, dims)
        if layer_id == SCALE_TABLE_ID:
            table = arr.ravel().astype(int)
            continue
        if layer_id in kernels:
            raise InvalidArgument(f"duplicate record for layer {layer_id}")
        codes.add(code)
        kernels[layer_id] = TensorI8(arr, exp) if code == DTYPE_I8 else arr
    if f.read(1):
        raise InvalidArgument("trailing bytes after the last record")
    if codes == {DTYPE_I8}:
        if table is None:
            raise InvalidArgument("quantised weights without a scale table")
        return QuantizedModel(g, kernels, int(table[0]), tuple(int(p) for p in table[1:]))
    if codes == {DTYPE_F32} and table is None:
        return WeightStore(g, kernels)
    raise InvalidArgument("weights file mixes FP32 and INT8 records")


def save_weights(path, model):
    Path(path).write_bytes(encode_weights(model))


def load_weights(path, graph: ModelGraph = None):
    return decode_weights(Path(path).read_bytes(), graph)


def read_png(path) -> TensorF32:
    """8-bit PNG (or any Pillow-readable image) to a (1, c, h, w) tensor in [0, 1].

    Greyscale stays single-channel; everything else becomes RGB.
    """
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L") if im.mode in ("L", "LA", "I", "I;16", "1") else im.convert("RGB")
        arr = np.asarray(im)
    return from_hwc(arr)


def write_png(path, t: TensorF32):
    from PIL import Image

    arr = to_hwc(t, np.uint8)
    Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(path)
