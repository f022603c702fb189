"""Length-prefixed binary wire protocol for denoise offload.

Every message is a 16-byte header followed by ``payload_len`` bytes::

    b"RTID" | u16 version = 1 | u16 msg_type | u64 payload_len

Payloads (all little-endian):

========================  ======================================================
DenoiseRequest (1)        u64 job_id, u32 width, u32 height, u8 channels,
                          u8 bit_depth, u16 tile, u16 overlap, pixel data
DenoiseResponse (2)       u64 job_id, u8 status, u32 width, u32 height,
                          u8 channels, u8 bit_depth, pixel data
Error (3)                 u64 job_id, u16 code, u32 message length, UTF-8 text
Ping (4) / Pong (5)       empty
ModelInfoRequest (6)      empty
ModelInfoResponse (7)     u8 cin, u8 cout, u8 depth, i8 input_exp,
                          u16 default tile, u16 default overlap, u32 workers,
                          u64 ops per default tile
========================  ======================================================

Pixel data is row-major interleaved ``(h, w, c)``: uint8 for bit depth 8,
float32 for bit depth 32. A tile of 0 asks the server for its defaults.
"""
from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from .errors import IncompleteMessage, InvalidArgument, PayloadTooLarge, ProtocolViolation

MAGIC = b"RTID"
VERSION = 1
DEFAULT_MAX_PAYLOAD = 1 << 32

HEADER = struct.Struct("<4sHHQ")
HEADER_SIZE = HEADER.size  # 16


class MsgType(enum.IntEnum):
    DENOISE_REQUEST = 1
    DENOISE_RESPONSE = 2
    ERROR = 3
    PING = 4
    PONG = 5
    MODEL_INFO_REQUEST = 6
    MODEL_INFO_RESPONSE = 7


class ErrorCode(enum.IntEnum):
    PROTOCOL_VIOLATION = 1
    PAYLOAD_TOO_LARGE = 2
    INCOMPLETE_MESSAGE = 3
    INVALID_ARGUMENT = 4
    WORKER_FAILURE = 5


_PIXEL_DTYPES = {8: np.dtype("u1"), 32: np.dtype("<f4")}


def _image_nbytes(width, height, channels, bit_depth):
    return width * height * channels * (bit_depth // 8)


def _check_image(width, height, channels, bit_depth, data):
    if channels not in (1, 3):
        raise ProtocolViolation(f"channels must be 1 or 3, got {channels}")
    if bit_depth not in _PIXEL_DTYPES:
        raise ProtocolViolation(f"bit depth must be 8 or 32, got {bit_depth}")
    if width < 1 or height < 1:
        raise ProtocolViolation(f"empty image {width}x{height}")
    want = _image_nbytes(width, height, channels, bit_depth)
    if len(data) != want:
        raise ProtocolViolation(f"pixel data is {len(data)} bytes, expected {want}")


def _pixels_to_bytes(pixels):
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InvalidArgument(f"expected an (h, w[, c]) image, got {arr.shape}")
    if arr.dtype == np.uint8:
        depth = 8
    elif arr.dtype.kind == "f":
        depth = 32
    else:
        raise InvalidArgument(f"pixels must be uint8 or float, got {arr.dtype}")
    h, w, c = arr.shape
    return w, h, c, depth, np.ascontiguousarray(arr, _PIXEL_DTYPES[depth]).tobytes()


def _bytes_to_pixels(data, width, height, channels, bit_depth):
    return np.frombuffer(data, _PIXEL_DTYPES[bit_depth]).reshape(height, width, channels)


@dataclass(frozen=True)
class Ping:
    msg_type: ClassVar[MsgType] = MsgType.PING


@dataclass(frozen=True)
class Pong:
    msg_type: ClassVar[MsgType] = MsgType.PONG


@dataclass(frozen=True)
class ModelInfoRequest:
    msg_type: ClassVar[MsgType] = MsgType.MODEL_INFO_REQUEST


@dataclass(frozen=True)
class ModelInfoResponse:
    cin: int
    cout: int
    depth: int
    input_exp: int
    tile: int
    overlap: int
    workers: int
    ops_per_tile: int

    msg_type: ClassVar[MsgType] = MsgType.MODEL_INFO_RESPONSE
    _fmt: ClassVar[struct.Struct] = struct.Struct("<BBBbHHIQ")

    def payload(self):
        return self._fmt.pack(
            self.cin, self.cout, self.depth, self.input_exp, self.tile, self.overlap, self.workers, self.ops_per_tile
        )

    @classmethod
    def parse(cls, buf):
        if len(buf) != cls._fmt.size:
            raise ProtocolViolation("ModelInfoResponse has the wrong length")
        return cls(*cls._fmt.unpack(buf))


@dataclass(frozen=True)
class DenoiseRequest:
    job_id: int
    width: int
    height: int
    channels: int
    bit_depth: int
    tile: int
    overlap: int
    data: bytes

    msg_type: ClassVar[MsgType] = MsgType.DENOISE_REQUEST
    _fmt: ClassVar[struct.Struct] = struct.Struct("<QIIBBHH")

    def __post_init__(self):
        _check_image(self.width, self.height, self.channels, self.bit_depth, self.data)

    @classmethod
    def from_pixels(cls, job_id, pixels, tile=0, overlap=0):
        w, h, c, depth, data = _pixels_to_bytes(pixels)
        return cls(job_id, w, h, c, depth, tile, overlap, data)

    def pixels(self):
        return _bytes_to_pixels(self.data, self.width, self.height, self.channels, self.bit_depth)

    def parts(self):
        head = self._fmt.pack(
            self.job_id, self.width, self.height, self.channels, self.bit_depth, self.tile, self.overlap
        )
        return [head, self.data]

    @classmethod
    def parse(cls, buf):
        if len(buf) < cls._fmt.size:
            raise ProtocolViolation("DenoiseRequest payload too short")
        fields = cls._fmt.unpack_from(buf)
        return cls(*fields, bytes(buf[cls._fmt.size:]))


@dataclass(frozen=True)
class DenoiseResponse:
    job_id: int
    status: int
    width: int
    height: int
    channels: int
    bit_depth: int
    data: bytes

    msg_type: ClassVar[MsgType] = MsgType.DENOISE_RESPONSE
    _fmt: ClassVar[struct.Struct] = struct.Struct("<QBIIBB")

    def __post_init__(self):
        if self.status == 0:
            _check_image(self.width, self.height, self.channels, self.bit_depth, self.data)

    @classmethod
    def from_pixels(cls, job_id, pixels):
        w, h, c, depth, data = _pixels_to_bytes(pixels)
        return cls(job_id, 0, w, h, c, depth, data)

    def pixels(self):
        return _bytes_to_pixels(self.data, self.width, self.height, self.channels, self.bit_depth)

    def parts(self):
        head = self._fmt.pack(self.job_id, self.status, self.width, self.height, self.channels, self.bit_depth)
        return [head, self.data]

    @classmethod
    def parse(cls, buf):
        if len(buf) < cls._fmt.size:
            raise ProtocolViolation("DenoiseResponse payload too short")
        fields = cls._fmt.unpack_from(buf)
        return cls(*fields, bytes(buf[cls._fmt.size:]))


@dataclass(frozen=True)
class ErrorMessage:
    job_id: int
    code: int
    message: str

    msg_type: ClassVar[MsgType] = MsgType.ERROR
    _fmt: ClassVar[struct.Struct] = struct.Struct("<QHI")

    def payload(self):
        text = self.message.encode("utf-8")
        return self._fmt.pack(self.job_id, int(self.code), len(text)) + text

    @classmethod
    def parse(cls, buf):
        if len(buf) < cls._fmt.size:
            raise ProtocolViolation("Error payload too short")
        job_id, code, n = cls._fmt.unpack_from(buf)
        text = bytes(buf[cls._fmt.size:])
        if len(text) != n:
            raise ProtocolViolation("Error message length mismatch")
        return cls(job_id, code, text.decode("utf-8", errors="replace"))


_EMPTY = {MsgType.PING: Ping, MsgType.PONG: Pong, MsgType.MODEL_INFO_REQUEST: ModelInfoRequest}
_PARSERS = {
    MsgType.DENOISE_REQUEST: DenoiseRequest.parse,
    MsgType.DENOISE_RESPONSE: DenoiseResponse.parse,
    MsgType.ERROR: ErrorMessage.parse,
    MsgType.MODEL_INFO_RESPONSE: ModelInfoResponse.parse,
}


def _payload_parts(m):
    if hasattr(m, "parts"):
        return m.parts()
    if hasattr(m, "payload"):
        return [m.payload()]
    return []


def encode_header(msg_type, payload_len):
    return HEADER.pack(MAGIC, VERSION, int(msg_type), payload_len)


def encode_parts(m):
    """Header plus payload chunks, so large pixel buffers are never concatenated."""
    parts = _payload_parts(m)
    return [encode_header(m.msg_type, sum(len(p) for p in parts)), *parts]


def encode_message(m) -> bytes:
    return b"".join(encode_parts(m))


def decode_header(buf, max_payload=DEFAULT_MAX_PAYLOAD):
    """Validate a 16-byte header and return ``(msg_type, payload_len)``."""
    if len(buf) < HEADER_SIZE:
        raise IncompleteMessage(f"header needs {HEADER_SIZE} bytes, got {len(buf)}")
    magic, version, msg_type, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolViolation(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolViolation(f"unsupported protocol version {version}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise ProtocolViolation(f"unknown message type {msg_type}") from None
    if length > max_payload:
        raise PayloadTooLarge(f"payload of {length} bytes exceeds the {max_payload}-byte limit")
    return msg_type, length


def parse_payload(msg_type, payload):
    if msg_type in _EMPTY:
        if len(payload):
            raise ProtocolViolation(f"{msg_type.name} carries no payload")
        return _EMPTY[msg_type]()
    return _PARSERS[msg_type](payload)


def decode_message(buf, max_payload=DEFAULT_MAX_PAYLOAD):
    """Inverse of :func:`encode_message`; ``buf`` must hold exactly one message."""
    msg_type, length = decode_header(buf, max_payload)
    end = HEADER_SIZE + length
    if len(buf) < end:
        raise IncompleteMessage(f"payload truncated: {len(buf) - HEADER_SIZE} of {length} bytes")
    if len(buf) > end:
        raise ProtocolViolation(f"{len(buf) - end} trailing bytes after the message")
    return parse_payload(msg_type, memoryview(buf)[HEADER_SIZE:end])


# --- socket helpers


def recv_exact(sock: socket.socket, n: int, *, allow_eof=False):
    """Read exactly ``n`` bytes. Returns None on a clean EOF before the first byte
    when ``allow_eof`` is set; a partial read raises IncompleteMessage."""
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], min(n - got, 1 << 22))
        if k == 0:
            if got == 0 and allow_eof:
                return None
            raise IncompleteMessage(f"connection closed after {got} of {n} bytes")
        got += k
    return buf


def read_message(sock: socket.socket, max_payload=DEFAULT_MAX_PAYLOAD, *, allow_eof=False):
    """Read one message. The length is checked against ``max_payload`` before
    any payload buffer is allocated."""
    head = recv_exact(sock, HEADER_SIZE, allow_eof=allow_eof)
    if head is None:
        return None
    msg_type, length = decode_header(head, max_payload)
    payload = recv_exact(sock, length) if length else b""
    return parse_payload(msg_type, payload)


def send_message(sock: socket.socket, m):
    for part in encode_parts(m):
        if part:
            sock.sendall(part)
