"""Tile-parallel denoise server and its client.

The server reads requests on each connection, splits every frame into tiles,
runs the tiles on a shared thread pool and answers jobs in the order they
arrived. The same tile pipeline backs the local (in-process) path, which is
what makes remote and local results byte-identical.
"""
from __future__ import annotations

import itertools
import logging
import queue
import socket
import socketserver
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from functools import partial

import numpy as np

from .errors import (
    IncompleteMessage,
    InvalidArgument,
    PayloadTooLarge,
    ProtocolViolation,
    RetideError,
    ServerError,
)
from .int8engine import forward_i8
from .model import count_ops
from .protocol import (
    DEFAULT_MAX_PAYLOAD,
    DenoiseRequest,
    DenoiseResponse,
    ErrorCode,
    ErrorMessage,
    ModelInfoRequest,
    ModelInfoResponse,
    Ping,
    Pong,
    read_message,
    send_message,
)
from .quant import QuantizedModel
from .tensor import TensorF32, crop, from_hwc, to_hwc
from .tiler import DEFAULT_OVERLAP, DEFAULT_TILE, Assembler, padded_frame, plan_tiles

log = logging.getLogger(__name__)


def _run_tile(forward, padded, rec):
    return rec.index, forward(crop(padded, rec.source))


def submit_frame(forward, frame: TensorF32, tile=DEFAULT_TILE, overlap=DEFAULT_OVERLAP, executor=None):
    """Queue every tile of ``frame`` and return a zero-argument ``finish`` callable.

    ``forward`` maps a ``(n, c, T, T)`` tile to the denoised tile (for example
    ``partial(forward_i8, qm)``). ``finish()`` blocks until all tiles are
    done and returns the stitched frame. Without an executor the tiles run
    inline inside ``finish``.
    """
    plan = plan_tiles(frame.w, frame.h, tile, overlap)
    padded = padded_frame(frame, plan)
    if executor is None:
        def finish():
            asm = None
            for rec in plan.tiles:
                idx, out = _run_tile(forward, padded, rec)
                asm = asm or Assembler(plan, out.c, out.n)
                asm.put(idx, out)
            return asm.result()
        return finish

    futures = [executor.submit(_run_tile, forward, padded, rec) for rec in plan.tiles]

    def finish():
        asm = None
        try:
            for fut in as_completed(futures):
                idx, out = fut.result()
                asm = asm or Assembler(plan, out.c, out.n)
                asm.put(idx, out)
        except BaseException:
            for fut in futures:
                fut.cancel()
            raise
        return asm.result()

    return finish


def denoise_frame(forward, frame, tile=DEFAULT_TILE, overlap=DEFAULT_OVERLAP, executor=None):
    return submit_frame(forward, frame, tile, overlap, executor)()


def denoise_pixels(qm: QuantizedModel, pixels, tile=DEFAULT_TILE, overlap=DEFAULT_OVERLAP, executor=None):
    """In-process equivalent of one server round trip on interleaved pixels.

    uint8 in, uint8 out; float in, float32 out.
    """
    arr = np.asarray(pixels)
    out = denoise_frame(partial(forward_i8, qm), from_hwc(arr), tile, overlap, executor)
    return to_hwc(out, np.uint8 if arr.dtype == np.uint8 else np.float32)


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 7878
    workers: int = 1
    max_payload: int = DEFAULT_MAX_PAYLOAD
    tile: int = DEFAULT_TILE
    overlap: int = DEFAULT_OVERLAP


class _Done:
    """A reply that is ready immediately."""

    def __init__(self, msg):
        self.msg = msg

    def __call__(self):
        return self.msg


class _Handler(socketserver.BaseRequestHandler):
    server: "_TCPServer"

    def handle(self):
        owner = self.server.owner
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        replies = queue.Queue()
        writer = threading.Thread(target=self._write_loop, args=(sock, replies), daemon=True)
        writer.start()
        try:
            while True:
                try:
                    msg = read_message(sock, owner.config.max_payload, allow_eof=True)
                except PayloadTooLarge as e:
                    replies.put(_Done(ErrorMessage(0, ErrorCode.PAYLOAD_TOO_LARGE, str(e))))
                    break
                except IncompleteMessage as e:
                    replies.put(_Done(ErrorMessage(0, ErrorCode.INCOMPLETE_MESSAGE, str(e))))
                    break
                except ProtocolViolation as e:
                    replies.put(_Done(ErrorMessage(0, ErrorCode.PROTOCOL_VIOLATION, str(e))))
                    break
                except OSError:
                    break
                if msg is None:
                    break
                replies.put(owner.dispatch(msg))
        finally:
            replies.put(None)
            writer.join()
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    @staticmethod
    def _write_loop(sock, replies):
        broken = False
        while True:
            item = replies.get()
            if item is None:
                return
            if broken:
                continue
            try:
                send_message(sock, item())
            except OSError:
                broken = True


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, owner):
        self.owner = owner
        super().__init__(addr, _Handler)


class DenoiseServer:
    """Serve a quantised model over TCP.

    Use as a context manager or call :meth:`start` / :meth:`stop`; port 0
    picks a free port, see :attr:`address`.
    """

    def __init__(self, model: QuantizedModel, config: ServerConfig = None, forward=None):
        self.model = model
        self.config = config or ServerConfig()
        if self.config.workers < 1:
            raise InvalidArgument("workers must be >= 1")
        self.forward = forward or partial(forward_i8, model)
        self.pool = ThreadPoolExecutor(self.config.workers, thread_name_prefix="retide-tile")
        self._tcp = _TCPServer((self.config.host, self.config.port), self)
        self._thread = None

    @property
    def address(self):
        return self._tcp.server_address[:2]

    def dispatch(self, msg):
        if isinstance(msg, Ping):
            return _Done(Pong())
        if isinstance(msg, ModelInfoRequest):
            return _Done(self.model_info())
        if isinstance(msg, DenoiseRequest):
            return self._start_job(msg)
        return _Done(ErrorMessage(0, ErrorCode.PROTOCOL_VIOLATION, f"unexpected {type(msg).__name__}"))

    def model_info(self):
        g = self.model.graph
        cfg = self.config
        return ModelInfoResponse(
            g.cin, g.cout, g.depth, self.model.input_exp, cfg.tile, cfg.overlap, cfg.workers,
            count_ops(g, cfg.tile, cfg.tile),
        )

    def _start_job(self, req: DenoiseRequest):
        job = req.job_id
        try:
            if req.channels != self.model.graph.cin:
                raise InvalidArgument(f"model takes {self.model.graph.cin} channels, request has {req.channels}")
            tile = req.tile or self.config.tile
            overlap = req.overlap if req.tile else self.config.overlap
            frame = from_hwc(req.pixels())
            finish = submit_frame(self.forward, frame, tile, overlap, self.pool)
        except RetideError as e:
            return _Done(ErrorMessage(job, ErrorCode.INVALID_ARGUMENT, str(e)))
        out_dtype = np.uint8 if req.bit_depth == 8 else np.float32

        def reply():
            try:
                out = finish()
                return DenoiseResponse.from_pixels(job, to_hwc(out, out_dtype))
            except Exception as e:  # worker failure must not take the server down
                log.exception("job %d failed", job)
                return ErrorMessage(job, ErrorCode.WORKER_FAILURE, f"{type(e).__name__}: {e}")

        return reply

    def start(self):
        self._thread = threading.Thread(target=self._tcp.serve_forever, name="retide-server", daemon=True)
        self._thread.start()
        log.info("serving on %s:%d with %d worker(s)", *self.address, self.config.workers)
        return self

    def serve_forever(self):
        log.info("serving on %s:%d with %d worker(s)", *self.address, self.config.workers)
        try:
            self._tcp.serve_forever()
        finally:
            self.close()

    def stop(self):
        self._tcp.shutdown()
        if self._thread is not None:
            self._thread.join()
        self.close()

    def close(self):
        self._tcp.server_close()
        self.pool.shutdown(wait=False, cancel_futures=True)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(model: QuantizedModel, config: ServerConfig):
    """Run a server in the foreground until interrupted."""
    DenoiseServer(model, config).serve_forever()


class Client:
    """Synchronous client; one request in flight at a time."""

    def __init__(self, host="127.0.0.1", port=7878, timeout=60.0, max_payload=DEFAULT_MAX_PAYLOAD):
        self.max_payload = max_payload
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._ids = itertools.count(1)

    def _roundtrip(self, msg):
        send_message(self.sock, msg)
        reply = read_message(self.sock, self.max_payload)
        if isinstance(reply, ErrorMessage):
            raise ServerError(reply.job_id, reply.code, reply.message)
        return reply

    def ping(self):
        reply = self._roundtrip(Ping())
        if not isinstance(reply, Pong):
            raise ProtocolViolation(f"expected Pong, got {type(reply).__name__}")

    def model_info(self) -> ModelInfoResponse:
        reply = self._roundtrip(ModelInfoRequest())
        if not isinstance(reply, ModelInfoResponse):
            raise ProtocolViolation(f"expected ModelInfoResponse, got {type(reply).__name__}")
        return reply

    def submit_job(self, image, tile=DEFAULT_TILE, overlap=DEFAULT_OVERLAP):
        """Denoise an interleaved ``(h, w[, c])`` image remotely; returns the same shape.

        uint8 images travel at 8 bits, float images as float32.
        """
        job = next(self._ids)
        arr = np.asarray(image)
        squeeze = arr.ndim == 2
        reply = self._roundtrip(DenoiseRequest.from_pixels(job, arr, tile, overlap))
        if not isinstance(reply, DenoiseResponse):
            raise ProtocolViolation(f"expected DenoiseResponse, got {type(reply).__name__}")
        if reply.job_id != job:
            raise ProtocolViolation(f"response for job {reply.job_id}, expected {job}")
        out = reply.pixels()
        return out[:, :, 0] if squeeze else out

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def submit_job(client: Client, image, tile=DEFAULT_TILE, overlap=DEFAULT_OVERLAP):
    return client.submit_job(image, tile, overlap)
