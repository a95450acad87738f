"""Serve an in-process backend over the wire protocol.

Lets the built-in reference backend run as a separate process (stdio or a
local socket), which doubles as the conformance fixture for protocol tests:

    python -m regionprobe.bridge.serve --reference '{"image_size": 64}'
"""

from __future__ import annotations

import argparse
import json
import socket
import struct
import sys

import numpy as np

from regionprobe.bridge import Backend, TrainHyper
from regionprobe.bridge.protocol import (
    MAX_FRAME_BYTES,
    Frame,
    ProtocolError,
    decode_frame,
    encode_frame,
    error_frame,
    ok_frame,
)


class _Session:
    """Per-connection dispatch state, including the train_head stream."""

    def __init__(self, backend: Backend):
        self.backend = backend
        self._train_batches: list[tuple[np.ndarray, np.ndarray]] | None = None
        self._train_hyper: TrainHyper | None = None

    def handle(self, frame: Frame) -> tuple[Frame, bool]:
        """Returns (reply, keep_going)."""
        op = frame.op
        try:
            if op == "handshake":
                return self._handshake(), True
            if op == "shutdown":
                return ok_frame(op), False
            if op == "predict":
                return ok_frame(op, array=self.backend.predict(self._images(frame))), True
            if op == "features":
                return ok_frame(op, array=self.backend.features(self._images(frame))), True
            if op == "saliency":
                kind = str(frame.extra.get("kind", "class"))
                index = int(frame.extra.get("index", 0))
                maps = self.backend.saliency(self._images(frame), kind, index)
                return ok_frame(op, array=np.asarray(maps, dtype=np.float64)), True
            if op == "train_head_begin":
                self._train_batches = []
                hyper_raw = dict(frame.extra.get("hyper", {}))
                if "betas" in hyper_raw:
                    hyper_raw["betas"] = tuple(hyper_raw["betas"])
                self._train_hyper = TrainHyper(**hyper_raw)
                return ok_frame(op), True
            if op == "train_head_batch":
                if self._train_batches is None:
                    return error_frame(op, "train_head_batch before train_head_begin"), True
                labels = np.asarray(frame.extra.get("labels", []), dtype=np.int64)
                self._train_batches.append((self._images(frame), labels))
                return ok_frame(op), True
            if op == "train_head_end":
                if self._train_batches is None:
                    return error_frame(op, "train_head_end before train_head_begin"), True
                self.backend = self.backend.train_head(self._train_batches, self._train_hyper)
                self._train_batches = None
                return ok_frame(op), True
            return error_frame(op, f"unknown op {op!r}"), True
        except Exception as exc:  # backend failures become error frames
            return error_frame(op, f"{type(exc).__name__}: {exc}"), True

    def _handshake(self) -> Frame:
        desc = self.backend.descriptor()
        return ok_frame(
            "handshake",
            extra={
                "name": desc.name,
                "family": desc.family,
                "parameter_count": desc.parameter_count,
                "input_size": desc.input_size,
                "metadata": desc.metadata,
                "capabilities": sorted(self.backend.capabilities()),
                "concurrent": False,
            },
        )

    def _images(self, frame: Frame) -> np.ndarray:
        arr = frame.tensor()
        if frame.dtype == "uint8":
            arr = arr.astype(np.float64) / 255.0
        return np.asarray(arr, dtype=np.float64)


def serve_stream(backend: Backend, rfile, wfile) -> None:
    """Frame loop over blocking binary streams; malformed frames get a
    protocol-error reply and the loop keeps going."""
    session = _Session(backend)
    while True:
        prefix = rfile.read(4)
        if not prefix:
            return
        if len(prefix) < 4:
            return
        (length,) = struct.unpack("<I", prefix)
        if length > MAX_FRAME_BYTES:
            wfile.write(encode_frame(error_frame("?", f"frame length {length} exceeds limit")))
            wfile.flush()
            return
        body = b""
        while len(body) < length:
            chunk = rfile.read(length - len(body))
            if not chunk:
                return
            body += chunk
        try:
            frame = decode_frame(body)
        except ProtocolError as exc:
            wfile.write(encode_frame(error_frame("?", f"protocol error: {exc}")))
            wfile.flush()
            continue
        reply, keep_going = session.handle(frame)
        wfile.write(encode_frame(reply))
        wfile.flush()
        if not keep_going:
            return


def serve_socket(backend: Backend, address: str) -> None:
    """Accept connections one at a time on host:port or a unix path."""
    if ":" in address and not address.startswith("/"):
        host, port = address.rsplit(":", 1)
        server = socket.create_server((host, int(port)))
    else:
        server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        server.bind(address)
        server.listen(1)
    with server:
        while True:
            conn, _ = server.accept()
            with conn, conn.makefile("rb") as rf, conn.makefile("wb") as wf:
                serve_stream(backend, rf, wf)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Serve the reference backend over the bridge")
    parser.add_argument("--reference", default="{}", help="JSON config or path to one")
    parser.add_argument("--listen", default=None, help="socket address; default stdio")
    args = parser.parse_args(argv)

    from regionprobe.bridge.reference import ReferenceConfig, reference_backend

    raw = args.reference
    cfg = json.loads(raw) if raw.strip().startswith("{") else json.load(open(raw))
    seed = int(cfg.pop("seed", 0))
    backend = reference_backend(ReferenceConfig(**cfg), seed=seed)

    if args.listen:
        serve_socket(backend, args.listen)
    else:
        serve_stream(backend, sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
