"""Serve a wrapped model over the wire protocol (stdio or a local socket).

A malformed frame gets a protocol-error reply and the loop continues;
backend exceptions become error frames; "shutdown" ends the session.
"""

from __future__ import annotations

import argparse
import socket
import struct
import sys

import numpy as np

from torchbridge.config import AdapterConfig
from torchbridge.frames import MAX_FRAME_BYTES, Frame, WireError, decode, encode, from_array
from torchbridge.gradcam import gradcam
from torchbridge.head import HeadHyper, train_head
from torchbridge.models import WrappedModel, build_model


def _images_from(frame: Frame) -> np.ndarray:
    arr = frame.tensor()
    if frame.dtype == "uint8":
        arr = arr.astype(np.float32) / 255.0
    return np.asarray(arr, dtype=np.float32)


class Session:
    def __init__(self, model: WrappedModel):
        self.model = model
        self._train_stream: list[tuple[np.ndarray, np.ndarray]] | None = None
        self._train_hyper = HeadHyper()

    def handle(self, frame: Frame) -> tuple[Frame, bool]:
        op = frame.op
        try:
            if op == "handshake":
                return Frame(op=op, status="ok", extra=self.model.descriptor_extra()), True
            if op == "shutdown":
                return Frame(op=op, status="ok"), False
            if op == "predict":
                return from_array(op, self.model.predict(_images_from(frame)), status="ok"), True
            if op == "features":
                return from_array(op, self.model.features(_images_from(frame)), status="ok"), True
            if op == "saliency":
                kind = str(frame.extra.get("kind", "class"))
                index = int(frame.extra.get("index", 0))
                maps = gradcam(self.model, _images_from(frame), kind, index)
                return from_array(op, maps, status="ok"), True
            if op == "train_head_begin":
                raw = dict(frame.extra.get("hyper", {}))
                if "betas" in raw:
                    raw["betas"] = tuple(raw["betas"])
                self._train_hyper = HeadHyper(**raw)
                self._train_stream = []
                return Frame(op=op, status="ok"), True
            if op == "train_head_batch":
                if self._train_stream is None:
                    return Frame(op=op, status="error",
                                 message="train_head_batch before train_head_begin"), True
                labels = np.asarray(frame.extra.get("labels", []), dtype=np.int64)
                self._train_stream.append((_images_from(frame), labels))
                return Frame(op=op, status="ok"), True
            if op == "train_head_end":
                if self._train_stream is None:
                    return Frame(op=op, status="error",
                                 message="train_head_end before train_head_begin"), True
                stats = train_head(self.model, self._train_stream, self._train_hyper)
                self._train_stream = None
                return Frame(op=op, status="ok", extra=stats), True
            return Frame(op=op, status="error", message=f"unknown op {op!r}"), True
        except Exception as exc:
            return Frame(op=op, status="error", message=f"{type(exc).__name__}: {exc}"), True


def serve_stream(model: WrappedModel, rfile, wfile) -> None:
    session = Session(model)
    while True:
        prefix = rfile.read(4)
        if not prefix or len(prefix) < 4:
            return
        (length,) = struct.unpack("<I", prefix)
        if length > MAX_FRAME_BYTES:
            wfile.write(encode(Frame(op="?", status="error",
                                     message=f"frame length {length} exceeds limit")))
            wfile.flush()
            return
        body = b""
        while len(body) < length:
            chunk = rfile.read(length - len(body))
            if not chunk:
                return
            body += chunk
        try:
            frame = decode(body)
        except WireError as exc:
            wfile.write(encode(Frame(op="?", status="error", message=f"protocol error: {exc}")))
            wfile.flush()
            continue
        reply, keep_going = session.handle(frame)
        wfile.write(encode(reply))
        wfile.flush()
        if not keep_going:
            return


def serve_socket(model: WrappedModel, address: str) -> None:
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
                serve_stream(model, rf, wf)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="torchbridge", description="Serve a PyTorch vision model over the bridge protocol"
    )
    parser.add_argument("--config", default="{}", help="AdapterConfig JSON or a path to one")
    parser.add_argument("--listen", default=None, help="socket address; default stdio")
    args = parser.parse_args(argv)

    model = build_model(AdapterConfig.load(args.config))
    if args.listen:
        serve_socket(model, args.listen)
    else:
        serve_stream(model, sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
