"""Client side of the wire protocol: backends in another process.

Supports subprocess backends over stdio ("cmd:<argv>") and local socket
backends ("socket:host:port" or "socket:/unix/path"). One request is in
flight at a time unless the backend's handshake declares concurrent=true.
"""

from __future__ import annotations

import json
import os
import select
import shlex
import socket
import struct
import subprocess
import sys
import threading
import time
from dataclasses import asdict
from typing import Iterable

import numpy as np

from regionprobe.bridge import (
    DEFAULT_TIMEOUT_S,
    Backend,
    BackendDescriptor,
    BackendError,
    TrainHyper,
    verify_determinism,
)
from regionprobe.bridge.protocol import (
    MAX_FRAME_BYTES,
    Frame,
    ProtocolError,
    decode_frame,
    encode_frame,
    tensor_payload,
)


class BackendTimeout(BackendError):
    pass


class _PipeTransport:
    """Raw-fd pipe pair with select-based read timeouts (POSIX)."""

    def __init__(self, read_fd: int, write_file):
        self._read_fd = read_fd
        self._write_file = write_file

    def send_all(self, data: bytes) -> None:
        self._write_file.write(data)
        self._write_file.flush()

    def recv(self, n: int, deadline: float | None) -> bytes:
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BackendTimeout("backend response timed out")
            ready, _, _ = select.select([self._read_fd], [], [], remaining)
            if not ready:
                raise BackendTimeout("backend response timed out")
        return os.read(self._read_fd, n)

    def close(self) -> None:
        try:
            self._write_file.close()
        except OSError:
            pass


class _SocketTransport:
    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send_all(self, data: bytes) -> None:
        self._sock.sendall(data)

    def recv(self, n: int, deadline: float | None) -> bytes:
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BackendTimeout("backend response timed out")
            self._sock.settimeout(remaining)
        else:
            self._sock.settimeout(None)
        try:
            return self._sock.recv(n)
        except socket.timeout as exc:
            raise BackendTimeout("backend response timed out") from exc

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def _read_exact(transport, n: int, deadline: float | None) -> bytes:
    chunks: list[bytes] = []
    got = 0
    while got < n:
        chunk = transport.recv(n - got, deadline)
        if not chunk:
            raise BackendError("backend closed the connection mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class RemoteBackend:
    """Bridge Backend implementation that forwards every call over the wire.

    The handshake fetches the descriptor and capability set and then runs a
    determinism probe (the same batch predicted twice must match exactly).
    """

    def __init__(self, transport, timeout_s: float = DEFAULT_TIMEOUT_S, process=None):
        self._transport = transport
        self._timeout_s = timeout_s
        self._process = process
        self._lock = threading.Lock()
        self._descriptor: BackendDescriptor | None = None
        self._capabilities: frozenset = frozenset()
        self._concurrent = False

    # -- wire plumbing ------------------------------------------------------

    def _roundtrip(self, frame: Frame) -> Frame:
        deadline = time.monotonic() + self._timeout_s if self._timeout_s else None
        with self._lock:
            self._transport.send_all(encode_frame(frame))
            prefix = _read_exact(self._transport, 4, deadline)
            (length,) = struct.unpack("<I", prefix)
            if length > MAX_FRAME_BYTES:
                raise ProtocolError(f"backend declared oversized frame ({length} bytes)")
            body = _read_exact(self._transport, length, deadline)
        reply = decode_frame(body)
        if reply.status == "error":
            raise BackendError(f"backend error on {frame.op!r}: {reply.message}")
        if reply.status != "ok":
            raise ProtocolError(f"backend reply missing ok status on {frame.op!r}")
        return reply

    def handshake(self, check_determinism: bool = True) -> BackendDescriptor:
        reply = self._roundtrip(Frame(op="handshake", extra={"client": "regionprobe"}))
        info = reply.extra
        try:
            self._descriptor = BackendDescriptor(
                name=str(info["name"]),
                family=str(info["family"]),
                parameter_count=int(info.get("parameter_count", 0)),
                input_size=int(info["input_size"]),
                metadata=dict(info.get("metadata", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"invalid handshake payload: {exc}") from exc
        self._capabilities = frozenset(info.get("capabilities", []))
        self._concurrent = bool(info.get("concurrent", False))
        if check_determinism and "predict" in self._capabilities:
            verify_determinism(self)
        return self._descriptor

    # -- Backend interface ----------------------------------------------------

    def descriptor(self) -> BackendDescriptor:
        if self._descriptor is None:
            return self.handshake()
        return self._descriptor

    def capabilities(self) -> frozenset:
        if self._descriptor is None:
            self.handshake()
        return self._capabilities

    def _tensor_request(self, op: str, images: np.ndarray, extra: dict | None = None) -> Frame:
        shape, dtype, payload = tensor_payload(np.asarray(images))
        return Frame(op=op, batch_shape=shape, dtype=dtype, payload=payload, extra=extra or {})

    def predict(self, images: np.ndarray) -> np.ndarray:
        reply = self._roundtrip(self._tensor_request("predict", images))
        return np.asarray(reply.tensor(), dtype=np.float64)

    def features(self, images: np.ndarray) -> np.ndarray:
        reply = self._roundtrip(self._tensor_request("features", images))
        return np.asarray(reply.tensor(), dtype=np.float64)

    def saliency(self, images: np.ndarray, kind: str, index: int) -> np.ndarray:
        reply = self._roundtrip(
            self._tensor_request("saliency", images, extra={"kind": kind, "index": int(index)})
        )
        return np.asarray(reply.tensor(), dtype=np.float64)

    def train_head(
        self, batches: Iterable[tuple[np.ndarray, np.ndarray]], hyper: TrainHyper
    ) -> "RemoteBackend":
        self._roundtrip(Frame(op="train_head_begin", extra={"hyper": asdict(hyper)}))
        for images, labels in batches:
            self._roundtrip(
                self._tensor_request(
                    "train_head_batch",
                    images,
                    extra={"labels": [int(v) for v in labels]},
                )
            )
        self._roundtrip(Frame(op="train_head_end"))
        return self

    def close(self) -> None:
        try:
            self._transport.send_all(encode_frame(Frame(op="shutdown")))
        except (OSError, BackendError):
            pass
        self._transport.close()
        if self._process is not None:
            try:
                self._process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._process.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect_command(argv: list[str], timeout_s: float = DEFAULT_TIMEOUT_S) -> RemoteBackend:
    """Spawn a backend process and speak the protocol over its stdio.

    Note: the argv string given to cmd: locators is shell-like; quotes
    inside arguments are consumed by the splitter, so JSON configs are best
    passed as file paths.
    """
    proc = subprocess.Popen(
        argv,
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        stderr=sys.stderr,
        bufsize=0,
    )
    transport = _PipeTransport(proc.stdout.fileno(), proc.stdin)
    backend = RemoteBackend(transport, timeout_s=timeout_s, process=proc)
    try:
        backend.handshake()
    except BackendError as exc:
        code = proc.poll()
        if code is not None:
            raise BackendError(
                f"backend command exited with status {code} during handshake "
                f"(argv: {argv!r}); see its stderr above"
            ) from exc
        raise
    return backend


def connect_socket(address: str, timeout_s: float = DEFAULT_TIMEOUT_S) -> RemoteBackend:
    """Connect to a backend listening on host:port or a unix socket path."""
    if ":" in address and not address.startswith("/"):
        host, port = address.rsplit(":", 1)
        sock = socket.create_connection((host, int(port)), timeout=timeout_s)
    else:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.settimeout(timeout_s)
        sock.connect(address)
    backend = RemoteBackend(_SocketTransport(sock), timeout_s=timeout_s)
    backend.handshake()
    return backend


def open_backend(spec: str, timeout_s: float = DEFAULT_TIMEOUT_S) -> Backend:
    """Resolve a backend locator string.

    cmd:<argv>            spawn a subprocess speaking the protocol on stdio
    socket:<addr>         connect to host:port or a unix socket path
    reference:<path|json> construct the built-in backend from a JSON config
    """
    from regionprobe.bridge.reference import ReferenceConfig, reference_backend

    if spec.startswith("cmd:"):
        return connect_command(shlex.split(spec[len("cmd:") :]), timeout_s=timeout_s)
    if spec.startswith("socket:"):
        return connect_socket(spec[len("socket:") :], timeout_s=timeout_s)
    if spec.startswith("reference:"):
        arg = spec[len("reference:") :]
        if arg.strip().startswith("{"):
            raw = json.loads(arg)
        elif arg:
            with open(arg, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        else:
            raw = {}
        seed = int(raw.pop("seed", 0))
        return reference_backend(ReferenceConfig(**raw), seed=seed)
    raise ValueError(f"unknown backend locator {spec!r}")
