"""Framed binary wire protocol for talking to classification backends.

A frame is:

    [4-byte little-endian frame length][UTF-8 JSON header][raw payload]

The frame length excludes itself and covers header plus payload. The header
is a single JSON object ({op, batch_shape, dtype, extra} for requests, plus
status/message for responses); the payload is the row-major tensor bytes for
the declared shape and dtype (little-endian float32 or uint8). The header is
separated from the payload by scanning for the end of the top-level JSON
object, so the format needs no second length field and is implementable in
any language with a JSON parser.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

MAX_FRAME_BYTES = 1 << 30  # reject anything larger as a protocol violation

DTYPE_SIZES = {"float32": 4, "uint8": 1, "none": 0}
_NUMPY_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


class ProtocolError(RuntimeError):
    """Malformed frame, header, or payload."""


@dataclass
class Frame:
    """One decoded protocol frame: a JSON header and an optional tensor."""

    op: str
    batch_shape: tuple[int, ...] = ()
    dtype: str = "none"
    extra: dict = field(default_factory=dict)
    payload: bytes = b""
    status: str | None = None
    message: str | None = None

    def tensor(self) -> np.ndarray:
        """Decode the payload as a row-major array of the declared shape."""
        if self.dtype == "none":
            raise ProtocolError("frame carries no tensor payload")
        arr = np.frombuffer(self.payload, dtype=_NUMPY_DTYPES[self.dtype])
        return arr.reshape(self.batch_shape)


def _payload_nbytes(batch_shape: tuple[int, ...], dtype: str) -> int:
    if dtype not in DTYPE_SIZES:
        raise ProtocolError(f"unknown dtype {dtype!r}")
    if dtype == "none":
        return 0
    count = 1
    for dim in batch_shape:
        if dim < 0:
            raise ProtocolError(f"negative dimension in batch_shape {batch_shape}")
        count *= dim
    return count * DTYPE_SIZES[dtype]


def tensor_payload(arr: np.ndarray) -> tuple[tuple[int, ...], str, bytes]:
    """Encode an array as (batch_shape, dtype, payload bytes)."""
    if arr.dtype == np.uint8:
        dtype = "uint8"
        data = np.ascontiguousarray(arr)
    else:
        dtype = "float32"
        data = np.ascontiguousarray(arr, dtype="<f4")
    return tuple(int(d) for d in arr.shape), dtype, data.tobytes()


def encode_frame(frame: Frame) -> bytes:
    header: dict = {
        "op": frame.op,
        "batch_shape": list(frame.batch_shape),
        "dtype": frame.dtype,
        "extra": frame.extra,
    }
    if frame.status is not None:
        header["status"] = frame.status
    if frame.message is not None:
        header["message"] = frame.message
    expected = _payload_nbytes(frame.batch_shape, frame.dtype)
    if expected != len(frame.payload):
        raise ProtocolError(
            f"payload is {len(frame.payload)} bytes but shape {frame.batch_shape} "
            f"with dtype {frame.dtype} needs {expected}"
        )
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    body = header_bytes + frame.payload
    if len(body) > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {len(body)} bytes exceeds limit {MAX_FRAME_BYTES}")
    return struct.pack("<I", len(body)) + body


def _json_object_end(data: bytes) -> int:
    """Index one past the closing brace of the JSON object starting data[0].

    Byte-level scan tracking string and escape state, so braces inside
    string values are handled.
    """
    if not data or data[0] != ord("{"):
        raise ProtocolError("frame header does not start with a JSON object")
    depth = 0
    in_string = False
    escaped = False
    for i, byte in enumerate(data):
        if in_string:
            if escaped:
                escaped = False
            elif byte == ord("\\"):
                escaped = True
            elif byte == ord('"'):
                in_string = False
            continue
        if byte == ord('"'):
            in_string = True
        elif byte == ord("{"):
            depth += 1
        elif byte == ord("}"):
            depth -= 1
            if depth == 0:
                return i + 1
    raise ProtocolError("unterminated JSON header")


def decode_frame(body: bytes) -> Frame:
    """Decode the body of a frame (everything after the length prefix)."""
    end = _json_object_end(body)
    try:
        header = json.loads(body[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"invalid header JSON: {exc}") from exc
    if not isinstance(header, dict) or "op" not in header:
        raise ProtocolError("header must be a JSON object with an 'op' field")
    batch_shape = tuple(int(d) for d in header.get("batch_shape", []))
    dtype = header.get("dtype", "none")
    payload = body[end:]
    expected = _payload_nbytes(batch_shape, dtype)
    if expected != len(payload):
        raise ProtocolError(
            f"payload is {len(payload)} bytes but shape {batch_shape} "
            f"with dtype {dtype} needs {expected}"
        )
    extra = header.get("extra", {})
    if not isinstance(extra, dict):
        raise ProtocolError("'extra' must be a JSON object")
    return Frame(
        op=str(header["op"]),
        batch_shape=batch_shape,
        dtype=str(dtype),
        extra=extra,
        payload=payload,
        status=header.get("status"),
        message=header.get("message"),
    )


def write_frame(stream: BinaryIO, frame: Frame) -> None:
    stream.write(encode_frame(frame))
    stream.flush()


def read_frame(stream: BinaryIO) -> Frame | None:
    """Read one frame from a blocking stream; None on clean EOF."""
    prefix = _read_exact(stream, 4, allow_eof=True)
    if prefix is None:
        return None
    (length,) = struct.unpack("<I", prefix)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"declared frame length {length} exceeds limit {MAX_FRAME_BYTES}")
    body = _read_exact(stream, length)
    return decode_frame(body)


def _read_exact(stream: BinaryIO, n: int, allow_eof: bool = False) -> bytes | None:
    chunks: list[bytes] = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            if allow_eof and got == 0:
                return None
            raise ProtocolError(f"stream ended after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def error_frame(op: str, message: str) -> Frame:
    return Frame(op=op, status="error", message=message)


def ok_frame(op: str, extra: dict | None = None, array: np.ndarray | None = None) -> Frame:
    if array is None:
        return Frame(op=op, status="ok", extra=extra or {})
    shape, dtype, payload = tensor_payload(array)
    return Frame(
        op=op, status="ok", extra=extra or {}, batch_shape=shape, dtype=dtype, payload=payload
    )
