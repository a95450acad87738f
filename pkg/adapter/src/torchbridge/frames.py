"""Wire protocol framing.

Byte layout: a 4-byte little-endian frame length (excluding itself),
followed by a UTF-8 JSON header object {op, batch_shape, dtype, extra}
(responses add status and an optional message), followed by the raw
row-major tensor payload (little-endian float32 or uint8). The header ends
where its top-level JSON object closes; the scanner below tracks string and
escape state so braces inside string values are fine.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAX_FRAME_BYTES = 1 << 30

_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}
_SIZES = {"float32": 4, "uint8": 1, "none": 0}


class WireError(RuntimeError):
    pass


@dataclass
class Frame:
    op: str
    batch_shape: tuple[int, ...] = ()
    dtype: str = "none"
    extra: dict = field(default_factory=dict)
    payload: bytes = b""
    status: str | None = None
    message: str | None = None

    def tensor(self) -> np.ndarray:
        if self.dtype == "none":
            raise WireError("frame has no payload")
        return np.frombuffer(self.payload, dtype=_DTYPES[self.dtype]).reshape(self.batch_shape)


def from_array(op: str, arr: np.ndarray, status: str | None = None, extra: dict | None = None) -> Frame:
    if arr.dtype == np.uint8:
        dtype = "uint8"
        data = np.ascontiguousarray(arr)
    else:
        dtype = "float32"
        data = np.ascontiguousarray(arr, dtype="<f4")
    return Frame(
        op=op,
        batch_shape=tuple(int(d) for d in arr.shape),
        dtype=dtype,
        payload=data.tobytes(),
        status=status,
        extra=extra or {},
    )


def _expected_payload(shape: tuple[int, ...], dtype: str) -> int:
    if dtype not in _SIZES:
        raise WireError(f"unknown dtype {dtype!r}")
    count = 1
    for d in shape:
        if d < 0:
            raise WireError("negative dimension")
        count *= d
    return count * _SIZES[dtype]


def encode(frame: Frame) -> bytes:
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
    if _expected_payload(frame.batch_shape, frame.dtype) != len(frame.payload):
        raise WireError("payload size does not match declared shape/dtype")
    body = json.dumps(header, ensure_ascii=False).encode("utf-8") + frame.payload
    if len(body) > MAX_FRAME_BYTES:
        raise WireError("frame exceeds size limit")
    return struct.pack("<I", len(body)) + body


def _header_end(body: bytes) -> int:
    if not body or body[0] != ord("{"):
        raise WireError("header must start with a JSON object")
    depth = 0
    in_string = False
    escaped = False
    for i, b in enumerate(body):
        if in_string:
            if escaped:
                escaped = False
            elif b == ord("\\"):
                escaped = True
            elif b == ord('"'):
                in_string = False
            continue
        if b == ord('"'):
            in_string = True
        elif b == ord("{"):
            depth += 1
        elif b == ord("}"):
            depth -= 1
            if depth == 0:
                return i + 1
    raise WireError("unterminated header")


def decode(body: bytes) -> Frame:
    end = _header_end(body)
    try:
        header = json.loads(body[:end].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise WireError(f"bad header: {exc}") from exc
    if not isinstance(header, dict) or "op" not in header:
        raise WireError("header missing op")
    shape = tuple(int(d) for d in header.get("batch_shape", []))
    dtype = str(header.get("dtype", "none"))
    payload = body[end:]
    if _expected_payload(shape, dtype) != len(payload):
        raise WireError("payload size does not match declared shape/dtype")
    extra = header.get("extra", {})
    if not isinstance(extra, dict):
        raise WireError("extra must be an object")
    return Frame(
        op=str(header["op"]),
        batch_shape=shape,
        dtype=dtype,
        extra=extra,
        payload=payload,
        status=header.get("status"),
        message=header.get("message"),
    )


def read_frame(stream) -> Frame | None:
    prefix = stream.read(4)
    if not prefix:
        return None
    if len(prefix) < 4:
        raise WireError("truncated length prefix")
    (length,) = struct.unpack("<I", prefix)
    if length > MAX_FRAME_BYTES:
        raise WireError(f"declared length {length} exceeds limit")
    body = b""
    while len(body) < length:
        chunk = stream.read(length - len(body))
        if not chunk:
            raise WireError("stream ended mid-frame")
        body += chunk
    return decode(body)


def write_frame(stream, frame: Frame) -> None:
    stream.write(encode(frame))
    stream.flush()
