from __future__ import annotations

import io
import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from torchbridge import AdapterConfig, build_model
from torchbridge.frames import Frame, encode, from_array, read_frame, write_frame
from torchbridge.serve import serve_stream

CONFIG = {"model": "resnet18", "input_size": 64, "n_classes": 4, "seed": 1}


def _serve_bytes(data: bytes, config: dict = CONFIG) -> list[Frame]:
    model = build_model(AdapterConfig(**config))
    out = io.BytesIO()
    serve_stream(model, io.BytesIO(data), out)
    out.seek(0)
    frames = []
    while True:
        frame = read_frame(out)
        if frame is None:
            return frames
        frames.append(frame)


def _image_frame(op: str, batch: int = 2, extra: dict | None = None) -> bytes:
    rng = np.random.default_rng(0)
    images = rng.uniform(0, 1, (batch, 64, 64, 3)).astype(np.float32)
    return encode(from_array(op, images, extra=extra))


def test_handshake_contents():
    frames = _serve_bytes(encode(Frame(op="handshake")))
    (reply,) = frames
    assert reply.status == "ok"
    assert reply.extra["family"] == "resnet"
    assert reply.extra["input_size"] == 64
    assert reply.extra["metadata"]["feature_dim"] == 512
    assert set(reply.extra["capabilities"]) == {"predict", "features", "saliency", "train_head"}


def test_predict_and_features_shapes():
    frames = _serve_bytes(_image_frame("predict") + _image_frame("features"))
    probs, feats = frames
    assert probs.batch_shape == (2, 4)
    np.testing.assert_allclose(probs.tensor().sum(axis=1), 1.0, atol=1e-5)
    assert feats.batch_shape == (2, 512)


def test_identical_probe_batches_identical_responses():
    data = _image_frame("predict") + _image_frame("predict")
    a, b = _serve_bytes(data)
    assert a.payload == b.payload  # determinism contract, bit-exact


def test_saliency_request():
    frames = _serve_bytes(_image_frame("saliency", extra={"kind": "class", "index": 1}))
    (reply,) = frames
    assert reply.status == "ok"
    assert reply.batch_shape == (2, 64, 64)
    assert reply.tensor().min() >= 0.0


def test_malformed_frame_gets_error_and_process_lives():
    bad_body = b"not json"
    data = struct.pack("<I", len(bad_body)) + bad_body + encode(Frame(op="handshake"))
    frames = _serve_bytes(data)
    assert frames[0].status == "error"
    assert "protocol error" in frames[0].message
    assert frames[1].status == "ok"


def test_unknown_op_and_backend_error_frames():
    wrong_shape = from_array("predict", np.zeros((1, 8, 8, 3), dtype=np.float32))
    data = encode(Frame(op="launch_missiles")) + encode(wrong_shape) + encode(Frame(op="handshake"))
    frames = _serve_bytes(data)
    assert frames[0].status == "error"
    assert frames[1].status == "error"
    assert frames[2].status == "ok"


def test_train_head_over_the_wire():
    rng = np.random.default_rng(1)
    images = rng.uniform(0, 1, (8, 64, 64, 3)).astype(np.float32)
    labels = [int(v) for v in rng.integers(0, 4, size=8)]
    data = (
        encode(Frame(op="train_head_begin", extra={"hyper": {"epochs": 2, "lr": 1e-3}}))
        + encode(from_array("train_head_batch", images, extra={"labels": labels}))
        + encode(Frame(op="train_head_end"))
    )
    begin, batch, end = _serve_bytes(data)
    assert begin.status == batch.status == end.status == "ok"
    assert end.extra["epochs"] == 2
    assert 0.0 <= end.extra["train_accuracy"] <= 1.0


def test_train_head_ops_out_of_order():
    frames = _serve_bytes(encode(Frame(op="train_head_end")))
    assert frames[0].status == "error"


def test_shutdown_ends_session():
    frames = _serve_bytes(encode(Frame(op="shutdown")) + encode(Frame(op="handshake")))
    assert len(frames) == 1


def test_oversized_frame_terminates_with_error():
    data = struct.pack("<I", (1 << 30) + 1)
    frames = _serve_bytes(data)
    assert frames[0].status == "error"
    assert "exceeds limit" in frames[0].message


# --------------------------------------------------------------------------
# Real subprocess over stdio
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def adapter_proc():
    proc = subprocess.Popen(
        [sys.executable, "-m", "torchbridge", "--config", json.dumps(CONFIG)],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        stderr=sys.stderr,
        bufsize=0,
    )
    yield proc
    try:
        write_frame(proc.stdin, Frame(op="shutdown"))
        proc.wait(timeout=10)
    except Exception:
        proc.kill()


def _ask(proc, frame: Frame) -> Frame:
    write_frame(proc.stdin, frame)
    reply = read_frame(proc.stdout)
    assert reply is not None
    return reply


def test_subprocess_stdio_roundtrip(adapter_proc):
    hello = _ask(adapter_proc, Frame(op="handshake"))
    assert hello.status == "ok"
    rng = np.random.default_rng(3)
    images = rng.uniform(0, 1, (2, 64, 64, 3)).astype(np.float32)
    first = _ask(adapter_proc, from_array("predict", images))
    second = _ask(adapter_proc, from_array("predict", images))
    assert first.payload == second.payload
    np.testing.assert_allclose(first.tensor().sum(axis=1), 1.0, atol=1e-5)


def test_subprocess_survives_fuzzed_garbage(adapter_proc):
    # Protocol fuzz: random garbage bodies must produce error frames and
    # leave the process responsive.
    rng = np.random.default_rng(9)
    for _ in range(10):
        body = bytes(rng.integers(0, 256, size=int(rng.integers(1, 80)), dtype=np.uint8))
        adapter_proc.stdin.write(struct.pack("<I", len(body)) + body)
        adapter_proc.stdin.flush()
        reply = read_frame(adapter_proc.stdout)
        assert reply.status == "error"
    assert _ask(adapter_proc, Frame(op="handshake")).status == "ok"
