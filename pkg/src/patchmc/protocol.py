"""Plugin wire protocol v1: little-endian frames over a subprocess's stdio.

Every frame starts with an 8-byte prelude: magic b"PMCP", uint16 version,
uint16 op. Bodies:

  HELLO       (op 0)  3 x uint32 patch dims
  HELLO-ACK   (op 1)  empty
  PREDICT     (op 2)  uint32 batch_count, then batch_count x float32[patch_len]
  PREDICT-ACK (op 3)  uint32 batch_count, then batch_count x float32[patch_len]
  TRAIN       (op 4)  uint64 count, then per patch float32[patch_len] + uint8[patch_len]
  TRAIN-ACK   (op 5)  float64 final_loss
  CLOSE       (op 6)  empty

Patch payloads are flattened with axis 0 fastest, matching the container
formats elsewhere in the toolkit.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import PluginFailure

MAGIC = b"PMCP"
VERSION = 1

OP_HELLO = 0
OP_HELLO_ACK = 1
OP_PREDICT = 2
OP_PREDICT_ACK = 3
OP_TRAIN = 4
OP_TRAIN_ACK = 5
OP_CLOSE = 6

_PRELUDE = struct.Struct("<4sHH")


def _prelude(op: int) -> bytes:
    return _PRELUDE.pack(MAGIC, VERSION, op)


def encode_hello(dims) -> bytes:
    return _prelude(OP_HELLO) + struct.pack("<3I", *dims)


def encode_hello_ack() -> bytes:
    return _prelude(OP_HELLO_ACK)


def _batch_payload(batch: np.ndarray) -> bytes:
    chunks = [batch[i].astype("<f4").tobytes(order="F") for i in range(len(batch))]
    return b"".join(chunks)


def encode_predict(batch: np.ndarray) -> bytes:
    return _prelude(OP_PREDICT) + struct.pack("<I", len(batch)) + _batch_payload(batch)


def encode_predict_ack(batch: np.ndarray) -> bytes:
    return _prelude(OP_PREDICT_ACK) + struct.pack("<I", len(batch)) + _batch_payload(batch)


def encode_train(intensities: np.ndarray, labels: np.ndarray) -> bytes:
    if len(intensities) != len(labels):
        raise ValueError("intensities and labels disagree on patch count")
    parts = [_prelude(OP_TRAIN), struct.pack("<Q", len(intensities))]
    for i in range(len(intensities)):
        parts.append(intensities[i].astype("<f4").tobytes(order="F"))
        parts.append(labels[i].astype("<u1").tobytes(order="F"))
    return b"".join(parts)


def encode_train_ack(final_loss: float) -> bytes:
    return _prelude(OP_TRAIN_ACK) + struct.pack("<d", final_loss)


def encode_close() -> bytes:
    return _prelude(OP_CLOSE)


def read_exact(stream, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise PluginFailure(f"stream closed after {len(buf)} of {n} expected bytes")
        buf += chunk
    return buf


def read_prelude(stream) -> int:
    magic, version, op = _PRELUDE.unpack(read_exact(stream, _PRELUDE.size))
    if magic != MAGIC:
        raise PluginFailure(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise PluginFailure(f"unsupported protocol version {version}")
    return op


def read_batch(stream, size) -> np.ndarray:
    """Read the body of a PREDICT or PREDICT-ACK frame."""
    (count,) = struct.unpack("<I", read_exact(stream, 4))
    plen = int(np.prod(size))
    raw = read_exact(stream, count * plen * 4)
    flat = np.frombuffer(raw, dtype="<f4").reshape(count, plen)
    return flat.reshape(count, *size, order="F").astype(np.float32)


def read_train_body(stream, size) -> tuple[np.ndarray, np.ndarray]:
    (count,) = struct.unpack("<Q", read_exact(stream, 8))
    plen = int(np.prod(size))
    intensities = np.empty((count, *size), dtype=np.float32)
    labels = np.empty((count, *size), dtype=np.uint8)
    for i in range(count):
        raw = read_exact(stream, plen * 4)
        intensities[i] = np.frombuffer(raw, dtype="<f4").reshape(size, order="F")
        raw = read_exact(stream, plen)
        labels[i] = np.frombuffer(raw, dtype="<u1").reshape(size, order="F")
    return intensities, labels
