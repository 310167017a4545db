import struct
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

GOLDEN = Path(__file__).parents[2] / "tests" / "golden"
PLUGIN = [sys.executable, "-m", "patchmc_unet_plugin.server"]

MAGIC = b"PMCP"
PRELUDE = struct.Struct("<4sHH")


def run_plugin(frames: bytes, extra_args=(), timeout=120):
    return subprocess.run(PLUGIN + list(extra_args), input=frames,
                          capture_output=True, timeout=timeout)


class AckReader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n):
        out = self.blob[self.off:self.off + n]
        assert len(out) == n, f"truncated reply: wanted {n}, got {len(out)}"
        self.off += n
        return out

    def prelude(self):
        magic, version, op = PRELUDE.unpack(self.take(8))
        assert magic == MAGIC and version == 1
        return op


def test_hello_ack_is_byte_exact_golden():
    proc = run_plugin((GOLDEN / "hello.bin").read_bytes() + (GOLDEN / "close.bin").read_bytes(),
                      extra_args=("--seed", "1"))
    assert proc.returncode == 0, proc.stderr.decode()
    assert proc.stdout == (GOLDEN / "hello_ack.bin").read_bytes()


def test_golden_predict_stream():
    frames = (
        (GOLDEN / "hello.bin").read_bytes()
        + (GOLDEN / "predict.bin").read_bytes()
        + (GOLDEN / "close.bin").read_bytes()
    )
    proc = run_plugin(frames, extra_args=("--seed", "1"))
    assert proc.returncode == 0, proc.stderr.decode()
    r = AckReader(proc.stdout)
    assert r.prelude() == 1  # hello-ack
    assert r.prelude() == 3  # predict-ack
    (count,) = struct.unpack("<I", r.take(4))
    assert count == 10
    payload = np.frombuffer(r.take(count * 64 * 4), dtype="<f4")
    assert np.all(payload >= 0.0) and np.all(payload <= 1.0)
    assert r.off == len(proc.stdout)  # nothing extra on stdout

    # determinism: identical stream and seed reproduce identical bytes
    again = run_plugin(frames, extra_args=("--seed", "1"))
    assert again.stdout == proc.stdout


def test_golden_train_stream():
    frames = (
        (GOLDEN / "hello.bin").read_bytes()
        + (GOLDEN / "train.bin").read_bytes()
        + (GOLDEN / "predict.bin").read_bytes()
        + (GOLDEN / "close.bin").read_bytes()
    )
    proc = run_plugin(frames, extra_args=("--seed", "1", "--epochs", "2", "--batch-size", "5"))
    assert proc.returncode == 0, proc.stderr.decode()
    r = AckReader(proc.stdout)
    assert r.prelude() == 1
    assert r.prelude() == 5  # train-ack
    (loss,) = struct.unpack("<d", r.take(8))
    assert np.isfinite(loss) and loss > 0
    assert r.prelude() == 3
    (count,) = struct.unpack("<I", r.take(4))
    assert count == 10


def test_state_persists_across_sessions(tmp_path):
    state = tmp_path / "net.pt"
    train_frames = (
        (GOLDEN / "hello.bin").read_bytes()
        + (GOLDEN / "train.bin").read_bytes()
        + (GOLDEN / "close.bin").read_bytes()
    )
    proc = run_plugin(train_frames, extra_args=("--seed", "1", "--epochs", "2",
                                                "--batch-size", "5", "--state", str(state)))
    assert proc.returncode == 0, proc.stderr.decode()
    assert state.exists()

    predict_frames = (
        (GOLDEN / "hello.bin").read_bytes()
        + (GOLDEN / "predict.bin").read_bytes()
        + (GOLDEN / "close.bin").read_bytes()
    )
    with_state = run_plugin(predict_frames, extra_args=("--seed", "1", "--state", str(state)))
    fresh = run_plugin(predict_frames, extra_args=("--seed", "1"))
    assert with_state.returncode == 0
    # the loaded weights must actually change the predictions
    assert with_state.stdout != fresh.stdout


def test_state_reload_survives_mismatched_flags(tmp_path):
    # the checkpoint records its architecture; reloading with different
    # command-line sizing must use the stored one instead of crashing
    state = tmp_path / "net.pt"
    train_frames = (
        (GOLDEN / "hello.bin").read_bytes()
        + (GOLDEN / "train.bin").read_bytes()
        + (GOLDEN / "close.bin").read_bytes()
    )
    proc = run_plugin(train_frames, extra_args=("--seed", "1", "--epochs", "1",
                                                "--batch-size", "5", "--base-channels", "4",
                                                "--state", str(state)))
    assert proc.returncode == 0, proc.stderr.decode()

    predict_frames = (
        (GOLDEN / "hello.bin").read_bytes()
        + (GOLDEN / "predict.bin").read_bytes()
        + (GOLDEN / "close.bin").read_bytes()
    )
    # note: no --base-channels here; defaults disagree with the checkpoint
    proc = run_plugin(predict_frames, extra_args=("--seed", "1", "--state", str(state)))
    assert proc.returncode == 0, proc.stderr.decode()
    assert b"checkpoint architecture" in proc.stderr
    r = AckReader(proc.stdout)
    assert r.prelude() == 1
    assert r.prelude() == 3


def test_corrupt_state_fails_cleanly(tmp_path):
    state = tmp_path / "net.pt"
    state.write_bytes(b"not a checkpoint")
    frames = (GOLDEN / "hello.bin").read_bytes() + (GOLDEN / "close.bin").read_bytes()
    proc = run_plugin(frames, extra_args=("--state", str(state)))
    assert proc.returncode != 0
    assert b"cannot load state" in proc.stderr


def test_protocol_violation_exits_nonzero():
    proc = run_plugin(b"JUNKJUNKJUNK")
    assert proc.returncode != 0
    assert b"magic" in proc.stderr


def test_work_before_hello_rejected():
    proc = run_plugin((GOLDEN / "predict.bin").read_bytes())
    assert proc.returncode != 0
    assert proc.stderr


def test_odd_dims_rejected():
    hello = PRELUDE.pack(MAGIC, 1, 0) + struct.pack("<3I", 5, 5, 5)
    proc = run_plugin(hello)
    assert proc.returncode != 0
