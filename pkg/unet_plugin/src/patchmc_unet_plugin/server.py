"""Protocol v1 server loop: HELLO / TRAIN / PREDICT / CLOSE over stdio.

Frame layout (little-endian): every frame starts with magic b"PMCP",
uint16 version (1) and uint16 op, followed by the op body. Patch payloads
flatten with axis 0 fastest. Protocol violations print a diagnostic to
stderr and exit nonzero; stdout carries nothing but reply frames.
"""

from __future__ import annotations

import argparse
import struct
import sys
from pathlib import Path

import numpy as np
import torch

from .net import UNetConfig, fit, make_net, predict, valid_depth

MAGIC = b"PMCP"
VERSION = 1
OP_HELLO, OP_HELLO_ACK, OP_PREDICT, OP_PREDICT_ACK, OP_TRAIN, OP_TRAIN_ACK, OP_CLOSE = range(7)
_PRELUDE = struct.Struct("<4sHH")


class ProtocolViolation(Exception):
    pass


def _read_exact(stream, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise ProtocolViolation(f"stream closed after {len(buf)} of {n} bytes")
        buf += chunk
    return buf


def _read_prelude(stream) -> int:
    magic, version, op = _PRELUDE.unpack(_read_exact(stream, _PRELUDE.size))
    if magic != MAGIC:
        raise ProtocolViolation(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolViolation(f"unsupported version {version}")
    return op


def _send(stream, blob: bytes) -> None:
    stream.write(blob)
    stream.flush()


def _reshape(flat: np.ndarray, dims) -> np.ndarray:
    return flat.reshape(dims, order="F")


class Session:
    def __init__(self, config: UNetConfig, state_path=None,
                 stdin=None, stdout=None):
        self.config = config
        self.state_path = Path(state_path) if state_path else None
        self.stdin = stdin if stdin is not None else sys.stdin.buffer
        self.stdout = stdout if stdout is not None else sys.stdout.buffer
        self.dims = None
        self.net = None

    def _ensure_net(self):
        if self.net is None:
            raise ProtocolViolation("received work before hello")

    def handle_hello(self):
        dims = struct.unpack("<3I", _read_exact(self.stdin, 12))
        self.dims = tuple(int(d) for d in dims)
        depth = valid_depth(self.dims, self.config.depth)
        if depth < self.config.depth:
            print(f"patchmc-unet-plugin: depth clamped to {depth} for dims {self.dims}",
                  file=sys.stderr)
        if self.state_path and self.state_path.exists():
            self._load_checkpoint()
        else:
            try:
                self.net = make_net(self.dims, self.config)
            except ValueError as exc:
                raise ProtocolViolation(str(exc)) from exc
        _send(self.stdout, _PRELUDE.pack(MAGIC, VERSION, OP_HELLO_ACK))

    def _load_checkpoint(self):
        # the checkpoint's architecture wins over command-line flags, so a
        # reload never hits a parameter-shape mismatch
        try:
            ckpt = torch.load(self.state_path, weights_only=True)
            arch = ckpt.get("arch", {})
            bc = int(arch.get("base_channels", self.config.base_channels))
            depth = int(arch.get("depth", self.config.depth))
            if (bc, depth) != (self.config.base_channels, self.config.depth):
                print(f"patchmc-unet-plugin: using checkpoint architecture "
                      f"(base_channels={bc}, depth={depth})", file=sys.stderr)
                self.config = UNetConfig(
                    base_channels=bc, depth=depth, lr=self.config.lr,
                    epochs=self.config.epochs, batch_size=self.config.batch_size,
                    seed=self.config.seed,
                )
            self.net = make_net(self.dims, self.config)
            self.net.load_state_dict(ckpt["state_dict"])
        except ProtocolViolation:
            raise
        except Exception as exc:  # torch.load raises many types; all mean "unusable"
            raise ProtocolViolation(f"cannot load state {self.state_path}: {exc}") from exc
        print(f"patchmc-unet-plugin: loaded weights from {self.state_path}", file=sys.stderr)

    def handle_predict(self):
        self._ensure_net()
        (count,) = struct.unpack("<I", _read_exact(self.stdin, 4))
        plen = int(np.prod(self.dims))
        raw = _read_exact(self.stdin, count * plen * 4)
        flat = np.frombuffer(raw, dtype="<f4").reshape(count, plen)
        batch = np.stack([_reshape(flat[i], self.dims) for i in range(count)]) \
            if count else np.empty((0, *self.dims), np.float32)
        probs = predict(self.net, batch) if count else batch
        payload = b"".join(probs[i].astype("<f4").tobytes(order="F") for i in range(count))
        _send(self.stdout, _PRELUDE.pack(MAGIC, VERSION, OP_PREDICT_ACK)
              + struct.pack("<I", count) + payload)

    def handle_train(self):
        self._ensure_net()
        (count,) = struct.unpack("<Q", _read_exact(self.stdin, 8))
        plen = int(np.prod(self.dims))
        intensities = np.empty((count, *self.dims), dtype=np.float32)
        labels = np.empty((count, *self.dims), dtype=np.uint8)
        for i in range(count):
            intensities[i] = _reshape(np.frombuffer(_read_exact(self.stdin, plen * 4), "<f4"),
                                      self.dims)
            labels[i] = _reshape(np.frombuffer(_read_exact(self.stdin, plen), "<u1"), self.dims)
        final_loss = fit(self.net, intensities, labels, self.config)
        if self.state_path:
            torch.save({
                "arch": {"base_channels": self.config.base_channels,
                         "depth": self.config.depth},
                "state_dict": self.net.state_dict(),
            }, self.state_path)
            print(f"patchmc-unet-plugin: saved weights to {self.state_path}", file=sys.stderr)
        _send(self.stdout, _PRELUDE.pack(MAGIC, VERSION, OP_TRAIN_ACK)
              + struct.pack("<d", final_loss))

    def serve(self) -> int:
        while True:
            try:
                op = _read_prelude(self.stdin)
                if op == OP_HELLO:
                    self.handle_hello()
                elif op == OP_PREDICT:
                    self.handle_predict()
                elif op == OP_TRAIN:
                    self.handle_train()
                elif op == OP_CLOSE:
                    return 0
                else:
                    raise ProtocolViolation(f"unexpected op {op}")
            except ProtocolViolation as exc:
                print(f"patchmc-unet-plugin: {exc}", file=sys.stderr)
                return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="patchmc-unet-plugin",
                                     description="3D U-Net classifier plugin (protocol v1)")
    parser.add_argument("--base-channels", type=int, default=8)
    parser.add_argument("--depth", type=int, default=2)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--batch-size", type=int, default=100)
    parser.add_argument("--state", type=str, default=None,
                        help="Persist/reload trained weights at this path.")
    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    config = UNetConfig(
        base_channels=args.base_channels,
        depth=args.depth,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    try:
        return Session(config, state_path=args.state).serve()
    except ProtocolViolation as exc:
        print(f"patchmc-unet-plugin: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
