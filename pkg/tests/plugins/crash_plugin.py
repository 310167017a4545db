#!/usr/bin/env python3
"""Test fixture plugin: handshakes fine, then dies mid-batch on predict."""
import struct
import sys


def read_exact(n):
    buf = b""
    while len(buf) < n:
        chunk = sys.stdin.buffer.read(n - len(buf))
        if not chunk:
            sys.exit(2)
        buf += chunk
    return buf


def main():
    magic, version, op = struct.unpack("<4sHH", read_exact(8))
    read_exact(12)
    sys.stdout.buffer.write(struct.pack("<4sHH", b"PMCP", 1, 1))
    sys.stdout.buffer.flush()
    # read the predict prelude, then bail without answering
    read_exact(8)
    read_exact(4)
    sys.exit(1)


if __name__ == "__main__":
    main()
