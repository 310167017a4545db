"""Vanilla 3D U-Net at toy scale: symmetric encoder-decoder with skip
connections, trained with binary cross-entropy on per-voxel labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass
class UNetConfig:
    base_channels: int = 8
    depth: int = 2          # number of down-sampling levels
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 100
    seed: int = 1


def _double_conv(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv3d(c_out, c_out, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
    )


class UNet3D(nn.Module):
    """Encoder halves the grid per level while doubling channels; the decoder
    mirrors it with transposed convolutions and skip concatenation. Output
    logits keep the input spatial shape."""

    def __init__(self, base_channels: int = 8, depth: int = 2):
        super().__init__()
        self.depth = depth
        enc_channels = [base_channels * (2 ** i) for i in range(depth + 1)]
        self.encoders = nn.ModuleList()
        c_in = 1
        for c in enc_channels[:-1]:
            self.encoders.append(_double_conv(c_in, c))
            c_in = c
        self.pool = nn.MaxPool3d(2)
        self.bottleneck = _double_conv(c_in, enc_channels[-1])
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        c = enc_channels[-1]
        for skip_c in reversed(enc_channels[:-1]):
            self.upconvs.append(nn.ConvTranspose3d(c, skip_c, kernel_size=2, stride=2))
            self.decoders.append(_double_conv(skip_c * 2, skip_c))
            c = skip_c
        self.head = nn.Conv3d(c, 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        return self.head(x)


def valid_depth(dims, requested: int) -> int:
    """Largest usable depth <= requested for which every dim divides by 2^depth."""
    depth = requested
    while depth > 0 and any(d % (2 ** depth) for d in dims):
        depth -= 1
    return depth


def make_net(dims, config: UNetConfig) -> UNet3D:
    torch.manual_seed(config.seed)
    depth = valid_depth(dims, config.depth)
    if depth == 0 and min(dims) > 1:
        raise ValueError(f"patch dims {tuple(dims)} not divisible by 2; cannot build the net")
    return UNet3D(base_channels=config.base_channels, depth=depth)


def fit(net: UNet3D, intensities: np.ndarray, labels: np.ndarray,
        config: UNetConfig, max_steps: int | None = None) -> float:
    """Train on (N, sx, sy, sz) patches; returns the final epoch's mean loss."""
    torch.manual_seed(config.seed + 1)
    x = torch.from_numpy(np.ascontiguousarray(intensities, dtype=np.float32)).unsqueeze(1)
    y = torch.from_numpy(np.ascontiguousarray(labels, dtype=np.float32)).unsqueeze(1)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    loss_fn = nn.BCEWithLogitsLoss()
    n = len(x)
    generator = torch.Generator().manual_seed(config.seed + 2)
    net.train()
    final = float("nan")
    steps = 0
    for _ in range(config.epochs):
        order = torch.randperm(n, generator=generator)
        epoch_losses = []
        for lo in range(0, n, config.batch_size):
            sel = order[lo:lo + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(net(x[sel]), y[sel])
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                return float(np.mean(epoch_losses))
        final = float(np.mean(epoch_losses))
    return final


@torch.no_grad()
def predict(net: UNet3D, intensities: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Per-voxel probabilities for (N, sx, sy, sz) patches."""
    net.eval()
    out = np.empty_like(intensities, dtype=np.float32)
    for lo in range(0, len(intensities), batch_size):
        chunk = np.ascontiguousarray(intensities[lo:lo + batch_size], dtype=np.float32)
        x = torch.from_numpy(chunk).unsqueeze(1)
        probs = torch.sigmoid(net(x)).squeeze(1)
        out[lo:lo + batch_size] = probs.numpy()
    return out
