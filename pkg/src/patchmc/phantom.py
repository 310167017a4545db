"""Synthetic atlas generation: affinely perturbed ellipsoid "organs" with
exact analytic masks, for desk-scale pipeline validation."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .volume import Geometry, MaskVolume, Volume, write_volume

ORGAN_INTENSITY = 100.0
_BASE_RADII = (0.28, 0.21, 0.15)  # semi-axes as a fraction of each dim


def _rotation(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def ellipsoid_mask(dims, center, radii, rotation) -> np.ndarray:
    """Exact indicator of a rotated ellipsoid on the voxel grid."""
    grid = np.stack(
        np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij"),
        axis=-1,
    )
    rel = (grid - np.asarray(center)) @ rotation  # rotation.T applied to offsets
    q = (rel / np.asarray(radii)) ** 2
    return (q.sum(axis=-1) <= 1.0).astype(np.uint8)


def make_phantom(count: int, dims=(64, 64, 64), noise_sigma: float = 4.0,
                 seed: int = 0, out_dir=None) -> dict:
    """Generate `count` phantom cases and write them under out_dir.

    Each case holds one ellipsoid organ at intensity +100 over a zero
    background with additive Gaussian noise, plus the exact analytic mask.
    The ellipsoid pose (rotation, per-axis scale, translation) varies per
    case; everything is deterministic for a fixed seed.
    """
    dims = tuple(int(d) for d in (dims if np.ndim(dims) else (dims,) * 3))
    out_dir = Path(out_dir) if out_dir is not None else Path.cwd()
    out_dir.mkdir(parents=True, exist_ok=True)
    geom = Geometry(dims)
    rng = np.random.default_rng(seed)
    base_center = np.asarray(dims, dtype=np.float64) / 2.0
    base_radii = np.asarray(_BASE_RADII) * np.asarray(dims)

    cases = []
    for i in range(count):
        angles = rng.uniform(-0.12, 0.12, size=3)
        scales = rng.uniform(0.9, 1.1, size=3)
        shift = rng.uniform(-3.0, 3.0, size=3)
        rot = _rotation(angles)
        mask_arr = ellipsoid_mask(dims, base_center + shift, base_radii * scales, rot)
        noise = rng.normal(0.0, noise_sigma, size=dims) if noise_sigma > 0 else 0.0
        image_arr = ORGAN_INTENSITY * mask_arr.astype(np.float64) + noise

        image_path = out_dir / f"image_{i:03d}.nii.gz"
        mask_path = out_dir / f"mask_{i:03d}.nii.gz"
        write_volume(Volume(geom, image_arr.astype(np.float32)), image_path)
        write_volume(MaskVolume(geom, mask_arr), mask_path)
        cases.append({"id": f"case_{i:03d}", "image": image_path.name, "mask": mask_path.name})

    manifest = {
        "seed": seed,
        "dims": list(dims),
        "noise_sigma": noise_sigma,
        "cases": cases,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
