"""Fixed-size 3D patch extraction and training-set assembly.

A patch of size s covers [center - s//2, center - s//2 + s) per axis, so for
even sizes the center voxel sits just right of the geometric middle.
Out-of-bounds voxels take the pad value, which lets candidate regions touch
volume borders.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    CenterOutOfBounds,
    EmptySampleSet,
    GeometryMismatch,
    TruncatedData,
    UnsupportedFormat,
)
from .mcmc import SampleSet

PMP_MAGIC = b"PATCHMC-PAT-0001"
DEFAULT_PATCH_SIZE = (16, 16, 16)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


@dataclass(frozen=True, eq=False)
class Patch:
    center: tuple[int, int, int]
    size: tuple[int, int, int]
    intensities: np.ndarray                 # float32, shape == size
    label_patch: Optional[np.ndarray] = None  # uint8 {0,1}, shape == size


def _extract_block(data: np.ndarray, center, size, pad_value):
    out = np.full(size, pad_value, dtype=data.dtype)
    src_lo, src_hi, dst_lo, dst_hi = [], [], [], []
    for ax in range(3):
        start = int(center[ax]) - size[ax] // 2
        lo = max(start, 0)
        hi = min(start + size[ax], data.shape[ax])
        if lo >= hi:
            return out  # footprint entirely off-grid on this axis
        src_lo.append(lo)
        src_hi.append(hi)
        dst_lo.append(lo - start)
        dst_hi.append(hi - start)
    out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
        data[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    return out


def extract_patch(volume, center, size=DEFAULT_PATCH_SIZE, pad_value: float = 0.0) -> Patch:
    """Cut one patch around a voxel center; outside voxels take pad_value."""
    size = tuple(int(s) for s in size)
    center = tuple(int(c) for c in center)
    dims = volume.geometry.dims
    if any(c < 0 or c >= d for c, d in zip(center, dims)):
        raise CenterOutOfBounds(f"center {center} outside volume dims {dims}")
    block = _extract_block(volume.data, center, size, np.asarray(pad_value, volume.data.dtype))
    return Patch(center=center, size=size, intensities=np.ascontiguousarray(block))


@dataclass(eq=False)
class PatchDataset:
    """Labeled patches plus provenance and the normalization applied to them.

    ``intensities`` are stored z-scored by the dataset-wide mean/std kept in
    ``normalization``; apply the same stats to any patch at inference time.
    """

    size: tuple[int, int, int]
    centers: np.ndarray      # (n, 3) int32
    image_ids: np.ndarray    # (n,) int32, index into the source image list
    intensities: np.ndarray  # (n, *size) float32, z-scored
    labels: np.ndarray       # (n, *size) uint8
    normalization: NormStats

    def __len__(self) -> int:
        return len(self.centers)

    def __getitem__(self, i: int) -> Patch:
        return Patch(
            center=tuple(int(c) for c in self.centers[i]),
            size=self.size,
            intensities=self.intensities[i],
            label_patch=self.labels[i],
        )

    @property
    def source_manifest(self) -> list[tuple[int, tuple[int, int, int]]]:
        return [
            (int(j), tuple(int(c) for c in ctr))
            for j, ctr in zip(self.image_ids, self.centers)
        ]


def build_training_set(images, samples: SampleSet, size=DEFAULT_PATCH_SIZE, seed: int = 0) -> PatchDataset:
    """For each sampled center, pick a source image uniformly and cut an
    intensity patch plus its label patch. Intensities are z-scored by the
    dataset-wide mean/std, recorded in the result."""
    images = list(images)
    if not images:
        raise ValueError("need at least one (image, mask) pair")
    if len(samples.centers) == 0:
        raise EmptySampleSet("sample set has no centers")
    size = tuple(int(s) for s in size)
    geom = images[0][0].geometry
    for i, (img, msk) in enumerate(images):
        if img.geometry != geom or msk.geometry != geom:
            raise GeometryMismatch(f"image pair {i} not on the common grid")

    n = len(samples.centers)
    rng = np.random.default_rng(seed)
    image_ids = rng.integers(0, len(images), size=n).astype(np.int32)

    intensities = np.empty((n, *size), dtype=np.float32)
    labels = np.empty((n, *size), dtype=np.uint8)
    dims = geom.dims
    zero_f = np.float32(0)
    zero_u = np.uint8(0)
    for i in range(n):
        c = samples.centers[i]
        if any(x < 0 or x >= d for x, d in zip(c, dims)):
            raise CenterOutOfBounds(f"sample center {tuple(c)} outside grid {dims}")
        img, msk = images[image_ids[i]]
        intensities[i] = _extract_block(img.data, c, size, zero_f)
        labels[i] = _extract_block(msk.data, c, size, zero_u)

    mean = float(intensities.mean(dtype=np.float64))
    std = float(intensities.std(dtype=np.float64))
    if std < 1e-12:
        std = 1.0
    intensities = ((intensities - mean) / std).astype(np.float32)
    return PatchDataset(
        size=size,
        centers=samples.centers.astype(np.int32),
        image_ids=image_ids,
        intensities=intensities,
        labels=labels,
        normalization=NormStats(mean=mean, std=std),
    )


# ---------------------------------------------------------------------------
# dataset file (.pmp)
# ---------------------------------------------------------------------------

def save_dataset(dataset: PatchDataset, path) -> None:
    n = len(dataset)
    with open(path, "wb") as fh:
        fh.write(PMP_MAGIC)
        fh.write(struct.pack("<Q3I", n, *dataset.size))
        fh.write(struct.pack("<2d", dataset.normalization.mean, dataset.normalization.std))
        for i in range(n):
            fh.write(dataset.centers[i].astype("<i4").tobytes())
            fh.write(dataset.intensities[i].astype("<f4").tobytes(order="F"))
            fh.write(dataset.labels[i].astype("<u1").tobytes(order="F"))


def load_dataset(path) -> PatchDataset:
    buf = Path(path).read_bytes()
    if buf[:16] != PMP_MAGIC:
        raise UnsupportedFormat(f"{path}: not a patch dataset file")
    n, sx, sy, sz = struct.unpack_from("<Q3I", buf, 16)
    mean, std = struct.unpack_from("<2d", buf, 36)
    size = (sx, sy, sz)
    plen = sx * sy * sz
    rec = 12 + 4 * plen + plen
    need = 52 + n * rec
    if len(buf) < need:
        raise TruncatedData(f"{path}: expected {need} bytes, got {len(buf)}")
    centers = np.empty((n, 3), dtype=np.int32)
    intensities = np.empty((n, sx, sy, sz), dtype=np.float32)
    labels = np.empty((n, sx, sy, sz), dtype=np.uint8)
    off = 52
    for i in range(n):
        centers[i] = np.frombuffer(buf, "<i4", 3, off)
        intensities[i] = np.frombuffer(buf, "<f4", plen, off + 12).reshape(size, order="F")
        labels[i] = np.frombuffer(buf, "<u1", plen, off + 12 + 4 * plen).reshape(size, order="F")
        off += rec
    return PatchDataset(
        size=size,
        centers=centers,
        image_ids=np.full(n, -1, dtype=np.int32),  # file format carries no provenance
        intensities=intensities,
        labels=labels,
        normalization=NormStats(mean=mean, std=std),
    )
