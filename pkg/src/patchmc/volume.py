"""Core 3D grid types, geometry, interpolation, and file I/O.

Conventions used everywhere in this package:

* a volume is a dense scalar grid with axis-aligned physical geometry;
  voxel index ``(i, j, k)`` sits at ``origin + (i, j, k) * spacing`` (mm);
* serialized payloads are laid out with axis 0 fastest (Fortran order);
* scalar volumes are float32, masks are uint8 with values in {0, 1}.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeader,
    IoFailure,
    SingularTransform,
    TruncatedData,
    UnsupportedFormat,
)

PMV_MAGIC = b"PATCHMC-VOL-0001"
_NIFTI_HDR_SIZE = 348
_NIFTI_DATA_OFFSET = 352

# NIfTI-1 datatype codes we accept on read.
_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    16: np.float32,
    64: np.float64,
    512: np.uint16,
}


@dataclass(frozen=True)
class Geometry:
    """Voxel grid shape plus its physical placement (axis-aligned)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise CorruptHeader(f"dims must be three integers >= 1, got {self.dims}")
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise CorruptHeader(f"spacing must be three positive reals, got {self.spacing}")
        if len(origin) != 3 or any(not np.isfinite(o) for o in origin):
            raise CorruptHeader(f"origin must be three finite reals, got {self.origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def index_to_physical(self, idx) -> np.ndarray:
        """Map voxel indices (..., 3) to physical mm coordinates."""
        return np.asarray(self.origin) + np.asarray(idx, dtype=np.float64) * np.asarray(self.spacing)

    def physical_to_index(self, pts) -> np.ndarray:
        """Map physical mm coordinates (..., 3) to fractional voxel indices."""
        return (np.asarray(pts, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def grid_physical(self) -> np.ndarray:
        """Physical coordinates of every voxel center, shape (voxel_count, 3), C index order."""
        ii, jj, kk = np.meshgrid(
            np.arange(self.dims[0]), np.arange(self.dims[1]), np.arange(self.dims[2]), indexing="ij"
        )
        idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
        return self.index_to_physical(idx)


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense scalar grid (float32) with geometry."""

    geometry: Geometry
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.shape != self.geometry.dims:
            raise CorruptHeader(
                f"data shape {arr.shape} does not match geometry dims {self.geometry.dims}"
            )
        if not np.all(np.isfinite(arr)):
            raise CorruptHeader("volume contains NaN or Inf values")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Binary grid (uint8, values in {0, 1}) with geometry."""

    geometry: Geometry
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.uint8)
        if arr.shape != self.geometry.dims:
            raise CorruptHeader(
                f"mask shape {arr.shape} does not match geometry dims {self.geometry.dims}"
            )
        if arr.size and arr.max() > 1:
            raise CorruptHeader("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class AffineTransform:
    """Physical-space map x -> A x + b (mm). Must be invertible."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64).reshape(3, 3)
        b = np.array(self.b, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(A)) <= 1e-12:
            raise SingularTransform(f"|det A| = {abs(np.linalg.det(A)):g} <= 1e-12")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts) -> np.ndarray:
        """Apply to points of shape (..., 3)."""
        return np.asarray(pts, dtype=np.float64) @ self.A.T + self.b


# ---------------------------------------------------------------------------
# trilinear sampling core
# ---------------------------------------------------------------------------

def _gather_corners(data: np.ndarray, base: np.ndarray):
    """Gather the 8 cell corners for each base index; out-of-bounds corners read 0."""
    nx, ny, nz = data.shape
    flat = data.ravel()
    ix0, iy0, iz0 = base[:, 0], base[:, 1], base[:, 2]
    corners = {}
    for dx in (0, 1):
        ix = ix0 + dx
        okx = (ix >= 0) & (ix < nx)
        for dy in (0, 1):
            iy = iy0 + dy
            oky = okx & (iy >= 0) & (iy < ny)
            for dz in (0, 1):
                iz = iz0 + dz
                ok = oky & (iz >= 0) & (iz < nz)
                lin = np.where(ok, (ix * ny + iy) * nz + iz, 0)
                v = flat.take(lin).astype(np.float64)
                if not ok.all():
                    v[~ok] = 0.0
                corners[dx, dy, dz] = v
    return corners


def sample_trilinear(data: np.ndarray, coords: np.ndarray, gradient: bool = False):
    """Trilinearly interpolate ``data`` at fractional index coords (N, 3).

    Corners outside the grid contribute 0, so points strictly outside read 0
    and border cells blend toward 0. With ``gradient=True`` also returns the
    exact gradient of the interpolant, in index units, shape (N, 3).
    """
    coords = np.asarray(coords, dtype=np.float64)
    base = np.floor(coords).astype(np.int64)
    d = coords - base
    c = _gather_corners(data, base)
    ux, wx = 1.0 - d[:, 0], d[:, 0]
    uy, wy = 1.0 - d[:, 1], d[:, 1]
    uz, wz = 1.0 - d[:, 2], d[:, 2]

    # reduce z, then y, then x; track partials alongside
    m00 = c[0, 0, 0] * uz + c[0, 0, 1] * wz
    m01 = c[0, 1, 0] * uz + c[0, 1, 1] * wz
    m10 = c[1, 0, 0] * uz + c[1, 0, 1] * wz
    m11 = c[1, 1, 0] * uz + c[1, 1, 1] * wz
    m0 = m00 * uy + m01 * wy
    m1 = m10 * uy + m11 * wy
    vals = m0 * ux + m1 * wx
    if not gradient:
        return vals

    dz00 = c[0, 0, 1] - c[0, 0, 0]
    dz01 = c[0, 1, 1] - c[0, 1, 0]
    dz10 = c[1, 0, 1] - c[1, 0, 0]
    dz11 = c[1, 1, 1] - c[1, 1, 0]
    dz0 = dz00 * uy + dz01 * wy
    dz1 = dz10 * uy + dz11 * wy
    gx = m1 - m0
    gy = (m01 - m00) * ux + (m11 - m10) * wx
    gz = dz0 * ux + dz1 * wx
    return vals, np.stack([gx, gy, gz], axis=1)


def sample_nearest(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Nearest-neighbour lookup at fractional index coords; outside reads 0."""
    coords = np.asarray(coords, dtype=np.float64)
    idx = np.rint(coords).astype(np.int64)
    nx, ny, nz = data.shape
    ok = (
        (idx[:, 0] >= 0) & (idx[:, 0] < nx)
        & (idx[:, 1] >= 0) & (idx[:, 1] < ny)
        & (idx[:, 2] >= 0) & (idx[:, 2] < nz)
    )
    lin = np.where(ok, (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2], 0)
    out = data.ravel().take(lin)
    out = np.where(ok, out, np.zeros((), dtype=data.dtype))
    return out


def resample(source, transform: AffineTransform, target_geometry: Geometry, mode: str = "trilinear"):
    """Pull ``source`` onto ``target_geometry``: output(y) = source(T(y)).

    Points mapping outside the source grid read 0. ``mode`` is "trilinear" or
    "nearest"; nearest on a MaskVolume returns a MaskVolume.
    """
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if abs(np.linalg.det(transform.A)) <= 1e-12:
        raise SingularTransform("resample transform is singular")
    pts = target_geometry.grid_physical()
    mapped = transform.apply(pts)
    coords = source.geometry.physical_to_index(mapped)
    if mode == "nearest":
        out = sample_nearest(source.data, coords).reshape(target_geometry.dims)
        if isinstance(source, MaskVolume):
            return MaskVolume(target_geometry, out)
        return Volume(target_geometry, out)
    vals = sample_trilinear(source.data, coords).reshape(target_geometry.dims)
    return Volume(target_geometry, vals.astype(np.float32))


# ---------------------------------------------------------------------------
# raw toolkit format (.pmv)
# ---------------------------------------------------------------------------

def _write_pmv(volume, fh):
    geom = volume.geometry
    is_mask = isinstance(volume, MaskVolume)
    fh.write(PMV_MAGIC)
    fh.write(struct.pack("<3I", *geom.dims))
    fh.write(struct.pack("<3d", *geom.spacing))
    fh.write(struct.pack("<3d", *geom.origin))
    fh.write(struct.pack("<B", 1 if is_mask else 0))
    payload = np.asfortranarray(volume.data)
    if is_mask:
        fh.write(payload.astype("<u1").tobytes(order="F"))
    else:
        fh.write(payload.astype("<f4").tobytes(order="F"))


def _read_pmv(buf: bytes, path):
    header_len = 16 + 12 + 24 + 24 + 1
    if len(buf) < header_len:
        raise TruncatedData(f"{path}: shorter than the .pmv header")
    dims = struct.unpack_from("<3I", buf, 16)
    spacing = struct.unpack_from("<3d", buf, 28)
    origin = struct.unpack_from("<3d", buf, 52)
    (kind,) = struct.unpack_from("<B", buf, 76)
    if kind not in (0, 1):
        raise CorruptHeader(f"{path}: unknown .pmv kind {kind}")
    geom = Geometry(dims, spacing, origin)
    n = geom.voxel_count
    itemsize = 1 if kind == 1 else 4
    if len(buf) < header_len + n * itemsize:
        raise TruncatedData(f"{path}: payload shorter than dims promise")
    raw = np.frombuffer(buf, dtype="<u1" if kind == 1 else "<f4", count=n, offset=header_len)
    arr = raw.reshape(dims, order="F")
    if kind == 1:
        return MaskVolume(geom, arr)
    return Volume(geom, arr)


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

def _nifti_header(geom: Geometry, datatype: int, bitpix: int) -> bytes:
    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)           # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, *geom.dims, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *geom.spacing, 0.0, 0.0, 0.0, 0.0)  # pixdim
    struct.pack_into("<f", hdr, 108, float(_NIFTI_DATA_OFFSET))  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)                        # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)                        # scl_inter
    hdr[148:148 + 7] = b"patchmc"                                # descrip (fixed, keeps output reproducible)
    struct.pack_into("<h", hdr, 252, 0)                          # qform_code
    struct.pack_into("<h", hdr, 254, 1)                          # sform_code
    sx, sy, sz = geom.spacing
    ox, oy, oz = geom.origin
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)          # srow_x
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)          # srow_y
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)          # srow_z
    hdr[344:348] = b"n+1\0"
    return bytes(hdr)


def _check_axis_aligned(rows, path):
    m = np.array(rows, dtype=np.float64)[:, :3]
    scale = np.abs(np.diag(m))
    off = np.abs(m - np.diag(np.diag(m)))
    if np.any(np.diag(m) <= 0) or np.any(off > 1e-3 * max(scale.max(), 1e-12)):
        raise UnsupportedFormat(f"{path}: oblique or flipped orientation is not supported")


def _read_nifti(buf: bytes, path):
    if len(buf) < _NIFTI_HDR_SIZE:
        raise TruncatedData(f"{path}: shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != _NIFTI_HDR_SIZE:
        raise UnsupportedFormat(f"{path}: not a little-endian NIfTI-1 file")
    magic = buf[344:348]
    if magic not in (b"n+1\0", b"ni1\0"):
        raise UnsupportedFormat(f"{path}: bad NIfTI magic {magic!r}")
    if magic == b"ni1\0":
        raise UnsupportedFormat(f"{path}: two-file .hdr/.img NIfTI is not supported")

    dim = struct.unpack_from("<8h", buf, 40)
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise CorruptHeader(f"{path}: dim[0] = {ndim} out of range")
    if ndim < 3 or any(d > 1 for d in dim[4:4 + max(0, ndim - 3)]):
        raise UnsupportedFormat(f"{path}: only 3D volumes are supported, dim = {dim}")
    dims = dim[1:4]
    if any(d < 1 for d in dims):
        raise CorruptHeader(f"{path}: non-positive dims {dims}")

    (datatype,) = struct.unpack_from("<h", buf, 70)
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedFormat(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")

    pixdim = struct.unpack_from("<8f", buf, 76)
    spacing = pixdim[1:4]
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise CorruptHeader(f"{path}: non-positive pixdim {spacing}")

    (vox_offset,) = struct.unpack_from("<f", buf, 108)
    slope, inter = struct.unpack_from("<2f", buf, 112)
    qform_code, sform_code = struct.unpack_from("<2h", buf, 252)

    origin = (0.0, 0.0, 0.0)
    if sform_code > 0:
        srow_x = struct.unpack_from("<4f", buf, 280)
        srow_y = struct.unpack_from("<4f", buf, 296)
        srow_z = struct.unpack_from("<4f", buf, 312)
        _check_axis_aligned([srow_x, srow_y, srow_z], path)
        origin = (srow_x[3], srow_y[3], srow_z[3])
    elif qform_code > 0:
        qb, qc, qd = struct.unpack_from("<3f", buf, 256)
        a2 = 1.0 - (qb * qb + qc * qc + qd * qd)
        qa = np.sqrt(max(a2, 0.0))
        rot = np.array([
            [qa * qa + qb * qb - qc * qc - qd * qd, 2 * (qb * qc - qa * qd), 2 * (qb * qd + qa * qc)],
            [2 * (qb * qc + qa * qd), qa * qa + qc * qc - qb * qb - qd * qd, 2 * (qc * qd - qa * qb)],
            [2 * (qb * qd - qa * qc), 2 * (qc * qd + qa * qb), qa * qa + qd * qd - qc * qc - qb * qb],
        ])
        if np.abs(rot - np.eye(3)).max() > 1e-3 or pixdim[0] < 0:
            raise UnsupportedFormat(f"{path}: oblique or flipped qform orientation is not supported")
        origin = struct.unpack_from("<3f", buf, 268)

    geom = Geometry(dims, spacing, origin)
    offset = int(vox_offset) if vox_offset >= _NIFTI_HDR_SIZE else _NIFTI_DATA_OFFSET
    n = geom.voxel_count
    need = offset + n * dtype.itemsize
    if len(buf) < need:
        raise TruncatedData(f"{path}: expected {need} bytes, file has {len(buf)}")
    raw = np.frombuffer(buf, dtype=dtype, count=n, offset=offset).reshape(dims, order="F")
    data = raw.astype(np.float64)
    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        data = data * slope + inter
    if not np.all(np.isfinite(data)):
        raise CorruptHeader(f"{path}: payload contains NaN or Inf")
    return Volume(geom, data.astype(np.float32))


# ---------------------------------------------------------------------------
# public file API
# ---------------------------------------------------------------------------

def read_volume(path):
    """Read a NIfTI-1 (.nii / .nii.gz) or raw .pmv file.

    Returns a Volume; .pmv files written from a mask come back as MaskVolume.
    """
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] == b"\x1f\x8b":
        buf = gzip.decompress(buf)
    if buf[:16] == PMV_MAGIC:
        return _read_pmv(buf, path)
    if len(buf) >= 4 and struct.unpack_from("<i", buf, 0)[0] == _NIFTI_HDR_SIZE:
        return _read_nifti(buf, path)
    raise UnsupportedFormat(f"{path}: unrecognized file magic")


def read_mask(path) -> MaskVolume:
    """Read a binary mask; values must be exactly 0 or 1."""
    vol = read_volume(path)
    if isinstance(vol, MaskVolume):
        return vol
    data = vol.data
    if not np.all((data == 0.0) | (data == 1.0)):
        raise CorruptHeader(f"{path}: mask file contains values other than 0 and 1")
    return MaskVolume(vol.geometry, data.astype(np.uint8))


def write_volume(volume, path) -> None:
    """Write a Volume (float32) or MaskVolume (uint8) to .pmv, .nii or .nii.gz."""
    path = Path(path)
    name = path.name.lower()
    try:
        if name.endswith(".pmv"):
            with open(path, "wb") as fh:
                _write_pmv(volume, fh)
            return
        if name.endswith(".nii") or name.endswith(".nii.gz"):
            if isinstance(volume, MaskVolume):
                header = _nifti_header(volume.geometry, datatype=2, bitpix=8)
                payload = volume.data.astype("<u1").tobytes(order="F")
            else:
                header = _nifti_header(volume.geometry, datatype=16, bitpix=32)
                payload = volume.data.astype("<f4").tobytes(order="F")
            blob = header + b"\0\0\0\0" + payload
            if name.endswith(".gz"):
                # mtime pinned so identical volumes produce identical bytes
                with open(path, "wb") as fh:
                    with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                        gz.write(blob)
            else:
                path.write_bytes(blob)
            return
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    raise UnsupportedFormat(f"{path}: cannot infer output format from extension")
