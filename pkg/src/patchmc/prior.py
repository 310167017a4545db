"""Spatial prior from registered atlas masks, candidate region, sampling target.

The prior keeps two aligned maps: raw vote counts (how many atlases mark a
voxel) and the count map normalized to unit total mass. Thresholds are
applied to counts; the normalized map feeds the sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    AllZeroMasks,
    EmptyAtlasSet,
    EmptyRegion,
    GeometryMismatch,
    ThresholdOutOfRange,
)
from .mcmc import SamplingTarget
from .volume import Geometry, MaskVolume, Volume


@dataclass(frozen=True, eq=False)
class PriorMap:
    counts: Volume      # integer-valued votes in [0, m]
    normalized: Volume  # counts / sum(counts); sums to 1
    m: int              # number of atlases


def build_prior(masks) -> PriorMap:
    """Voxelwise sum of atlas masks plus its normalization to unit total."""
    masks = list(masks)
    if not masks:
        raise EmptyAtlasSet("need at least one atlas mask")
    geom = masks[0].geometry
    for i, m in enumerate(masks):
        if m.geometry != geom:
            raise GeometryMismatch(f"mask {i} geometry {m.geometry} != {geom}")
    counts = np.zeros(geom.dims, dtype=np.int64)
    for m in masks:
        counts += m.data
    total = counts.sum()
    if total == 0:
        raise AllZeroMasks("all atlas masks are empty; normalized prior undefined")
    normalized = counts.astype(np.float64) / float(total)
    return PriorMap(
        counts=Volume(geom, counts.astype(np.float32)),
        normalized=Volume(geom, normalized.astype(np.float32)),
        m=len(masks),
    )


def threshold_prior(prior: PriorMap, d: float) -> MaskVolume:
    """Voxels with at least d atlas votes."""
    if not (0 < d <= prior.m):
        raise ThresholdOutOfRange(f"d must satisfy 0 < d <= {prior.m}, got {d}")
    return MaskVolume(prior.counts.geometry, (prior.counts.data >= d).astype(np.uint8))


def dilate(mask: MaskVolume, k: int, element: str = "cube") -> MaskVolume:
    """Expand the foreground by k voxels.

    element "cube" grows by Chebyshev (L-inf) distance, "cross" by city-block
    (L1) distance.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if element not in ("cube", "cross"):
        raise ValueError(f"element must be 'cube' or 'cross', got {element!r}")
    if k == 0:
        return MaskVolume(mask.geometry, mask.data.copy())
    if element == "cube":
        out = ndimage.maximum_filter(mask.data, size=2 * k + 1, mode="constant", cval=0)
    else:
        structure = ndimage.generate_binary_structure(3, 1)
        out = ndimage.binary_dilation(mask.data, structure=structure, iterations=k)
    return MaskVolume(mask.geometry, out.astype(np.uint8))


def make_sampling_target(prior: PriorMap, region: MaskVolume, floor: float = 0.05) -> SamplingTarget:
    """Restrict the normalized prior to a region, with a uniform floor.

    Inside the region the target is max(P(x), floor * max P), so every region
    voxel keeps positive mass whenever floor > 0 (lets the sampler visit
    frontier voxels the atlases never marked); outside the region it is zero.
    """
    if not (0 <= floor < 1):
        raise ValueError(f"floor must lie in [0, 1), got {floor}")
    if region.geometry != prior.normalized.geometry:
        raise GeometryMismatch("region geometry differs from prior geometry")
    if not np.any(region.data):
        raise EmptyRegion("candidate region has no set voxel")
    p = prior.normalized.data.astype(np.float64)
    level = floor * float(p.max())
    density = np.where(region.data > 0, np.maximum(p, level), 0.0)
    return SamplingTarget(region.geometry, density)
