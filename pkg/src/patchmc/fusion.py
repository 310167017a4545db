"""Vote fusion and MCMC-guided whole-volume segmentation.

Each sampled region adds a binarized prediction into a vote map W and a 1
into a coverage map K over its patch footprint (clipped at borders). The
ratio W/K is the coverage-normalized probability map: unevenly sampled
regions cannot out-vote sparsely covered ones. The binary mask thresholds
raw vote counts W at an integer f.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import PatchPrediction, predict_batch
from .errors import CenterOutOfBounds, NoVotes, SizeMismatch
from .mcmc import ChainConfig, SampleSet, SamplingTarget, run_chains
from .patches import _extract_block
from .registration import invert
from .volume import AffineTransform, Geometry, MaskVolume, Volume, resample


@dataclass(eq=False)
class VoteState:
    """Paired accumulators over one grid: w (votes) and k (coverage counts)."""

    geometry: Geometry
    w: np.ndarray
    k: np.ndarray
    regions_applied: int = 0

    @classmethod
    def new(cls, geometry: Geometry) -> "VoteState":
        return cls(
            geometry=geometry,
            w=np.zeros(geometry.dims, dtype=np.float64),
            k=np.zeros(geometry.dims, dtype=np.float64),
        )


def _footprint_slices(center, size, dims):
    src, dst = [], []
    for ax in range(3):
        start = int(center[ax]) - size[ax] // 2
        lo = max(start, 0)
        hi = min(start + size[ax], dims[ax])
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    return tuple(src), tuple(dst)


def accumulate(state: VoteState, region_center, prediction: PatchPrediction,
               binarize: float = 0.5, soft: bool = False) -> VoteState:
    """Add one region's prediction into the accumulators (in place).

    Votes are binarized at ``binarize`` before accumulation; pass soft=True
    to add raw probabilities instead.
    """
    probs = prediction.probabilities
    if probs.ndim != 3:
        raise SizeMismatch(f"prediction must be a 3D array, got shape {probs.shape}")
    dims = state.geometry.dims
    center = tuple(int(c) for c in region_center)
    if any(c < 0 or c >= d for c, d in zip(center, dims)):
        raise CenterOutOfBounds(f"region center {center} outside grid {dims}")
    src, dst = _footprint_slices(center, probs.shape, dims)
    clipped = probs[dst]
    if soft:
        state.w[src] += clipped
    else:
        state.w[src] += clipped >= binarize
    state.k[src] += 1.0
    state.regions_applied += 1
    return state


def finalize(state: VoteState, f: int) -> tuple[Volume, MaskVolume]:
    """Coverage-normalized probability map W/K and the mask {W >= f}."""
    if state.regions_applied < 1:
        raise NoVotes("no regions accumulated")
    if f < 1:
        raise ValueError(f"f must be a positive integer, got {f}")
    covered = state.k > 0
    prob = np.zeros(state.geometry.dims, dtype=np.float64)
    np.divide(state.w, state.k, out=prob, where=covered)
    mask = (state.w >= f).astype(np.uint8)
    return Volume(state.geometry, prob.astype(np.float32)), MaskVolume(state.geometry, mask)


@dataclass(frozen=True, eq=False)
class SegmentResult:
    mask: MaskVolume        # final segmentation on the input image grid
    mask_atlas: MaskVolume  # same segmentation in atlas space
    prob_map: Volume        # W/K in atlas space
    vote_state: VoteState
    samples: SampleSet


def segment(image: Volume, transform_to_atlas: AffineTransform, target: SamplingTarget,
            model, chain: ChainConfig, f: int, *, chains: int = 1,
            binarize: float = 0.5, batch_size: int = 256) -> SegmentResult:
    """Full inference pass for one image.

    Resamples the image into atlas space through ``transform_to_atlas`` (the
    transform register_affine returns for fixed=reference, moving=image),
    draws chain.n2 region centers from the target, classifies the patch at
    each center, fuses votes, and maps the thresholded mask back to the
    image grid with the inverse transform. Deterministic for a fixed seed.
    """
    atlas_geom = target.geometry
    image_atlas = resample(image, transform_to_atlas, atlas_geom, mode="trilinear")
    samples = run_chains(target, chain, chains=chains)

    patch_size = tuple(model.patch_size)
    state = VoteState.new(atlas_geom)
    centers = samples.centers
    zero = np.float32(0)
    for lo in range(0, len(centers), batch_size):
        sel = centers[lo:lo + batch_size]
        batch = np.empty((len(sel), *patch_size), dtype=np.float32)
        for i, c in enumerate(sel):
            batch[i] = _extract_block(image_atlas.data, c, patch_size, zero)
        probs = predict_batch(model, batch)
        for i, c in enumerate(sel):
            accumulate(state, c, PatchPrediction(probs[i]), binarize=binarize)

    prob_map, mask_atlas = finalize(state, f)
    back = invert(transform_to_atlas)
    mask = resample(mask_atlas, back, image.geometry, mode="nearest")
    return SegmentResult(
        mask=mask, mask_atlas=mask_atlas, prob_map=prob_map,
        vote_state=state, samples=samples,
    )


# ---------------------------------------------------------------------------
# vote-state persistence (two .pmv volumes sharing a stem)
# ---------------------------------------------------------------------------

def save_vote_state(state: VoteState, stem) -> tuple[str, str, str]:
    """Persist as <stem>.w.pmv, <stem>.k.pmv and <stem>.meta.json."""
    import json
    from pathlib import Path

    from .volume import write_volume

    stem = str(stem)
    w_path, k_path, meta_path = stem + ".w.pmv", stem + ".k.pmv", stem + ".meta.json"
    write_volume(Volume(state.geometry, state.w.astype(np.float32)), w_path)
    write_volume(Volume(state.geometry, state.k.astype(np.float32)), k_path)
    Path(meta_path).write_text(
        json.dumps({"regions_applied": state.regions_applied}, sort_keys=True) + "\n"
    )
    return w_path, k_path, meta_path


def load_vote_state(stem) -> VoteState:
    import json
    from pathlib import Path

    from .volume import read_volume

    stem = str(stem)
    for suffix in (".w.pmv", ".k.pmv", ".meta.json"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    w = read_volume(stem + ".w.pmv")
    k = read_volume(stem + ".k.pmv")
    meta_path = Path(stem + ".meta.json")
    if meta_path.exists():
        regions = int(json.loads(meta_path.read_text())["regions_applied"])
    else:
        regions = int(k.data.max())  # lower bound; enough for the NoVotes guard
    return VoteState(
        geometry=w.geometry,
        w=w.data.astype(np.float64),
        k=k.data.astype(np.float64),
        regions_applied=regions,
    )
