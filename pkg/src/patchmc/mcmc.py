"""Metropolis-Hastings sampling of voxel locations on a 3D grid.

The proposal is an isotropic Gaussian random walk rounded to the voxel
lattice. Rounding keeps the kernel symmetric, so the acceptance
probability reduces to the density ratio min(1, p(proposal)/p(current)).
Proposals landing outside the grid or on zero density are rejected and
the chain stays put.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptySupport, ZeroCurrentDensity
from .volume import Geometry

RNG_NAME = "numpy-pcg64"


@dataclass(frozen=True, eq=False)
class SamplingTarget:
    """Unnormalized density over voxel indices."""

    geometry: Geometry
    density: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.density, dtype=np.float64)
        if arr.shape != self.geometry.dims:
            raise ValueError(f"density shape {arr.shape} != geometry dims {self.geometry.dims}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0:
            raise ValueError("density must be finite and non-negative")
        if not np.any(arr > 0):
            raise EmptySupport("sampling target has no positive-density voxel")
        object.__setattr__(self, "density", arr)

    @property
    def support_count(self) -> int:
        return int(np.count_nonzero(self.density))


@dataclass(frozen=True)
class ChainConfig:
    n1: int = 1000
    n2: int = 10000
    proposal_sigma: float = 4.0
    seed: int = 0
    init: object = "argmax"  # "argmax" or an (i, j, k) voxel triple

    def __post_init__(self):
        if self.n1 < 0 or self.n2 < 1:
            raise ValueError("need n1 >= 0 and n2 >= 1")
        if self.proposal_sigma <= 0:
            raise ValueError("proposal_sigma must be positive")


@dataclass(frozen=True, eq=False)
class SampleSet:
    centers: np.ndarray  # (n, 3) int64 voxel indices, chain order
    accept_rate: float
    seed: int
    rng: str = RNG_NAME


def acceptance_prob(target: SamplingTarget, current, proposal) -> float:
    """min(1, p(proposal)/p(current)) for the symmetric random-walk kernel."""
    cur = float(target.density[tuple(current)])
    if cur <= 0.0:
        raise ZeroCurrentDensity(f"chain sits on zero density at {tuple(current)}")
    prop = float(target.density[tuple(proposal)])
    return min(1.0, prop / cur)


def _initial_state(target: SamplingTarget, config: ChainConfig) -> tuple[int, int, int]:
    if config.init == "argmax":
        # ties resolve to the lowest linear index, axis 0 fastest
        flat = target.density.ravel(order="F")
        lin = int(np.argmax(flat))
        idx = np.unravel_index(lin, target.geometry.dims, order="F")
        return tuple(int(i) for i in idx)
    idx = tuple(int(i) for i in config.init)
    if target.density[idx] <= 0.0:
        raise ZeroCurrentDensity(f"initial state {idx} has zero density")
    return idx


def run_chain(target: SamplingTarget, config: ChainConfig) -> SampleSet:
    """Run one chain for n1 + n2 transitions and keep the last n2 states in order."""
    nx, ny, nz = target.geometry.dims
    dens = target.density.ravel()  # C order; linear index (i*ny + j)*nz + k
    ci, cj, ck = _initial_state(target, config)
    cur = dens[(ci * ny + cj) * nz + ck]

    steps = config.n1 + config.n2
    rng = np.random.default_rng(config.seed)
    offsets = np.rint(rng.normal(0.0, config.proposal_sigma, size=(steps, 3))).astype(np.int64)
    uniforms = rng.random(steps)

    centers = np.empty((config.n2, 3), dtype=np.int64)
    accepted = 0
    off_list = offsets.tolist()
    u_list = uniforms.tolist()
    n1 = config.n1
    for t in range(steps):
        o = off_list[t]
        pi, pj, pk = ci + o[0], cj + o[1], ck + o[2]
        if 0 <= pi < nx and 0 <= pj < ny and 0 <= pk < nz:
            prop = dens[(pi * ny + pj) * nz + pk]
            # u < min(1, prop/cur)  <=>  u * cur < prop (cur > 0 by invariant)
            if prop > 0.0 and u_list[t] * cur < prop:
                ci, cj, ck, cur = pi, pj, pk, prop
                accepted += 1
        if t >= n1:
            centers[t - n1, 0] = ci
            centers[t - n1, 1] = cj
            centers[t - n1, 2] = ck
    return SampleSet(centers=centers, accept_rate=accepted / steps, seed=config.seed)


def run_chains(target: SamplingTarget, config: ChainConfig, chains: int = 1) -> SampleSet:
    """Pool `chains` independent chains (seeds seed+0..chains-1).

    Chain c contributes n2 // chains samples, with the remainder going to
    chain 0; results concatenate in chain order, so output is deterministic.
    """
    if chains < 1:
        raise ValueError("chains must be >= 1")
    if chains == 1:
        return run_chain(target, config)
    base = config.n2 // chains
    if base < 1:
        raise ValueError(f"n2={config.n2} too small for {chains} chains")
    parts = []
    weights = []
    for c in range(chains):
        n2_c = base + (config.n2 - base * chains if c == 0 else 0)
        sub = ChainConfig(
            n1=config.n1, n2=n2_c, proposal_sigma=config.proposal_sigma,
            seed=config.seed + c, init=config.init,
        )
        got = run_chain(target, sub)
        parts.append(got.centers)
        weights.append((got.accept_rate, config.n1 + n2_c))
    total = sum(n for _, n in weights)
    rate = sum(r * n for r, n in weights) / total
    return SampleSet(centers=np.concatenate(parts, axis=0), accept_rate=rate, seed=config.seed)


def save_samples(samples: SampleSet, path) -> None:
    doc = {
        "seed": samples.seed,
        "rng": samples.rng,
        "accept_rate": samples.accept_rate,
        "centers": samples.centers.tolist(),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_samples(path) -> SampleSet:
    doc = json.loads(Path(path).read_text())
    return SampleSet(
        centers=np.asarray(doc["centers"], dtype=np.int64).reshape(-1, 3),
        accept_rate=float(doc["accept_rate"]),
        seed=int(doc["seed"]),
        rng=doc.get("rng", RNG_NAME),
    )
