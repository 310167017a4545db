"""Affine registration of a moving image onto a fixed reference.

The transform convention matches :func:`patchmc.volume.resample`: the
estimated T maps fixed-grid physical points into the moving image, so
``resample(moving, T, fixed.geometry)`` aligns the moving image with the
fixed one. Optimization is plain first-order descent with backtracking
line search over the 12 affine parameters, run coarse-to-fine on a
block-mean pyramid. Gradients are the exact derivative of the
trilinearly interpolated metric.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InsufficientOverlap, SingularTransform
from .volume import AffineTransform, Geometry, Volume, sample_trilinear

MIN_OVERLAP_FRACTION = 0.05
_METRICS = ("ncc", "mse")


@dataclass(frozen=True)
class RegistrationConfig:
    metric: str = "ncc"
    pyramid_factors: tuple[int, ...] = (4, 2, 1)
    max_iters_per_level: int = 200
    step_init: float = 0.1
    converge_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.metric not in _METRICS:
            raise ValueError(f"metric must be one of {_METRICS}, got {self.metric!r}")
        f = tuple(int(x) for x in self.pyramid_factors)
        if not f or f[-1] != 1 or any(a <= b for a, b in zip(f, f[1:])) or any(x < 1 for x in f):
            raise ValueError("pyramid_factors must be strictly decreasing positive ints ending in 1")
        if self.step_init <= 0 or self.converge_tol <= 0:
            raise ValueError("step_init and converge_tol must be positive")
        object.__setattr__(self, "pyramid_factors", f)


@dataclass(frozen=True)
class RegistrationResult:
    transform: AffineTransform
    metric: str
    metric_initial: float
    metric_final: float
    converged: bool
    iterations: tuple[int, ...]


def invert(t: AffineTransform) -> AffineTransform:
    """Inverse map: x -> A^-1 (x - b)."""
    if abs(np.linalg.det(t.A)) <= 1e-12:
        raise SingularTransform("cannot invert a singular transform")
    A_inv = np.linalg.inv(t.A)
    return AffineTransform(A_inv, -A_inv @ t.b)


def compose(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """Composition x -> outer(inner(x))."""
    return AffineTransform(outer.A @ inner.A, outer.A @ inner.b + outer.b)


# ---------------------------------------------------------------------------
# metric evaluation
# ---------------------------------------------------------------------------

def _params_to_transform(p: np.ndarray, b_scale: float, center=None) -> AffineTransform:
    A = p[:9].reshape(3, 3)
    b = p[9:] * b_scale
    if center is not None:
        b = b + center - A @ center
    return AffineTransform(A, b)


def _transform_to_params(t: AffineTransform, b_scale: float, center=None) -> np.ndarray:
    b = t.b
    if center is not None:
        b = b - center + t.A @ center
    return np.concatenate([t.A.ravel(), b / b_scale])


class _MetricEval:
    """Evaluates one dissimilarity metric (and its parameter gradient) at one pyramid level.

    The map is parameterized about ``center`` (T(y) = A (y - c) + c + b),
    which decouples the matrix entries from the translation and keeps the
    descent well conditioned.
    """

    def __init__(self, fixed: Volume, moving: Volume, metric: str, b_scale: float, center=None):
        self.metric = metric
        self.b_scale = b_scale
        self.center = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
        self.pts = fixed.geometry.grid_physical() - self.center
        self.fvals = fixed.data.ravel().astype(np.float64)
        self.mdata = moving.data
        self.mgeom = moving.geometry
        self.hi = np.asarray(self.mgeom.dims, dtype=np.float64) - 1.0

    def _coords(self, p):
        mapped = self.pts @ p[:9].reshape(3, 3).T + (p[9:] * self.b_scale + self.center)
        return self.mgeom.physical_to_index(mapped)

    def _overlap(self, coords):
        return np.all((coords >= 0.0) & (coords <= self.hi), axis=1)

    def value(self, p) -> float:
        coords = self._coords(p)
        inside = self._overlap(coords)
        frac = inside.mean()
        if frac < MIN_OVERLAP_FRACTION:
            return np.inf
        m = sample_trilinear(self.mdata, coords[inside])
        f = self.fvals[inside]
        if self.metric == "mse":
            return float(np.mean((m - f) ** 2))
        fc = f - f.mean()
        mc = m - m.mean()
        s_ff = fc @ fc
        s_mm = mc @ mc
        if s_ff < 1e-12 or s_mm < 1e-12:
            return 1.0
        return float(1.0 - (fc @ mc) / np.sqrt(s_ff * s_mm))

    def value_and_grad(self, p):
        coords = self._coords(p)
        inside = self._overlap(coords)
        frac = inside.mean()
        if frac < MIN_OVERLAP_FRACTION:
            return np.inf, np.zeros(12)
        ci = coords[inside]
        y = self.pts[inside]
        f = self.fvals[inside]
        m, g = sample_trilinear(self.mdata, ci, gradient=True)
        n = len(f)
        if self.metric == "mse":
            r = m - f
            val = float(np.mean(r * r))
            u = (2.0 / n) * r
        else:
            fc = f - f.mean()
            mc = m - m.mean()
            s_ff = fc @ fc
            s_mm = mc @ mc
            if s_ff < 1e-12 or s_mm < 1e-12:
                return 1.0, np.zeros(12)
            s_fm = fc @ mc
            val = float(1.0 - s_fm / np.sqrt(s_ff * s_mm))
            u = -(fc - (s_fm / s_mm) * mc) / np.sqrt(s_ff * s_mm)
        # chain rule: index coords c_i = (sum_k A_ik y_k + b_i - o_i) / sp_i
        h = (u[:, None] * g) / np.asarray(self.mgeom.spacing)
        grad = np.empty(12)
        grad[:9] = (h.T @ y).ravel()
        grad[9:] = h.sum(axis=0) * self.b_scale
        return val, grad


def dissimilarity(fixed: Volume, moving: Volume, transform: AffineTransform, metric: str = "ncc") -> float:
    """mse or (1 - normalized cross-correlation) over the overlap region."""
    if metric not in _METRICS:
        raise ValueError(f"metric must be one of {_METRICS}, got {metric!r}")
    ev = _MetricEval(fixed, moving, metric, b_scale=1.0)
    coords = ev._coords(np.concatenate([transform.A.ravel(), transform.b]))
    inside = ev._overlap(coords)
    if inside.mean() < MIN_OVERLAP_FRACTION:
        raise InsufficientOverlap(
            f"only {inside.mean():.1%} of fixed voxels map inside the moving image"
        )
    m = sample_trilinear(ev.mdata, coords[inside])
    f = ev.fvals[inside]
    if metric == "mse":
        return float(np.mean((m - f) ** 2))
    fc = f - f.mean()
    mc = m - m.mean()
    s_ff = fc @ fc
    s_mm = mc @ mc
    if s_ff < 1e-12 or s_mm < 1e-12:
        raise InsufficientOverlap("an input has no intensity variation over the overlap")
    return float(1.0 - (fc @ mc) / np.sqrt(s_ff * s_mm))


# ---------------------------------------------------------------------------
# multi-resolution descent
# ---------------------------------------------------------------------------

def downsample(volume: Volume, factor: int) -> Volume:
    """Block-mean downsampling; geometry keeps physical placement of block centers."""
    if factor == 1:
        return volume
    nx, ny, nz = volume.geometry.dims
    cx, cy, cz = nx // factor, ny // factor, nz // factor
    data = volume.data[: cx * factor, : cy * factor, : cz * factor]
    data = data.reshape(cx, factor, cy, factor, cz, factor).mean(axis=(1, 3, 5))
    sp = tuple(s * factor for s in volume.geometry.spacing)
    org = tuple(
        o + (factor - 1) / 2.0 * s for o, s in zip(volume.geometry.origin, volume.geometry.spacing)
    )
    return Volume(Geometry((cx, cy, cz), sp, org), data.astype(np.float32))


def _center_of_mass(volume: Volume) -> np.ndarray:
    w = volume.data.astype(np.float64) - float(volume.data.min())
    total = w.sum()
    geom = volume.geometry
    if total <= 0:
        idx = (np.asarray(geom.dims) - 1) / 2.0
    else:
        idx = np.array([
            (w.sum(axis=(1, 2)) * np.arange(geom.dims[0])).sum() / total,
            (w.sum(axis=(0, 2)) * np.arange(geom.dims[1])).sum() / total,
            (w.sum(axis=(0, 1)) * np.arange(geom.dims[2])).sum() / total,
        ])
    return geom.index_to_physical(idx)


def _descend(ev: _MetricEval, p0: np.ndarray, max_iters: int, step_init: float, tol: float):
    """Steepest descent with Barzilai-Borwein steps and a non-monotone
    (window-max) backtracking line search; returns the best point seen."""
    val, grad = ev.value_and_grad(p0)
    if not np.isfinite(val):
        raise InsufficientOverlap("initial alignment leaves too little overlap")
    p = p0.copy()
    best_val, best_p = val, p.copy()
    history = [val]
    prev_p = prev_g = None
    iters = 0
    rel_change = np.inf
    for _ in range(max_iters):
        iters += 1
        gnorm = np.linalg.norm(grad)
        if gnorm < 1e-14:
            rel_change = 0.0
            break
        if prev_p is None:
            s = step_init / gnorm
        else:
            dp = p - prev_p
            dg = grad - prev_g
            denom = dp @ dg
            s = (dp @ dp) / denom if denom > 0 else step_init / gnorm
            if not np.isfinite(s) or s <= 0:
                s = step_init / gnorm
        reference = max(history[-8:])
        accepted = False
        v_try = np.inf
        for _ in range(50):
            v_try = ev.value(p - s * grad)
            if v_try < reference - 1e-15:
                accepted = True
                break
            s *= 0.5
            if s * gnorm < 1e-14:
                break
        if not accepted:
            rel_change = 0.0
            break
        rel_change = abs(val - v_try) / max(abs(val), 1e-30)
        prev_p, prev_g = p, grad
        p = p - s * grad
        val = v_try
        history.append(val)
        if val < best_val:
            best_val, best_p = val, p.copy()
        _, grad = ev.value_and_grad(p)
        if rel_change < tol:
            break
    return best_p, best_val, iters, rel_change


def register_affine(fixed: Volume, moving: Volume, config: RegistrationConfig | None = None) -> RegistrationResult:
    """Estimate T minimizing dissimilarity(fixed, moving o T) by multi-resolution descent.

    Starts from center-of-mass alignment. Never returns a transform whose
    full-resolution metric exceeds that of the initialization; if the finest
    level hits its iteration cap while still improving, the result carries
    ``converged=False`` instead of failing.
    """
    config = config or RegistrationConfig()
    if any(d < 8 for d in fixed.geometry.dims) or any(d < 8 for d in moving.geometry.dims):
        raise ValueError("register_affine needs at least 8 voxels per axis")
    if float(np.ptp(fixed.data)) < 1e-9 or float(np.ptp(moving.data)) < 1e-9:
        raise InsufficientOverlap("an input image is constant; no alignment signal")

    b_scale = 0.5 * max(
        d * s for d, s in zip(fixed.geometry.dims, fixed.geometry.spacing)
    )
    center = fixed.geometry.index_to_physical((np.asarray(fixed.geometry.dims) - 1) / 2.0)
    init = AffineTransform(np.eye(3), _center_of_mass(moving) - _center_of_mass(fixed))
    p = _transform_to_params(init, b_scale, center)

    iterations = []
    rel_change = np.inf
    hit_cap_at_finest = False
    for factor in config.pyramid_factors:
        fixed_l = downsample(fixed, factor)
        moving_l = downsample(moving, factor)
        if min(fixed_l.geometry.dims) < 4 or min(moving_l.geometry.dims) < 4:
            iterations.append(0)
            continue
        ev = _MetricEval(fixed_l, moving_l, config.metric, b_scale, center)
        p, _, iters, rel_change = _descend(
            ev, p, config.max_iters_per_level, config.step_init, config.converge_tol
        )
        iterations.append(iters)
        if factor == 1:
            hit_cap_at_finest = iters >= config.max_iters_per_level

    result_t = _params_to_transform(p, b_scale, center)
    metric_initial = dissimilarity(fixed, moving, init, config.metric)
    metric_final = dissimilarity(fixed, moving, result_t, config.metric)
    if metric_final > metric_initial:
        result_t, metric_final = init, metric_initial
    converged = not (hit_cap_at_finest and rel_change > 10.0 * config.converge_tol)
    return RegistrationResult(
        transform=result_t,
        metric=config.metric,
        metric_initial=metric_initial,
        metric_final=metric_final,
        converged=converged,
        iterations=tuple(iterations),
    )


# ---------------------------------------------------------------------------
# transform files
# ---------------------------------------------------------------------------

def _geometry_dict(geom: Geometry) -> dict:
    return {"dims": list(geom.dims), "spacing": list(geom.spacing), "origin": list(geom.origin)}


def save_transform(path, transform: AffineTransform, fixed_geometry: Geometry,
                   moving_geometry: Geometry, metric_final: float) -> None:
    doc = {
        "A": [float(x) for x in transform.A.ravel()],
        "b": [float(x) for x in transform.b],
        "fixed_geometry": _geometry_dict(fixed_geometry),
        "moving_geometry": _geometry_dict(moving_geometry),
        "metric_final": float(metric_final),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_transform(path) -> tuple[AffineTransform, dict]:
    doc = json.loads(Path(path).read_text())
    t = AffineTransform(np.array(doc["A"]).reshape(3, 3), np.array(doc["b"]))
    return t, doc
