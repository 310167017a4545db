"""Per-voxel patch classifiers: a trainable logistic baseline plus the
subprocess plugin session for external models.

The baseline scores every voxel from six local features of the z-scored
patch (raw intensity, 3x3x3 mean and variance, |gradient| per axis) through
a logistic unit, trained with mini-batch SGD on binary cross-entropy. It
keeps the pipeline self-contained and exactly testable; heavier models plug
in over the wire protocol in :mod:`patchmc.protocol`.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import protocol
from .errors import (
    DivergedLoss,
    EmptyDataset,
    HandshakeMismatch,
    PluginFailure,
    SizeMismatch,
    SpawnFailure,
)
from .patches import NormStats, Patch, PatchDataset

FEATURE_SPEC = ("intensity", "mean3", "var3", "grad0_abs", "grad1_abs", "grad2_abs")


@dataclass(frozen=True, eq=False)
class PatchPrediction:
    probabilities: np.ndarray  # float32 in [0,1], shape == patch size


@dataclass(frozen=True, eq=False)
class BaselineModel:
    weights: np.ndarray          # (6,) float64, one per feature channel
    bias: float
    patch_size: tuple[int, int, int]
    norm: NormStats
    feature_spec: tuple[str, ...] = FEATURE_SPEC
    train_log: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 100
    lr: float = 1.0
    seed: int = 0


def featurize(batch: np.ndarray) -> np.ndarray:
    """Per-voxel feature channels for a batch of patches (B, sx, sy, sz) -> (B, ..., 6)."""
    x = np.asarray(batch, dtype=np.float64)
    mean3 = ndimage.uniform_filter(x, size=(1, 3, 3, 3), mode="nearest")
    sq3 = ndimage.uniform_filter(x * x, size=(1, 3, 3, 3), mode="nearest")
    var3 = np.maximum(sq3 - mean3 * mean3, 0.0)
    g0 = np.abs(np.gradient(x, axis=1))
    g1 = np.abs(np.gradient(x, axis=2))
    g2 = np.abs(np.gradient(x, axis=3))
    return np.stack([x, mean3, var3, g0, g1, g2], axis=-1)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_loss(z, y):
    # mean over voxels of softplus(z) - y*z, stable for large |z|
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def _forward(feats, weights, bias):
    return feats @ weights + bias


def train_baseline(dataset: PatchDataset, config: TrainConfig | None = None) -> BaselineModel:
    """Fit the logistic baseline on a labeled patch dataset.

    Deterministic for a fixed seed. Guarantees final training loss <= the
    loss of the zero-initialized model; with a single full-gradient batch the
    per-epoch loss sequence is non-increasing (backtracking on the step).
    """
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise EmptyDataset("training dataset has no patches")
    n = len(dataset)
    rng = np.random.default_rng(config.seed)
    w = np.zeros(len(FEATURE_SPEC))
    b = 0.0

    def epoch_loss(w, b, bs=256):
        total = 0.0
        count = 0
        for lo in range(0, n, bs):
            feats = featurize(dataset.intensities[lo:lo + bs]).reshape(-1, len(FEATURE_SPEC))
            y = dataset.labels[lo:lo + bs].reshape(-1).astype(np.float64)
            z = _forward(feats.astype(np.float64), w, b)
            total += (np.logaddexp(0.0, z) - y * z).sum()
            count += len(y)
        return total / count

    initial_loss = epoch_loss(w, b)
    best = (initial_loss, w.copy(), b)
    full_batch = config.batch_size >= n
    lr = config.lr
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            sel = order[lo:lo + config.batch_size]
            feats = featurize(dataset.intensities[sel]).reshape(-1, len(FEATURE_SPEC))
            y = dataset.labels[sel].reshape(-1).astype(np.float64)
            z = _forward(feats, w, b)
            resid = _sigmoid(z) - y
            gw = feats.T @ resid / len(y)
            gb = resid.mean()
            if full_batch:
                # convex objective: backtrack until the step improves
                cur = _bce_loss(z, y)
                step = lr
                for _ in range(30):
                    z_try = _forward(feats, w - step * gw, b - step * gb)
                    if _bce_loss(z_try, y) <= cur:
                        break
                    step *= 0.5
                w -= step * gw
                b -= step * gb
            else:
                w -= lr * gw
                b -= lr * gb
        loss = epoch_loss(w, b)
        if not np.isfinite(loss):
            raise DivergedLoss(f"training loss became {loss}")
        if loss < best[0]:
            best = (loss, w.copy(), b)
    final_loss, w, b = best
    return BaselineModel(
        weights=w,
        bias=float(b),
        patch_size=dataset.size,
        norm=dataset.normalization,
        train_log={"initial_loss": initial_loss, "final_loss": final_loss, "epochs": config.epochs},
    )


def predict_batch(model, batch_raw: np.ndarray) -> np.ndarray:
    """Per-voxel probabilities for a batch of raw (un-normalized) patches."""
    if isinstance(model, PluginHandle):
        return model.predict_batch_raw(batch_raw)
    if batch_raw.shape[1:] != model.patch_size:
        raise SizeMismatch(f"patch shape {batch_raw.shape[1:]} != model size {model.patch_size}")
    z_scored = (batch_raw.astype(np.float64) - model.norm.mean) / model.norm.std
    feats = featurize(z_scored)
    z = feats @ model.weights + model.bias
    return _sigmoid(z).astype(np.float32)


def predict(model, patch: Patch) -> PatchPrediction:
    """Per-voxel foreground probabilities for one raw patch."""
    probs = predict_batch(model, patch.intensities[None])
    return PatchPrediction(probabilities=probs[0])


# ---------------------------------------------------------------------------
# model files (.pmm)
# ---------------------------------------------------------------------------

def save_model(model, path, backend: str = "baseline", plugin_command: Optional[list] = None) -> None:
    doc = {
        "format": "pmm-1",
        "backend": backend,
        "feature_spec": list(model.feature_spec) if backend == "baseline" else None,
        "weights": [float(x) for x in model.weights] if backend == "baseline" else None,
        "bias": float(model.bias) if backend == "baseline" else None,
        "patch_size": list(model.patch_size),
        "norm": {"mean": model.norm.mean, "std": model.norm.std},
        "train_log": model.train_log,
        "plugin_command": plugin_command,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_model(path) -> BaselineModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "pmm-1":
        raise ValueError(f"{path}: not a pmm-1 model file")
    norm = NormStats(mean=float(doc["norm"]["mean"]), std=float(doc["norm"]["std"]))
    size = tuple(int(x) for x in doc["patch_size"])
    if doc["backend"] != "baseline":
        # plugin-backed model: only size/norm/log are meaningful
        return BaselineModel(
            weights=np.zeros(len(FEATURE_SPEC)), bias=0.0, patch_size=size, norm=norm,
            train_log=doc.get("train_log", {}),
        )
    return BaselineModel(
        weights=np.asarray(doc["weights"], dtype=np.float64),
        bias=float(doc["bias"]),
        patch_size=size,
        norm=norm,
        feature_spec=tuple(doc["feature_spec"]),
        train_log=doc.get("train_log", {}),
    )


# ---------------------------------------------------------------------------
# plugin sessions
# ---------------------------------------------------------------------------

class PluginHandle:
    """One subprocess speaking protocol v1; request/response, single owner.

    ``norm`` must be set (directly, via plugin_session, or by train()) before
    raw patches can be normalized for PREDICT frames.
    """

    def __init__(self, proc: subprocess.Popen, patch_size, norm: Optional[NormStats] = None):
        self._proc = proc
        self.patch_size = tuple(int(s) for s in patch_size)
        self.norm = norm
        self._closed = False

    def _send(self, blob: bytes) -> None:
        try:
            self._proc.stdin.write(blob)
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise PluginFailure(f"plugin pipe broke: {exc}") from exc

    def _expect(self, op: int) -> None:
        got = protocol.read_prelude(self._proc.stdout)
        if got != op:
            raise PluginFailure(f"expected op {op}, plugin answered op {got}")

    def predict_batch_normalized(self, batch: np.ndarray) -> np.ndarray:
        if batch.shape[1:] != self.patch_size:
            raise SizeMismatch(f"batch shape {batch.shape[1:]} != session size {self.patch_size}")
        self._send(protocol.encode_predict(batch))
        try:
            self._expect(protocol.OP_PREDICT_ACK)
            probs = protocol.read_batch(self._proc.stdout, self.patch_size)
        except PluginFailure as exc:
            rc = self._proc.poll()
            raise PluginFailure(f"{exc} (plugin exit code {rc})") from exc
        if len(probs) != len(batch):
            raise PluginFailure(f"sent {len(batch)} patches, got {len(probs)} predictions")
        return probs

    def predict_batch_raw(self, batch_raw: np.ndarray) -> np.ndarray:
        if self.norm is None:
            raise PluginFailure("plugin session has no normalization statistics")
        z = (batch_raw.astype(np.float64) - self.norm.mean) / self.norm.std
        return self.predict_batch_normalized(z.astype(np.float32))

    def train(self, dataset: PatchDataset) -> float:
        if dataset.size != self.patch_size:
            raise SizeMismatch(f"dataset size {dataset.size} != session size {self.patch_size}")
        self.norm = dataset.normalization
        self._send(protocol.encode_train(dataset.intensities, dataset.labels))
        self._expect(protocol.OP_TRAIN_ACK)
        raw = protocol.read_exact(self._proc.stdout, 8)
        return float(np.frombuffer(raw, "<f8")[0])

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._send(protocol.encode_close())
            self._proc.stdin.close()
            self._proc.wait(timeout=30)
        except (PluginFailure, subprocess.TimeoutExpired):
            self._proc.kill()
            self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def plugin_session(command: Sequence[str], patch_size, norm: Optional[NormStats] = None) -> PluginHandle:
    """Spawn a plugin process and perform the hello handshake."""
    patch_size = tuple(int(s) for s in patch_size)
    try:
        proc = subprocess.Popen(
            list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
        )
    except (FileNotFoundError, PermissionError, OSError) as exc:
        raise SpawnFailure(f"cannot start plugin {command!r}: {exc}") from exc
    handle = PluginHandle(proc, patch_size, norm=norm)
    try:
        handle._send(protocol.encode_hello(patch_size))
        op = protocol.read_prelude(proc.stdout)
    except PluginFailure as exc:
        proc.kill()
        proc.wait()
        raise HandshakeMismatch(f"plugin handshake failed: {exc}") from exc
    if op != protocol.OP_HELLO_ACK:
        proc.kill()
        proc.wait()
        raise HandshakeMismatch(f"expected hello-ack, got op {op}")
    return handle
