import numpy as np
import pytest

from patchmc.volume import Geometry, MaskVolume, Volume


def gaussian_blob_volume(dims=(32, 32, 32), seed=0, n_blobs=3, spacing=(1.0, 1.0, 1.0)):
    """Smooth asymmetric test volume: a sum of Gaussian blobs."""
    rng = np.random.default_rng(seed)
    dims = tuple(dims)
    grid = np.stack(
        np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij"), axis=-1
    )
    data = np.zeros(dims)
    for _ in range(n_blobs):
        center = rng.uniform(0.3, 0.7, size=3) * np.asarray(dims)
        width = rng.uniform(0.08, 0.2, size=3) * np.asarray(dims)
        amp = rng.uniform(50.0, 120.0)
        q = ((grid - center) / width) ** 2
        data += amp * np.exp(-0.5 * q.sum(axis=-1))
    return Volume(Geometry(dims, spacing), data.astype(np.float32))


def random_mask(dims=(16, 16, 16), seed=0, p=0.05):
    rng = np.random.default_rng(seed)
    data = (rng.random(dims) < p).astype(np.uint8)
    return MaskVolume(Geometry(dims), data)


@pytest.fixture
def smooth_volume():
    return gaussian_blob_volume()
