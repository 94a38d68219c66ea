import numpy as np
import pytest

from voxmap.geometry import GridSpec, l2_normalize_voxels
from voxmap.rng import substream


DEFAULT_SPEC = GridSpec(dims=(32, 32, 16), voxel_size=0.5, origin=(-7.75, -7.75, 0.25))
SMALL_SPEC = GridSpec(dims=(16, 16, 8), voxel_size=0.5, origin=(-3.75, -3.75, 0.25))


@pytest.fixture
def spec():
    return DEFAULT_SPEC


@pytest.fixture
def small_spec():
    return SMALL_SPEC


def blob_grid(spec, rng, channels=8, n_blobs=8, margin=3.0, zero_floor=0.05):
    """Random smooth compactly-supported unit-norm feature grid.

    Sum of Gaussian blobs per channel, truncated to zero below ``zero_floor``
    of the per-voxel norm, then L2-normalized per voxel.
    """
    dims = np.array(spec.dims, dtype=np.float64)
    centers = spec.voxel_centers()
    data = np.zeros(spec.dims + (channels,), dtype=np.float64)
    for _ in range(n_blobs):
        pos_idx = rng.uniform(margin, dims - 1 - margin)
        pos = spec.memory_to_camera(pos_idx)
        sigma = rng.uniform(1.0, 2.5) * spec.voxel_size
        weights = rng.uniform(0.2, 1.0, size=channels)
        r2 = np.sum((centers - pos) ** 2, axis=-1)
        data += np.exp(-r2 / (2.0 * sigma**2))[..., None] * weights
    norms = np.linalg.norm(data, axis=-1)
    data[norms < zero_floor] = 0.0
    return l2_normalize_voxels(data.astype(np.float32))


def scalar_blob_grid(spec, rng, n_blobs=4, sigma_vox=(1.0, 2.0), margin=3.0):
    """Smooth non-negative single-channel grid (not normalized)."""
    dims = np.array(spec.dims, dtype=np.float64)
    centers = spec.voxel_centers()
    data = np.zeros(spec.dims + (1,), dtype=np.float64)
    for _ in range(n_blobs):
        pos_idx = rng.uniform(margin, dims - 1 - margin)
        pos = spec.memory_to_camera(pos_idx)
        sigma = rng.uniform(*sigma_vox) * spec.voxel_size
        r2 = np.sum((centers - pos) ** 2, axis=-1)
        data[..., 0] += np.exp(-r2 / (2.0 * sigma**2))
    return data.astype(np.float32)


@pytest.fixture
def rng():
    return substream(20260810, "tests")
