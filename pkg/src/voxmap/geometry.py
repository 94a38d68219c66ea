"""Rigid transforms, pinhole cameras, and dense voxel-grid resampling.

Conventions shared by every module in the package:

* Camera frame: x right, y down, z forward, in meters.
* Voxel grids are C-contiguous float32 arrays of shape (w, h, d, c).  Voxel
  index (i, j, k) has its center at ``origin + voxel_size * (i, j, k)`` in
  the camera coordinates of the grid's reference frame, so the flat memory
  layout is ``((i*h + j)*d + k)*c + ch``.
* Image coordinates: u runs along columns (x), v along rows (y); pixel
  centers sit at integer (u, v).
* Samples outside the grid are zero (empty space), never clamped.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class NonPositiveDepth(ValueError):
    """Projection requested for a point at or behind the camera plane."""


class DimMismatch(ValueError):
    """Grid shapes disagree with each other or with the grid spec."""


_ORTHO_TOL = 1e-9
_REORTHO_DRIFT = 1e-12
# Fractional coordinates this close to the lattice sample the stored value
# exactly, so integer-coordinate warps are bit-preserving.
_SNAP = 1e-6


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(rvec) -> np.ndarray:
    """Rodrigues formula; rotation vector in radians (axis * angle)."""
    rvec = np.asarray(rvec, dtype=np.float64).reshape(3)
    angle = float(np.linalg.norm(rvec))
    if angle < 1e-12:
        k = _skew(rvec)
        return np.eye(3) + k + 0.5 * (k @ k)
    k = _skew(rvec / angle)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(rotation, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def geodesic_angle(rot_a: np.ndarray, rot_b: np.ndarray) -> float:
    """Angle in radians of the relative rotation between two matrices."""
    cos = 0.5 * (np.trace(np.asarray(rot_a) @ np.asarray(rot_b).T) - 1.0)
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element applied as ``p -> rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        tra = np.array(self.translation, dtype=np.float64).reshape(3)
        rot.setflags(write=False)
        tra.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)
        drift = float(np.abs(rot.T @ rot - np.eye(3)).max())
        if drift > _ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (drift {drift:.3e})")
        if abs(float(np.linalg.det(rot)) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotvec_to_matrix(rvec), np.asarray(translation, dtype=np.float64))

    @classmethod
    def rotating_about(cls, rotation: np.ndarray, center) -> "RigidTransform":
        """Rotation about an arbitrary center point: x -> R (x - c) + c."""
        center = np.asarray(center, dtype=np.float64).reshape(3)
        rotation = np.asarray(rotation, dtype=np.float64)
        return cls(rotation, center - rotation @ center)

    @classmethod
    def from_row_major_3x4(cls, values) -> "RigidTransform":
        m = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    def to_row_major_3x4(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1).reshape(12)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rot_t = self.rotation.T
        return RigidTransform(rot_t, -(rot_t @ self.translation))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_identity(self, tol: float = 0.0) -> bool:
        return (
            np.abs(self.rotation - np.eye(3)).max() <= tol
            and np.abs(self.translation).max() <= tol
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    rot = a.rotation @ b.rotation
    if np.abs(rot.T @ rot - np.eye(3)).max() > _REORTHO_DRIFT:
        rot = orthonormalize(rot)
    return RigidTransform(rot, a.rotation @ b.translation + a.translation)


@dataclass(frozen=True)
class PinholeCamera:
    """Intrinsics in pixels; no distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError("focal lengths must be positive")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def ray_directions(self) -> np.ndarray:
        """(height, width, 3) camera-frame directions, z component 1."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        return np.stack(
            [(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)],
            axis=-1,
        )


def project(camera: PinholeCamera, points):
    """Pinhole projection of camera-frame points to (u, v, depth).

    Raises NonPositiveDepth if any point has z <= 1e-6.
    """
    pts = np.asarray(points, dtype=np.float64)
    z = pts[..., 2]
    if np.any(z <= 1e-6):
        raise NonPositiveDepth("point at or behind the camera plane")
    u = camera.fx * pts[..., 0] / z + camera.cx
    v = camera.fy * pts[..., 1] / z + camera.cy
    return u, v, z


@dataclass(frozen=True)
class GridSpec:
    """Placement of a (w, h, d) voxel lattice in camera coordinates."""

    dims: tuple[int, int, int]
    voxel_size: float
    origin: tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        origin = tuple(float(x) for x in self.origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", origin)
        if len(dims) != 3 or any(n < 1 for n in dims):
            raise ValueError("dims must be three integers >= 1")
        if not self.voxel_size > 0.0:
            raise ValueError("voxel_size must be positive")

    @property
    def origin_vec(self) -> np.ndarray:
        return np.array(self.origin, dtype=np.float64)

    def memory_to_camera(self, idx) -> np.ndarray:
        return self.origin_vec + self.voxel_size * np.asarray(idx, dtype=np.float64)

    def camera_to_memory(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin_vec) / self.voxel_size

    def center_point(self) -> np.ndarray:
        """Camera-frame position of the grid center."""
        half = (np.array(self.dims, dtype=np.float64) - 1.0) / 2.0
        return self.memory_to_camera(half)

    def voxel_centers(self) -> np.ndarray:
        """(w, h, d, 3) camera-frame centers of every voxel."""
        return self.origin_vec + self.voxel_size * _index_grid(self.dims)

    def diagonal(self) -> float:
        """Metric length of the grid diagonal."""
        return float(np.linalg.norm(np.array(self.dims) * self.voxel_size))


@lru_cache(maxsize=128)
def _index_grid(dims: tuple[int, int, int]) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    grid.setflags(write=False)
    return grid


def new_grid(spec: GridSpec, channels: int) -> np.ndarray:
    return np.zeros(spec.dims + (channels,), dtype=np.float32)


def l2_normalize_voxels(grid: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-voxel v -> v / max(||v||, eps); all-zero voxels stay zero."""
    norms = np.linalg.norm(grid.astype(np.float64), axis=-1, keepdims=True)
    return (grid / np.maximum(norms, eps)).astype(np.float32)


def nonzero_voxel_mask(grid: np.ndarray) -> np.ndarray:
    """(w, h, d) bool: voxels whose feature vector has any non-zero channel."""
    return np.any(grid != 0.0, axis=-1)


def trilinear_sample(grid: np.ndarray, coords) -> np.ndarray:
    """Sample a (w, h, d, c) grid at fractional voxel coordinates (..., 3).

    Coordinates outside [0, dim-1] on any axis return the zero vector.
    Fractional parts within 1e-6 of the lattice are snapped, so sampling at
    (near-)integer coordinates reproduces stored values bit-exactly.
    """
    grid = np.asarray(grid)
    w, h, d, c = grid.shape
    pts = np.asarray(coords, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    n = flat.shape[0]

    base = np.floor(flat)
    frac = flat - base
    snap_hi = frac > 1.0 - _SNAP
    base = base + snap_hi
    frac = np.where(snap_hi | (frac < _SNAP), 0.0, frac)

    limits = np.array([w - 1, h - 1, d - 1], dtype=np.float64)
    inside = np.all((base + frac >= 0.0) & (base + frac <= limits), axis=1)

    i0 = base.astype(np.int64)
    flat_grid = grid.reshape(-1, c)
    clipped = [
        (np.clip(i0[:, ax], 0, grid.shape[ax] - 1), np.clip(i0[:, ax] + 1, 0, grid.shape[ax] - 1))
        for ax in range(3)
    ]
    out = np.zeros((n, c), dtype=np.float64)
    for corner in itertools.product((0, 1), repeat=3):
        wgt = np.ones(n, dtype=np.float64)
        for ax in range(3):
            f = frac[:, ax]
            wgt = wgt * (f if corner[ax] else 1.0 - f)
        lin = (clipped[0][corner[0]] * h + clipped[1][corner[1]]) * d + clipped[2][corner[2]]
        out += wgt[:, None] * flat_grid[lin]
    out[~inside] = 0.0
    return out.reshape(pts.shape[:-1] + (c,)).astype(np.float32)


def warp_grid(grid: np.ndarray, transform: RigidTransform, spec: GridSpec) -> np.ndarray:
    """Resample so content originally at p appears at transform(p).

    Output voxel x holds ``sample(grid, camera_to_memory(T^-1 m2c(x)))``;
    a single interpolation step regardless of how ``transform`` was composed.
    """
    if grid.shape[:3] != spec.dims:
        raise DimMismatch(f"grid {grid.shape[:3]} does not match spec {spec.dims}")
    centers = spec.voxel_centers().reshape(-1, 3)
    src = transform.inverse().apply(centers)
    return trilinear_sample(grid, spec.camera_to_memory(src)).reshape(grid.shape)
