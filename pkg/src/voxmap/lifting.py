"""Lift RGB-D frames into 3D feature grids and aggregate them into a map.

The featurizer is a fixed 8-channel function of the unprojected color and
occupancy tensors.  It is deterministic and view-invariant up to sampling
effects, which is the property the downstream alignment and matching losses
rely on; the trainable part of the embedding lives in :mod:`contrastive`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .geometry import (
    DimMismatch,
    GridSpec,
    RigidTransform,
    compose,
    l2_normalize_voxels,
    new_grid,
    nonzero_voxel_mask,
    warp_grid,
)
from .simworld import RgbdFrame

FEATURE_CHANNELS = 8

# mean-occupancy kernel: all integer offsets within a radius-2 ball
_BALL_OFFSETS = np.array(
    [
        (dx, dy, dz)
        for dx in range(-2, 3)
        for dy in range(-2, 3)
        for dz in range(-2, 3)
        if dx * dx + dy * dy + dz * dz <= 4
    ]
)


def _ball_kernel() -> np.ndarray:
    kernel = np.zeros((5, 5, 5))
    for dx, dy, dz in _BALL_OFFSETS:
        kernel[dx + 2, dy + 2, dz + 2] = 1.0
    return kernel / len(_BALL_OFFSETS)


_BALL_KERNEL = _ball_kernel()


def bilinear_sample_image(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous (u, v); pixel centers at integers.

    Callers must keep u in [0, W-1] and v in [0, H-1].
    """
    h, w = image.shape[:2]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    w00 = (1.0 - fu) * (1.0 - fv)
    w10 = fu * (1.0 - fv)
    w01 = (1.0 - fu) * fv
    w11 = fu * fv
    return (
        w00[..., None] * image[v0, u0]
        + w10[..., None] * image[v0, u1]
        + w01[..., None] * image[v1, u0]
        + w11[..., None] * image[v1, u1]
    )


def unproject_rgb(frame: RgbdFrame, spec: GridSpec) -> np.ndarray:
    """(w, h, d, 3) grid: each voxel takes the color of its subpixel.

    Voxels behind the camera or projecting outside the image stay zero.
    """
    cam = frame.camera
    centers = spec.voxel_centers().reshape(-1, 3)
    z = centers[:, 2]
    valid = z > 1e-6
    safe_z = np.where(valid, z, 1.0)
    u = cam.fx * centers[:, 0] / safe_z + cam.cx
    v = cam.fy * centers[:, 1] / safe_z + cam.cy
    valid &= (u >= 0.0) & (u <= cam.width - 1) & (v >= 0.0) & (v <= cam.height - 1)
    out = np.zeros((centers.shape[0], 3), dtype=np.float64)
    if np.any(valid):
        out[valid] = bilinear_sample_image(
            frame.rgb.astype(np.float64), u[valid], v[valid]
        )
    return out.reshape(spec.dims + (3,)).astype(np.float32)


def voxelize_pointcloud(frame: RgbdFrame, spec: GridSpec) -> np.ndarray:
    """(w, h, d, 1) binary grid: 1 where at least one point lands."""
    occ = new_grid(spec, 1)
    pts = np.asarray(frame.pointcloud, dtype=np.float64)
    if pts.size == 0:
        return occ
    idx = np.floor(spec.camera_to_memory(pts) + 0.5).astype(np.int64)
    in_bounds = np.all((idx >= 0) & (idx < np.array(spec.dims)), axis=1)
    idx = idx[in_bounds]
    occ[idx[:, 0], idx[:, 1], idx[:, 2], 0] = 1.0
    return occ


def featurize(rgb: np.ndarray, occ: np.ndarray) -> np.ndarray:
    """Fixed 8-channel voxel features, L2-normalized per voxel.

    Channels: occupancy; occupancy-masked RGB (3); Gaussian-blurred
    occupancy (sigma 1 voxel); magnitude of its spatial gradient; blurred
    luminance of the masked RGB; mean occupancy in a radius-2 ball.  All
    kernels are isotropic, so the map is equivariant to axis-aligned 90
    degree grid rotations.
    """
    if rgb.shape[:3] != occ.shape[:3]:
        raise DimMismatch("rgb and occupancy grids disagree")
    occ1 = occ[..., 0].astype(np.float64)
    rgb_m = rgb.astype(np.float64) * occ1[..., None]
    blurred = ndimage.gaussian_filter(occ1, sigma=1.0, mode="constant", cval=0.0)
    gx, gy, gz = np.gradient(blurred)
    grad_mag = np.sqrt(gx**2 + gy**2 + gz**2)
    lum = 0.299 * rgb_m[..., 0] + 0.587 * rgb_m[..., 1] + 0.114 * rgb_m[..., 2]
    lum_blur = ndimage.gaussian_filter(lum, sigma=1.0, mode="constant", cval=0.0)
    density = ndimage.convolve(occ1, _BALL_KERNEL, mode="constant", cval=0.0)
    feats = np.concatenate(
        [
            occ1[..., None],
            rgb_m,
            blurred[..., None],
            grad_mag[..., None],
            lum_blur[..., None],
            density[..., None],
        ],
        axis=-1,
    ).astype(np.float32)
    return l2_normalize_voxels(feats)


def lift_frame(frame: RgbdFrame, spec: GridSpec) -> np.ndarray:
    """Featurized grid of a single frame in its own camera coordinates."""
    return featurize(unproject_rgb(frame, spec), voxelize_pointcloud(frame, spec))


def register(feat: np.ndarray, egomotion: RigidTransform, spec: GridSpec) -> np.ndarray:
    """Warp into the reference frame and restore unit norms."""
    return l2_normalize_voxels(warp_grid(feat, egomotion, spec))


@dataclass(frozen=True)
class MapState:
    """Running-average latent map with per-voxel observation counts."""

    features: np.ndarray  # (w, h, d, c), unit-norm or zero per voxel
    weight: np.ndarray  # (w, h, d, 1), observation counts
    ref_pose: RigidTransform
    spec: GridSpec

    @classmethod
    def empty(cls, spec: GridSpec, ref_pose: RigidTransform | None = None) -> "MapState":
        return cls(
            features=new_grid(spec, FEATURE_CHANNELS),
            weight=new_grid(spec, 1),
            ref_pose=ref_pose or RigidTransform.identity(),
            spec=spec,
        )


def update_map(state: MapState, feat_reg: np.ndarray) -> MapState:
    """Fold one registered observation into the running average.

    A voxel counts as observed when its feature vector is non-zero.  Voxels
    seen for the first time take the new value verbatim; voxels with prior
    weight are averaged by count and re-normalized.
    """
    if feat_reg.shape != state.features.shape:
        raise DimMismatch("observation does not match map dims")
    obs = nonzero_voxel_mask(feat_reg)
    weight = state.weight[..., 0]
    new_weight = weight + obs

    mixed = (weight > 0.0) & obs
    features = state.features.copy()
    fresh = obs & (weight == 0.0)
    features[fresh] = feat_reg[fresh]
    if np.any(mixed):
        w = weight[mixed][:, None]
        avg = (w * state.features[mixed].astype(np.float64) + feat_reg[mixed]) / (w + 1.0)
        norms = np.linalg.norm(avg, axis=-1, keepdims=True)
        features[mixed] = (avg / np.maximum(norms, 1e-8)).astype(np.float32)
    return replace(state, features=features, weight=new_weight[..., None].astype(np.float32))


def build_map(
    frames,
    poses,
    spec: GridSpec,
    ref_pose: RigidTransform | None = None,
) -> MapState:
    """Lift and fuse frames given their camera-to-world poses.

    The reference defaults to the first frame's pose; registration uses
    ``ref_pose^-1 compose pose`` per frame.
    """
    frames = list(frames)
    poses = list(poses)
    if ref_pose is None:
        ref_pose = poses[0]
    state = MapState.empty(spec, ref_pose)
    ref_inv = ref_pose.inverse()
    for frame, pose in zip(frames, poses):
        ego = compose(ref_inv, pose)
        feat = lift_frame(frame, spec)
        state = update_map(state, register(feat, ego, spec))
    return state
