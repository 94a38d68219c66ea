"""Coarse-to-fine 6-DoF alignment of two feature grids.

At each scale the original query is warped by the accumulated transform
(never re-warping an already-warped tensor), both grids are average-pooled
to the scale, and a cost volume over 27 candidate rotations x (2r+1)^3
integer displacements is scored by masked cross-correlation.  The best
rotation plus a soft-argmax translation forms the incremental transform,
which composes into the running estimate.

Sign convention: a positive correlation peak at displacement ``o`` means the
query content matches the reference ``o`` voxels further along, so the
aligning translation is ``-o * voxel_size``.  The returned transform T
satisfies ``warp_grid(query, T) ~= ref``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .geometry import (
    DimMismatch,
    GridSpec,
    RigidTransform,
    compose,
    geodesic_angle,
    l2_normalize_voxels,
    nonzero_voxel_mask,
    rotvec_to_matrix,
    warp_grid,
)


class DegenerateInput(ValueError):
    """Too few non-zero voxels to align."""


MIN_NONZERO_VOXELS = 32


@dataclass(frozen=True)
class EgomotionConfig:
    scales: tuple[int, ...] = (4, 2, 1)
    rot_delta: tuple[float, ...] = (0.10, 0.035, 0.012)  # radians per axis
    search_radius: int = 2
    softargmax_temperature: float = 0.05
    # the soft readout recovers only part of the residual per pass, so each
    # scale repeats until its increment stabilizes (early-stopped below)
    iterations_per_scale: int = 8

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "rot_delta", tuple(float(d) for d in self.rot_delta))
        if scales[-1] != 1 or any(a <= b for a, b in zip(scales, scales[1:])):
            raise ValueError("scales must be strictly decreasing and end at 1")
        if len(self.rot_delta) != len(scales):
            raise ValueError("need one rotation delta per scale")
        if any(d <= 0 for d in self.rot_delta):
            raise ValueError("rotation deltas must be positive")
        if self.search_radius < 1:
            raise ValueError("search radius must be >= 1")
        if not self.softargmax_temperature > 0:
            raise ValueError("temperature must be positive")
        if self.iterations_per_scale < 1:
            raise ValueError("need at least one iteration per scale")


@dataclass(frozen=True)
class CostVolume:
    """Spatially averaged alignment scores, rotations x displacements."""

    scores: np.ndarray  # (r, e)
    offsets: np.ndarray  # (e, 3) integer displacements in voxels


@dataclass(frozen=True)
class EgomotionEstimate:
    transform: RigidTransform
    converged: bool  # False if any scale saturated the search boundary


def displacement_offsets(radius: int) -> np.ndarray:
    rng = range(-radius, radius + 1)
    return np.array(list(itertools.product(rng, rng, rng)), dtype=np.int64)


def downsample(grid: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool factor^3 blocks and restore unit norms."""
    if factor == 1:
        return grid
    w, h, d, c = grid.shape
    pad = [(0, (-n) % factor) for n in (w, h, d)] + [(0, 0)]
    if any(p[1] for p in pad):
        grid = np.pad(grid, pad)
        w, h, d, _ = grid.shape
    pooled = grid.reshape(
        w // factor, factor, h // factor, factor, d // factor, factor, c
    ).mean(axis=(1, 3, 5))
    return l2_normalize_voxels(pooled.astype(np.float32))


def downsample_spec(spec: GridSpec, factor: int) -> GridSpec:
    """Spec of the pooled grid; block centers stay physically aligned."""
    if factor == 1:
        return spec
    dims = tuple(-(-n // factor) for n in spec.dims)
    shift = spec.voxel_size * (factor - 1) / 2.0
    origin = tuple(o + shift for o in spec.origin)
    return GridSpec(dims=dims, voxel_size=spec.voxel_size * factor, origin=origin)


def rotation_candidates(cfg: EgomotionConfig, scale_index: int) -> list[RigidTransform]:
    """All 27 per-axis rotation-vector combinations of {-d, 0, +d}."""
    d = cfg.rot_delta[scale_index]
    steps = (-d, 0.0, d)
    return [
        RigidTransform(rotvec_to_matrix([ax, ay, az]), np.zeros(3))
        for ax, ay, az in itertools.product(steps, steps, steps)
    ]


def candidate_rotvecs(cfg: EgomotionConfig, scale_index: int) -> np.ndarray:
    d = cfg.rot_delta[scale_index]
    steps = (-d, 0.0, d)
    return np.array(list(itertools.product(steps, steps, steps)))


def _masked_correlation(ref, ref_mask, query, query_mask, offsets, min_count=1):
    """Mean feature inner product over mutually non-zero voxels at each
    integer displacement; 0 where fewer than ``min_count`` voxels overlap."""
    dims = ref.shape[:3]
    ref64 = ref.astype(np.float64, copy=False)
    query64 = query.astype(np.float64, copy=False)
    scores = np.zeros(len(offsets))
    for row, off in enumerate(offsets):
        ref_sl, q_sl = [], []
        empty = False
        for ax in range(3):
            o = int(off[ax])
            lo = max(0, -o)
            hi = min(dims[ax], dims[ax] - o)
            if hi <= lo:
                empty = True
                break
            ref_sl.append(slice(lo, hi))
            q_sl.append(slice(lo + o, hi + o))
        if empty:
            continue
        ref_sl, q_sl = tuple(ref_sl), tuple(q_sl)
        count = np.count_nonzero(ref_mask[ref_sl] & query_mask[q_sl])
        if count < max(min_count, 1):
            continue
        num = np.einsum("whdc,whdc->", ref64[ref_sl], query64[q_sl])
        scores[row] = num / count
    return scores


def correlate(
    ref: np.ndarray,
    query: np.ndarray,
    rotations: list[RigidTransform],
    radius: int,
    spec: GridSpec,
) -> CostVolume:
    """Cost volume of the query against the reference.

    Each candidate rotation is applied about the grid center before the
    axis-aligned displacement search.
    """
    if ref.shape != query.shape:
        raise DimMismatch(f"ref {ref.shape} vs query {query.shape}")
    offsets = displacement_offsets(radius)
    center = spec.center_point()
    ref_mask = nonzero_voxel_mask(ref)
    scores = np.zeros((len(rotations), len(offsets)))
    for i, rot in enumerate(rotations):
        if np.array_equal(rot.rotation, np.eye(3)):
            rotated = query
        else:
            # re-normalize: interpolation shrinks norms, which would bias
            # every rotated candidate against the unwarped identity
            rotated = l2_normalize_voxels(
                warp_grid(query, RigidTransform.rotating_about(rot.rotation, center), spec)
            )
        scores[i] = _masked_correlation(
            ref, ref_mask, rotated, nonzero_voxel_mask(rotated), offsets
        )
    return CostVolume(scores=scores, offsets=offsets)


def scores_to_transform(
    cv: CostVolume,
    rotations: list[RigidTransform],
    radius: int,
    temperature: float,
    spec: GridSpec,
) -> RigidTransform:
    """Soft-argmax readout of a cost volume.

    The rotation is the argmax-probability candidate; the translation is
    the probability-weighted mean of ``-offset * voxel_size`` over that
    rotation's row, renormalized.  Exact on one-hot volumes.
    """
    flat = cv.scores.reshape(-1) / temperature
    probs = np.exp(flat - flat.max())
    probs /= probs.sum()
    best_rot = int(np.argmax(probs)) // len(cv.offsets)
    row = probs.reshape(cv.scores.shape)[best_rot]
    row = row / row.sum()
    translation_vox = -(row[:, None] * cv.offsets).sum(axis=0)
    shift = RigidTransform(np.eye(3), translation_vox * spec.voxel_size)
    about_center = RigidTransform.rotating_about(
        rotations[best_rot].rotation, spec.center_point()
    )
    return compose(shift, about_center)


def _argmax_on_boundary(cv: CostVolume, radius: int) -> bool:
    best = int(np.argmax(cv.scores))
    off = cv.offsets[best % len(cv.offsets)]
    return bool(np.abs(off).max() == radius)


def _candidate_cost_volume(
    ref_s: np.ndarray,
    query: np.ndarray,
    accumulated: RigidTransform,
    rotations: list[RigidTransform],
    radius: int,
    factor: int,
    spec: GridSpec,
) -> CostVolume:
    """Cost volume with every candidate warped at full resolution.

    Each rotation composes with the accumulated transform into a single
    fine-grid resample, and the result is pooled to the scale.  Warping the
    pooled tensor instead would smear coarse voxels more than the alignment
    signal itself and systematically favor the identity candidate.

    Entries whose mutual support falls below a quarter of the reference
    support score 0: a near-empty overlap of smooth features correlates
    almost perfectly and would otherwise pull the search out of the grid.
    """
    offsets = displacement_offsets(radius)
    center = spec.center_point()
    ref_mask = nonzero_voxel_mask(ref_s)
    min_count = max(8, int(0.25 * ref_mask.sum()))
    scores = np.zeros((len(rotations), len(offsets)))
    for i, rot in enumerate(rotations):
        total = compose(RigidTransform.rotating_about(rot.rotation, center), accumulated)
        if total.is_identity():
            warped = query
        else:
            warped = l2_normalize_voxels(warp_grid(query, total, spec))
        query_s = downsample(warped, factor)
        scores[i] = _masked_correlation(
            ref_s, ref_mask, query_s, nonzero_voxel_mask(query_s), offsets, min_count
        )
    return CostVolume(scores=scores, offsets=offsets)


def _identity_zero_entry(cv: CostVolume, rotations: list[RigidTransform]) -> float:
    """Score of the current alignment: identity candidate at zero offset."""
    row = next(i for i, r in enumerate(rotations) if r.is_identity())
    col = int(np.where((cv.offsets == 0).all(axis=1))[0][0])
    return float(cv.scores[row, col])


def estimate_egomotion(
    ref: np.ndarray,
    query: np.ndarray,
    cfg: EgomotionConfig,
    spec: GridSpec,
) -> EgomotionEstimate:
    """Transform T with ``warp_grid(query, T) ~= ref``.

    Per scale: soft-argmax translation passes run until they settle, then
    rotation passes pick argmax candidates; both repeat while the measured
    alignment improves, and the best-scoring state is kept.  The coarsest
    scale only bootstraps translation: sub-voxel misalignment there swamps
    the rotation signal, and a wrong coarse pick exceeds what finer deltas
    can undo.
    """
    if ref.shape != query.shape:
        raise DimMismatch(f"ref {ref.shape} vs query {query.shape}")
    if nonzero_voxel_mask(ref).sum() < MIN_NONZERO_VOXELS:
        raise DegenerateInput("reference grid is nearly empty")
    if nonzero_voxel_mask(query).sum() < MIN_NONZERO_VOXELS:
        raise DegenerateInput("query grid is nearly empty")

    identity_only = [RigidTransform.identity()]
    accumulated = RigidTransform.identity()
    converged = True

    for scale_index, factor in enumerate(cfg.scales):
        spec_s = downsample_spec(spec, factor)
        ref_s = downsample(ref, factor)
        rotations = rotation_candidates(cfg, scale_index)
        settle = 0.02 * spec_s.voxel_size
        best_quality = -np.inf  # qualities at different scales are not comparable
        best_state = accumulated

        for round_idx in range(cfg.iterations_per_scale):
            # translation passes: with a sub-voxel translation pending,
            # rotation scores are dominated by misalignment noise, so each
            # rotation decision runs on a translation-resolved state
            for inner in range(cfg.iterations_per_scale):
                cv = _candidate_cost_volume(
                    ref_s, query, accumulated, identity_only, cfg.search_radius, factor, spec
                )
                quality = _identity_zero_entry(cv, identity_only)
                if quality > best_quality:
                    best_quality, best_state = quality, accumulated
                increment = scores_to_transform(
                    cv, identity_only, cfg.search_radius, cfg.softargmax_temperature, spec_s
                )
                accumulated = compose(increment, accumulated)
                if np.linalg.norm(increment.translation) < settle:
                    break
            if round_idx == 0:
                converged &= not _argmax_on_boundary(cv, cfg.search_radius)

            if scale_index == 0:
                # coarsest scale only bootstraps translation: a wrong coarse
                # rotation pick exceeds what the finer deltas can undo
                break
            cv = _candidate_cost_volume(
                ref_s, query, accumulated, rotations, cfg.search_radius, factor, spec
            )
            quality = _identity_zero_entry(cv, rotations)
            if quality > best_quality:
                best_quality, best_state = quality, accumulated
            increment = scores_to_transform(
                cv, rotations, cfg.search_radius, cfg.softargmax_temperature, spec_s
            )
            accumulated = compose(increment, accumulated)
            if geodesic_angle(increment.rotation, np.eye(3)) < 1e-6:
                break

        # close the scale on its best measured state
        cv = _candidate_cost_volume(
            ref_s, query, accumulated, identity_only, cfg.search_radius, factor, spec
        )
        quality = _identity_zero_entry(cv, identity_only)
        if quality < best_quality:
            accumulated = best_state
    return EgomotionEstimate(transform=accumulated, converged=converged)
