import numpy as np
import pytest

from voxmap.geometry import (
    DimMismatch,
    GridSpec,
    PinholeCamera,
    RigidTransform,
    nonzero_voxel_mask,
)
from voxmap.lifting import (
    MapState,
    build_map,
    featurize,
    lift_frame,
    register,
    unproject_rgb,
    update_map,
    voxelize_pointcloud,
)
from voxmap.simworld import RgbdFrame, random_scene, render

CAM = PinholeCamera(fx=80.0, fy=80.0, cx=47.5, cy=31.5, width=96, height=64)


def make_frame(rgb=None, points=None, camera=CAM, pose=None, t=0):
    if rgb is None:
        rgb = np.zeros((camera.height, camera.width, 3), dtype=np.float32)
    if points is None:
        points = np.zeros((0, 3))
    return RgbdFrame(
        rgb=np.asarray(rgb, dtype=np.float32),
        pointcloud=np.asarray(points, dtype=np.float64),
        pose=pose or RigidTransform.identity(),
        camera=camera,
        timestep=t,
    )


class TestUnproject:
    def test_uniform_red_image(self, spec):
        rgb = np.zeros((CAM.height, CAM.width, 3), dtype=np.float32)
        rgb[..., 0] = 1.0
        out = unproject_rgb(make_frame(rgb=rgb), spec)
        centers = spec.voxel_centers().reshape(-1, 3)
        z = centers[:, 2]
        u = CAM.fx * centers[:, 0] / np.where(z > 0, z, 1.0) + CAM.cx
        v = CAM.fy * centers[:, 1] / np.where(z > 0, z, 1.0) + CAM.cy
        in_frustum = (
            (z > 1e-6) & (u >= 0) & (u <= CAM.width - 1) & (v >= 0) & (v <= CAM.height - 1)
        ).reshape(spec.dims)
        assert np.allclose(out[in_frustum], [1.0, 0.0, 0.0], atol=1e-12)
        assert np.all(out[~in_frustum] == 0.0)

    def test_single_white_pixel_hits_ray_voxels(self, spec):
        # place the white pixel on a known voxel's projection so its
        # bilinear footprint is non-empty
        anchor = spec.memory_to_camera([16, 15, 12])
        pu = int(round(CAM.fx * anchor[0] / anchor[2] + CAM.cx))
        pv = int(round(CAM.fy * anchor[1] / anchor[2] + CAM.cy))
        rgb = np.zeros((CAM.height, CAM.width, 3), dtype=np.float32)
        rgb[pv, pu] = 1.0
        out = unproject_rgb(make_frame(rgb=rgb), spec)
        lit = nonzero_voxel_mask(out)
        assert lit.sum() > 0
        # oracle: lit exactly where the voxel projects with positive depth,
        # inside the image, within the white pixel's bilinear stencil
        centers = spec.voxel_centers().reshape(-1, 3)
        z = centers[:, 2]
        u = CAM.fx * centers[:, 0] / np.where(z > 0, z, 1.0) + CAM.cx
        v = CAM.fy * centers[:, 1] / np.where(z > 0, z, 1.0) + CAM.cy
        expected = (
            (z > 1e-6)
            & (u >= 0)
            & (u <= CAM.width - 1)
            & (v >= 0)
            & (v <= CAM.height - 1)
            & (np.abs(u - pu) < 1.0)
            & (np.abs(v - pv) < 1.0)
        ).reshape(spec.dims)
        assert np.array_equal(lit, expected)

    def test_voxel_behind_camera_zero(self):
        spec = GridSpec(dims=(4, 4, 4), voxel_size=1.0, origin=(-2.0, -2.0, -5.0))
        rgb = np.ones((CAM.height, CAM.width, 3), dtype=np.float32)
        out = unproject_rgb(make_frame(rgb=rgb), spec)
        assert np.all(out == 0.0)


class TestVoxelize:
    def test_empty_pointcloud(self, spec):
        occ = voxelize_pointcloud(make_frame(), spec)
        assert np.all(occ == 0.0)

    def test_point_at_voxel_center(self, spec):
        p = spec.memory_to_camera([5, 6, 7])
        occ = voxelize_pointcloud(make_frame(points=[p]), spec)
        assert occ[5, 6, 7, 0] == 1.0
        assert occ.sum() == 1.0

    def test_random_points_match_binning_oracle(self, spec, rng):
        pts = rng.uniform(
            spec.memory_to_camera([0, 0, 0]) - 0.24,
            spec.memory_to_camera(np.array(spec.dims) - 1) + 0.24,
            size=(1000, 3),
        )
        occ = voxelize_pointcloud(make_frame(points=pts), spec)
        # oracle: floor-division binning against voxel lower edges
        lower = spec.origin_vec - spec.voxel_size / 2.0
        idx = np.floor((pts - lower) / spec.voxel_size).astype(int)
        keep = np.all((idx >= 0) & (idx < np.array(spec.dims)), axis=1)
        expected = np.zeros(spec.dims, dtype=bool)
        expected[tuple(idx[keep].T)] = True
        assert np.array_equal(occ[..., 0] > 0, expected)
        assert occ.sum() == expected.sum()


class TestFeaturize:
    def test_zero_inputs_zero_features(self, small_spec):
        rgb = np.zeros(small_spec.dims + (3,), dtype=np.float32)
        occ = np.zeros(small_spec.dims + (1,), dtype=np.float32)
        assert np.all(featurize(rgb, occ) == 0.0)

    def test_uniform_gray_interior_shared_vector(self, spec):
        rgb = np.full(spec.dims + (3,), 0.5, dtype=np.float32)
        occ = np.ones(spec.dims + (1,), dtype=np.float32)
        out = featurize(rgb, occ)
        interior = out[5:-5, 5:-5, 5:-5].reshape(-1, 8)
        assert np.abs(interior - interior[0]).max() < 1e-6
        assert abs(np.linalg.norm(interior[0]) - 1.0) < 1e-5

    def test_random_nonzero_unit_norm(self, small_spec, rng):
        rgb = rng.uniform(size=small_spec.dims + (3,)).astype(np.float32)
        occ = (rng.uniform(size=small_spec.dims + (1,)) < 0.3).astype(np.float32)
        out = featurize(rgb, occ)
        norms = np.linalg.norm(out, axis=-1)
        nonzero = norms > 0
        assert np.abs(norms[nonzero] - 1.0).max() < 1e-5

    def test_dim_mismatch(self, small_spec):
        rgb = np.zeros((4, 4, 4, 3), dtype=np.float32)
        occ = np.zeros(small_spec.dims + (1,), dtype=np.float32)
        with pytest.raises(DimMismatch):
            featurize(rgb, occ)

    def test_equivariant_to_90deg_rotation(self, rng):
        # cubic grid so an axis rotation maps the lattice onto itself
        dims = (12, 12, 12)
        rgb = rng.uniform(size=dims + (3,)).astype(np.float32)
        occ = (rng.uniform(size=dims + (1,)) < 0.3).astype(np.float32)
        out = featurize(rgb, occ)
        rot = lambda a: np.rot90(a, k=1, axes=(0, 1))
        out_rot = featurize(rot(rgb), rot(occ))
        assert np.abs(out_rot - rot(out)).max() < 1e-5


class TestUpdateMap:
    def feat(self, spec, rng, density=0.2):
        mask = rng.uniform(size=spec.dims) < density
        vecs = rng.normal(size=spec.dims + (8,))
        vecs /= np.linalg.norm(vecs, axis=-1, keepdims=True)
        return (vecs * mask[..., None]).astype(np.float32)

    def test_first_update_reproduces_exactly(self, small_spec, rng):
        f = self.feat(small_spec, rng)
        state = update_map(MapState.empty(small_spec), f)
        assert np.array_equal(state.features, f)
        assert np.array_equal(state.weight[..., 0] > 0, nonzero_voxel_mask(f))

    def test_update_twice_with_identical(self, small_spec, rng):
        f = self.feat(small_spec, rng)
        state = update_map(update_map(MapState.empty(small_spec), f), f)
        assert np.abs(state.features - f).max() < 1e-6
        assert state.weight.max() == 2.0

    def test_disjoint_supports_union(self, small_spec, rng):
        f1 = self.feat(small_spec, rng)
        f2 = self.feat(small_spec, rng)
        overlap = nonzero_voxel_mask(f1) & nonzero_voxel_mask(f2)
        f2[overlap] = 0.0
        state = update_map(update_map(MapState.empty(small_spec), f1), f2)
        m1 = nonzero_voxel_mask(f1)
        m2 = nonzero_voxel_mask(f2)
        assert np.array_equal(nonzero_voxel_mask(state.features), m1 | m2)
        assert np.array_equal(state.features[m1], f1[m1])
        assert np.array_equal(state.features[m2], f2[m2])

    def test_order_insensitive_for_disjoint(self, small_spec, rng):
        f1 = self.feat(small_spec, rng)
        f2 = self.feat(small_spec, rng)
        f2[nonzero_voxel_mask(f1)] = 0.0
        a = update_map(update_map(MapState.empty(small_spec), f1), f2)
        b = update_map(update_map(MapState.empty(small_spec), f2), f1)
        assert np.abs(a.features - b.features).max() < 1e-6
        assert np.array_equal(a.weight, b.weight)

    def test_overlap_average_matches_oracle(self, small_spec, rng):
        f1 = self.feat(small_spec, rng, density=0.5)
        f2 = self.feat(small_spec, rng, density=0.5)
        state = update_map(update_map(MapState.empty(small_spec), f1), f2)
        both = nonzero_voxel_mask(f1) & nonzero_voxel_mask(f2)
        avg = (f1[both].astype(np.float64) + f2[both]) / 2.0
        avg /= np.maximum(np.linalg.norm(avg, axis=-1, keepdims=True), 1e-8)
        assert np.abs(state.features[both] - avg).max() < 1e-6

    def test_features_zero_where_weight_zero(self, small_spec, rng):
        state = MapState.empty(small_spec)
        for _ in range(3):
            state = update_map(state, self.feat(small_spec, rng))
        unseen = state.weight[..., 0] == 0
        assert np.all(state.features[unseen] == 0.0)

    def test_dim_mismatch(self, small_spec):
        with pytest.raises(DimMismatch):
            update_map(MapState.empty(small_spec), np.zeros((2, 2, 2, 8), np.float32))


class TestFrameIntegration:
    def test_occupied_voxels_in_frustum(self, spec, rng):
        scene = random_scene(rng, n_primitives=3)
        frame = render(scene, scene.camera_rig[0][0], CAM, 0)
        local = RgbdFrame(
            rgb=frame.rgb,
            pointcloud=frame.pointcloud,
            pose=RigidTransform.identity(),
            camera=CAM,
            timestep=0,
        )
        occ = voxelize_pointcloud(local, spec)
        for idx in np.argwhere(occ[..., 0] > 0):
            p = spec.memory_to_camera(idx)
            assert p[2] > 0
            u = CAM.fx * p[0] / p[2] + CAM.cx
            v = CAM.fy * p[1] / p[2] + CAM.cy
            # center of an occupied voxel stays within half a voxel's
            # projected footprint of the image
            slack = CAM.fx * spec.voxel_size / p[2]
            assert -slack <= u <= CAM.width - 1 + slack
            assert -slack <= v <= CAM.height - 1 + slack

    def test_register_preserves_unit_norm(self, spec, rng):
        scene = random_scene(rng, n_primitives=3)
        frame = render(scene, scene.camera_rig[0][0], CAM, 0)
        local = RgbdFrame(
            rgb=frame.rgb,
            pointcloud=frame.pointcloud,
            pose=RigidTransform.identity(),
            camera=CAM,
            timestep=0,
        )
        feat = lift_frame(local, spec)
        ego = RigidTransform.from_rotvec([0.02, -0.03, 0.01], [0.2, 0.0, -0.1])
        reg = register(feat, ego, spec)
        norms = np.linalg.norm(reg, axis=-1)
        nz = norms > 0
        assert np.abs(norms[nz] - 1.0).max() < 1e-5

    def test_build_map_multiview(self, spec, rng):
        scene = random_scene(rng, n_primitives=3, n_views=3)
        frames = [render(scene, pose, CAM, 0) for pose in scene.camera_rig[0]]
        state = build_map(frames, [f.pose for f in frames], spec)
        assert state.weight.max() >= 2.0  # some voxel seen from several views
        unseen = state.weight[..., 0] == 0
        assert np.all(state.features[unseen] == 0.0)
        norms = np.linalg.norm(state.features, axis=-1)
        nz = norms > 0
        assert np.abs(norms[nz] - 1.0).max() < 1e-4
