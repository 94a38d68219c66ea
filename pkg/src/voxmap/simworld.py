"""Synthetic RGB-D scene simulator.

Desk-scale scenes of boxes and spheres over an optional ground plane,
rendered by primary-ray casting with Lambertian shading from a fixed
directional light.  Frames come with exact poses, so ground-truth egomotion,
3D flow, and object boxes are available by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import GridSpec, PinholeCamera, RigidTransform, compose, rotvec_to_matrix

SKY_RGB = np.array([0.12, 0.16, 0.22])
LIGHT_DIR = np.array([0.30, -0.80, 0.40]) / np.linalg.norm([0.30, -0.80, 0.40])
AMBIENT = 0.25
_EPS = 1e-9


@dataclass(frozen=True)
class Primitive:
    """Axis-aligned box (full edge lengths) or sphere (radius), with a
    per-timestep local-to-world trajectory."""

    shape: str
    size: tuple  # (sx, sy, sz) for boxes, (radius,) for spheres
    albedo: tuple[float, float, float]
    trajectory: tuple[RigidTransform, ...]

    def __post_init__(self):
        if self.shape not in ("box", "sphere"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        size = tuple(float(s) for s in (self.size if np.ndim(self.size) else [self.size]))
        if self.shape == "box" and len(size) != 3:
            raise ValueError("box size must be a 3-vector")
        if self.shape == "sphere" and len(size) != 1:
            raise ValueError("sphere size must be a radius")
        if any(s <= 0 for s in size):
            raise ValueError("primitive sizes must be positive")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "albedo", tuple(float(a) for a in self.albedo))
        object.__setattr__(self, "trajectory", tuple(self.trajectory))

    @property
    def radius(self) -> float:
        return self.size[0]

    def step_transform(self, t: int) -> RigidTransform:
        """World-frame motion of this primitive from timestep t to t+1."""
        return compose(self.trajectory[t + 1], self.trajectory[t].inverse())

    def is_moving_at(self, t: int, tol: float = 1e-6) -> bool:
        step = self.step_transform(t)
        return not step.is_identity(tol)

    def contains(self, points_world: np.ndarray, t: int) -> np.ndarray:
        local = self.trajectory[t].inverse().apply(points_world)
        if self.shape == "sphere":
            return np.sum(local**2, axis=-1) <= self.radius**2
        half = 0.5 * np.array(self.size)
        return np.all(np.abs(local) <= half, axis=-1)


@dataclass(frozen=True)
class GroundPlane:
    """Horizontal plane at world y = height (y points down).

    Rendered as a 1 m checkerboard of ``albedo`` and a darkened copy, so
    the floor carries texture that pins down in-plane alignment.
    """

    height: float
    albedo: tuple[float, float, float]

    def albedo_at(self, points_world: np.ndarray) -> np.ndarray:
        parity = (
            np.floor(points_world[..., 0]).astype(np.int64)
            + np.floor(points_world[..., 2]).astype(np.int64)
        ) % 2
        base = np.asarray(self.albedo)
        return np.where(parity[..., None] == 0, base, base * 0.55)


@dataclass(frozen=True)
class Scene:
    primitives: tuple[Primitive, ...]
    ground: GroundPlane | None
    episode_length: int
    camera_rig: tuple  # camera_rig[t][v] -> camera-to-world RigidTransform

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "camera_rig", tuple(tuple(v) for v in self.camera_rig))
        if len(self.primitives) < 1:
            raise ValueError("scene needs at least one primitive")
        if len(self.camera_rig) != self.episode_length:
            raise ValueError("camera rig must cover every timestep")
        for prim in self.primitives:
            if len(prim.trajectory) != self.episode_length:
                raise ValueError("primitive trajectory must cover every timestep")

    @property
    def n_views(self) -> int:
        return len(self.camera_rig[0])


@dataclass(frozen=True)
class RgbdFrame:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    pointcloud: np.ndarray  # (n, 3) camera-frame meters, z > 0
    pose: RigidTransform  # camera-to-world
    camera: PinholeCamera
    timestep: int


def _intersect_sphere(origins, dirs, radius):
    a = np.sum(dirs**2, axis=-1)
    b = 2.0 * np.sum(origins * dirs, axis=-1)
    c = np.sum(origins**2, axis=-1) - radius**2
    disc = b**2 - 4.0 * a * c
    hit = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_near = (-b - sq) / (2.0 * a)
    t_far = (-b + sq) / (2.0 * a)
    t = np.where(t_near > _EPS, t_near, t_far)
    hit &= t > _EPS
    return np.where(hit, t, np.inf)


def _intersect_box(origins, dirs, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (-half - origins) * inv
        t2 = (half - origins) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # rays parallel to a slab: inside iff |origin| <= half on that axis
    parallel = np.abs(dirs) < 1e-15
    inside = np.abs(origins) <= half
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = lo.max(axis=-1)
    t_far = hi.min(axis=-1)
    hit = (t_near <= t_far) & (t_far > _EPS)
    t = np.where(t_near > _EPS, t_near, t_far)
    return np.where(hit, t, np.inf)


def _box_normal_local(points_local, half):
    rel = points_local / half
    axis = np.argmax(np.abs(rel), axis=-1)
    normals = np.zeros_like(points_local)
    rows = np.arange(points_local.shape[0])
    normals[rows, axis] = np.sign(rel[rows, axis])
    return normals


def render(scene: Scene, pose: RigidTransform, camera: PinholeCamera, t: int) -> RgbdFrame:
    """Primary-ray cast of the scene at timestep t from a camera pose."""
    if t >= scene.episode_length:
        raise ValueError(f"timestep {t} outside episode of length {scene.episode_length}")
    dirs_cam = camera.ray_directions()  # (H, W, 3), z = 1
    shape2d = dirs_cam.shape[:2]
    dirs_w = (dirs_cam.reshape(-1, 3) @ pose.rotation.T).reshape(-1, 3)
    origin_w = pose.translation

    n = dirs_w.shape[0]
    best_t = np.full(n, np.inf)
    normals_w = np.zeros((n, 3))
    albedo = np.zeros((n, 3))

    for prim in scene.primitives:
        world_to_local = prim.trajectory[t].inverse()
        o_l = np.broadcast_to(world_to_local.apply(origin_w), (n, 3))
        d_l = dirs_w @ world_to_local.rotation.T
        if prim.shape == "sphere":
            t_hit = _intersect_sphere(o_l, d_l, prim.radius)
        else:
            t_hit = _intersect_box(o_l, d_l, 0.5 * np.array(prim.size))
        closer = t_hit < best_t
        if not np.any(closer):
            continue
        pts_local = o_l[closer] + t_hit[closer, None] * d_l[closer]
        if prim.shape == "sphere":
            n_local = pts_local / prim.radius
        else:
            n_local = _box_normal_local(pts_local, 0.5 * np.array(prim.size))
        best_t[closer] = t_hit[closer]
        normals_w[closer] = n_local @ prim.trajectory[t].rotation.T
        albedo[closer] = prim.albedo

    if scene.ground is not None:
        dy = dirs_w[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hit = (scene.ground.height - origin_w[1]) / dy
        t_hit = np.where((np.abs(dy) > 1e-15) & (t_hit > _EPS), t_hit, np.inf)
        closer = t_hit < best_t
        best_t[closer] = t_hit[closer]
        normals_w[closer] = np.array([0.0, -1.0, 0.0])  # up is -y
        hits_w = origin_w + t_hit[closer, None] * dirs_w[closer]
        albedo[closer] = scene.ground.albedo_at(hits_w)

    hit = np.isfinite(best_t)
    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(np.sum(normals_w * LIGHT_DIR, axis=-1), 0.0, 1.0)
    rgb = np.broadcast_to(SKY_RGB, (n, 3)).copy()
    rgb[hit] = albedo[hit] * shade[hit, None]

    points_cam = best_t[hit, None] * dirs_cam.reshape(-1, 3)[hit]
    return RgbdFrame(
        rgb=rgb.reshape(shape2d + (3,)).astype(np.float32),
        pointcloud=points_cam,
        pose=pose,
        camera=camera,
        timestep=t,
    )


def ground_truth_flow(
    scene: Scene, spec: GridSpec, ref_pose: RigidTransform, t: int
) -> np.ndarray:
    """Per-voxel displacement (voxel units, t -> t+1) in the reference frame.

    Non-zero only at voxels whose center lies inside a primitive at time t;
    the first containing primitive (in scene order) wins.
    """
    if t + 1 >= scene.episode_length:
        raise ValueError("ground-truth flow needs timestep t+1 inside the episode")
    centers_ref = spec.voxel_centers().reshape(-1, 3)
    centers_world = ref_pose.apply(centers_ref)
    flow = np.zeros_like(centers_ref)
    assigned = np.zeros(centers_ref.shape[0], dtype=bool)
    world_to_ref = ref_pose.inverse()
    for prim in scene.primitives:
        inside = prim.contains(centers_world, t) & ~assigned
        if not np.any(inside):
            continue
        assigned |= inside
        if not prim.is_moving_at(t):
            continue  # exactly zero, no numerical residue from the pose chain
        moved_world = prim.step_transform(t).apply(centers_world[inside])
        flow[inside] = (world_to_ref.apply(moved_world) - centers_ref[inside]) / spec.voxel_size
    return flow.reshape(spec.dims + (3,)).astype(np.float32)


@dataclass(frozen=True)
class GroundTruthBox:
    lo: tuple[float, float, float]  # voxel coords, min corner
    hi: tuple[float, float, float]
    moving: bool


def ground_truth_boxes(
    scene: Scene, spec: GridSpec, ref_pose: RigidTransform, t: int
) -> list[GroundTruthBox]:
    """Tight axis-aligned bounds of each primitive in reference-grid coords."""
    world_to_ref = ref_pose.inverse()
    boxes = []
    for prim in scene.primitives:
        if prim.shape == "sphere":
            center_ref = world_to_ref.apply(prim.trajectory[t].apply(np.zeros(3)))
            lo_cam = center_ref - prim.radius
            hi_cam = center_ref + prim.radius
        else:
            half = 0.5 * np.array(prim.size)
            corners = np.array(
                [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
            ) * half
            corners_ref = world_to_ref.apply(prim.trajectory[t].apply(corners))
            lo_cam = corners_ref.min(axis=0)
            hi_cam = corners_ref.max(axis=0)
        lo = spec.camera_to_memory(lo_cam)
        hi = spec.camera_to_memory(hi_cam)
        moving = t + 1 < scene.episode_length and prim.is_moving_at(t)
        boxes.append(GroundTruthBox(lo=tuple(lo), hi=tuple(hi), moving=moving))
    return boxes


def look_at(position, target) -> RigidTransform:
    """Camera-to-world pose at ``position`` with +z toward ``target``.

    The camera's y axis is aligned with world +y (down) as far as possible.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    z_axis = forward / np.linalg.norm(forward)
    down = np.array([0.0, 1.0, 0.0])
    y_axis = down - np.dot(down, z_axis) * z_axis
    norm = np.linalg.norm(y_axis)
    if norm < 1e-9:  # looking straight up/down: pick an arbitrary roll
        y_axis = np.array([1.0, 0.0, 0.0]) - z_axis[0] * z_axis
        norm = np.linalg.norm(y_axis)
    y_axis = y_axis / norm
    x_axis = np.cross(y_axis, z_axis)
    return RigidTransform(np.stack([x_axis, y_axis, z_axis], axis=1), position)


DEFAULT_SPEC = GridSpec(dims=(32, 32, 16), voxel_size=0.5, origin=(-7.75, -7.75, 0.25))
DEFAULT_CAMERA = PinholeCamera(fx=80.0, fy=80.0, cx=47.5, cy=31.5, width=96, height=64)
_TARGET = np.array([0.0, 0.2, 4.5])


def _rig_pose(rng, jitter=None) -> RigidTransform:
    radius = rng.uniform(4.5, 5.5)
    azimuth = rng.uniform(-0.9, 0.9)
    elevation = rng.uniform(0.1, 0.55)
    offset = radius * np.array(
        [
            np.sin(azimuth) * np.cos(elevation),
            -np.sin(elevation),
            -np.cos(azimuth) * np.cos(elevation),
        ]
    )
    target = _TARGET + (jitter if jitter is not None else 0.0)
    return look_at(_TARGET + offset, target)


def random_scene(
    rng: np.random.Generator,
    n_primitives: int = 3,
    n_moving: int = 0,
    n_views: int = 4,
    episode_length: int = 2,
    moving_camera: bool = False,
    with_ground: bool = True,
    min_speed: float = 0.5,
    max_speed: float = 0.9,
) -> Scene:
    """Sample a desk-scale scene with randomized viewpoints.

    Movers get a constant world-frame velocity plus a small spin about their
    own center; everything stays inside the default grid for short episodes.
    """
    n_moving = min(n_moving, n_primitives)
    primitives = []
    for p in range(n_primitives):
        moving = p < n_moving
        center = _TARGET + rng.uniform([-2.2, -1.6, -1.6], [2.2, 1.4, 1.6])
        if moving:
            # keep movers central so they stay in-grid over the episode
            center = _TARGET + rng.uniform([-1.4, -1.2, -1.2], [1.4, 1.2, 1.2])
        shape = "box" if (moving or rng.uniform() < 0.6) else "sphere"
        if shape == "box":
            size = tuple(rng.uniform(1.2, 2.4, size=3))
        else:
            size = (float(rng.uniform(0.7, 1.2)),)
        albedo = tuple(rng.uniform(0.25, 0.95, size=3))
        base = RigidTransform(np.eye(3), center)
        if moving:
            direction = rng.normal(size=3) * np.array([1.0, 0.25, 1.0])
            direction /= np.linalg.norm(direction)
            velocity = direction * rng.uniform(min_speed, max_speed)
            spin = rng.uniform(-0.07, 0.07, size=3)
            step = compose(
                RigidTransform(np.eye(3), velocity),
                RigidTransform.rotating_about(rotvec_to_matrix(spin), center),
            )
            trajectory = [base]
            for _ in range(episode_length - 1):
                trajectory.append(compose(step, trajectory[-1]))
            trajectory = tuple(trajectory)
        else:
            trajectory = tuple([base] * episode_length)
        primitives.append(Primitive(shape=shape, size=size, albedo=albedo, trajectory=trajectory))

    views_t0 = [_rig_pose(rng) for _ in range(n_views)]
    rig = [list(views_t0)]
    for _ in range(episode_length - 1):
        prev = rig[-1]
        if moving_camera:
            step_views = []
            for pose in prev:
                drvec = rng.uniform(-0.05, 0.05, size=3)
                dtrans = rng.uniform(-0.5, 0.5, size=3)
                delta = RigidTransform.from_rotvec(drvec, dtrans)
                step_views.append(compose(pose, delta))
            rig.append(step_views)
        else:
            rig.append(list(prev))

    ground = GroundPlane(height=2.6, albedo=(0.45, 0.42, 0.38)) if with_ground else None
    return Scene(
        primitives=tuple(primitives),
        ground=ground,
        episode_length=episode_length,
        camera_rig=tuple(tuple(v) for v in rig),
    )


def _transform_to_list(t: RigidTransform) -> list[float]:
    return [float(v) for v in t.to_row_major_3x4()]


def scene_to_json(scene: Scene) -> dict:
    prims = []
    for prim in scene.primitives:
        entry = {
            "shape": prim.shape,
            "albedo": list(prim.albedo),
            "trajectory": [_transform_to_list(t) for t in prim.trajectory],
        }
        if prim.shape == "sphere":
            entry["radius"] = prim.size[0]
        else:
            entry["size"] = list(prim.size)
        prims.append(entry)
    payload = {
        "episode_length": scene.episode_length,
        "primitives": prims,
        "camera_rig": [
            [_transform_to_list(pose) for pose in views] for views in scene.camera_rig
        ],
    }
    if scene.ground is not None:
        payload["ground_plane"] = {
            "height": scene.ground.height,
            "albedo": list(scene.ground.albedo),
        }
    return payload


def scene_from_json(payload: dict) -> Scene:
    primitives = []
    for entry in payload["primitives"]:
        size = (entry["radius"],) if entry["shape"] == "sphere" else tuple(entry["size"])
        primitives.append(
            Primitive(
                shape=entry["shape"],
                size=size,
                albedo=tuple(entry["albedo"]),
                trajectory=tuple(
                    RigidTransform.from_row_major_3x4(t) for t in entry["trajectory"]
                ),
            )
        )
    ground = None
    if "ground_plane" in payload:
        ground = GroundPlane(
            height=float(payload["ground_plane"]["height"]),
            albedo=tuple(payload["ground_plane"]["albedo"]),
        )
    rig = tuple(
        tuple(RigidTransform.from_row_major_3x4(p) for p in views)
        for views in payload["camera_rig"]
    )
    return Scene(
        primitives=tuple(primitives),
        ground=ground,
        episode_length=int(payload["episode_length"]),
        camera_rig=rig,
    )


def save_scene(path, scene: Scene) -> None:
    Path(path).write_text(json.dumps(scene_to_json(scene), indent=2) + "\n")


def load_scene(path) -> Scene:
    return scene_from_json(json.loads(Path(path).read_text()))
