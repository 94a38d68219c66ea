"""On-disk formats: .vxg voxel grids, pose CSVs, camera and grid-spec JSON.

The .vxg layout is: magic ``VXGR``, u32 version (1), u32 w/h/d/c, f32
voxel_size, f32 origin[3], then the little-endian float32 payload in the
grid's native ((i*h + j)*d + k)*c + ch order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import GridSpec, PinholeCamera, RigidTransform

VXG_MAGIC = b"VXGR"
VXG_VERSION = 1
_HEADER = struct.Struct("<4s5I4f")

POSE_COLUMNS = [f"m{r}{c}" for r in range(3) for c in range(4)]


def save_vxg(path, data: np.ndarray, voxel_size: float = 1.0, origin=(0.0, 0.0, 0.0)) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 4:
        raise ValueError("vxg payload must be a (w, h, d, c) array")
    w, h, d, c = data.shape
    ox, oy, oz = (float(x) for x in origin)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VXG_MAGIC, VXG_VERSION, w, h, d, c, float(voxel_size), ox, oy, oz))
        fh.write(data.tobytes())


def load_vxg(path):
    """Returns (data, voxel_size, origin)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated vxg header")
    magic, version, w, h, d, c, voxel_size, ox, oy, oz = _HEADER.unpack_from(raw)
    if magic != VXG_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VXG_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = w * h * d * c * 4
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(w, h, d, c).copy()
    return data, float(voxel_size), (float(ox), float(oy), float(oz))


def save_grid_vxg(path, data: np.ndarray, spec: GridSpec) -> None:
    if data.shape[:3] != spec.dims:
        raise ValueError("grid does not match spec dims")
    save_vxg(path, data, spec.voxel_size, spec.origin)


def load_grid_vxg(path):
    """Returns (data, spec) reconstructing the GridSpec from the header."""
    data, voxel_size, origin = load_vxg(path)
    return data, GridSpec(dims=data.shape[:3], voxel_size=voxel_size, origin=origin)


def save_poses_csv(path, rows) -> None:
    """rows: iterable of (timestep, view, RigidTransform)."""
    lines = ["timestep,view," + ",".join(POSE_COLUMNS)]
    for timestep, view, pose in rows:
        vals = ",".join(repr(float(v)) for v in pose.to_row_major_3x4())
        lines.append(f"{int(timestep)},{int(view)},{vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses_csv(path):
    """Returns a dict {(timestep, view): RigidTransform}."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or not lines[0].startswith("timestep,view"):
        raise ValueError(f"{path}: missing pose header")
    poses = {}
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 14:
            raise ValueError(f"{path}: expected 14 columns, got {len(parts)}")
        key = (int(parts[0]), int(parts[1]))
        poses[key] = RigidTransform.from_row_major_3x4([float(x) for x in parts[2:]])
    return poses


def save_camera_json(path, camera: PinholeCamera) -> None:
    payload = {
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "width": camera.width,
        "height": camera.height,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_camera_json(path) -> PinholeCamera:
    payload = json.loads(Path(path).read_text())
    return PinholeCamera(
        fx=float(payload["fx"]),
        fy=float(payload["fy"]),
        cx=float(payload["cx"]),
        cy=float(payload["cy"]),
        width=int(payload["width"]),
        height=int(payload["height"]),
    )


def save_grid_spec_json(path, spec: GridSpec) -> None:
    payload = {"dims": list(spec.dims), "voxel_size": spec.voxel_size, "origin": list(spec.origin)}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_grid_spec_json(path) -> GridSpec:
    payload = json.loads(Path(path).read_text())
    return GridSpec(
        dims=tuple(payload["dims"]),
        voxel_size=float(payload["voxel_size"]),
        origin=tuple(payload["origin"]),
    )
