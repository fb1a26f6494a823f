"""Rigid transforms and pinhole projection of planning polylines.

Frames:
    vehicle: +x forward, +y left, +z up
    camera:  +z along the optical axis, +x right, +y down

``CameraModel.rotation`` holds the camera orientation expressed in the vehicle
frame (its columns are the camera axes in vehicle coordinates) and
``translation`` the camera position in the vehicle frame.  Points are mapped
into the camera frame with ``R^T (p - t)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

Point3 = tuple[float, float, float]
RGB = tuple[int, int, int]

# Columns are the camera x/y/z axes written in vehicle coordinates:
# camera x (right) = -vehicle y, camera y (down) = -vehicle z, camera z = vehicle x.
AXIS_SWAP = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)

DEFAULT_Z_NEAR = 0.1


class GeometryError(ValueError):
    """Raised for invalid geometry inputs (bad calibration, bad plan)."""


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: AXIS_SWAP.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 64
    height: int = 64
    z_near: float = DEFAULT_Z_NEAR

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not self.z_near > 0:
            raise GeometryError(f"z_near must be positive, got {self.z_near}")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"canvas must be non-empty, got {self.width}x{self.height}")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise GeometryError("extrinsics must be finite")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise GeometryError("rotation must have determinant +1")

    @classmethod
    def forward_facing(cls, fx=40.0, fy=40.0, cx=32.0, cy=20.0, height_m=1.5,
                       width=64, height=64, z_near=DEFAULT_Z_NEAR) -> "CameraModel":
        """Level camera looking down the vehicle x axis, mounted ``height_m`` above the origin."""
        return cls(fx, fy, cx, cy, AXIS_SWAP.copy(), np.array([0.0, 0.0, height_m]),
                   width, height, z_near)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
            "width": self.width, "height": self.height, "z_near": self.z_near,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            rot = d["rotation"]
            if len(rot) != 9:
                raise GeometryError(f"rotation must have 9 entries, got {len(rot)}")
            return cls(
                fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                rotation=np.array(rot, dtype=np.float64).reshape(3, 3),
                translation=np.array(d["translation"], dtype=np.float64),
                width=int(d["width"]), height=int(d["height"]),
                z_near=float(d.get("z_near", DEFAULT_Z_NEAR)),
            )
        except KeyError as exc:
            raise GeometryError(f"calibration is missing key {exc.args[0]!r}") from None


@dataclass(frozen=True)
class TrajectoryPlan:
    """Planned ego path (with per-point speed) plus road boundaries and lane lines."""

    trajectory: tuple[Point3, ...]
    speeds: tuple[float, ...]
    road_boundaries: tuple[tuple[Point3, ...], tuple[Point3, ...]]
    lane_lines: tuple[tuple[Point3, ...], tuple[Point3, ...]]

    def __post_init__(self):
        object.__setattr__(self, "trajectory", _as_polyline(self.trajectory, "trajectory"))
        object.__setattr__(self, "speeds", tuple(float(s) for s in self.speeds))
        object.__setattr__(self, "road_boundaries", _as_pair(self.road_boundaries, "road_boundaries"))
        object.__setattr__(self, "lane_lines", _as_pair(self.lane_lines, "lane_lines"))
        if len(self.speeds) != len(self.trajectory):
            raise GeometryError(
                f"trajectory has {len(self.trajectory)} points but {len(self.speeds)} speeds")
        for s in self.speeds:
            if not math.isfinite(s) or s < 0:
                raise GeometryError(f"speeds must be finite and non-negative, got {s}")
        xs = [p[0] for p in self.trajectory]
        if any(b < a for a, b in zip(xs, xs[1:])):
            raise GeometryError("trajectory x (forward) must be non-decreasing")

    def to_dict(self) -> dict:
        return {
            "trajectory": [[*p, s] for p, s in zip(self.trajectory, self.speeds)],
            "road_boundaries": [[list(p) for p in line] for line in self.road_boundaries],
            "lane_lines": [[list(p) for p in line] for line in self.lane_lines],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryPlan":
        try:
            rows = d["trajectory"]
            for row in rows:
                if len(row) != 4:
                    raise GeometryError(f"trajectory rows must be [x, y, z, speed], got {row!r}")
            return cls(
                trajectory=tuple(tuple(r[:3]) for r in rows),
                speeds=tuple(r[3] for r in rows),
                road_boundaries=d["road_boundaries"],
                lane_lines=d["lane_lines"],
            )
        except KeyError as exc:
            raise GeometryError(f"plan is missing key {exc.args[0]!r}") from None


def _as_polyline(points, name) -> tuple[Point3, ...]:
    out = []
    for p in points:
        if len(p) != 3:
            raise GeometryError(f"{name}: expected 3D points, got {p!r}")
        q = tuple(float(c) for c in p)
        if not all(math.isfinite(c) for c in q):
            raise GeometryError(f"{name}: non-finite coordinate in {q!r}")
        out.append(q)
    if len(out) < 2:
        raise GeometryError(f"{name}: polylines need at least 2 points, got {len(out)}")
    return tuple(out)


def _as_pair(lines, name):
    if len(lines) != 2:
        raise GeometryError(f"{name}: expected a pair of polylines, got {len(lines)}")
    return (_as_polyline(lines[0], name), _as_polyline(lines[1], name))


@dataclass(frozen=True)
class Polyline2D:
    vertices: tuple[tuple[float, float], ...]
    colors: tuple[RGB, ...]

    def __post_init__(self):
        if len(self.vertices) < 2:
            raise GeometryError("a projected polyline needs at least 2 vertices")
        if len(self.colors) != len(self.vertices):
            raise GeometryError("one color per vertex is required")


def load_plan(path) -> TrajectoryPlan:
    return TrajectoryPlan.from_dict(_load_json(path))


def save_plan(plan: TrajectoryPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict()) + "\n")


def load_calibration(path) -> CameraModel:
    return CameraModel.from_dict(_load_json(path))


def save_calibration(cam: CameraModel, path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=1) + "\n")


def _load_json(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise GeometryError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def vehicle_to_camera(p: Sequence[float], cam: CameraModel) -> np.ndarray:
    return cam.rotation.T @ (np.asarray(p, dtype=np.float64) - cam.translation)


def project(p_cam: Sequence[float], cam: CameraModel) -> tuple[float, float]:
    x, y, z = (float(c) for c in p_cam)
    if z < cam.z_near:
        raise ValueError(f"point at depth {z} is in front of the near plane {cam.z_near}; clip first")
    return (cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy)


def clip_segment_near(a, b, z_near: float) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Clip a camera-frame segment against the plane z = z_near.

    Returns None when the whole segment lies behind the plane.  A crossing
    endpoint is moved to the plane with its z set to exactly ``z_near``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a_in = a[2] >= z_near
    b_in = b[2] >= z_near
    if a_in and b_in:
        return a, b
    if not a_in and not b_in:
        return None
    t = (z_near - a[2]) / (b[2] - a[2])
    crossing = a + t * (b - a)
    crossing[2] = z_near
    return (a, crossing) if a_in else (crossing, b)


def _clip_polyline(points_cam: np.ndarray, values: np.ndarray, z_near: float):
    """Split a camera-frame polyline into visible runs.

    ``values`` is a per-point scalar (speed) interpolated alongside the
    geometry.  Returns a list of (points, values) runs, each with >= 2 points.
    """
    runs = []
    cur_pts: list[np.ndarray] = []
    cur_vals: list[float] = []
    for i in range(len(points_cam) - 1):
        a, b = points_cam[i], points_cam[i + 1]
        clipped = clip_segment_near(a, b, z_near)
        if clipped is None:
            if len(cur_pts) >= 2:
                runs.append((cur_pts, cur_vals))
            cur_pts, cur_vals = [], []
            continue
        ca, cb = clipped
        va, vb = values[i], values[i + 1]
        span = b[2] - a[2]
        # interpolate the carried scalar where an endpoint was moved
        if ca is not a:
            va = va + (ca[2] - a[2]) / span * (vb - va)
        if cb is not b:
            vb = values[i] + (cb[2] - a[2]) / span * (values[i + 1] - values[i])
        if cur_pts and ca is a:
            cur_pts.append(cb)
            cur_vals.append(vb)
        else:
            if len(cur_pts) >= 2:
                runs.append((cur_pts, cur_vals))
            cur_pts, cur_vals = [ca, cb], [va, vb]
        if cb is not b:
            runs.append((cur_pts, cur_vals))
            cur_pts, cur_vals = [], []
    if len(cur_pts) >= 2:
        runs.append((cur_pts, cur_vals))
    return runs


def plan_to_polylines(plan: TrajectoryPlan, cam: CameraModel,
                      v_min: float = 0.0, v_max: float = 16.67) -> list[Polyline2D]:
    """Project all plan polylines into pixel space.

    Output order is fixed: both road boundaries, both lane lines, then the
    trajectory.  A polyline that is cut by the near plane may yield several
    pieces; fully hidden polylines are dropped.
    """
    from trajcap.raster import BOUNDARY_YELLOW, LANE_BLUE, speed_to_color

    sources = [(line, None, BOUNDARY_YELLOW) for line in plan.road_boundaries]
    sources += [(line, None, LANE_BLUE) for line in plan.lane_lines]
    sources.append((plan.trajectory, plan.speeds, None))

    out = []
    for line, speeds, solid in sources:
        pts = np.asarray(line, dtype=np.float64)
        pts_cam = (pts - cam.translation) @ cam.rotation
        vals = np.zeros(len(pts)) if speeds is None else np.asarray(speeds, dtype=np.float64)
        for run_pts, run_vals in _clip_polyline(pts_cam, vals, cam.z_near):
            verts = tuple(project(p, cam) for p in run_pts)
            if solid is None:
                colors = tuple(speed_to_color(v, v_min, v_max) for v in run_vals)
            else:
                colors = (solid,) * len(verts)
            out.append(Polyline2D(verts, colors))
    return out
