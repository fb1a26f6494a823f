"""Software rasterization of projected polylines and PPM image I/O.

The pixel inner loop works on integers only, so renders are bit-identical
across runs and platforms.
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

import numpy as np

from trajcap.geometry import CameraModel, Polyline2D, TrajectoryPlan, plan_to_polylines

BACKGROUND = (0, 0, 0)
BOUNDARY_YELLOW = (255, 255, 0)
LANE_BLUE = (0, 0, 255)
SLOW_GREEN = (0, 255, 0)
FAST_RED = (255, 0, 0)

DEFAULT_THICKNESS = 3
DEFAULT_V_MIN = 0.0
DEFAULT_V_MAX = 16.67  # 60 km/h

# segments longer than this (in pixels) are clipped to the canvas before stepping
_MAX_STEP_EXTENT = 4096


class RasterError(ValueError):
    pass


class RgbImage:
    """H x W x 3 uint8 raster.  Treated as immutable by every function here."""

    __slots__ = ("pixels",)

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise RasterError(f"expected an HxWx3 array, got shape {pixels.shape}")
        if pixels.dtype != np.uint8:
            if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
                raise RasterError("channel values must lie in [0, 255]")
            pixels = pixels.astype(np.uint8)
        self.pixels = pixels

    @classmethod
    def blank(cls, width: int, height: int, color=BACKGROUND) -> "RgbImage":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:] = color
        return cls(px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        return isinstance(other, RgbImage) and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"RgbImage({self.width}x{self.height})"

    def to_ppm(self) -> bytes:
        header = f"P6\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + np.ascontiguousarray(self.pixels).tobytes()

    @classmethod
    def from_ppm(cls, data: bytes) -> "RgbImage":
        fields = []
        pos = 0
        while len(fields) < 4:
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            if start == pos:
                raise RasterError("truncated PPM header")
            fields.append(data[start:pos])
        magic, w, h, maxval = fields
        if magic != b"P6":
            raise RasterError(f"not a binary PPM (magic {magic!r})")
        w, h, maxval = int(w), int(h), int(maxval)
        if maxval != 255:
            raise RasterError(f"only maxval 255 is supported, got {maxval}")
        pos += 1  # single whitespace byte after maxval
        payload = data[pos:pos + w * h * 3]
        if len(payload) != w * h * 3:
            raise RasterError(f"PPM payload has {len(payload)} bytes, expected {w * h * 3}")
        return cls(np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy())

    def digest(self) -> str:
        """SHA-256 of the full P6 byte stream."""
        return hashlib.sha256(self.to_ppm()).hexdigest()


def read_ppm(path) -> RgbImage:
    return RgbImage.from_ppm(Path(path).read_bytes())


def write_ppm(img: RgbImage, path) -> None:
    Path(path).write_bytes(img.to_ppm())


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def speed_to_color(v: float, v_min: float = DEFAULT_V_MIN, v_max: float = DEFAULT_V_MAX):
    """Green for slow, red for fast, linear in between."""
    if not v_min < v_max:
        raise RasterError(f"v_min must be below v_max, got {v_min} >= {v_max}")
    t = min(max((v - v_min) / (v_max - v_min), 0.0), 1.0)
    return (_round_half_up(255 * t), _round_half_up(255 * (1 - t)), 0)


def _lerp_color(c0, c1, i: int, n: int):
    # exact rational interpolation c0 + (c1 - c0) * i / n, rounded half up
    if n == 0:
        return tuple(c0)
    return tuple((2 * (a * n + (b - a) * i) + n) // (2 * n) for a, b in zip(c0, c1))


def _clip_to_box(p0, p1, lo_x, lo_y, hi_x, hi_y):
    """Liang-Barsky; returns parameter range (t0, t1) of the visible part or None."""
    t0, t1 = 0.0, 1.0
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    for p, q in ((-dx, p0[0] - lo_x), (dx, hi_x - p0[0]), (-dy, p0[1] - lo_y), (dy, hi_y - p0[1])):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return t0, t1


def _bresenham(x0: int, y0: int, x1: int, y1: int):
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        yield x, y
        if x == x1 and y == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def _draw_segment(px: np.ndarray, p0, p1, c0, c1, thickness: int):
    h, w = px.shape[:2]
    extent = max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))
    if extent > _MAX_STEP_EXTENT:
        margin = thickness
        span = _clip_to_box(p0, p1, -margin, -margin, w - 1 + margin, h - 1 + margin)
        if span is None:
            return
        t0, t1 = span
        q0 = (p0[0] + t0 * (p1[0] - p0[0]), p0[1] + t0 * (p1[1] - p0[1]))
        q1 = (p0[0] + t1 * (p1[0] - p0[0]), p0[1] + t1 * (p1[1] - p0[1]))
        d0 = tuple(_round_half_up(a + t0 * (b - a)) for a, b in zip(c0, c1))
        d1 = tuple(_round_half_up(a + t1 * (b - a)) for a, b in zip(c0, c1))
        p0, p1, c0, c1 = q0, q1, d0, d1

    x0, y0 = _round_half_up(p0[0]), _round_half_up(p0[1])
    x1, y1 = _round_half_up(p1[0]), _round_half_up(p1[1])
    half = thickness // 2
    # cheap reject: brush footprint of the whole segment misses the canvas
    if (max(x0, x1) + half < 0 or min(x0, x1) - half >= w
            or max(y0, y1) + half < 0 or min(y0, y1) - half >= h):
        return
    n = max(abs(x1 - x0), abs(y1 - y0))
    solid = tuple(c0) == tuple(c1)
    for i, (x, y) in enumerate(_bresenham(x0, y0, x1, y1)):
        xa, xb = max(x - half, 0), min(x + half + 1, w)
        ya, yb = max(y - half, 0), min(y + half + 1, h)
        if xa >= xb or ya >= yb:
            continue
        px[ya:yb, xa:xb] = c0 if solid else _lerp_color(c0, c1, i, n)


def draw_polyline(img: RgbImage, poly: Polyline2D, thickness: int = DEFAULT_THICKNESS) -> RgbImage:
    """Return a copy of ``img`` with ``poly`` painted on top (opaque)."""
    if thickness < 1 or thickness % 2 == 0:
        raise RasterError(f"thickness must be a positive odd integer, got {thickness}")
    px = img.pixels.copy()
    _paint(px, poly, thickness)
    return RgbImage(px)


def _paint(px, poly: Polyline2D, thickness: int):
    verts, colors = poly.vertices, poly.colors
    for i in range(len(verts) - 1):
        _draw_segment(px, verts[i], verts[i + 1], colors[i], colors[i + 1], thickness)


def render_trajectory_image(plan: TrajectoryPlan, cam: CameraModel,
                            thickness: int = DEFAULT_THICKNESS,
                            v_min: float = DEFAULT_V_MIN, v_max: float = DEFAULT_V_MAX) -> RgbImage:
    """Draw boundaries, then lane lines, then the trajectory on a black canvas."""
    px = np.zeros((cam.height, cam.width, 3), dtype=np.uint8)
    for poly in plan_to_polylines(plan, cam, v_min, v_max):
        _paint(px, poly, thickness)
    return RgbImage(px)


def overlay(camera_img: RgbImage, traj_img: RgbImage) -> RgbImage:
    """Paint every non-background trajectory pixel over the camera image."""
    if camera_img.pixels.shape != traj_img.pixels.shape:
        raise RasterError(
            f"image size mismatch: camera {camera_img.width}x{camera_img.height}, "
            f"trajectory {traj_img.width}x{traj_img.height}")
    mask = np.any(traj_img.pixels != 0, axis=2)
    out = camera_img.pixels.copy()
    out[mask] = traj_img.pixels[mask]
    return RgbImage(out)
