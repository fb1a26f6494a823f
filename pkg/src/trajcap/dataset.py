"""Synthetic driving scenes, captioned samples, and the JSON-lines manifest.

Everything here is a pure function of (scene parameters, seed); regenerating a
corpus with the same base seed reproduces it byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from trajcap.geometry import CameraModel, Polyline2D, TrajectoryPlan, save_calibration, save_plan, load_plan
from trajcap.raster import RgbImage, _paint, read_ppm, render_trajectory_image, write_ppm

PROFILES = ("steady", "decelerating", "accelerating", "stopped")
MANEUVERS = ("straight", "avoid-left", "avoid-right", "stop-behind")
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)

SKY = (135, 190, 235)
GRASS = (70, 110, 60)
ROAD = (90, 90, 90)
MARKING = (230, 230, 230)
VEHICLE = (150, 40, 170)
SIGNAL_RED = (220, 30, 30)

VEHICLE_WIDTH = 1.8
VEHICLE_HEIGHT = 1.5
N_PLAN_POINTS = 20
ROAD_NEAR, ROAD_FAR = 1.0, 80.0

# (action, justification), in the tokenized form stored in manifests
TEMPLATES = {
    "steady": ("i will drive at a steady speed .",
               "because there is a safe distance from the front vehicle ."),
    "stop-behind": ("i will slow down .", "because the front vehicle is stopped ."),
    "slowing": ("i will slow down .", "because the front vehicle slowed down ."),
    "parked": ("i will maintain the parked state .", "because the traffic light is red ."),
    "accelerate": ("i will accelerate gradually .",
                   "because the front vehicle is accelerating gradually ."),
    "avoid-left": ("i will avoid the front vehicle to the left .",
                   "because the front vehicle is stopped ."),
    "avoid-right": ("i will avoid the front vehicle to the right .",
                    "because the front vehicle is stopped ."),
}

_TEMPLATE_KEY = {
    ("steady", "straight"): "steady",
    ("decelerating", "stop-behind"): "stop-behind",
    ("decelerating", "straight"): "slowing",
    ("stopped", "straight"): "parked",
    ("accelerating", "straight"): "accelerate",
    ("steady", "avoid-left"): "avoid-left",
    ("steady", "avoid-right"): "avoid-right",
}


class SceneError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SceneParams:
    lead_gap: Optional[float]          # m ahead of the vehicle origin, None = no lead vehicle
    speed_profile: str
    maneuver: str
    lane_width: float = 3.5
    boundary_offsets: tuple[float, float] = (3.5, 3.5)  # left, right road edge distance from lane center
    lead_offset: float = 0.0           # lateral position of the lead vehicle, +left
    ego_speed: float = 10.0            # m/s at the start of the plan

    def __post_init__(self):
        if self.speed_profile not in PROFILES:
            raise SceneError(f"unknown speed profile {self.speed_profile!r}")
        if self.maneuver not in MANEUVERS:
            raise SceneError(f"unknown maneuver {self.maneuver!r}")
        if self.lead_gap is None and (self.maneuver == "stop-behind" or self.maneuver.startswith("avoid")):
            raise SceneError(f"maneuver {self.maneuver!r} requires a lead vehicle")
        if self.lead_gap is not None and not self.lead_gap > 0:
            raise SceneError(f"lead gap must be positive, got {self.lead_gap}")
        if min(self.boundary_offsets) < self.lane_width / 2:
            raise SceneError("road boundaries must lie outside the lane lines")
        if (self.speed_profile, self.maneuver) not in _TEMPLATE_KEY:
            raise SceneError(f"no caption template for {self.speed_profile}/{self.maneuver}")

    @property
    def template(self) -> str:
        return _TEMPLATE_KEY[(self.speed_profile, self.maneuver)]


def scene_to_dict(scene: SceneParams) -> dict:
    d = asdict(scene)
    d["boundary_offsets"] = list(scene.boundary_offsets)
    return d


def scene_from_dict(d: dict) -> SceneParams:
    try:
        d = dict(d)
        d["boundary_offsets"] = tuple(d.get("boundary_offsets", (3.5, 3.5)))
        return SceneParams(**d)
    except TypeError as exc:
        raise SceneError(f"bad scene parameters: {exc}") from None


def caption_for(scene: SceneParams) -> str:
    action, why = TEMPLATES[scene.template]
    return f"{action} ; {why}"


def template_vocabulary() -> set[str]:
    words = set()
    for action, why in TEMPLATES.values():
        words.update(action.split())
        words.update(why.split())
    words.add(";")
    return words


# --- camera image -------------------------------------------------------------------

def _fill_polygon(px: np.ndarray, verts: Sequence[tuple[float, float]], color) -> None:
    """Even-odd scanline fill sampled at integer pixel centers."""
    h, w = px.shape[:2]
    n = len(verts)
    vs = [v for _, v in verts]
    j0 = max(int(math.ceil(min(vs))), 0)
    j1 = min(int(math.floor(max(vs))), h - 1)
    for j in range(j0, j1 + 1):
        xs = []
        for k in range(n):
            (u0, v0), (u1, v1) = verts[k], verts[(k + 1) % n]
            if (v0 <= j < v1) or (v1 <= j < v0):
                xs.append(u0 + (j - v0) * (u1 - u0) / (v1 - v0))
        xs.sort()
        for a, b in zip(xs[0::2], xs[1::2]):
            ia = max(int(math.ceil(a)), 0)
            ib = min(int(math.floor(b)), w - 1)
            if ia <= ib:
                px[j, ia:ib + 1] = color


def _project_ground(cam: CameraModel, x: float, y: float, z: float = 0.0):
    p = cam.rotation.T @ (np.array([x, y, z]) - cam.translation)
    return (cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy)


def _box_extent(cam: CameraModel, x: float, y0: float, y1: float, z0: float, z1: float):
    """Integer pixel bounds (u0, v0, u1, v1) of an upright rectangle facing the camera."""
    corners = [_project_ground(cam, x, y, z) for y in (y0, y1) for z in (z0, z1)]
    us = [c[0] for c in corners]
    vs = [c[1] for c in corners]
    return (int(math.floor(min(us) + 0.5)), int(math.floor(min(vs) + 0.5)),
            int(math.floor(max(us) + 0.5)), int(math.floor(max(vs) + 0.5)))


def _fill_box(px, box, color):
    h, w = px.shape[:2]
    u0, v0, u1, v1 = box
    u0, v0 = max(u0, 0), max(v0, 0)
    u1, v1 = min(u1, w - 1), min(v1, h - 1)
    if u0 <= u1 and v0 <= v1:
        px[v0:v1 + 1, u0:u1 + 1] = color


def vehicle_box(scene: SceneParams, cam: CameraModel):
    """Pixel bounds of the lead vehicle's rear face, or None."""
    if scene.lead_gap is None:
        return None
    half = VEHICLE_WIDTH / 2
    return _box_extent(cam, scene.lead_gap, scene.lead_offset - half, scene.lead_offset + half,
                       0.0, VEHICLE_HEIGHT)


def render_camera_image(scene: SceneParams, cam: CameraModel) -> RgbImage:
    """Flat-shaded front-camera view: sky, grass, road, lane markings, lead vehicle.

    Depends only on the visible scene (road, lead vehicle, signal), never on
    the planned maneuver, so two plans over one scene share identical pixels.
    """
    px = np.empty((cam.height, cam.width, 3), dtype=np.uint8)
    horizon = cam.cy  # level camera
    rows = np.arange(cam.height)[:, None]
    px[:] = GRASS
    px[(rows < horizon)[:, 0]] = SKY

    left, right = scene.boundary_offsets
    road = [_project_ground(cam, ROAD_NEAR, left), _project_ground(cam, ROAD_FAR, left),
            _project_ground(cam, ROAD_FAR, -right), _project_ground(cam, ROAD_NEAR, -right)]
    _fill_polygon(px, road, ROAD)

    half = scene.lane_width / 2
    for y in (half, -half):
        verts = tuple(_project_ground(cam, x, y) for x in (ROAD_NEAR, 6.0, 20.0, ROAD_FAR))
        _paint(px, Polyline2D(verts, (MARKING,) * len(verts)), 1)

    box = vehicle_box(scene, cam)
    if box is not None:
        _fill_box(px, box, VEHICLE)
    elif scene.speed_profile == "stopped":
        _fill_box(px, _box_extent(cam, 15.0, -2.8, -2.0, 3.5, 4.7), SIGNAL_RED)
    return RgbImage(px)


# --- plans ----------------------------------------------------------------------------

def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def build_plan(scene: SceneParams, lateral_jitter: float = 0.0) -> TrajectoryPlan:
    """Trajectory, boundaries and lane lines consistent with the scene's profile and maneuver."""
    n = N_PLAN_POINTS
    v0 = scene.ego_speed
    x_start = 2.0
    horizon_s = 3.0
    if scene.speed_profile == "stopped":
        xs = np.linspace(x_start, x_start + 2.0, n)
        speeds = np.zeros(n)
    elif scene.maneuver == "stop-behind":
        xs = np.linspace(x_start, max(scene.lead_gap - 4.0, x_start + 1.0), n)
        speeds = np.linspace(v0, 0.0, n)
    elif scene.speed_profile == "decelerating":
        speeds = np.linspace(v0, 0.4 * v0, n)
        xs = np.linspace(x_start, x_start + horizon_s * speeds.mean(), n)
    elif scene.speed_profile == "accelerating":
        speeds = np.linspace(v0, min(1.5 * v0, 16.67), n)
        xs = np.linspace(x_start, x_start + horizon_s * speeds.mean(), n)
    elif scene.maneuver.startswith("avoid"):
        speeds = np.full(n, v0)
        xs = np.linspace(x_start, scene.lead_gap + 10.0, n)
    else:
        speeds = np.full(n, v0)
        xs = np.linspace(x_start, x_start + horizon_s * v0, n)

    ys = np.full(n, lateral_jitter)
    if scene.maneuver.startswith("avoid"):
        side = 1.0 if scene.maneuver == "avoid-left" else -1.0
        g = scene.lead_gap
        ys = ys + side * scene.lane_width * _smoothstep((xs - (g - 10.0)) / 7.0)

    trajectory = tuple((float(x), float(y), 0.0) for x, y in zip(xs, ys))
    line_x = np.linspace(ROAD_NEAR + 1.0, 50.0, n)
    left, right = scene.boundary_offsets
    half = scene.lane_width / 2

    def line(y):
        return tuple((float(x), y, 0.0) for x in line_x)

    return TrajectoryPlan(trajectory, tuple(float(s) for s in speeds),
                          (line(left), line(-right)), (line(half), line(-half)))


# --- samples --------------------------------------------------------------------------

@dataclass
class Sample:
    id: str
    image: str
    plan: str
    caption: str
    split: str

    def to_json(self, root: Optional[Path] = None) -> str:
        d = {"id": self.id, "image": _rel(self.image, root), "plan": _rel(self.plan, root),
             "caption": self.caption, "split": self.split}
        return json.dumps(d)


def _rel(path: str, root: Optional[Path]) -> str:
    if root is None:
        return str(path)
    try:
        return str(Path(path).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(path)


@dataclass
class GeneratedSample:
    """An in-memory sample before it is written to disk."""

    id: str
    scene: SceneParams
    image: RgbImage
    plan: TrajectoryPlan
    caption: str
    split: str = "train"


def derive_seed(base_seed: int, sample_id: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def jitter_scene(scene: SceneParams, rng: np.random.Generator) -> tuple[SceneParams, float]:
    """Apply +-10% gap and +-0.2 m lateral jitter; returns (scene, ego lateral offset)."""
    gap = scene.lead_gap
    if gap is not None:
        gap = gap * (1.0 + rng.uniform(-0.1, 0.1))
    offset = scene.lead_offset + rng.uniform(-0.2, 0.2)
    ego_lateral = rng.uniform(-0.2, 0.2)
    return replace(scene, lead_gap=gap, lead_offset=offset), ego_lateral


def generate_sample(scene: SceneParams, cam: CameraModel, seed: int, sample_id: str = "sample",
                    split: str = "train") -> GeneratedSample:
    rng = np.random.default_rng(seed)
    scene, ego_lateral = jitter_scene(scene, rng)
    return GeneratedSample(sample_id, scene, render_camera_image(scene, cam),
                           build_plan(scene, ego_lateral), caption_for(scene), split)


def avoid_direction(lead_offset: float) -> str:
    """Pass on the side away from the lead vehicle's lateral offset."""
    return "avoid-left" if lead_offset < 0 else "avoid-right"


def generate_ambiguous_pair(scene: SceneParams, cam: CameraModel, seed: int, pair_id: str = "pair",
                            split: str = "train") -> tuple[GeneratedSample, GeneratedSample]:
    """Two samples over one camera image: stop behind the lead vehicle vs. pass it."""
    if scene.lead_gap is None:
        raise SceneError("an ambiguous pair needs a lead vehicle")
    rng = np.random.default_rng(seed)
    base, ego_lateral = jitter_scene(scene, rng)
    image = render_camera_image(base, cam)
    stop = replace(base, speed_profile="decelerating", maneuver="stop-behind")
    avoid = replace(base, speed_profile="steady", maneuver=avoid_direction(base.lead_offset))
    a = GeneratedSample(f"{pair_id}-a", stop, image, build_plan(stop, ego_lateral), caption_for(stop), split)
    b = GeneratedSample(f"{pair_id}-b", avoid, image, build_plan(avoid, ego_lateral), caption_for(avoid), split)
    return a, b


STANDARD_SCENARIOS = ("steady", "stop-behind", "slowing", "parked", "accelerate")


def sample_standard_scene(rng: np.random.Generator) -> SceneParams:
    kind = STANDARD_SCENARIOS[int(rng.integers(len(STANDARD_SCENARIOS)))]
    v = float(rng.uniform(7.0, 13.0))
    if kind == "steady":
        return SceneParams(float(rng.uniform(25, 40)), "steady", "straight",
                           lead_offset=float(rng.uniform(-0.3, 0.3)), ego_speed=v)
    if kind == "stop-behind":
        return SceneParams(float(rng.uniform(8, 15)), "decelerating", "stop-behind",
                           lead_offset=float(rng.uniform(-0.9, 0.9)), ego_speed=v)
    if kind == "slowing":
        return SceneParams(float(rng.uniform(15, 25)), "decelerating", "straight",
                           lead_offset=float(rng.uniform(-0.3, 0.3)), ego_speed=v)
    if kind == "parked":
        return SceneParams(None, "stopped", "straight", ego_speed=0.0)
    return SceneParams(float(rng.uniform(18, 30)), "accelerating", "straight",
                       lead_offset=float(rng.uniform(-0.3, 0.3)), ego_speed=v)


def sample_pair_scene(rng: np.random.Generator) -> SceneParams:
    side = -1.0 if rng.uniform() < 0.5 else 1.0
    return SceneParams(float(rng.uniform(9, 15)), "decelerating", "stop-behind",
                       lead_offset=side * float(rng.uniform(0.4, 0.9)),
                       ego_speed=float(rng.uniform(7.0, 11.0)))


def split_counts(n: int, fractions=SPLIT_FRACTIONS) -> tuple[int, int, int]:
    val = int(n * fractions[1])
    test = int(n * fractions[2])
    return n - val - test, val, test


def _split_tags(n: int, seed: int, salt: str) -> list[str]:
    n_train, n_val, _ = split_counts(n)
    order = np.random.default_rng(derive_seed(seed, salt)).permutation(n)
    tags = [""] * n
    for rank, idx in enumerate(order):
        tags[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return tags


def generate_standard(n: int, cam: CameraModel, seed: int) -> list[GeneratedSample]:
    tags = _split_tags(n, seed, "standard-splits")
    out = []
    for i in range(n):
        sid = f"std-{i:04d}"
        s = derive_seed(seed, sid)
        scene = sample_standard_scene(np.random.default_rng(s))
        out.append(generate_sample(scene, cam, s + 1, sid, tags[i]))
    return out


def generate_pairs(n: int, cam: CameraModel, seed: int, prefix: str = "pair",
                   split: Optional[str] = None) -> list[GeneratedSample]:
    """``n`` ambiguous pairs; both members of a pair always share a split."""
    tags = _split_tags(n, seed, f"{prefix}-splits") if split is None else [split] * n
    out = []
    for i in range(n):
        pid = f"{prefix}-{i:04d}"
        s = derive_seed(seed, pid)
        scene = sample_pair_scene(np.random.default_rng(s))
        out.extend(generate_ambiguous_pair(scene, cam, s + 1, pid, tags[i]))
    return out


def write_samples(gen: Sequence[GeneratedSample], out_dir, manifest_name: str) -> list[Sample]:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "plans").mkdir(parents=True, exist_ok=True)
    samples = []
    for g in gen:
        img_path = out / "images" / f"{g.id}.ppm"
        plan_path = out / "plans" / f"{g.id}.json"
        write_ppm(g.image, img_path)
        save_plan(g.plan, plan_path)
        samples.append(Sample(g.id, str(img_path), str(plan_path), g.caption, g.split))
    write_manifest(samples, out / manifest_name)
    return samples


def generate_corpus(out_dir, seed: int = 0, n_standard: int = 400, n_pairs: int = 200,
                    n_eval_pairs: int = 200, cam: Optional[CameraModel] = None) -> dict:
    """Write the default corpus: images/, plans/, calib.json, manifest.jsonl, ambiguous_eval.jsonl."""
    if n_standard + n_pairs == 0:
        raise SceneError("empty dataset")
    cam = cam or CameraModel.forward_facing()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_calibration(cam, out / "calib.json")
    gen = generate_standard(n_standard, cam, seed) + generate_pairs(n_pairs, cam, seed)
    result = {"manifest": write_samples(gen, out, "manifest.jsonl")}
    if n_eval_pairs:
        held = generate_pairs(n_eval_pairs, cam, seed, prefix="heldout", split="test")
        result["ambiguous"] = write_samples(held, out, "ambiguous_eval.jsonl")
    return result


# --- manifest ---------------------------------------------------------------------------

def write_manifest(samples: Sequence[Sample], path) -> None:
    path = Path(path)
    root = path.parent
    path.write_text("".join(s.to_json(root) + "\n" for s in samples))


def load_manifest(path) -> list[Sample]:
    path = Path(path)
    root = path.parent
    samples = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        missing = {"id", "image", "plan", "caption", "split"} - set(d)
        if missing:
            raise ManifestError(f"{path}:{lineno}: missing keys {sorted(missing)}")
        image, plan = root / d["image"], root / d["plan"]
        if not image.is_file():
            raise ManifestError(f"{path}:{lineno}: image file not found: {d['image']}")
        if not plan.is_file():
            raise ManifestError(f"{path}:{lineno}: plan file not found: {d['plan']}")
        if d["caption"].count(";") != 1:
            raise ManifestError(f"{path}:{lineno}: caption must contain exactly one ';'")
        if d["split"] not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {d['split']!r}")
        samples.append(Sample(d["id"], str(image.resolve()), str(plan.resolve()), d["caption"], d["split"]))
    return samples


@dataclass
class FrameSet:
    """A split loaded into memory: camera pixels, rendered trajectory pixels, captions."""

    samples: list
    cam_px: np.ndarray
    traj_px: np.ndarray

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def captions(self) -> list[str]:
        return [s.caption for s in self.samples]

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def subset(self, idx) -> "FrameSet":
        idx = list(idx)
        return FrameSet([self.samples[i] for i in idx], self.cam_px[idx], self.traj_px[idx])


def load_frames(samples: Sequence[Sample], cam: CameraModel) -> FrameSet:
    cams, trajs = [], []
    for s in samples:
        img = read_ppm(s.image)
        if (img.width, img.height) != (cam.width, cam.height):
            raise ManifestError(f"{s.id}: image is {img.width}x{img.height}, calibration is "
                                f"{cam.width}x{cam.height}")
        cams.append(img.pixels)
        trajs.append(render_trajectory_image(load_plan(s.plan), cam).pixels)
    shape = (0, cam.height, cam.width, 3)
    return FrameSet(list(samples),
                    np.stack(cams) if cams else np.zeros(shape, np.uint8),
                    np.stack(trajs) if trajs else np.zeros(shape, np.uint8))


def frames_from_generated(gen: Sequence[GeneratedSample], cam: CameraModel) -> FrameSet:
    """In-memory FrameSet, skipping the disk round trip."""
    samples = [Sample(g.id, "", "", g.caption, g.split) for g in gen]
    return FrameSet(samples, np.stack([g.image.pixels for g in gen]),
                    np.stack([render_trajectory_image(g.plan, cam).pixels for g in gen]))
