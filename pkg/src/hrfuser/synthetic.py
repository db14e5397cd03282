"""Synthetic multi-modal scenes: shaded cuboids on a ground plane seen by camera, lidar and radar.

Camera-invisible objects are painted with the background (a fog analogue)
but still reflect lidar beams and radar, so detecting them needs fusion.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import component_rng
from .sensing import (
    Box2D,
    Box3D,
    CameraModel,
    ProjectedSensorImage,
    channel_stats,
    iou,
    normalize_channels,
    project_box3d_to_2d,
    rasterize_lidar,
    rasterize_radar_pillars,
    scene_to_json,
    unproject,
)
from .tensor import ConfigError

GROUND_Z = -1.5
MAX_RANGE = 40.0
CLASS_COLORS = np.array([[0.85, 0.35, 0.2], [0.25, 0.45, 0.85]])
CLASS_REFLECTIVITY = (0.9, 0.5)
CLASS_RCS = (10.0, 2.0)
LIGHT = np.array([-0.6, 0.4, 0.7]) / np.linalg.norm([-0.6, 0.4, 0.7])
AMBIENT = 0.35
CAMERA_NOISE = 0.02

# corner indices of Box3D.corners() per face, with the local outward normal
_FACES = (
    ((0, 1, 3, 2), (-1.0, 0.0, 0.0)),
    ((4, 5, 7, 6), (1.0, 0.0, 0.0)),
    ((0, 1, 5, 4), (0.0, -1.0, 0.0)),
    ((2, 3, 7, 6), (0.0, 1.0, 0.0)),
    ((0, 2, 6, 4), (0.0, 0.0, -1.0)),
    ((1, 3, 7, 5), (0.0, 0.0, 1.0)),
)


@dataclass(frozen=True)
class SceneSpec:
    """Generator settings.  Pixel extents are the intended on-image size of an object."""

    width: int = 112
    height: int = 112
    focal: float = 160.0
    min_objects: int = 1
    max_objects: int = 3
    depth_range: tuple[float, float] = (6.0, 12.0)
    wide_px: tuple[float, float] = (48.0, 80.0)  # class 0 is wide,
    tall_px: tuple[float, float] = (32.0, 48.0)  # class 1 is tall; ranges swap for the other axis
    camera_invisible_rate: float = 0.3
    lidar_row_step: int = 2
    radar_returns: tuple[int, int] = (2, 5)
    radar_clutter: float = 4.0
    max_overlap: float = 0.3

    def __post_init__(self):
        if self.width % 4 or self.height % 4:
            raise ConfigError("image size must be a multiple of 4")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if not 0.0 <= self.camera_invisible_rate < 1.0:
            raise ConfigError("camera_invisible_rate must lie in [0, 1)")
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ConfigError("bad depth range")

    def camera(self) -> CameraModel:
        return CameraModel(self.focal, self.focal, self.width / 2, self.height / 2, self.width, self.height)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ObjectInfo:
    box3d: Box3D
    box2d: Box2D
    camera_visible: bool
    lidar_noise: float
    radar_noise: float
    tint: np.ndarray
    velocity: float


@dataclass
class Scene:
    camera: CameraModel
    image: np.ndarray  # (H, W, 3)
    gated: np.ndarray  # (H, W, 1), fog-free grayscale
    lidar_points: np.ndarray
    lidar_intensity: np.ndarray
    radar_points: np.ndarray
    radar_rcs: np.ndarray
    radar_velocity: np.ndarray
    objects: list[ObjectInfo] = field(default_factory=list)

    @property
    def boxes(self) -> list[Box2D]:
        return [o.box2d for o in self.objects]

    def lidar(self) -> ProjectedSensorImage:
        return rasterize_lidar(self.lidar_points, self.lidar_intensity, self.camera)

    def radar(self, with_rcs: bool = True) -> ProjectedSensorImage:
        return rasterize_radar_pillars(self.radar_points, self.radar_rcs, self.radar_velocity, self.camera, with_rcs)

    def to_json(self, seed: int | None = None) -> str:
        raw = {
            "camera": self.camera,
            "lidar": {"points": self.lidar_points, "intensity": self.lidar_intensity},
            "radar": {"points": self.radar_points, "rcs": self.radar_rcs, "velocity": self.radar_velocity},
            "boxes3d": [o.box3d for o in self.objects],
            "boxes2d": self.boxes,
            "camera_visible": [o.camera_visible for o in self.objects],
        }
        if seed is not None:
            raw["seed"] = seed
        return scene_to_json(raw)


# -- placement ---------------------------------------------------------------------

def _place_objects(spec: SceneSpec, cam: CameraModel, rng: np.random.Generator) -> list[ObjectInfo]:
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects: list[ObjectInfo] = []
    for _ in range(50 * count):
        if len(objects) == count:
            break
        label = int(rng.integers(2))
        big, small = rng.uniform(*spec.wide_px), rng.uniform(*spec.tall_px)
        w_px, h_px = (big, small) if label == 0 else (small, big)
        depth = rng.uniform(*spec.depth_range)
        width_m, height_m = w_px * depth / spec.focal, h_px * depth / spec.focal
        length_m = width_m * rng.uniform(0.5, 1.0)
        u = rng.uniform(w_px / 2, spec.width - w_px / 2)
        ground = unproject(u, cam.cy, depth, cam)[0]
        box3d = Box3D(
            (float(ground[0] + length_m / 2), float(ground[1]), GROUND_Z + height_m / 2),
            (length_m, width_m, height_m),
            float(rng.uniform(-0.3, 0.3)),
            label,
        )
        box2d = project_box3d_to_2d(box3d, cam)
        if box2d is None or min(box2d.x_max - box2d.x_min, box2d.y_max - box2d.y_min) < 8:
            continue
        if any(iou(box2d, o.box2d) > spec.max_overlap for o in objects):
            continue
        objects.append(ObjectInfo(
            box3d=box3d,
            box2d=box2d,
            camera_visible=bool(rng.random() >= spec.camera_invisible_rate),
            lidar_noise=float(rng.uniform(0.02, 0.1)),
            radar_noise=float(rng.uniform(0.1, 0.4)),
            tint=rng.uniform(-0.1, 0.1, 3),
            velocity=float(rng.normal(0.0, 2.0)),
        ))
    return objects


# -- camera ----------------------------------------------------------------------

def background(spec: SceneSpec) -> np.ndarray:
    """Sky above the horizon, darker ground below; no noise."""
    rows = (np.arange(spec.height) + 0.5)[:, None, None]
    horizon = spec.height / 2
    sky = np.array([0.55, 0.65, 0.8]) - 0.15 * (horizon - rows) / horizon
    ground = np.array([0.35, 0.33, 0.3]) - 0.1 * (rows - horizon) / horizon
    img = np.where(rows < horizon, sky, ground)
    return np.broadcast_to(img, (spec.height, spec.width, 3)).copy()


def _fill_convex(img: np.ndarray, poly: np.ndarray, color) -> None:
    """Paint pixels whose centers fall inside the convex polygon ``poly`` (k, 2) in (u, v)."""
    h, w = img.shape[:2]
    x0, y0 = np.floor(poly.min(axis=0)).astype(int)
    x1, y1 = np.ceil(poly.max(axis=0)).astype(int)
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
    if x1 <= x0 or y1 <= y0:
        return
    px, py = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    edges = np.roll(poly, -1, axis=0) - poly
    cross = edges[:, 0, None, None] * (py - poly[:, 1, None, None]) - edges[:, 1, None, None] * (px - poly[:, 0, None, None])
    inside = (cross >= 0).all(axis=0) | (cross <= 0).all(axis=0)
    region = img[y0:y1, x0:x1]
    region[inside] = color if np.ndim(color) == 1 else color[y0:y1, x0:x1][inside]


def _render(spec: SceneSpec, cam: CameraModel, objects: list[ObjectInfo], fog: bool) -> np.ndarray:
    """Painter's algorithm, far to near; with ``fog`` camera-invisible objects take the background color."""
    bg = background(spec)
    img = bg.copy()
    eye = -cam.rotation.T @ cam.translation
    for obj in sorted(objects, key=lambda o: -o.box3d.center[0]):
        corners = obj.box3d.corners()
        c, s = math.cos(obj.box3d.yaw), math.sin(obj.box3d.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        pc = cam.to_camera(corners)
        if (pc[:, 2] <= 0).any():
            continue
        uv = np.stack([cam.cx + cam.fx * pc[:, 0] / pc[:, 2], cam.cy + cam.fy * pc[:, 1] / pc[:, 2]], axis=1)
        for idx, normal in _FACES:
            n = rot @ np.asarray(normal)
            if n @ (eye - corners[list(idx)].mean(axis=0)) <= 0:
                continue
            if fog and not obj.camera_visible:
                color = bg
            else:
                shade = AMBIENT + (1 - AMBIENT) * max(float(n @ LIGHT), 0.0)
                color = np.clip((CLASS_COLORS[obj.box3d.label] + obj.tint) * shade, 0.0, 1.0)
            _fill_convex(img, uv[list(idx)], color)
    return img


# -- lidar and radar ------------------------------------------------------------------

def _ray_box_hits(dirs: np.ndarray, box: Box3D) -> np.ndarray:
    """Distance along unit rays from the origin to the box surface (inf on a miss)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    to_local = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    origin = to_local @ -np.asarray(box.center)
    d = dirs @ to_local.T
    half = np.asarray(box.size) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - origin) / d
        t2 = (half - origin) / d
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _lidar_scan(spec: SceneSpec, cam: CameraModel, objects, rng):
    rows = np.arange(0, spec.height, spec.lidar_row_step) + 0.5
    cols = np.arange(spec.width) + 0.5
    uu, vv = np.meshgrid(cols, rows)
    dirs = unproject(uu.ravel(), vv.ravel(), np.ones(uu.size), cam)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, GROUND_Z / dirs[:, 2], np.inf)
    best, owner = t_ground, np.full(len(dirs), -1)
    for k, obj in enumerate(objects):
        t = _ray_box_hits(dirs, obj.box3d)
        closer = t < best
        best, owner = np.where(closer, t, best), np.where(closer, k, owner)
    hit = best < MAX_RANGE
    dirs, best, owner = dirs[hit], best[hit], owner[hit]
    sigma = np.array([objects[k].lidar_noise if k >= 0 else 0.03 for k in owner])
    refl = np.array([CLASS_REFLECTIVITY[objects[k].box3d.label] if k >= 0 else 0.15 for k in owner])
    ranges = best + rng.normal(0.0, 1.0, len(best)) * sigma
    intensity = np.clip(refl + rng.normal(0.0, 0.05, len(best)), 0.0, 1.0)
    return dirs * ranges[:, None], intensity


def _radar_scan(spec: SceneSpec, cam: CameraModel, objects, rng):
    points, rcs, vel = [], [], []
    for obj in objects:
        n = int(rng.integers(spec.radar_returns[0], spec.radar_returns[1] + 1))
        cx, cy, _ = obj.box3d.center
        near = cx - obj.box3d.size[0] / 2
        xy = np.stack([np.full(n, near), np.full(n, cy)], axis=1) + rng.normal(0.0, obj.radar_noise, (n, 2))
        points.append(np.column_stack([xy, np.full(n, GROUND_Z)]))
        rcs.append(CLASS_RCS[obj.box3d.label] + rng.normal(0.0, 2.0, n))
        vel.append(obj.velocity + rng.normal(0.0, 0.2, n))
    # clutter: uniform over the field of view, Gaussian attributes
    n = int(rng.poisson(spec.radar_clutter))
    depth = rng.uniform(3.0, 30.0, n)
    u = rng.uniform(0.0, spec.width, n)
    ground = unproject(u, np.full(n, cam.cy), depth, cam)
    ground[:, 2] = GROUND_Z
    points.append(ground)
    rcs.append(rng.normal(-5.0, 3.0, n))
    vel.append(rng.normal(0.0, 1.0, n))
    return np.concatenate(points), np.concatenate(rcs), np.concatenate(vel)


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    """One scene; the generator state fully determines it."""
    cam = spec.camera()
    objects = _place_objects(spec, cam, rng)
    image = _render(spec, cam, objects, fog=True)
    gated = _render(spec, cam, objects, fog=False).mean(axis=2, keepdims=True)
    noise = rng.normal(0.0, CAMERA_NOISE, image.shape)
    image = image + noise
    gated = gated + noise[..., :1]
    lidar_points, intensity = _lidar_scan(spec, cam, objects, rng)
    radar_points, rcs, vel = _radar_scan(spec, cam, objects, rng)
    return Scene(cam, image, gated, lidar_points, intensity, radar_points, rcs, vel, objects)


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return component_rng(seed, f"scene/{split}/{index}")


# -- datasets -------------------------------------------------------------------------

@dataclass
class Dataset:
    """Normalized (N, C, H, W) arrays per modality plus per-image ground truth."""

    inputs: dict[str, np.ndarray]
    boxes: list[list[Box2D]]
    stats: dict[str, tuple[np.ndarray, np.ndarray]]
    camera_visible: list[list[bool]]

    def __len__(self) -> int:
        return len(self.boxes)

    def batch(self, idx) -> dict[str, np.ndarray]:
        return {m: arr[idx] for m, arr in self.inputs.items()}

    def save(self, path) -> None:
        arrays = {f"input_{m}": a for m, a in self.inputs.items()}
        for m, (mean, std) in self.stats.items():
            arrays[f"mean_{m}"], arrays[f"std_{m}"] = mean, std
        flat = [(i, b.label, b.x_min, b.y_min, b.x_max, b.y_max, v)
                for i, (bs, vs) in enumerate(zip(self.boxes, self.camera_visible)) for b, v in zip(bs, vs)]
        arrays["boxes"] = np.array(flat, dtype=np.float64).reshape(-1, 7)
        arrays["count"] = np.array(len(self))
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            inputs = {k[6:]: z[k] for k in z.files if k.startswith("input_")}
            stats = {k[5:]: (z[k], z["std_" + k[5:]]) for k in z.files if k.startswith("mean_")}
            n = int(z["count"])
            boxes: list[list[Box2D]] = [[] for _ in range(n)]
            visible: list[list[bool]] = [[] for _ in range(n)]
            for i, label, x0, y0, x1, y1, v in z["boxes"]:
                boxes[int(i)].append(Box2D(float(x0), float(y0), float(x1), float(y1), label=int(label)))
                visible[int(i)].append(bool(v))
        return cls(inputs, boxes, stats, visible)


def _raw_images(scene: Scene, modalities, radar_rcs: bool) -> dict[str, ProjectedSensorImage]:
    out = {}
    for m in modalities:
        if m == "camera":
            out[m] = ProjectedSensorImage(scene.image, np.ones(scene.image.shape[:2], bool), ("r", "g", "b"))
        elif m == "gated":
            out[m] = ProjectedSensorImage(scene.gated, np.ones(scene.gated.shape[:2], bool), ("gray",))
        elif m == "lidar":
            out[m] = scene.lidar()
        elif m == "radar":
            out[m] = scene.radar(radar_rcs)
        else:
            raise ConfigError(f"unknown modality {m!r}")
    return out


def _one(args):
    spec, seed, split, index = args
    return generate_scene(spec, scene_rng(seed, split, index))


def generate_scenes(spec: SceneSpec, count: int, seed: int, split: str, workers: int = 1) -> list[Scene]:
    """Scenes are keyed by (seed, split, index), so worker count does not change the result."""
    jobs = [(spec, seed, split, i) for i in range(count)]
    if workers <= 1:
        return [_one(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_one, jobs, chunksize=16))


def build_dataset(
    scenes: list[Scene],
    modalities,
    radar_rcs: bool = True,
    stats: dict | None = None,
) -> Dataset:
    """Rasterize and normalize.  Without ``stats`` the statistics come from these scenes."""
    raw = [_raw_images(s, modalities, radar_rcs) for s in scenes]
    if stats is None:
        stats = {m: channel_stats(r[m] for r in raw) for m in modalities}
    inputs = {}
    for m in modalities:
        mean, std = stats[m]
        inputs[m] = np.stack([normalize_channels(r[m], mean, std).chw() for r in raw])
    return Dataset(
        inputs=inputs,
        boxes=[s.boxes for s in scenes],
        stats={m: stats[m] for m in modalities},
        camera_visible=[[o.camera_visible for o in s.objects] for s in scenes],
    )
