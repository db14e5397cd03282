"""Sensor geometry: projecting point clouds and 3D boxes into the camera image.

Frames.  Sensor coordinates are x forward, y left, z up (meters).  Camera
coordinates are x right, y down, z forward; the extrinsics map sensor points
into the camera frame as ``R @ p + t``.  Pixel ``(u, v)`` belongs to column
``floor(u)`` and row ``floor(v)``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError

# sensor (x fwd, y left, z up) -> camera (x right, y down, z fwd)
SENSOR_TO_CAMERA = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])

PILLAR_HEIGHT = 3.0

LIDAR_CHANNELS = ("range", "intensity", "height")
RADAR_CHANNELS = ("range", "rcs", "velocity")


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: SENSOR_TO_CAMERA.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be positive")
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3) or np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-9:
            raise ConfigError("extrinsic rotation must be orthonormal")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.array(d["rotation"]), np.array(d["translation"]))


@dataclass(frozen=True)
class Box2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    label: int = 0
    score: float | None = None

    @property
    def area(self) -> float:
        return max(self.x_max - self.x_min, 0.0) * max(self.y_max - self.y_min, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])


@dataclass(frozen=True)
class Box3D:
    """Center in the sensor frame; size is (length along x, width along y, height along z); yaw about z."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    label: int = 0

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ConfigError(f"box sizes must be positive, got {self.size}")

    def corners(self) -> np.ndarray:
        """(8, 3) corners in the sensor frame."""
        l, w, h = self.size
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        local = signs * np.array([l, w, h]) / 2.0
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return local @ rot.T + np.asarray(self.center, dtype=np.float64)


@dataclass
class ProjectedSensorImage:
    data: np.ndarray  # (H, W, C)
    mask: np.ndarray  # (H, W) bool
    channels: tuple[str, ...]

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))


# -- projection ----------------------------------------------------------------

def project_points(points: np.ndarray, cam: CameraModel):
    """Pinhole projection of sensor-frame points.

    Returns ``(u, v, depth, keep)``: sub-pixel coordinates and camera depth of
    the points that lie in front of the camera and inside the image, plus the
    indices of those points in the input.
    """
    pc = cam.to_camera(points)
    z = pc[:, 2]
    front = z > 0
    safe = np.where(front, z, 1.0)
    u = cam.cx + cam.fx * pc[:, 0] / safe
    v = cam.cy + cam.fy * pc[:, 1] / safe
    inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    keep = np.nonzero(inside)[0]
    return u[keep], v[keep], z[keep], keep


def unproject(u, v, depth, cam: CameraModel) -> np.ndarray:
    """Inverse of the pinhole projection: pixel coordinates and depth to sensor-frame points."""
    u, v, depth = (np.asarray(a, dtype=np.float64) for a in (u, v, depth))
    pc = np.stack([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth], axis=-1)
    return (pc.reshape(-1, 3) - cam.translation) @ cam.rotation


def _nearest_per_pixel(pixel_ids: np.ndarray, key: np.ndarray) -> np.ndarray:
    """Index of the smallest-``key`` entry for every distinct pixel (ties: lowest index)."""
    order = np.lexsort((np.arange(len(key)), key, pixel_ids))
    _, first = np.unique(pixel_ids[order], return_index=True)
    return order[first]


def _empty(cam: CameraModel, channels) -> ProjectedSensorImage:
    return ProjectedSensorImage(
        np.zeros((cam.height, cam.width, len(channels))), np.zeros((cam.height, cam.width), dtype=bool), tuple(channels)
    )


def rasterize_lidar(points: np.ndarray, intensity: np.ndarray, cam: CameraModel) -> ProjectedSensorImage:
    """Range, intensity and height above the sensor origin; the nearest point (by depth) wins a pixel."""
    img = _empty(cam, LIDAR_CHANNELS)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return img
    u, v, depth, keep = project_points(points, cam)
    if len(keep) == 0:
        return img
    cols, rows = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    winners = _nearest_per_pixel(rows * cam.width + cols, depth)
    src = keep[winners]
    values = np.stack([
        np.linalg.norm(points[src], axis=1),
        np.asarray(intensity, dtype=np.float64)[src],
        points[src, 2],
    ], axis=1)
    img.data[rows[winners], cols[winners]] = values
    img.mask[rows[winners], cols[winners]] = True
    return img


def pillar_rows(base: np.ndarray, cam: CameraModel, height: float = PILLAR_HEIGHT):
    """Column and inclusive row span of base-anchored vertical pillars.

    Returns ``(col, row_top, row_bottom, ok)``; rows are unclipped floors of
    the projected top and base endpoints.
    """
    base = np.asarray(base, dtype=np.float64).reshape(-1, 3)
    top = base + np.array([0.0, 0.0, height])
    pb, pt = cam.to_camera(base), cam.to_camera(top)
    ok = (pb[:, 2] > 0) & (pt[:, 2] > 0)
    zb, zt = np.where(ok, pb[:, 2], 1.0), np.where(ok, pt[:, 2], 1.0)
    u = cam.cx + cam.fx * pb[:, 0] / zb
    vb = cam.cy + cam.fy * pb[:, 1] / zb
    vt = cam.cy + cam.fy * pt[:, 1] / zt
    col = np.floor(u).astype(np.int64)
    r0 = np.floor(np.minimum(vt, vb)).astype(np.int64)
    r1 = np.floor(np.maximum(vt, vb)).astype(np.int64)
    ok &= (col >= 0) & (col < cam.width) & (r1 >= 0) & (r0 < cam.height)
    return col, r0, r1, ok


def rasterize_radar_pillars(
    points: np.ndarray,
    rcs: np.ndarray | None,
    velocity: np.ndarray,
    cam: CameraModel,
    with_rcs: bool = True,
    height: float = PILLAR_HEIGHT,
) -> ProjectedSensorImage:
    """Each return becomes a ``height``-meter vertical segment rising from the return.

    The segment's pixel column carries (range, RCS, velocity); the RCS
    channel is dropped when ``with_rcs`` is False.  Where pillars overlap the
    smaller range wins.
    """
    channels = RADAR_CHANNELS if with_rcs else ("range", "velocity")
    img = _empty(cam, channels)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return img
    col, r0, r1, ok = pillar_rows(points, cam, height)
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return img
    r0c = np.clip(r0[idx], 0, cam.height - 1)
    r1c = np.clip(r1[idx], 0, cam.height - 1)
    counts = r1c - r0c + 1
    owner = np.repeat(idx, counts)
    starts = np.repeat(r0c - np.cumsum(np.concatenate([[0], counts[:-1]])), counts)
    rows = starts + np.arange(counts.sum())
    cols = col[owner]
    rng = np.linalg.norm(points, axis=1)
    winners = _nearest_per_pixel(rows * cam.width + cols, rng[owner])
    src = owner[winners]
    attrs = [rng[src]]
    if with_rcs:
        if rcs is None:
            raise ConfigError("radar RCS requested but not provided")
        attrs.append(np.asarray(rcs, dtype=np.float64)[src])
    attrs.append(np.asarray(velocity, dtype=np.float64)[src])
    img.data[rows[winners], cols[winners]] = np.stack(attrs, axis=1)
    img.mask[rows[winners], cols[winners]] = True
    return img


# -- normalization and augmentation ---------------------------------------------

def channel_stats(images) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (population) std over the valid pixels of a corpus."""
    images = list(images)
    c = images[0].data.shape[-1]
    valid = [img.data[img.mask] for img in images]
    stacked = np.concatenate(valid, axis=0) if valid else np.zeros((0, c))
    if len(stacked) == 0:
        return np.zeros(c), np.ones(c)
    mean = stacked.mean(axis=0)
    std = np.sqrt(((stacked - mean) ** 2).mean(axis=0))
    return mean, std


def normalize_channels(img: ProjectedSensorImage, mean, std) -> ProjectedSensorImage:
    """``(x - mean) / std`` on valid pixels; a zero-std channel is only centred.  Masked pixels stay zero."""
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    scale = np.where(std > 0, std, 1.0)
    out = np.zeros_like(img.data)
    out[img.mask] = (img.data[img.mask] - mean) / scale
    return ProjectedSensorImage(out, img.mask.copy(), img.channels)


def sensor_dropout(inputs: dict, p: float, rng: np.random.Generator, primary: str = "camera") -> dict:
    """Zero each secondary modality of each batch item with probability ``p``.

    ``inputs`` maps modality names to (B, C, H, W) arrays; the primary modality is never dropped.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"dropout probability {p} outside [0, 1]")
    out = dict(inputs)
    for name in sorted(k for k in inputs if k != primary):
        arr = np.asarray(inputs[name])
        drop = rng.random(arr.shape[0]) < p
        if drop.any():
            arr = arr.copy()
            arr[drop] = 0.0
        out[name] = arr
    return out


# -- boxes ------------------------------------------------------------------------

def project_box3d_to_2d(box: Box3D, cam: CameraModel) -> Box2D | None:
    """Axis-aligned rectangle around the projected corners in front of the camera, clipped to the image."""
    pc = cam.to_camera(box.corners())
    front = pc[:, 2] > 0
    if front.sum() < 2:
        return None
    p = pc[front]
    u = cam.cx + cam.fx * p[:, 0] / p[:, 2]
    v = cam.cy + cam.fy * p[:, 1] / p[:, 2]
    x0, x1 = np.clip([u.min(), u.max()], 0.0, cam.width)
    y0, y1 = np.clip([v.min(), v.max()], 0.0, cam.height)
    if x1 <= x0 or y1 <= y0:
        return None
    return Box2D(float(x0), float(y0), float(x1), float(y1), box.label)


def iou(a: Box2D, b: Box2D) -> float:
    """Intersection over union; zero for disjoint boxes.  Degenerate boxes give 0 with a warning."""
    if a.area <= 0 or b.area <= 0:
        warnings.warn("IoU of a degenerate (zero-area) box", RuntimeWarning, stacklevel=2)
        return 0.0
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


# -- scene files ----------------------------------------------------------------------

def scene_to_json(scene: dict) -> str:
    """Scenes are JSON objects: ``camera``, ``lidar``/``radar`` point lists with attributes, ``boxes3d``, ``boxes2d``."""
    out = {"camera": scene["camera"].to_dict()}
    for key in ("lidar", "radar"):
        if key in scene:
            out[key] = {k: np.asarray(v).tolist() for k, v in scene[key].items()}
    out["boxes3d"] = [
        {"center": list(b.center), "size": list(b.size), "yaw": b.yaw, "label": b.label}
        for b in scene.get("boxes3d", [])
    ]
    out["boxes2d"] = [[b.x_min, b.y_min, b.x_max, b.y_max, b.label] for b in scene.get("boxes2d", [])]
    for key in ("camera_visible", "seed"):
        if key in scene:
            out[key] = np.asarray(scene[key]).tolist()
    return json.dumps(out)


def scene_from_json(text: str) -> dict:
    raw = json.loads(text)
    scene = {"camera": CameraModel.from_dict(raw["camera"])}
    for key in ("lidar", "radar"):
        if key in raw:
            scene[key] = {k: np.asarray(v, dtype=np.float64) for k, v in raw[key].items()}
    scene["boxes3d"] = [Box3D(tuple(b["center"]), tuple(b["size"]), b["yaw"], b["label"]) for b in raw.get("boxes3d", [])]
    scene["boxes2d"] = [Box2D(*b[:4], label=int(b[4])) for b in raw.get("boxes2d", [])]
    for key in ("camera_visible", "seed"):
        if key in raw:
            scene[key] = raw[key]
    return scene
