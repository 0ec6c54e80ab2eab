"""Synthetic RGB-D meal scenes with analytic ground truth, plus on-disk I/O.

A scene is a round plate on a checkered table with 2-4 solids on it. Each
food class is bound to a solid shape and a base color. Every pixel is ray
traced against the table plane and the solids, so depth, masks and volumes
are exact. One *meal* is captured six times: two frontal views at 0.40 m,
two 60-degree views at 0.60 m and two random views.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import DEFAULT_CAMERA, CameraIntrinsics, DepthMap, pixel_centers

__all__ = [
    "FoodClass",
    "FOOD_CLASSES",
    "InstanceAnnotation",
    "Sample",
    "SceneConfig",
    "DatasetManifest",
    "DatasetError",
    "GenerationError",
    "AnnotationError",
    "SizeMismatchError",
    "MaskDecodeError",
    "POSE_TAGS",
    "CAPTURE_PATTERN",
    "generate_scene",
    "generate_meal",
    "render_solid",
    "save_sample",
    "load_sample",
    "make_splits",
    "save_manifest",
    "load_manifest",
    "rle_encode",
    "rle_decode",
    "mask_to_bbox",
    "center_crop",
]

POSE_TAGS = ("fixed90", "fixed60", "random")
# (pose tag, azimuth in degrees) for the six captures of one meal
CAPTURE_PATTERN = (
    ("fixed90", 0.0),
    ("fixed90", 90.0),
    ("fixed60", 0.0),
    ("fixed60", 180.0),
    ("random", None),
    ("random", None),
)
MM_PER_M = 1000.0


class DatasetError(Exception):
    pass


class GenerationError(DatasetError):
    pass


class AnnotationError(DatasetError):
    pass


class SizeMismatchError(DatasetError):
    pass


class MaskDecodeError(DatasetError):
    pass


@dataclass(frozen=True)
class FoodClass:
    id: int
    name: str
    solid: str
    color: tuple


FOOD_CLASSES = (
    FoodClass(0, "potato", "half_ellipsoid", (214, 178, 84)),
    FoodClass(1, "meat", "cuboid", (128, 62, 38)),
    FoodClass(2, "carrot", "cylinder", (236, 112, 28)),
    FoodClass(3, "pasta", "hemisphere", (238, 214, 140)),
    FoodClass(4, "vegetable", "half_ellipsoid", (58, 148, 54)),
    FoodClass(5, "rice", "hemisphere", (250, 250, 246)),
)

PLATE_COLOR = (150, 178, 214)
TABLE_COLORS = ((92, 84, 78), (78, 72, 68))


# --------------------------------------------------------------------------- #
# masks


def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run-length encoding; runs alternate starting with background."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(edges).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    try:
        h, w = (int(x) for x in rle["size"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MaskDecodeError(f"malformed run-length mask: {exc}") from exc
    if any(c < 0 for c in counts) or sum(counts) != h * w:
        raise MaskDecodeError(f"run lengths sum to {sum(counts)}, expected {h * w}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    return np.repeat(values, counts).reshape(h, w)


def mask_to_bbox(mask: np.ndarray) -> tuple:
    """Tight box in pixel-edge coordinates ``(x_min, y_min, x_max, y_max)``; max is exclusive."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise AnnotationError("cannot box an empty mask")
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


# --------------------------------------------------------------------------- #
# data types


@dataclass(eq=False)
class InstanceAnnotation:
    class_id: int
    bbox: tuple
    mask: np.ndarray
    volume_ml: float

    def validate(self):
        if not 0 <= self.class_id < len(FOOD_CLASSES):
            raise AnnotationError(f"unknown class id {self.class_id}")
        if not self.mask.any():
            raise AnnotationError("instance mask is empty")
        if not self.volume_ml > 0:
            raise AnnotationError(f"instance volume must be positive, got {self.volume_ml}")
        if tuple(self.bbox) != mask_to_bbox(self.mask):
            raise AnnotationError(f"bbox {tuple(self.bbox)} does not bound its mask {mask_to_bbox(self.mask)}")

    def __eq__(self, other):
        return (
            isinstance(other, InstanceAnnotation)
            and self.class_id == other.class_id
            and tuple(self.bbox) == tuple(other.bbox)
            and np.array_equal(self.mask, other.mask)
            and self.volume_ml == other.volume_ml
        )


@dataclass(eq=False)
class Sample:
    rgb: np.ndarray
    depth_gt: DepthMap
    camera: CameraIntrinsics
    plate_mask: np.ndarray
    plane_depth: float
    instances: list
    pose_tag: str
    scene_id: str = "scene"
    capture: int = 0

    @property
    def name(self) -> str:
        return f"{self.scene_id}_c{self.capture}"

    @property
    def size(self) -> tuple:
        return self.rgb.shape[:2]

    def validate(self):
        h, w = self.rgb.shape[:2]
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise SizeMismatchError(f"rgb must be HxWx3, got {self.rgb.shape}")
        if (self.depth_gt.height, self.depth_gt.width) != (h, w):
            raise SizeMismatchError(
                f"depth is {self.depth_gt.height}x{self.depth_gt.width}, rgb is {h}x{w}"
            )
        if self.plate_mask.shape != (h, w):
            raise SizeMismatchError(f"plate mask shape {self.plate_mask.shape} != {(h, w)}")
        if self.pose_tag not in POSE_TAGS:
            raise AnnotationError(f"unknown pose tag {self.pose_tag!r}")
        if not 2 <= len(self.instances) <= 4:
            raise AnnotationError(f"expected 2-4 instances, got {len(self.instances)}")
        union = np.zeros((h, w), dtype=bool)
        for inst in self.instances:
            if inst.mask.shape != (h, w):
                raise SizeMismatchError(f"instance mask shape {inst.mask.shape} != {(h, w)}")
            inst.validate()
            if (union & inst.mask).any():
                raise AnnotationError("instance masks overlap")
            if (inst.mask & ~self.plate_mask).any():
                raise AnnotationError("instance mask extends outside the plate")
            union |= inst.mask
        return self

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and np.array_equal(self.rgb, other.rgb)
            and self.depth_gt == other.depth_gt
            and self.camera == other.camera
            and np.array_equal(self.plate_mask, other.plate_mask)
            and self.plane_depth == other.plane_depth
            and self.instances == other.instances
            and self.pose_tag == other.pose_tag
            and self.scene_id == other.scene_id
            and self.capture == other.capture
        )


@dataclass(frozen=True)
class SceneConfig:
    resolution: int = 256
    min_instances: int = 2
    max_instances: int = 4
    plate_radius: float = 0.12
    color_jitter: float = 12.0
    texture_noise: float = 6.0
    max_placement_tries: int = 500
    random_distance: tuple = (0.35, 0.60)
    random_elevation_deg: tuple = (60.0, 90.0)

    def validate(self):
        if self.resolution < 64:
            raise GenerationError(f"resolution must be >= 64, got {self.resolution}")
        if not 2 <= self.min_instances <= self.max_instances <= 4:
            raise GenerationError(
                f"instance count range must lie in [2, 4], got {self.min_instances}-{self.max_instances}"
            )
        return self


# --------------------------------------------------------------------------- #
# solids


@dataclass(frozen=True)
class Solid:
    kind: str
    center: tuple  # (x, y) on the table, meters
    dims: tuple  # kind-specific, meters
    yaw: float = 0.0

    @property
    def volume_ml(self) -> float:
        if self.kind == "hemisphere":
            (r,) = self.dims
            v = 2.0 / 3.0 * math.pi * r**3
        elif self.kind == "half_ellipsoid":
            a, b, c = self.dims
            v = 2.0 / 3.0 * math.pi * a * b * c
        elif self.kind == "cylinder":
            r, h = self.dims
            v = math.pi * r * r * h
        elif self.kind == "cuboid":
            w, l, h = self.dims
            v = w * l * h
        else:
            raise ValueError(self.kind)
        return v * 1e6

    @property
    def footprint_radius(self) -> float:
        if self.kind == "cuboid":
            return math.hypot(self.dims[0], self.dims[1]) / 2
        if self.kind == "half_ellipsoid":
            return max(self.dims[:2])
        return self.dims[0]


_SIZE_RANGES = {
    "hemisphere": ((0.022, 0.032),),
    "half_ellipsoid": ((0.024, 0.036), (0.018, 0.028), (0.014, 0.024)),
    "cylinder": ((0.018, 0.026), (0.018, 0.032)),
    "cuboid": ((0.030, 0.046), (0.026, 0.040), (0.014, 0.026)),
}


def _to_local(o, d, solid):
    """Translate/rotate rays into the solid's frame (origin at base center)."""
    cx, cy = solid.center
    c, s = math.cos(solid.yaw), math.sin(solid.yaw)
    ox, oy = o[0] - cx, o[1] - cy
    lo = np.array([c * ox + s * oy, -s * ox + c * oy, o[2]])
    ld = np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], axis=-1)
    return lo, ld, (c, s)


def _normal_to_world(n, rot):
    c, s = rot
    return np.stack([c * n[..., 0] - s * n[..., 1], s * n[..., 0] + c * n[..., 1], n[..., 2]], axis=-1)


def _intersect(origin, dirs, solid):
    """First-hit parameter ``t`` (inf on miss) and world normals for one solid."""
    lo, ld, rot = _to_local(origin, dirs, solid)
    shape = dirs.shape[:-1]
    t = np.full(shape, np.inf)
    n = np.zeros(shape + (3,))
    if solid.kind in ("hemisphere", "half_ellipsoid"):
        a, b, c = (solid.dims * 3) if solid.kind == "hemisphere" else solid.dims
        scale = np.array([a, b, c])
        so, sd = lo / scale, ld / scale
        qa = np.sum(sd * sd, axis=-1)
        qb = 2 * np.sum(sd * so, axis=-1)
        qc = float(so @ so) - 1.0
        disc = qb * qb - 4 * qa * qc
        ok = disc >= 0
        root = (-qb - np.sqrt(np.where(ok, disc, 0.0))) / (2 * qa)
        z = lo[2] + root * ld[..., 2]
        ok &= (root > 0) & (z >= 0)
        t = np.where(ok, root, np.inf)
        p = lo + root[..., None] * ld
        n = p / (scale * scale)
    elif solid.kind == "cylinder":
        r, h = solid.dims
        # top cap
        t_cap = (h - lo[2]) / ld[..., 2]
        px = lo[0] + t_cap * ld[..., 0]
        py = lo[1] + t_cap * ld[..., 1]
        cap = (t_cap > 0) & (px * px + py * py <= r * r)
        # side wall
        qa = ld[..., 0] ** 2 + ld[..., 1] ** 2
        qb = 2 * (lo[0] * ld[..., 0] + lo[1] * ld[..., 1])
        qc = lo[0] ** 2 + lo[1] ** 2 - r * r
        disc = qb * qb - 4 * qa * qc
        ok = (disc >= 0) & (qa > 0)
        t_side = (-qb - np.sqrt(np.where(ok, disc, 0.0))) / (2 * np.where(qa > 0, qa, 1.0))
        z = lo[2] + t_side * ld[..., 2]
        side = ok & (t_side > 0) & (z >= 0) & (z <= h)
        t_side = np.where(side, t_side, np.inf)
        t_cap = np.where(cap, t_cap, np.inf)
        t = np.minimum(t_cap, t_side)
        p = lo + t_side[..., None] * ld
        side_n = np.stack([p[..., 0], p[..., 1], np.zeros(shape)], axis=-1)
        n = np.where((t_cap <= t_side)[..., None], np.array([0.0, 0.0, 1.0]), side_n)
    elif solid.kind == "cuboid":
        w, l, h = solid.dims
        lo_b = np.array([-w / 2, -l / 2, 0.0])
        hi_b = np.array([w / 2, l / 2, h])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            t0 = (lo_b - lo) * inv
            t1 = (hi_b - lo) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        t_near = tmin.max(axis=-1)
        t_far = tmax.min(axis=-1)
        ok = (t_near <= t_far) & (t_near > 0)
        t = np.where(ok, t_near, np.inf)
        axis = tmin.argmax(axis=-1)
        sign = -np.sign(np.take_along_axis(ld, axis[..., None], axis=-1)[..., 0])
        n = np.zeros(shape + (3,))
        np.put_along_axis(n, axis[..., None], sign[..., None], axis=-1)
    else:
        raise ValueError(f"unknown solid {solid.kind!r}")
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), n)
    return t, _normal_to_world(n, rot)


# --------------------------------------------------------------------------- #
# camera


def _camera_pose(distance, elevation_deg, azimuth_deg, target=(0.0, 0.0)):
    """Camera center and rotation (columns = camera x, y, z axes in world)."""
    el = math.radians(elevation_deg)
    az = math.radians(azimuth_deg)
    tgt = np.array([target[0], target[1], 0.0])
    center = tgt + distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    fwd = (tgt - center) / distance
    right = np.array([-math.sin(az), math.cos(az), 0.0])
    down = np.cross(fwd, right)
    return center, np.stack([right, down, fwd], axis=1)


def _rays(res, k: CameraIntrinsics, rot):
    u, v = pixel_centers(res, res)
    cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    return cam @ rot.T


def _trace(solids, origin, dirs, plate_radius):
    """Nearest hits: depth (camera z == ray parameter), hit id, normals.

    Hit ids: -2 table, -1 plate, i >= 0 solid ``i``.
    """
    with np.errstate(divide="ignore"):
        t_plane = np.where(dirs[..., 2] < 0, -origin[2] / dirs[..., 2], np.inf)
    hit_pt = origin + t_plane[..., None] * dirs
    on_plate = hit_pt[..., 0] ** 2 + hit_pt[..., 1] ** 2 <= plate_radius**2
    best_t = t_plane
    ids = np.where(on_plate, -1, -2)
    normals = np.broadcast_to(np.array([0.0, 0.0, 1.0]), dirs.shape).copy()
    for i, solid in enumerate(solids):
        t, n = _intersect(origin, dirs, solid)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        ids = np.where(closer, i, ids)
        normals = np.where(closer[..., None], n, normals)
    return best_t, ids, normals, hit_pt


def render_solid(kind: str, dims: tuple, resolution: int = 256, distance: float = 0.40,
                 center: tuple = (0.0, 0.0), yaw: float = 0.0):
    """Frontal depth map and mask of a single solid on the table plane.

    Returns ``(DepthMap, mask, plane_depth, analytic_volume_ml)``.
    """
    solid = Solid(kind, center, tuple(dims), yaw)
    origin, rot = _camera_pose(distance, 90.0, 0.0)
    dirs = _rays(resolution, DEFAULT_CAMERA, rot)
    t, ids, _, _ = _trace([solid], origin, dirs, plate_radius=1.0)
    return DepthMap(t), ids == 0, distance, solid.volume_ml


# --------------------------------------------------------------------------- #
# generation


def _place_solids(rng, config: SceneConfig, seed):
    count = int(rng.integers(config.min_instances, config.max_instances + 1))
    classes = rng.integers(0, len(FOOD_CLASSES), size=count)
    for _ in range(config.max_placement_tries):
        solids = []
        for cid in classes:
            kind = FOOD_CLASSES[cid].solid
            dims = tuple(float(rng.uniform(lo, hi)) for lo, hi in _SIZE_RANGES[kind])
            yaw = float(rng.uniform(0, math.pi)) if kind in ("cuboid", "half_ellipsoid") else 0.0
            solids.append(Solid(kind, (0.0, 0.0), dims, yaw))
        placed = []
        for s in solids:
            reach = config.plate_radius - s.footprint_radius - 0.006
            if reach <= 0:
                break
            for _ in range(50):
                rad = reach * math.sqrt(rng.uniform())
                ang = rng.uniform(0, 2 * math.pi)
                c = (rad * math.cos(ang), rad * math.sin(ang))
                if all(
                    math.hypot(c[0] - p.center[0], c[1] - p.center[1])
                    >= s.footprint_radius + p.footprint_radius + 0.006
                    for p in placed
                ):
                    placed.append(replace(s, center=c))
                    break
            else:
                break
        if len(placed) == count:
            return [int(c) for c in classes], placed
    raise GenerationError(f"seed {seed}: could not place {count} solids without overlap")


def _capture_pose(rng, pose_tag, azimuth, config):
    if pose_tag == "fixed90":
        return 0.40, 90.0, azimuth, (0.0, 0.0)
    if pose_tag == "fixed60":
        return 0.60, 60.0, azimuth, (0.0, 0.0)
    dist = float(rng.uniform(*config.random_distance))
    elev = float(rng.uniform(*config.random_elevation_deg))
    az = float(rng.uniform(0.0, 360.0))
    tgt = tuple(float(x) for x in rng.uniform(-0.015, 0.015, size=2))
    return dist, elev, az, tgt


def _shade(ids, normals, hit_pt, rot, classes, rng, config):
    h, w = ids.shape
    light = np.array([0.35, -0.25, 0.90])
    light /= np.linalg.norm(light)
    lambert = np.clip(normals @ light, 0.0, 1.0)
    shade = 0.55 + 0.45 * lambert
    base = np.zeros((h, w, 3))
    checker = (np.floor(hit_pt[..., 0] / 0.05) + np.floor(hit_pt[..., 1] / 0.05)) % 2
    base[ids == -2] = np.array(TABLE_COLORS[0])
    base[(ids == -2) & (checker == 1)] = np.array(TABLE_COLORS[1])
    base[ids == -1] = np.array(PLATE_COLOR)
    for i, cid in enumerate(classes):
        color = np.array(FOOD_CLASSES[cid].color, dtype=float)
        color += rng.uniform(-config.color_jitter, config.color_jitter, size=3)
        base[ids == i] = color
    img = base * shade[..., None] + rng.normal(0.0, config.texture_noise, size=(h, w, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_scene(seed: int, config: SceneConfig = SceneConfig(), capture: int = 0) -> Sample:
    """Render capture ``capture`` (index into ``CAPTURE_PATTERN``) of meal ``seed``."""
    config.validate()
    if not 0 <= capture < len(CAPTURE_PATTERN):
        raise GenerationError(f"capture index must be in [0, {len(CAPTURE_PATTERN)}), got {capture}")
    layout_rng = np.random.default_rng([seed, 0])
    classes, solids = _place_solids(layout_rng, config, seed)
    pose_tag, azimuth = CAPTURE_PATTERN[capture]
    rng = np.random.default_rng([seed, 1, capture])
    dist, elev, az, tgt = _capture_pose(rng, pose_tag, azimuth, config)
    origin, rot = _camera_pose(dist, elev, az, tgt)
    res = config.resolution
    dirs = _rays(res, DEFAULT_CAMERA, rot)
    t, ids, normals, hit_pt = _trace(solids, origin, dirs, config.plate_radius)
    depth = np.minimum(t, 1.0)
    plate_mask = ids >= -1
    instances = []
    for i, (cid, solid) in enumerate(zip(classes, solids)):
        mask = ids == i
        if not mask.any():
            raise GenerationError(f"seed {seed}: instance {i} is not visible in capture {capture}")
        instances.append(InstanceAnnotation(cid, mask_to_bbox(mask), mask, solid.volume_ml))
    rgb = _shade(ids, normals, hit_pt, rot, classes, rng, config)
    sample = Sample(
        rgb=rgb,
        depth_gt=DepthMap(depth),
        camera=DEFAULT_CAMERA,
        plate_mask=plate_mask,
        plane_depth=float(dist),
        instances=instances,
        pose_tag=pose_tag,
        scene_id=f"meal{seed:05d}",
        capture=capture,
    )
    return sample.validate()


def generate_meal(seed: int, config: SceneConfig = SceneConfig()) -> list:
    """All six captures of one meal."""
    return [generate_scene(seed, config, c) for c in range(len(CAPTURE_PATTERN))]


# --------------------------------------------------------------------------- #
# augmentation helpers shared with the trainer


def center_crop(sample: Sample, size: int) -> Sample:
    """Square center crop with annotation clipping; instances cut away entirely are dropped.

    Intended for external captures that are larger than the network input.
    """
    h, w = sample.rgb.shape[:2]
    if size > min(h, w):
        raise SizeMismatchError(f"crop {size} larger than image {h}x{w}")
    y0, x0 = (h - size) // 2, (w - size) // 2
    sl = (slice(y0, y0 + size), slice(x0, x0 + size))
    k = sample.camera
    camera = CameraIntrinsics(k.fx * w / size, k.fy * h / size, (k.cx * w - x0) / size, (k.cy * h - y0) / size)
    instances = []
    for inst in sample.instances:
        m = inst.mask[sl]
        if m.any():
            instances.append(InstanceAnnotation(inst.class_id, mask_to_bbox(m), m.copy(), inst.volume_ml))
    return Sample(
        rgb=sample.rgb[sl].copy(),
        depth_gt=DepthMap(sample.depth_gt.values[sl]),
        camera=camera,
        plate_mask=sample.plate_mask[sl].copy(),
        plane_depth=sample.plane_depth,
        instances=instances,
        pose_tag=sample.pose_tag,
        scene_id=sample.scene_id,
        capture=sample.capture,
    )


# --------------------------------------------------------------------------- #
# disk I/O


def save_sample(sample: Sample, directory) -> Path:
    """Write ``rgb.png``, ``depth.png`` (uint16 millimeters) and ``annotation.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sample.rgb).save(directory / "rgb.png")
    mm = np.rint(np.clip(sample.depth_gt.values, 0.0, 65.535) * MM_PER_M).astype(np.uint16)
    Image.fromarray(mm).save(directory / "depth.png")
    ann = {
        "scene_id": sample.scene_id,
        "capture": sample.capture,
        "pose_tag": sample.pose_tag,
        "height": int(sample.rgb.shape[0]),
        "width": int(sample.rgb.shape[1]),
        "camera": sample.camera.to_dict(),
        "plane_depth": sample.plane_depth,
        "plate_mask": rle_encode(sample.plate_mask),
        "instances": [
            {
                "class_id": inst.class_id,
                "class_name": FOOD_CLASSES[inst.class_id].name,
                "bbox": list(inst.bbox),
                "mask": rle_encode(inst.mask),
                "volume_ml": inst.volume_ml,
            }
            for inst in sample.instances
        ],
    }
    with open(directory / "annotation.json", "w") as fh:
        json.dump(ann, fh, indent=1)
    return directory


def load_sample(directory) -> Sample:
    directory = Path(directory)
    try:
        with open(directory / "annotation.json") as fh:
            ann = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{directory}: annotation is not valid JSON: {exc}") from exc
    try:
        rgb = np.asarray(Image.open(directory / "rgb.png").convert("RGB"))
        depth_img = np.asarray(Image.open(directory / "depth.png"))
        depth = depth_img.astype(np.float64) / MM_PER_M
        instances = [
            InstanceAnnotation(
                int(i["class_id"]), tuple(int(x) for x in i["bbox"]), rle_decode(i["mask"]), float(i["volume_ml"])
            )
            for i in ann["instances"]
        ]
        sample = Sample(
            rgb=rgb,
            depth_gt=DepthMap(depth),
            camera=CameraIntrinsics(**ann["camera"]),
            plate_mask=rle_decode(ann["plate_mask"]),
            plane_depth=float(ann["plane_depth"]),
            instances=instances,
            pose_tag=ann["pose_tag"],
            scene_id=str(ann["scene_id"]),
            capture=int(ann.get("capture", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise AnnotationError(f"{directory}: malformed annotation: {exc!r}") from exc
    if depth.shape != rgb.shape[:2]:
        raise SizeMismatchError(f"{directory}: depth {depth.shape} vs rgb {rgb.shape[:2]}")
    return sample.validate()


# --------------------------------------------------------------------------- #
# splits


@dataclass
class DatasetManifest:
    """Sample names (subdirectories of the dataset root) per split, plus pose tags."""

    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    pose_tags: dict = field(default_factory=dict)
    scenes: dict = field(default_factory=dict)

    SELECTORS = {"fixed": ("fixed90",), "free": ("random",), "full": POSE_TAGS}

    def split(self, name: str) -> list:
        if name not in ("train", "val", "test"):
            raise DatasetError(f"unknown split {name!r}")
        return list(getattr(self, name))

    def select(self, split: str = "test", regime: str = "full") -> list:
        """Samples of ``split`` in evaluation regime ``fixed``, ``free`` or ``full``."""
        if regime not in self.SELECTORS:
            raise DatasetError(f"unknown regime {regime!r}; expected fixed, free or full")
        tags = self.SELECTORS[regime]
        return [n for n in self.split(split) if self.pose_tags[n] in tags]

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test,
                "pose_tags": self.pose_tags, "scenes": self.scenes}


def make_splits(samples, ratios=(6 / 8, 1 / 8, 1 / 8), seed: int = 0) -> DatasetManifest:
    """Scene-level train/val/test split; all captures of a scene share a split."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DatasetError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    by_scene = {}
    for s in samples:
        by_scene.setdefault(s.scene_id, []).append(s)
    scenes = sorted(by_scene)
    n = len(scenes)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DatasetError(f"{n} scenes cannot fill three non-empty splits with ratios {ratios}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [scenes[i] for i in order]
    parts = {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }
    manifest = DatasetManifest()
    for split, ids in parts.items():
        names = []
        for sid in ids:
            for s in sorted(by_scene[sid], key=lambda s: s.capture):
                names.append(s.name)
                manifest.pose_tags[s.name] = s.pose_tag
                manifest.scenes[s.name] = sid
        setattr(manifest, split, names)
    return manifest


def save_manifest(manifest: DatasetManifest, root) -> Path:
    path = Path(root) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1)
    return path


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest.json under {root}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
        manifest = DatasetManifest(
            list(raw["train"]), list(raw["val"]), list(raw["test"]), dict(raw["pose_tags"]), dict(raw.get("scenes", {}))
        )
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: malformed manifest: {exc!r}") from exc
    seen = set()
    for split in ("train", "val", "test"):
        names = set(getattr(manifest, split))
        if names & seen:
            raise DatasetError(f"{path}: splits are not disjoint")
        seen |= names
    return manifest


def iter_split(root, names):
    root = Path(root)
    for name in names:
        yield load_sample(os.path.join(root, name))
