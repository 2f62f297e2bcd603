"""Synthetic LiDAR-like scenes and the on-disk formats that carry them.

Scenes hold non-overlapping oriented boxes whose surfaces are sampled
with bounded jitter, plus uniform clutter, all deterministic per seed.
Point clouds travel as raw little-endian float32 x/y/z/intensity
records; labels and detections travel as JSON.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import Box3D, Detection, bev_intersection_area, normalize_yaw
from .geometry import PointCloud

log = logging.getLogger("shiftssd")

_RECORD_BYTES = 16  # four little-endian float32 per point


@dataclass
class ClassSpec:
    """Mean object dimensions plus a uniform half-range size jitter."""

    name: str
    mean_size: tuple[float, float, float]
    size_jitter: tuple[float, float, float]


@dataclass
class SynthConfig:
    extent: float = 12.0  # scene spans [-extent/2, extent/2] in x and y
    points_per_scene: int = 2048
    noise_points: int = 384
    objects_min: int = 2
    objects_max: int = 4
    point_jitter: float = 0.02  # uniform surface jitter bound, meters
    noise_height: float = 2.0
    classes: list[ClassSpec] = field(
        default_factory=lambda: [
            ClassSpec("vehicle", (4.2, 1.9, 1.6), (0.3, 0.1, 0.1)),
            ClassSpec("cabinet", (1.4, 1.4, 1.8), (0.15, 0.15, 0.1)),
        ]
    )

    def __post_init__(self):
        if self.extent <= 0 or self.noise_height <= 0:
            raise ValueError("scene extents must be positive")
        if not self.classes:
            raise ValueError("at least one class spec required")
        if not 0 <= self.objects_min <= self.objects_max:
            raise ValueError("invalid objects-per-scene range")
        if self.points_per_scene < 1:
            raise ValueError("points_per_scene must be >= 1")
        if self.objects_max > 0:
            per_object = (self.points_per_scene - self.noise_points) // self.objects_max
            if per_object < 8:
                raise ValueError(
                    "config cannot guarantee 8 surface points per object; "
                    "raise points_per_scene or lower noise_points/objects_max"
                )


@dataclass
class Scene:
    cloud: PointCloud
    objects: list[tuple[Box3D, int]]  # class ids are 1-based; 0 is background


def _boxes_disjoint(a: Box3D, b: Box3D) -> bool:
    z_gap = abs(a.center[2] - b.center[2]) >= (a.size[2] + b.size[2]) / 2.0
    return z_gap or bev_intersection_area(a, b) == 0.0


_SHELL_INSET = 0.06  # sampled shell sits this far inside the labeled box


def _sample_surface_points(box: Box3D, count: int, jitter: float, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted samples on the six faces of a slightly shrunk shell,
    jittered within +-jitter, so object points stay strictly inside the
    labeled box whenever jitter < the shell inset."""
    l, w, h = np.maximum(box.size - 2.0 * _SHELL_INSET, 0.5 * box.size)
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    local = np.empty((count, 3))
    for i, face in enumerate(faces):
        if face < 2:  # +-x faces
            local[i] = (0.5 if face == 0 else -0.5) * l, u[i] * w, v[i] * h
        elif face < 4:  # +-y faces
            local[i] = u[i] * l, (0.5 if face == 2 else -0.5) * w, v[i] * h
        else:  # +-z faces
            local[i] = u[i] * l, v[i] * w, (0.5 if face == 4 else -0.5) * h
    if jitter > 0:
        local += rng.uniform(-jitter, jitter, size=local.shape)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def generate_scene(config: SynthConfig, seed: int) -> Scene:
    """Place non-overlapping boxes, scatter their surfaces, add clutter.

    Fully deterministic per (config, seed). Raises when the requested
    object count cannot be placed without overlap after bounded retries.
    """
    rng = np.random.default_rng(seed)
    n_objects = int(rng.integers(config.objects_min, config.objects_max + 1))
    half = config.extent / 2.0

    objects: list[tuple[Box3D, int]] = []
    for _ in range(n_objects):
        placed = False
        for _attempt in range(200):
            cls = int(rng.integers(len(config.classes)))
            spec = config.classes[cls]
            size = np.array(spec.mean_size) + rng.uniform(-1, 1, size=3) * np.array(spec.size_jitter)
            margin = 0.5 * float(np.hypot(size[0], size[1]))  # BEV half-diagonal
            center_xy = rng.uniform(-half + margin, half - margin, size=2)
            box = Box3D(
                center=np.array([center_xy[0], center_xy[1], size[2] / 2.0]),
                size=size,
                yaw=float(rng.uniform(-np.pi, np.pi)),
            )
            if all(_boxes_disjoint(box, other) for other, _ in objects):
                objects.append((box, cls + 1))
                placed = True
                break
        if not placed:
            raise RuntimeError("placement failure: could not fit requested objects")

    points: list[np.ndarray] = []
    per_object = (
        (config.points_per_scene - config.noise_points) // n_objects if n_objects else 0
    )
    for box, _ in objects:
        points.append(_sample_surface_points(box, per_object, config.point_jitter, rng))
    n_noise = config.points_per_scene - per_object * n_objects
    noise = np.column_stack(
        [
            rng.uniform(-half, half, size=n_noise),
            rng.uniform(-half, half, size=n_noise),
            rng.uniform(0.0, config.noise_height, size=n_noise),
        ]
    )
    points.append(noise)
    positions = np.vstack(points)
    order = rng.permutation(positions.shape[0])
    positions = positions[order]
    intensity = rng.uniform(0.0, 1.0, size=(positions.shape[0], 1))
    return Scene(cloud=PointCloud(positions=positions, features=intensity), objects=objects)


# ---------------------------------------------------------------------------
# point cloud files: N x (x, y, z, intensity) little-endian float32


def write_cloud(path, cloud: PointCloud) -> None:
    if cloud.channels != 1:
        raise ValueError("cloud files carry exactly one intensity channel")
    rows = np.hstack([cloud.positions, cloud.features]).astype("<f4")
    Path(path).write_bytes(rows.tobytes())


def read_cloud(path) -> PointCloud:
    blob = Path(path).read_bytes()
    if len(blob) == 0 or len(blob) % _RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: byte count {len(blob)} is not a positive multiple of {_RECORD_BYTES}"
        )
    rows = np.frombuffer(blob, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(positions=rows[:, :3], features=rows[:, 3:4])


# ---------------------------------------------------------------------------
# label files: JSON list of {class_id, center, size, yaw}


def write_labels(path, objects: list[tuple[Box3D, int]]) -> None:
    payload = [
        {
            "class_id": int(cls),
            "center": [float(v) for v in box.center],
            "size": [float(v) for v in box.size],
            "yaw": float(box.yaw),
        }
        for box, cls in objects
    ]
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def read_labels(path) -> list[tuple[Box3D, int]]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: malformed label JSON: {err}") from err
    if not isinstance(payload, list):
        raise ValueError(f"{path}: label file must hold a JSON list")
    out = []
    for i, entry in enumerate(payload):
        try:
            center = np.asarray(entry["center"], dtype=np.float64)
            size = np.asarray(entry["size"], dtype=np.float64)
            yaw = float(entry["yaw"])
            cls = int(entry["class_id"])
        except (KeyError, TypeError, ValueError) as err:
            raise ValueError(f"{path}: label {i} malformed: {err}") from err
        if (size <= 0).any():
            raise ValueError(f"{path}: label {i} has non-positive size")
        wrapped = normalize_yaw(yaw)
        if wrapped != yaw:
            log.warning("%s: label %d yaw %.6f normalized to %.6f", path, i, yaw, wrapped)
        out.append((Box3D(center=center, size=size, yaw=wrapped), cls))
    return out


# ---------------------------------------------------------------------------
# detection files: one JSON object per line


def write_detections(path, scene_id: str, detections: list[Detection]) -> None:
    with open(path, "w") as fh:
        for det in detections:
            fh.write(
                json.dumps(
                    {
                        "scene_id": scene_id,
                        "class_id": int(det.class_id),
                        "score": float(det.score),
                        "center": [float(v) for v in det.box.center],
                        "size": [float(v) for v in det.box.size],
                        "yaw": float(det.box.yaw),
                    }
                )
            )
            fh.write("\n")


def read_detections(path) -> list[tuple[str, Detection]]:
    out = []
    for line_no, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            det = Detection(
                box=Box3D(center=entry["center"], size=entry["size"], yaw=entry["yaw"]),
                class_id=int(entry["class_id"]),
                score=float(entry["score"]),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as err:
            raise ValueError(f"{path}: bad detection on line {line_no + 1}: {err}") from err
        out.append((str(entry["scene_id"]), det))
    return out


# ---------------------------------------------------------------------------
# datasets: paired <id>.bin / <id>.json files in one directory


def write_scene(directory, scene_id: str, scene: Scene) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_cloud(directory / f"{scene_id}.bin", scene.cloud)
    write_labels(directory / f"{scene_id}.json", scene.objects)


def dataset(directory, split: str = "") -> list[tuple[Scene, str]]:
    """Load every paired scene, in lexicographic id order.

    `split` selects an optional subdirectory. A .bin without its .json
    (or the reverse) is an error naming the orphan. Run manifests
    (manifest.json) are not scene files and are skipped.
    """
    root = Path(directory) / split if split else Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    bins = {p.stem for p in root.glob("*.bin")}
    jsons = {p.stem for p in root.glob("*.json") if p.name != "manifest.json"}
    orphans = sorted(bins.symmetric_difference(jsons))
    if orphans:
        missing = [
            f"{name}.json" if name in bins else f"{name}.bin" for name in orphans
        ]
        raise ValueError(f"unpaired dataset files in {root}: {', '.join(missing)}")
    scenes = []
    for stem in sorted(bins):
        cloud = read_cloud(root / f"{stem}.bin")
        objects = read_labels(root / f"{stem}.json")
        scenes.append((Scene(cloud=cloud, objects=objects), stem))
    return scenes
