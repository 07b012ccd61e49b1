"""Core domain types shared by the whole pipeline.

Everything downstream (indexing, rendering, fusion, evaluation) operates on
the types defined here.  Construction only coerces shapes and dtypes; value
invariants (finite coordinates, orthonormal rotations, label ids in the
taxonomy) are checked by ``validate_scene`` which reports violations as data
instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

# Reserved id meaning "unlabeled / no category"; never a real category.
SENTINEL = 65535

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Category:
    id: int  # 0 <= id < SENTINEL
    name: str
    is_mover: bool = False
    is_ignore: bool = False


class ClassTaxonomy:
    """Immutable category table, ordered by ascending category id."""

    def __init__(self, categories: Iterable[Category]):
        cats = sorted(categories, key=lambda c: c.id)
        ids = [c.id for c in cats]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate category ids in taxonomy")
        for c in cats:
            if not 0 <= c.id < SENTINEL:
                raise ValueError(f"category id {c.id} outside [0, {SENTINEL})")
        self._categories = tuple(cats)
        self._by_id = {c.id: c for c in cats}
        self._index = {c.id: i for i, c in enumerate(cats)}

    @property
    def categories(self) -> tuple[Category, ...]:
        return self._categories

    @property
    def ids(self) -> np.ndarray:
        return np.array([c.id for c in self._categories], dtype=np.int64)

    def __len__(self) -> int:
        return len(self._categories)

    def __iter__(self) -> Iterator[Category]:
        return iter(self._categories)

    def __contains__(self, category_id: int) -> bool:
        return category_id in self._by_id

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassTaxonomy) and self._categories == other._categories

    def category(self, category_id: int) -> Category:
        return self._by_id[category_id]

    def index_of(self, category_id: int) -> int:
        """Dense row/column slot of a category (ids sorted ascending)."""
        return self._index[category_id]

    def mover_ids(self) -> frozenset[int]:
        return frozenset(c.id for c in self._categories if c.is_mover)

    def ignore_ids(self) -> frozenset[int]:
        return frozenset(c.id for c in self._categories if c.is_ignore)


@dataclass(frozen=True)
class LidarPoint:
    """A single timestamped world-frame sample; sensor_id is informational."""

    position: np.ndarray  # (3,) meters, world frame
    timestamp: float      # seconds, scene-relative
    sensor_id: int = 0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "sensor_id", int(self.sensor_id))


class PointCloud:
    """Array-backed sequence of LidarPoint (columnar storage for scale)."""

    def __init__(self, positions, timestamps, sensor_ids=None):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        n = len(self.positions)
        self.timestamps = np.ascontiguousarray(timestamps, dtype=np.float64)
        if self.timestamps.shape != (n,):
            raise ValueError("timestamps length does not match positions")
        if sensor_ids is None:
            sensor_ids = np.zeros(n, dtype=np.int32)
        self.sensor_ids = np.ascontiguousarray(sensor_ids, dtype=np.int32)
        if self.sensor_ids.shape != (n,):
            raise ValueError("sensor_ids length does not match positions")

    @classmethod
    def from_points(cls, points: Sequence[LidarPoint]) -> "PointCloud":
        pos = np.array([p.position for p in points], dtype=np.float64).reshape(-1, 3)
        ts = np.array([p.timestamp for p in points], dtype=np.float64)
        sid = np.array([p.sensor_id for p in points], dtype=np.int32)
        return cls(pos, ts, sid)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> LidarPoint:
        return LidarPoint(self.positions[i], self.timestamps[i], self.sensor_ids[i])

    def __iter__(self) -> Iterator[LidarPoint]:
        for i in range(len(self)):
            yield self[i]


@dataclass(frozen=True)
class Surfel:
    """Oriented disk around a lidar point: unit normal/tangent and two radii."""

    normal: np.ndarray           # unit (3,)
    tangent: np.ndarray          # unit (3,), perpendicular to normal
    radius_tangent: float        # meters > 0
    radius_bitangent: float      # meters, 0 < radius_bitangent <= radius_tangent

    def __post_init__(self):
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=np.float64).reshape(3))
        object.__setattr__(self, "tangent", np.asarray(self.tangent, dtype=np.float64).reshape(3))
        object.__setattr__(self, "radius_tangent", float(self.radius_tangent))
        object.__setattr__(self, "radius_bitangent", float(self.radius_bitangent))

    @property
    def bitangent(self) -> np.ndarray:
        return np.cross(self.normal, self.tangent)


class SurfelArray:
    """Columnar sequence of Surfel, aligned index-for-index with a PointCloud."""

    def __init__(self, normals, tangents, radii_tangent, radii_bitangent):
        self.normals = np.ascontiguousarray(normals, dtype=np.float64)
        self.tangents = np.ascontiguousarray(tangents, dtype=np.float64)
        self.radii_tangent = np.ascontiguousarray(radii_tangent, dtype=np.float64)
        self.radii_bitangent = np.ascontiguousarray(radii_bitangent, dtype=np.float64)
        n = len(self.normals)
        if (self.normals.shape != (n, 3) or self.tangents.shape != (n, 3)
                or self.radii_tangent.shape != (n,) or self.radii_bitangent.shape != (n,)):
            raise ValueError("inconsistent surfel array shapes")

    @classmethod
    def from_surfels(cls, surfels: Sequence[Surfel]) -> "SurfelArray":
        return cls(
            np.array([s.normal for s in surfels]).reshape(-1, 3),
            np.array([s.tangent for s in surfels]).reshape(-1, 3),
            np.array([s.radius_tangent for s in surfels]),
            np.array([s.radius_bitangent for s in surfels]),
        )

    def __len__(self) -> int:
        return len(self.normals)

    def __getitem__(self, i: int) -> Surfel:
        return Surfel(self.normals[i], self.tangents[i],
                      self.radii_tangent[i], self.radii_bitangent[i])

    def __iter__(self) -> Iterator[Surfel]:
        for i in range(len(self)):
            yield self[i]


@dataclass(frozen=True)
class CameraFrame:
    """Posed, timestamped pinhole camera; pose maps world to camera frame."""

    frame_id: int
    timestamp: float
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3), camera-from-world
    translation: np.ndarray  # (3,), camera-from-world

    def __post_init__(self):
        object.__setattr__(self, "frame_id", int(self.frame_id))
        object.__setattr__(self, "timestamp", float(self.timestamp))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", rot)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", tr)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates (inverse-transformed origin)."""
        return -self.rotation.T @ self.translation

    def matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class LabelImage:
    """Per-pixel category ids for one camera frame (row-major, 16-bit)."""

    categories: np.ndarray  # (height, width) uint16

    def __post_init__(self):
        cats = np.ascontiguousarray(self.categories, dtype=np.uint16)
        if cats.ndim != 2:
            raise ValueError(f"label image must be 2-D, got shape {cats.shape}")
        object.__setattr__(self, "categories", cats)

    @property
    def height(self) -> int:
        return self.categories.shape[0]

    @property
    def width(self) -> int:
        return self.categories.shape[1]


@dataclass
class SceneBundle:
    """One scene: points plus posed label images and their taxonomy."""

    points: PointCloud
    cameras: list[CameraFrame]
    label_images: list[LabelImage]
    taxonomy: ClassTaxonomy
    meta: dict = field(default_factory=dict)


def _check_finite(name: str, arr: np.ndarray, report: list[str]) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        first = int(np.flatnonzero(bad.reshape(len(arr), -1).any(axis=1))[0])
        report.append(f"{name}: non-finite value at index {first}")


def validate_scene(bundle: SceneBundle) -> list[str]:
    """Check every type invariant; return a list of violations (empty = ok).

    Pure and total: malformed values are reported as strings, never raised.
    """
    report: list[str] = []
    pts = bundle.points
    if len(pts) == 0:
        report.append("points: empty point cloud")
    _check_finite("point positions", pts.positions, report)
    _check_finite("point timestamps", pts.timestamps.reshape(-1, 1), report)

    if len(bundle.cameras) != len(bundle.label_images):
        report.append(
            f"bundle: {len(bundle.cameras)} cameras but {len(bundle.label_images)} label images")

    valid_ids = set(int(i) for i in bundle.taxonomy.ids)
    valid_ids.add(SENTINEL)

    for ci, cam in enumerate(bundle.cameras):
        tag = f"camera {ci} (frame_id {cam.frame_id})"
        if not np.isfinite(cam.timestamp):
            report.append(f"{tag}: non-finite timestamp")
        if not (cam.fx > 0 and cam.fy > 0):
            report.append(f"{tag}: focal lengths must be positive (fx={cam.fx}, fy={cam.fy})")
        if cam.width < 1 or cam.height < 1:
            report.append(f"{tag}: image dimensions must be >= 1")
        if not (0 <= cam.cx < cam.width and 0 <= cam.cy < cam.height):
            report.append(f"{tag}: principal point ({cam.cx}, {cam.cy}) outside image")
        if not np.isfinite(cam.rotation).all() or not np.isfinite(cam.translation).all():
            report.append(f"{tag}: non-finite pose")
        else:
            err = np.abs(cam.rotation.T @ cam.rotation - np.eye(3)).max()
            if err > 1e-9:
                report.append(f"{tag}: rotation not orthonormal (max deviation {err:.3e})")
            elif abs(np.linalg.det(cam.rotation) - 1.0) > 1e-6:
                report.append(f"{tag}: rotation is not proper (det != +1)")

    for ci, (cam, img) in enumerate(zip(bundle.cameras, bundle.label_images)):
        if (img.height, img.width) != (cam.height, cam.width):
            report.append(
                f"label image {ci}: {img.width}x{img.height} does not match "
                f"camera {cam.width}x{cam.height}")
        present = np.unique(img.categories)
        unknown = [int(v) for v in present if int(v) not in valid_ids]
        if unknown:
            report.append(f"label image {ci}: ids not in taxonomy: {unknown}")

    return report
