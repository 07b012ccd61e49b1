"""Pinhole projection, frustum culling, and backface testing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .geometry import SpatialIndex
from .scene import CameraFrame, PointCloud, Surfel

GRAZING_EPSILON = 1e-3  # |cos| at or below this counts as edge-on

# Batched point math works on slices of this many rows so per-worker scratch
# stays tens of MB on multi-million-point scenes.  Slicing is positional and
# the per-row math elementwise, so results do not depend on the slice layout.
CHUNK_ROWS = 262144


@dataclass(frozen=True)
class Projection:
    u: float      # pixels, continuous; pixel (r, c) has center (c + 0.5, r + 0.5)
    v: float
    depth: float  # camera-frame Z, meters


def world_to_camera(camera: CameraFrame, positions: np.ndarray) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    return positions @ camera.rotation.T + camera.translation


def project_points(camera: CameraFrame, positions: np.ndarray):
    """Vectorized pinhole projection.

    Returns (u, v, depth, in_view); u/v/depth are unreliable where depth <= 0.
    in_view requires depth > 0, 0 <= u < width and 0 <= v < height.
    """
    cam = world_to_camera(camera, positions)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * cam[:, 0] / z + camera.cx
        v = camera.fy * cam[:, 1] / z + camera.cy
    in_view = (z > 0) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return u, v, z, in_view


def project(camera: CameraFrame, position) -> Optional[Projection]:
    """Project one world point; None when behind the camera or off the image."""
    u, v, z, in_view = project_points(camera, np.asarray(position, dtype=np.float64)[None, :])
    if not in_view[0]:
        return None
    return Projection(float(u[0]), float(v[0]), float(z[0]))


def frustum_select(camera: CameraFrame, d_max: float,
                   index: Optional[SpatialIndex],
                   points: Union[PointCloud, np.ndarray]) -> np.ndarray:
    """Indices of points within d_max of the camera center and in view,
    ascending.  The scan is vectorized over all points; the d_max cap in this
    pipeline covers whole scenes, where a tree radius query prunes nothing."""
    positions = points.positions if isinstance(points, PointCloud) else np.asarray(points)
    picked = []
    for lo in range(0, len(positions), CHUNK_ROWS):
        block = positions[lo:lo + CHUNK_ROWS]
        delta = block - camera.center
        d2 = delta[:, 0] ** 2 + delta[:, 1] ** 2 + delta[:, 2] ** 2
        near = d2 <= d_max * d_max
        _, _, _, in_view = project_points(camera, block)
        picked.append(np.flatnonzero(near & in_view) + lo)
    if not picked:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(picked).astype(np.int64)


def backfacing_mask(camera_center: np.ndarray, positions: np.ndarray,
                    normals: np.ndarray, grazing_epsilon: float = GRAZING_EPSILON) -> np.ndarray:
    """Two-sided test: True where the disk is edge-on to the sight line.

    Surfel normals are sign-normalized, so orientation carries no information;
    only |cos| between the normal and the direction to the camera is tested.
    """
    to_cam = camera_center - positions
    norm = np.sqrt(to_cam[:, 0] ** 2 + to_cam[:, 1] ** 2 + to_cam[:, 2] ** 2)
    dot = np.abs((to_cam * normals).sum(axis=1))
    # a point exactly at the camera center has no sight line; call it edge-on
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(norm > 0, dot / norm, 0.0)
    return cos <= grazing_epsilon


def is_backfacing(camera: CameraFrame, position, surfel: Surfel,
                  grazing_epsilon: float = GRAZING_EPSILON) -> bool:
    pos = np.asarray(position, dtype=np.float64)[None, :]
    return bool(backfacing_mask(camera.center, pos, surfel.normal[None, :], grazing_epsilon)[0])
