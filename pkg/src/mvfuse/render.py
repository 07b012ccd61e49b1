"""Rasterize dilated surfels into per-camera z-buffers.

Rasterization is analytic: inside each surfel's conservative projected
bounding box, every pixel-center ray is intersected with the disk plane and
tested against the dilated ellipse.  The z-buffer keeps the minimum
camera-frame depth per pixel, so the result is independent of surfel order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .camera import CHUNK_ROWS, backfacing_mask
from .scene import CameraFrame, PointCloud, Surfel, SurfelArray

_PAIR_BUDGET = 2_000_000  # max (pixel, surfel) pairs evaluated per batch


@dataclass
class DepthImage:
    """Per-pixel depth in meters; +infinity where nothing rasterized."""

    data: np.ndarray  # (H, W) float64

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("depth data must be 2-D")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def new_depth_image(camera: CameraFrame) -> DepthImage:
    return DepthImage(np.full((camera.height, camera.width), np.inf))


def _rotate(vec: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    # componentwise on purpose: BLAS matmul picks shape-dependent kernels,
    # and the one-surfel path must match the batch path bit for bit
    x, y, z = vec[:, 0], vec[:, 1], vec[:, 2]
    r = rotation
    return np.stack([r[0, 0] * x + r[0, 1] * y + r[0, 2] * z,
                     r[1, 0] * x + r[1, 1] * y + r[1, 2] * z,
                     r[2, 0] * x + r[2, 1] * y + r[2, 2] * z], axis=1)


def _pixel_ranges(camera: CameraFrame, c_cam: np.ndarray, r_sphere: np.ndarray):
    """Conservative pixel bounding box per surfel from the bounding sphere.

    Interval bounds on X/Z and Y/Z over the camera-frame box around the
    center; surfels entirely behind the camera get an empty box, surfels
    straddling the image plane get the full image.
    """
    x, y, z = c_cam[:, 0], c_cam[:, 1], c_cam[:, 2]
    zl, zh = z - r_sphere, z + r_sphere
    front = zl > 0

    def axis_range(w, wl, wh, f, c, n_pix):
        lo = np.full(len(w), 0.0)
        hi = np.full(len(w), float(n_pix))
        with np.errstate(divide="ignore", invalid="ignore"):
            corners = np.stack([wl / zl, wl / zh, wh / zl, wh / zh])
        lo[front] = f * corners.min(axis=0)[front] + c
        hi[front] = f * corners.max(axis=0)[front] + c
        # pixel k has center k + 0.5; clip to the image
        k0 = np.maximum(np.ceil(lo - 0.5), 0).astype(np.int64)
        k1 = np.minimum(np.floor(hi - 0.5), n_pix - 1).astype(np.int64)
        return k0, k1

    c0, c1 = axis_range(x, x - r_sphere, x + r_sphere, camera.fx, camera.cx, camera.width)
    r0, r1 = axis_range(y, y - r_sphere, y + r_sphere, camera.fy, camera.cy, camera.height)
    visible = (zh > 0) & (c0 <= c1) & (r0 <= r1)
    return r0, r1, c0, c1, visible


def _splat(depth: np.ndarray, camera: CameraFrame, c_cam, n_cam, t_cam, b_cam,
           semi_t: np.ndarray, semi_b: np.ndarray) -> None:
    """Min-merge the given camera-frame disks into the flat z-buffer."""
    r_sphere = np.maximum(semi_t, semi_b)
    r0, r1, c0, c1, visible = _pixel_ranges(camera, c_cam, r_sphere)
    if not visible.any():
        return
    sel = np.flatnonzero(visible)
    areas = (r1[sel] - r0[sel] + 1) * (c1[sel] - c0[sel] + 1)

    n_dot_c = (n_cam * c_cam).sum(axis=1)
    width = camera.width

    # chunk surfels so the expanded pair set stays within the budget
    bounds = np.searchsorted(np.cumsum(areas), np.arange(0, areas.sum(), _PAIR_BUDGET))
    bounds = np.unique(np.append(bounds, len(sel)))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        ids = sel[lo:hi]
        a = areas[lo:hi]
        g = ids[np.repeat(np.arange(len(ids)), a)]  # one gather per column below
        offs = np.arange(a.sum()) - np.repeat(np.cumsum(a) - a, a)
        box_w = c1[g] - c0[g] + 1
        row = r0[g] + offs // box_w
        col = c0[g] + offs % box_w

        dx = (col + 0.5 - camera.cx) / camera.fx
        dy = (row + 0.5 - camera.cy) / camera.fy
        n = n_cam[g]
        denom = n[:, 0] * dx + n[:, 1] * dy + n[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = n_dot_c[g] / denom
            c = c_cam[g]
            qx = s * dx - c[:, 0]
            qy = s * dy - c[:, 1]
            qz = s - c[:, 2]
            t = t_cam[g]
            b = b_cam[g]
            et = (qx * t[:, 0] + qy * t[:, 1] + qz * t[:, 2]) / semi_t[g]
            eb = (qx * b[:, 0] + qy * b[:, 1] + qz * b[:, 2]) / semi_b[g]
            hit = (s > 0) & np.isfinite(s) & (et * et + eb * eb <= 1.0)
        np.minimum.at(depth, row[hit] * width + col[hit], s[hit])


def rasterize_surfel(depth: DepthImage, camera: CameraFrame, position,
                     surfel: Surfel, dilation_k: float) -> None:
    """Min-merge one dilated surfel into the depth image (edge-on disks are
    skipped: their projection is degenerate)."""
    pos = np.asarray(position, dtype=np.float64)[None, :]
    if backfacing_mask(camera.center, pos, surfel.normal[None, :])[0]:
        return
    R = camera.rotation
    _splat(depth.data.reshape(-1), camera,
           _rotate(pos, R) + camera.translation,
           _rotate(surfel.normal[None, :], R),
           _rotate(surfel.tangent[None, :], R),
           _rotate(surfel.bitangent[None, :], R),
           np.array([dilation_k * surfel.radius_tangent]),
           np.array([dilation_k * surfel.radius_bitangent]))


def render_depth_image(camera: CameraFrame, candidates: np.ndarray,
                       points: Union[PointCloud, np.ndarray], surfels: SurfelArray,
                       dilation_k: float, delta_t_thresh: float) -> DepthImage:
    """Rasterize every candidate whose timestamp is within delta_t_thresh of
    the camera's; order-independent by min-commutativity."""
    positions = points.positions if isinstance(points, PointCloud) else np.asarray(points)
    timestamps = points.timestamps if isinstance(points, PointCloud) else None
    candidates = np.asarray(candidates, dtype=np.int64)

    depth = new_depth_image(camera)
    R = camera.rotation
    for lo in range(0, len(candidates), CHUNK_ROWS):
        idx = candidates[lo:lo + CHUNK_ROWS]
        if timestamps is not None:
            idx = idx[np.abs(timestamps[idx] - camera.timestamp) <= delta_t_thresh]
        if len(idx) == 0:
            continue
        keep = ~backfacing_mask(camera.center, positions[idx], surfels.normals[idx])
        if not keep.any():
            continue
        idx = idx[keep]
        _splat(depth.data.reshape(-1), camera,
               _rotate(positions[idx], R) + camera.translation,
               _rotate(surfels.normals[idx], R),
               _rotate(surfels.tangents[idx], R),
               _rotate(np.cross(surfels.normals[idx], surfels.tangents[idx]), R),
               dilation_k * surfels.radii_tangent[idx],
               dilation_k * surfels.radii_bitangent[idx])
    return depth


def depth_to_pgm(depth: DepthImage, path) -> None:
    """Debug dump: millimeter quantization, 65535 = empty.  Lossy by design."""
    mm = np.where(np.isfinite(depth.data),
                  np.clip(np.rint(depth.data * 1000.0), 0, 65534), 65535)
    header = b"P5\n%d %d\n65535\n" % (depth.width, depth.height)
    with open(path, "wb") as fh:
        fh.write(header + mm.astype(">u2").tobytes())
