"""Filtered point-image correspondences, weighted voting, argmax labels,
nearest-neighbor fill.

Filter chain per camera: frustum (distance cap + in view), temporal window,
backface, occlusion against the rendered z-buffer, sentinel label pixels.
Surviving pairs vote with weight (1 - d^2/d_max^2)^2 * (1 - dt^2/dt_max^2)^2
where d is the Euclidean camera-to-point distance.

Determinism: votes are accumulated in (point_index, camera_index) ascending
order regardless of worker count, so the floating-point sums are reproducible
byte for byte.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .camera import CHUNK_ROWS, backfacing_mask, frustum_select, project_points
from .geometry import SpatialIndex
from .render import render_depth_image
from .scene import CameraFrame, LidarPoint, SceneBundle, SENTINEL


@dataclass(frozen=True)
class FusionParams:
    delta_t_max: float     # seconds, per-pair temporal window
    tau: float             # relative depth tolerance, fraction in (0,1)
    dilation_k: float      # surfel radius multiplier during rasterization
    d_max: float = 400.0   # meters, frustum distance cap
    delta_t_thresh: float = 20.0  # seconds, rasterization temporal window

    def __post_init__(self):
        if min(self.delta_t_max, self.tau, self.dilation_k,
               self.d_max, self.delta_t_thresh) <= 0:
            raise ValueError("all fusion parameters must be positive")
        if not self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.dilation_k < 1:
            raise ValueError("dilation_k must be >= 1")
        if self.delta_t_max > self.delta_t_thresh:
            raise ValueError("delta_t_max must not exceed delta_t_thresh")


def supervision_defaults() -> FusionParams:
    """Strict pass: trusted but sparse pseudo-ground-truth."""
    return FusionParams(delta_t_max=0.1, tau=0.01, dilation_k=8)


def feature_defaults() -> FusionParams:
    """Loose pass: dense input features, errors tolerated."""
    return FusionParams(delta_t_max=10.0, tau=0.05, dilation_k=2)


def _weight_from_squares(d2, dt2, params: FusionParams):
    # shared by the scalar and vectorized paths so recomputation is bit-exact
    rd = 1.0 - d2 / (params.d_max * params.d_max)
    rt = 1.0 - dt2 / (params.delta_t_max * params.delta_t_max)
    return (rd * rd) * (rt * rt)


def vote_weight(camera: CameraFrame, point: LidarPoint, params: FusionParams) -> float:
    delta = camera.center - point.position
    d2 = delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]
    dt = camera.timestamp - point.timestamp
    if d2 > params.d_max * params.d_max:
        raise ValueError("vote_weight called beyond d_max: filter bypass")
    if abs(dt) > params.delta_t_max:
        raise ValueError("vote_weight called beyond delta_t_max: filter bypass")
    return float(_weight_from_squares(d2, dt * dt, params))


class Provenance(IntEnum):
    NONE = 0
    DIRECT_VOTE = 1
    NEIGHBOR_FILL = 2


@dataclass(frozen=True)
class Correspondence:
    point_index: int
    camera_index: int
    weight: float          # in (0, 1]; zero-weight boundary pairs are dropped
    voted_category: int


class CorrespondenceSet:
    """Columnar list of correspondences sorted by (point_index, camera_index)."""

    def __init__(self, point_indices, camera_indices, weights, categories):
        self.point_indices = np.asarray(point_indices, dtype=np.int64)
        self.camera_indices = np.asarray(camera_indices, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.categories = np.asarray(categories, dtype=np.uint16)
        if not (len(self.point_indices) == len(self.camera_indices)
                == len(self.weights) == len(self.categories)):
            raise ValueError("correspondence columns must have equal length")

    def __len__(self) -> int:
        return len(self.point_indices)

    def __getitem__(self, i: int) -> Correspondence:
        return Correspondence(int(self.point_indices[i]), int(self.camera_indices[i]),
                              float(self.weights[i]), int(self.categories[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


@dataclass
class PointLabeling:
    """Per-point fusion outcome (columnar)."""

    categories: np.ndarray    # (N,) uint16, SENTINEL where unlabeled
    provenance: np.ndarray    # (N,) uint8 of Provenance values
    total_weight: np.ndarray  # (N,) float64 vote mass diagnostic

    def __len__(self) -> int:
        return len(self.categories)

    def copy(self) -> "PointLabeling":
        return PointLabeling(self.categories.copy(), self.provenance.copy(),
                             self.total_weight.copy())


def _camera_pass(scene: SceneBundle, surfels, params: FusionParams,
                 cam_idx: int, index: SpatialIndex):
    """All correspondence columns contributed by one camera, point-ascending."""
    camera = scene.cameras[cam_idx]
    label_img = scene.label_images[cam_idx].categories
    points = scene.points

    cand_all = frustum_select(camera, params.d_max, index, points)
    depth = render_depth_image(camera, cand_all, points, surfels,
                               params.dilation_k, params.delta_t_thresh)

    out_pts, out_ws, out_cats = [], [], []
    for lo in range(0, len(cand_all), CHUNK_ROWS):
        cand = cand_all[lo:lo + CHUNK_ROWS]
        dt = camera.timestamp - points.timestamps[cand]
        keep = np.abs(dt) <= params.delta_t_max
        cand, dt = cand[keep], dt[keep]
        if len(cand) == 0:
            continue

        pos = points.positions[cand]
        keep = ~backfacing_mask(camera.center, pos, surfels.normals[cand])
        cand, dt, pos = cand[keep], dt[keep], pos[keep]
        if len(cand) == 0:
            continue

        u, v, z, in_view = project_points(camera, pos)
        rows = np.floor(v).astype(np.int64)
        cols = np.floor(u).astype(np.int64)
        rows[~in_view] = 0
        cols[~in_view] = 0
        with np.errstate(invalid="ignore"):
            rel = np.abs(z - depth.data[rows, cols]) / z
        cats = label_img[rows, cols]

        delta = pos - camera.center
        d2 = delta[:, 0] ** 2 + delta[:, 1] ** 2 + delta[:, 2] ** 2
        w = _weight_from_squares(d2, dt * dt, params)

        keep = in_view & (rel <= params.tau) & (cats != SENTINEL) & (w > 0)
        out_pts.append(cand[keep])
        out_ws.append(w[keep])
        out_cats.append(cats[keep])

    if not out_pts:
        return (np.empty(0, dtype=np.int64), np.empty(0),
                np.empty(0, dtype=np.uint16))
    return np.concatenate(out_pts), np.concatenate(out_ws), np.concatenate(out_cats)


def find_correspondences(scene: SceneBundle, surfels, params: FusionParams,
                         threads: int = 1,
                         index: Optional[SpatialIndex] = None) -> CorrespondenceSet:
    if index is None:
        index = SpatialIndex(scene.points.positions)
    n_cams = len(scene.cameras)
    if n_cams == 0:
        return CorrespondenceSet(np.empty(0, np.int64), np.empty(0, np.int64),
                                 np.empty(0), np.empty(0, np.uint16))
    blocks = [None] * n_cams
    if threads <= 1 or n_cams <= 1:
        for k in range(n_cams):
            blocks[k] = _camera_pass(scene, surfels, params, k, index)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(_camera_pass, scene, surfels, params, k, index): k
                       for k in range(n_cams)}
            for fut in futures:
                blocks[futures[fut]] = fut.result()

    pts = np.concatenate([b[0] for b in blocks]) if blocks else np.empty(0, np.int64)
    cams = np.concatenate([np.full(len(b[0]), k, dtype=np.int64)
                           for k, b in enumerate(blocks)]) if blocks else np.empty(0, np.int64)
    ws = np.concatenate([b[1] for b in blocks]) if blocks else np.empty(0)
    cats = np.concatenate([b[2] for b in blocks]) if blocks else np.empty(0, np.uint16)

    # blocks are point-ascending and stacked in camera order, so a stable sort
    # on point alone yields (point, camera) order
    order = np.argsort(pts, kind="stable")
    return CorrespondenceSet(pts[order], cams[order], ws[order], cats[order])


def tally_votes(correspondences: CorrespondenceSet, point_count: int,
                category_count: int) -> PointLabeling:
    """Argmax of per-category accumulated weights; ties to the lowest id."""
    labels = np.full(point_count, SENTINEL, dtype=np.uint16)
    provenance = np.zeros(point_count, dtype=np.uint8)
    total = np.zeros(point_count, dtype=np.float64)
    if len(correspondences) == 0:
        return PointLabeling(labels, provenance, total)

    cats = correspondences.categories
    if int(cats.max()) >= category_count:
        raise ValueError("voted category outside the declared category range")
    pts = correspondences.point_indices
    if int(pts.min()) < 0 or int(pts.max()) >= point_count:
        raise ValueError("point index outside the declared point range")

    uids = np.unique(cats)
    acc = np.zeros((point_count, len(uids)), dtype=np.float64)
    np.add.at(acc, (pts, np.searchsorted(uids, cats)), correspondences.weights)

    voted = np.bincount(pts, minlength=point_count) > 0
    best = np.argmax(acc, axis=1)  # first max = lowest category id
    labels[voted] = uids[best[voted]]
    provenance[voted] = Provenance.DIRECT_VOTE
    total = acc.sum(axis=1)
    return PointLabeling(labels, provenance, total)


def _stream_tally(scene: SceneBundle, surfels, params: FusionParams,
                  index: SpatialIndex, threads: int) -> PointLabeling:
    """Per-camera accumulation without materializing all correspondences.

    Each accumulator cell receives one addition per camera, applied in
    ascending camera order, exactly as the sorted correspondence set would,
    so the result is bitwise identical to tally_votes(find_correspondences)
    while holding only one camera block per worker in memory.
    """
    n = len(scene.points)
    ids = scene.taxonomy.ids  # ascending
    labels = np.full(n, SENTINEL, dtype=np.uint16)
    provenance = np.zeros(n, dtype=np.uint8)
    if len(ids) == 0 or len(scene.cameras) == 0:
        return PointLabeling(labels, provenance, np.zeros(n))

    acc = np.zeros((n, len(ids)), dtype=np.float64)
    voted = np.zeros(n, dtype=bool)

    def apply(block):
        pts, ws, cats = block
        if len(pts) == 0:
            return
        slot = np.searchsorted(ids, cats)
        if (slot >= len(ids)).any() or (ids[np.minimum(slot, len(ids) - 1)]
                                        != cats).any():
            raise ValueError("voted category outside the taxonomy")
        np.add.at(acc, (pts, slot), ws)
        voted[pts] = True

    n_cams = len(scene.cameras)
    if threads <= 1 or n_cams <= 1:
        for k in range(n_cams):
            apply(_camera_pass(scene, surfels, params, k, index))
    else:
        # waves of `threads` cameras: parallel compute, in-order apply
        for lo in range(0, n_cams, threads):
            group = range(lo, min(lo + threads, n_cams))
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(
                    lambda k: _camera_pass(scene, surfels, params, k, index),
                    group))
            for block in parts:
                apply(block)

    best = np.argmax(acc, axis=1)  # first max = lowest category id
    labels[voted] = ids[best[voted]].astype(np.uint16)
    provenance[voted] = Provenance.DIRECT_VOTE
    return PointLabeling(labels, provenance, acc.sum(axis=1))


def fill_unlabeled(labeling: PointLabeling, index: SpatialIndex,
                   points) -> PointLabeling:
    """Copy each unlabeled point's category from the nearest direct-vote
    point; exact distance ties go to the lowest point index."""
    out = labeling.copy()
    direct = np.flatnonzero(labeling.provenance == Provenance.DIRECT_VOTE)
    empty = np.flatnonzero(labeling.provenance == Provenance.NONE)
    if len(direct) == 0 or len(empty) == 0:
        return out

    positions = points.positions if hasattr(points, "positions") else np.asarray(points)
    tree = cKDTree(positions[direct])
    k = min(2, len(direct))
    d, nn = tree.query(positions[empty], k=k)
    if k == 1:
        chosen = direct[nn]
    else:
        chosen = direct[nn[:, 0]]
        for row in np.flatnonzero(d[:, 0] == d[:, 1]):
            # exact tie at the tree's precision: re-resolve by lowest index
            q = positions[empty[row]]
            ball = tree.query_ball_point(q, d[row, 0] * (1 + 1e-9) + 1e-300)
            cand = direct[np.sort(np.asarray(ball, dtype=np.int64))]
            dd = ((positions[cand] - q) ** 2).sum(axis=1)
            chosen[row] = cand[np.argmin(dd)]  # first min = lowest index

    out.categories[empty] = labeling.categories[chosen]
    out.provenance[empty] = Provenance.NEIGHBOR_FILL
    return out


def fuse(scene: SceneBundle, surfels, params: FusionParams, fill: bool = False,
         threads: int = 1, index: Optional[SpatialIndex] = None) -> PointLabeling:
    """Correspondence search, vote tally, optional fill.

    Streams camera blocks through the accumulator instead of composing
    find_correspondences with tally_votes directly; the output is bitwise
    identical (see _stream_tally) at a fraction of the peak memory.
    """
    if index is None:
        index = SpatialIndex(scene.points.positions)
    labeling = _stream_tally(scene, surfels, params, index, threads)
    if fill:
        labeling = fill_unlabeled(labeling, index, scene.points)
    return labeling
