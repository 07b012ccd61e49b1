"""Seeded synthetic scenes reproducing the three classic 2D-to-3D label
failure modes, with exact per-point ground truth.

mover_aliasing   A box "car" parks over a road patch and drives off partway
                 through the capture.  It never returns lidar (movers alias
                 out of the sweep), and while it is within the temporal
                 shadow margin of a lidar tick the road behind it is not
                 sampled either (the sensor cannot see through it).  The road
                 there is therefore sampled only after departure, while most
                 images still show the car over those pixels.
occlusion_bleed  A static thin pole in front of a wall; the label images
                 dilate the pole mask by a few pixels over the wall, the way
                 2D predictions bleed across depth discontinuities.
fence            Vertical slats in front of road; the label images paint the
                 whole fence rectangle solid, although rays pass between the
                 slats.

Every scene: one camera rig position, several yawed poses, frames at the
camera rate with timestamps deliberately offset from the lidar ticks.
Ground truth comes from the generating geometry, never from projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .scene import (CameraFrame, Category, ClassTaxonomy, LabelImage,
                    PointCloud, SceneBundle, SENTINEL)

SCENARIOS = ("mover_aliasing", "occlusion_bleed", "fence")

ROAD, CAR, FENCE, POLE, WALL = 0, 1, 2, 3, 4

_TAXONOMY = ClassTaxonomy([
    Category(ROAD, "road"),
    Category(CAR, "car", is_mover=True),
    Category(FENCE, "fence"),
    Category(POLE, "pole"),
    Category(WALL, "wall"),
])


@dataclass(frozen=True)
class SynthConfig:
    scenario: str
    rng_seed: int = 0
    duration: float = 10.0        # seconds of capture
    lidar_rate: float = 10.0      # ticks per second
    camera_rate: float = 2.0      # frames per second per pose
    camera_count: int = 1         # rig poses, yawed evenly about vertical
    image_width: int = 128
    image_height: int = 96
    focal: float = 48.0
    object_speed: float = 1.5     # mover departure speed, m/s
    leave_time: float = 6.0       # mover departure start, s
    bleed_px: int = 2             # label bleed radius, occlusion scenario
    slat_period: float = 0.45     # fence slat spacing, m
    slat_fill: float = 1.0 / 3.0  # slat width as a fraction of the period
    point_density: float = 1.0    # scales node grids (points ~ density)
    tick_sample_prob: float = 0.35  # per (node, tick) sampling probability
    shadow_margin: float = 0.15   # mover shadow temporal half-window, s
    arena_half_extent: float = 0.0  # >0: road ring around the rig (large scenes)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if min(self.lidar_rate, self.camera_rate, self.duration) <= 0:
            raise ValueError("rates and duration must be positive")
        if self.point_density <= 0 or not 0 < self.tick_sample_prob <= 1:
            raise ValueError("densities must be positive")
        if not 0 < self.slat_fill <= 1:
            raise ValueError("slat_fill must lie in (0, 1]")
        if self.bleed_px < 0 or self.camera_count < 1:
            raise ValueError("bleed_px must be >= 0 and camera_count >= 1")


@dataclass
class SynthScene:
    bundle: SceneBundle
    gt_labels: np.ndarray     # (N,) uint16, from the generating geometry
    region_mask: np.ndarray   # (N,) bool, points exposed to the scenario's confusion
    scenario_category: int    # the confusing category (car / pole / fence)
    config: SynthConfig


@dataclass(frozen=True)
class _Prim:
    """Axis-aligned box, zero-thickness along its normal axis when planar."""

    lo: tuple
    hi: tuple
    category: int
    spacing: float = 0.25   # sampling grid pitch; 0 disables sampling
    moving: bool = False    # x offset of speed * max(0, t - leave_time)


def _offset_at(prim: _Prim, cfg: SynthConfig, t: float) -> float:
    if not prim.moving:
        return 0.0
    return cfg.object_speed * max(0.0, t - cfg.leave_time)


def _ray_box(origin: np.ndarray, dirs: np.ndarray, lo, hi) -> np.ndarray:
    """Entry parameter of each ray into the box; +inf where it misses or the
    entry is behind the origin."""
    enter = np.full(len(dirs), -np.inf)
    exit_ = np.full(len(dirs), np.inf)
    for a in range(3):
        d = dirs[:, a]
        o = origin[a]
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo[a] - o) / d
            t1 = (hi[a] - o) / d
        para = d == 0
        tmin = np.where(para, np.where((lo[a] <= o) & (o <= hi[a]), -np.inf, np.inf),
                        np.minimum(t0, t1))
        tmax = np.where(para, np.where((lo[a] <= o) & (o <= hi[a]), np.inf, -np.inf),
                        np.maximum(t0, t1))
        enter = np.maximum(enter, tmin)
        exit_ = np.minimum(exit_, tmax)
    hit = (enter <= exit_) & (enter > 0)
    return np.where(hit, enter, np.inf)


def _paint(camera: CameraFrame, prims, cfg: SynthConfig) -> np.ndarray:
    """Exact per-pixel category from pixel-center ray casting at the
    camera's timestamp."""
    h, w = camera.height, camera.width
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    dx = (cols.ravel() + 0.5 - camera.cx) / camera.fx
    dy = (rows.ravel() + 0.5 - camera.cy) / camera.fy
    dirs_cam = np.stack([dx, dy, np.ones_like(dx)], axis=1)
    dirs = dirs_cam @ camera.rotation  # rows of R are camera axes in world
    origin = camera.center

    best = np.full(h * w, np.inf)
    label = np.full(h * w, SENTINEL, dtype=np.uint16)
    for prim in prims:
        off = _offset_at(prim, cfg, camera.timestamp)
        lo = (prim.lo[0] + off, prim.lo[1], prim.lo[2])
        hi = (prim.hi[0] + off, prim.hi[1], prim.hi[2])
        s = _ray_box(origin, dirs, lo, hi)
        closer = s < best
        best[closer] = s[closer]
        label[closer] = prim.category
    return label.reshape(h, w)


def _face_nodes(prim: _Prim, scale: float):
    """Cell-center node grid over the two extent axes of a planar primitive."""
    lo = np.asarray(prim.lo, dtype=np.float64)
    hi = np.asarray(prim.hi, dtype=np.float64)
    extent = hi - lo
    axes = [a for a in range(3) if extent[a] > 0]
    if len(axes) != 2:
        raise ValueError("sampled primitives must be planar")
    spacing = prim.spacing * scale
    coords = []
    for a in axes:
        n = max(1, int(math.floor(extent[a] / spacing)))
        coords.append(lo[a] + (np.arange(n) + 0.5) * (extent[a] / n))
    ga, gb = np.meshgrid(coords[0], coords[1], indexing="ij")
    nodes = np.empty((ga.size, 3))
    nodes[:, axes[0]] = ga.ravel()
    nodes[:, axes[1]] = gb.ravel()
    normal_axis = ({0, 1, 2} - set(axes)).pop()
    nodes[:, normal_axis] = lo[normal_axis]
    return nodes, axes, spacing


def _rig_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    # rows: camera right, camera down, camera forward (all in world frame)
    return np.array([[c, s, 0.0], [0.0, 0.0, -1.0], [-s, c, 0.0]])


def _scenario_prims(cfg: SynthConfig):
    """Returns (sampled prims, image prims, mover prim or None, rig height,
    confusing category)."""
    if cfg.scenario == "mover_aliasing":
        if cfg.arena_half_extent > 0:
            e = cfg.arena_half_extent
            road = _Prim((-e, -e, 0.0), (e, e, 0.0), ROAD)
        else:
            road = _Prim((-8.0, 4.0, 0.0), (8.0, 20.0, 0.0), ROAD)
        box = _Prim((-7.0, 10.0, 0.0), (-5.0, 10.1, 2.2), CAR, spacing=0.0,
                    moving=True)
        return [road], [road, box], box, 3.0, CAR

    if cfg.scenario == "occlusion_bleed":
        road = _Prim((-3.5, 3.0, 0.0), (3.5, 6.5, 0.0), ROAD, spacing=0.2)
        pole = _Prim((-0.2, 8.0, 0.5), (0.2, 8.0, 3.0), POLE, spacing=0.08)
        wall = _Prim((-6.0, 12.0, 0.0), (6.0, 12.0, 4.5), WALL, spacing=0.15)
        return [road, pole, wall], [road, pole, wall], None, 1.6, POLE

    # fence
    front = _Prim((-5.0, 2.5, 0.0), (5.0, 9.5, 0.0), ROAD)
    behind = _Prim((-5.0, 10.5, 0.0), (5.0, 18.0, 0.0), ROAD)
    slats = []
    x = -5.0
    width = cfg.slat_fill * cfg.slat_period
    while x + width <= 5.0 + 1e-9:
        slats.append(_Prim((x, 10.0, 0.0), (x + width, 10.0, 2.0), FENCE,
                           spacing=0.06))
        x += cfg.slat_period
    solid = _Prim((-5.0, 10.0, 0.0), (slats[-1].hi[0], 10.0, 2.0), FENCE,
                  spacing=0.0)
    sampled = [front, behind] + slats
    return sampled, [front, behind, solid], None, 1.6, FENCE


def _shadowed(origin: np.ndarray, pts: np.ndarray, box: _Prim,
              cfg: SynthConfig, t: float, slop: float) -> np.ndarray:
    """True where the segment origin->point crosses the mover's hull swept
    over [t - margin, t + margin] and enlarged by the sub-pixel slop."""
    m = cfg.shadow_margin
    lo = (box.lo[0] + _offset_at(box, cfg, t - m) - slop,
          box.lo[1] - slop, box.lo[2] - slop)
    hi = (box.hi[0] + _offset_at(box, cfg, t + m) + slop,
          box.hi[1] + slop, box.hi[2] + slop)
    dirs = pts - origin
    s = _ray_box(origin, dirs, lo, hi)
    return s <= 1.0  # entry before reaching the point


def generate(config: SynthConfig) -> SynthScene:
    cfg = config
    rng = np.random.default_rng(cfg.rng_seed)
    sampled, image_prims, mover, rig_height, confusing = _scenario_prims(cfg)
    rig_center = np.array([0.0, 0.0, rig_height])

    # enlarging the mover hull by this world-space slop pushes its silhouette
    # outward by more than a pixel diagonal at every camera
    slop = 0.0
    if mover is not None:
        far = np.linalg.norm(np.maximum(np.abs(np.asarray(mover.lo)),
                                        np.abs(np.asarray(mover.hi)))
                             + cfg.object_speed * cfg.duration) + rig_height
        slop = 1.1 * far / cfg.focal

    scale = 1.0 / math.sqrt(cfg.point_density)
    grids = []
    for prim in sampled:
        nodes, axes, spacing = _face_nodes(prim, scale)
        if cfg.arena_half_extent > 0 and prim.category == ROAD:
            hole = (np.abs(nodes[:, 0]) <= 3.0) & (np.abs(nodes[:, 1]) <= 3.0)
            nodes = nodes[~hole]
        grids.append((prim, nodes, axes, spacing))

    n_ticks = int(round(cfg.duration * cfg.lidar_rate))
    ticks = np.arange(n_ticks) / cfg.lidar_rate

    chunks, gt_chunks, time_chunks = [], [], []
    for t in ticks:
        for prim, nodes, axes, spacing in grids:
            take = rng.random(len(nodes)) < cfg.tick_sample_prob
            pts = nodes[take].copy()
            jitter = rng.uniform(-0.3 * spacing, 0.3 * spacing, (len(pts), 2))
            pts[:, axes[0]] += jitter[:, 0]
            pts[:, axes[1]] += jitter[:, 1]
            if mover is not None and len(pts):
                pts = pts[~_shadowed(rig_center, pts, mover, cfg, t, slop)]
            if len(pts):
                chunks.append(pts)
                gt_chunks.append(np.full(len(pts), prim.category, dtype=np.uint16))
                time_chunks.append(np.full(len(pts), t))

    positions = np.concatenate(chunks)
    gt = np.concatenate(gt_chunks)
    timestamps = np.concatenate(time_chunks)
    points = PointCloud(positions, timestamps, np.zeros(len(positions), dtype=np.int32))

    n_frames = int(round(cfg.duration * cfg.camera_rate))
    frame_times = (np.arange(n_frames) + 0.5) / cfg.camera_rate
    cx = cfg.image_width / 2.0
    cy = cfg.image_height / 2.0
    cameras, images = [], []
    fid = 0
    for t in frame_times:
        for p in range(cfg.camera_count):
            rot = _rig_rotation(2.0 * math.pi * p / cfg.camera_count)
            cam = CameraFrame(frame_id=fid, timestamp=float(t),
                              fx=cfg.focal, fy=cfg.focal, cx=cx, cy=cy,
                              width=cfg.image_width, height=cfg.image_height,
                              rotation=rot, translation=-rot @ rig_center)
            cameras.append(cam)
            labels = _paint(cam, image_prims, cfg)
            if cfg.scenario == "occlusion_bleed" and cfg.bleed_px > 0:
                size = 2 * cfg.bleed_px + 1
                grown = ndimage.binary_dilation(labels == POLE,
                                                structure=np.ones((size, size)))
                labels[grown] = POLE
            images.append(LabelImage(labels))
            fid += 1

    bundle = SceneBundle(points=points, cameras=cameras, label_images=images,
                         taxonomy=_TAXONOMY,
                         meta={"scenario": cfg.scenario, "rng_seed": cfg.rng_seed})

    mask = np.zeros(len(points), dtype=bool)
    exposed = gt != confusing
    from .camera import project_points
    for cam, img in zip(cameras, images):
        u, v, _, in_view = project_points(cam, positions)
        rows = np.floor(v[in_view]).astype(np.int64)
        cols = np.floor(u[in_view]).astype(np.int64)
        hits = np.flatnonzero(in_view)[img.categories[rows, cols] == confusing]
        mask[hits] = True
    mask &= exposed

    return SynthScene(bundle=bundle, gt_labels=gt, region_mask=mask,
                      scenario_category=confusing, config=cfg)


def scenario_report(scene: SynthScene, labeling, gt: Optional[np.ndarray] = None) -> dict:
    """Error counts of a labeling against ground truth, with the scenario's
    confusion region broken out."""
    labels = np.asarray(getattr(labeling, "categories", labeling))
    gt = scene.gt_labels if gt is None else np.asarray(gt)
    if len(labels) != len(gt):
        raise ValueError("labeling length does not match the scene")
    labeled = labels != SENTINEL
    wrong = labeled & (labels != gt)
    region_confusions = int((scene.region_mask & labeled
                             & (labels == scene.scenario_category)
                             & (gt != scene.scenario_category)).sum())
    return {
        "scenario": scene.config.scenario,
        "points": int(len(gt)),
        "labeled_points": int(labeled.sum()),
        "region_points": int(scene.region_mask.sum()),
        "region_confusions": region_confusions,
        "total_disagreements": int(wrong.sum()),
    }
