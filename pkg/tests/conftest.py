"""Shared builders and session-scoped scenario fixtures.

The three synthetic scenarios (with surfels and both fusion passes) are
expensive, so they are computed once per session and shared between the
behavioral tests and the acceptance suite.
"""

import numpy as np
import pytest
from hypothesis import settings

from mvfuse import (
    CameraFrame,
    Category,
    ClassTaxonomy,
    FusionParams,
    LabelImage,
    PointCloud,
    SceneBundle,
    SurfelEstimationParams,
    SynthConfig,
    estimate_all_surfels,
    feature_defaults,
    generate,
    generate_training_records,
    supervision_defaults,
)

settings.register_profile("suite", deadline=None)
settings.load_profile("suite")

SENTINEL = 65535

# one verdict line per acceptance criterion, echoed after the test summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.line(line)


def make_rotation(rng) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def look_at_rotation(center, target) -> np.ndarray:
    """Rows are the camera's right / down / forward axes in world frame."""
    f = np.asarray(target, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 0.0, 1.0]) if abs(f[2]) < 0.99 else np.array([1.0, 0.0, 0.0])
    r = np.cross(f, up)
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    return np.stack([r, d, f])


def make_camera(center, rotation, *, fx=24.0, fy=24.0, cx=None, cy=None,
                width=32, height=32, timestamp=0.0, frame_id=0) -> CameraFrame:
    center = np.asarray(center, dtype=np.float64)
    return CameraFrame(
        frame_id=frame_id, timestamp=float(timestamp),
        fx=float(fx), fy=float(fy),
        cx=width / 2.0 if cx is None else float(cx),
        cy=height / 2.0 if cy is None else float(cy),
        width=int(width), height=int(height),
        rotation=rotation, translation=-rotation @ center)


def identity_camera(center=(0.0, 0.0, 0.0), **kw) -> CameraFrame:
    """Camera looking down world +z with x right and y down."""
    return make_camera(center, np.eye(3), **kw)


def random_camera(rng, *, width=32, height=32, timestamp=0.0, frame_id=0) -> CameraFrame:
    ang = rng.uniform(0.0, 2.0 * np.pi)
    radius = rng.uniform(8.0, 14.0)
    center = np.array([radius * np.cos(ang), radius * np.sin(ang),
                       rng.uniform(0.5, 4.0)])
    rotation = look_at_rotation(center, rng.normal(0.0, 1.0, 3))
    return make_camera(
        center, rotation,
        fx=rng.uniform(18.0, 28.0), fy=rng.uniform(18.0, 28.0),
        cx=width * rng.uniform(0.4, 0.6), cy=height * rng.uniform(0.4, 0.6),
        width=width, height=height, timestamp=timestamp, frame_id=frame_id)


def random_label_grid(rng, ids, width, height, sentinel_fraction=0.1) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.uint16)
    if rng.random() < 0.5:  # blocky regions
        coarse = rng.choice(ids, size=(max(1, height // 8), max(1, width // 8)))
        grid = np.kron(coarse, np.ones((8, 8), dtype=np.uint16))[:height, :width]
    else:
        grid = rng.choice(ids, size=(height, width))
    grid = grid.astype(np.uint16)
    grid[rng.random((height, width)) < sentinel_fraction] = SENTINEL
    return grid


def random_fusion_scene(seed, n_points=None):
    """A small labeled multi-camera scene plus estimated surfels and randomized
    fusion parameters; sized for brute-force cross-checks."""
    rng = np.random.default_rng(seed)
    ids = sorted(int(i) for i in rng.choice(12, size=int(rng.integers(3, 6)),
                                            replace=False))
    taxonomy = ClassTaxonomy([Category(i, f"cat{i}") for i in ids])

    n = int(rng.integers(150, 1001)) if n_points is None else int(n_points)
    blob_centers = rng.uniform(-6.0, 6.0, (int(rng.integers(2, 6)), 3)) * [1, 1, 0.3]
    positions = (blob_centers[rng.integers(0, len(blob_centers), n)]
                 + rng.normal(0.0, 1.2, (n, 3)) * [1, 1, 0.35])
    points = PointCloud(positions, rng.uniform(0.0, 4.0, n))

    cameras, images = [], []
    for k in range(int(rng.integers(1, 9))):
        cam = random_camera(rng, timestamp=float(rng.uniform(0.0, 4.0)), frame_id=k)
        cameras.append(cam)
        images.append(LabelImage(random_label_grid(rng, ids, cam.width, cam.height)))
    bundle = SceneBundle(points, cameras, images, taxonomy)

    surfels = estimate_all_surfels(points, params=SurfelEstimationParams(rng_seed=seed))
    params = FusionParams(
        delta_t_max=float(rng.choice([0.5, 2.0, 10.0])),
        tau=float(rng.choice([0.02, 0.05, 0.1])),
        dilation_k=float(rng.choice([2.0, 4.0, 8.0])),
        d_max=float(rng.choice([12.0, 18.0, 400.0])))
    fill = bool(rng.random() < 0.5)
    return bundle, surfels, params, fill


def _scenario_results(name, seed):
    scene = generate(SynthConfig(name, rng_seed=seed))
    surfels = estimate_all_surfels(scene.bundle.points,
                                   params=SurfelEstimationParams())
    records = generate_training_records(scene.bundle, surfels,
                                        feature_defaults(),
                                        supervision_defaults())
    return {"scene": scene, "surfels": surfels, "records": records}


@pytest.fixture(scope="session")
def mover_results():
    return _scenario_results("mover_aliasing", 7)


@pytest.fixture(scope="session")
def occlusion_results():
    return _scenario_results("occlusion_bleed", 11)


@pytest.fixture(scope="session")
def fence_results():
    return _scenario_results("fence", 23)
