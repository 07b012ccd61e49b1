"""Analytic surfel rasterization against a per-pixel ray-disk oracle."""

import numpy as np
import pytest

from mvfuse import (
    PointCloud,
    Surfel,
    SurfelArray,
    new_depth_image,
    rasterize_surfel,
    render_depth_image,
)
from mvfuse.render import depth_to_pgm
from mvfuse.scene_io import read_label_image

import oracles
from conftest import identity_camera, random_camera


def random_disks(rng, n, camera, z_range=(0.8, 12.0), behind_fraction=0.1):
    """Disks scattered over the view cone, some behind the camera."""
    z = rng.uniform(*z_range, n)
    u = rng.uniform(-0.2 * camera.width, 1.2 * camera.width, n)
    v = rng.uniform(-0.2 * camera.height, 1.2 * camera.height, n)
    cam = np.stack([(u - camera.cx) / camera.fx * z,
                    (v - camera.cy) / camera.fy * z, z], axis=1)
    cam[rng.random(n) < behind_fraction, 2] *= -1
    world = (cam - camera.translation) @ camera.rotation

    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    helper = rng.normal(size=(n, 3))
    tangents = helper - (helper * normals).sum(axis=1, keepdims=True) * normals
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    rt = rng.uniform(0.05, 0.6, n)
    rb = rt * rng.uniform(0.3, 1.0, n)
    return world, SurfelArray(normals, tangents, rt, rb)


def assert_matches_oracle(camera, positions, surfels, k, timestamps=None,
                          thresh=None):
    cand = np.arange(len(positions))
    pts = positions if timestamps is None else PointCloud(positions, timestamps)
    depth = render_depth_image(camera, cand, pts, surfels, k,
                               thresh if thresh is not None else 1e18)
    ref = oracles.render_reference(camera, positions, surfels.normals,
                                   surfels.tangents, surfels.radii_tangent,
                                   surfels.radii_bitangent, k,
                                   timestamps=timestamps, delta_t_thresh=thresh)
    both = np.isfinite(depth.data) & np.isfinite(ref)
    assert np.array_equal(np.isfinite(depth.data), np.isfinite(ref))
    if both.any():
        assert np.abs(depth.data[both] - ref[both]).max() < 1e-9


def test_axis_aligned_disk_exact_depth():
    cam = identity_camera(fx=40.0, fy=40.0, cx=16.0, cy=12.0, width=32, height=24)
    surfels = SurfelArray([[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]], [1.0], [1.0])
    pos = np.array([[0.0, 0.0, 5.0]])
    depth = render_depth_image(cam, np.array([0]), pos, surfels, 1.0, 1e18)

    hit = np.isfinite(depth.data)
    assert hit.any() and not hit.all()
    # the plane is perpendicular to the axis: every hit is at exactly z = 5
    assert np.all(depth.data[hit] == 5.0)
    # hits are exactly the pixel centers whose ray pierces the unit disk
    cols, rows = np.meshgrid(np.arange(32), np.arange(24))
    dx = (cols + 0.5 - 16.0) / 40.0 * 5.0
    dy = (rows + 0.5 - 12.0) / 40.0 * 5.0
    assert np.array_equal(hit, dx * dx + dy * dy <= 1.0)


def test_zbuffer_keeps_nearest():
    cam = identity_camera(fx=40.0, fy=40.0, cx=16.0, cy=12.0, width=32, height=24)
    surfels = SurfelArray([[0, 0, 1], [0, 0, 1]], [[1, 0, 0], [1, 0, 0]],
                          [1.0, 0.4], [1.0, 0.4])
    pos = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 3.0]])
    depth = render_depth_image(cam, np.array([0, 1]), pos, surfels, 1.0, 1e18)
    assert depth.data[12, 16] == 3.0           # covered by both, near one wins
    assert depth.data[12, 23] == 5.0           # covered only by the far disk
    # order independence
    flipped = render_depth_image(cam, np.array([1, 0]), pos, surfels, 1.0, 1e18)
    assert np.array_equal(depth.data, flipped.data)


def test_behind_camera_rasterizes_nothing():
    cam = identity_camera()
    surfels = SurfelArray([[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]], [1.0], [1.0])
    depth = render_depth_image(cam, np.array([0]), np.array([[0.0, 0.0, -4.0]]),
                               surfels, 8.0, 1e18)
    assert not np.isfinite(depth.data).any()


def test_edge_on_disk_is_skipped():
    cam = identity_camera()
    surfels = SurfelArray([[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]], [1.0], [1.0])
    depth = render_depth_image(cam, np.array([0]), np.array([[0.0, 0.0, 4.0]]),
                               surfels, 8.0, 1e18)
    assert not np.isfinite(depth.data).any()


def test_plane_straddling_disk_matches_oracle():
    # center barely in front, dilated radius far larger than the depth:
    # the conservative bounding box degrades to the whole image
    rng = np.random.default_rng(12)
    cam = random_camera(rng)
    forward = cam.rotation[2]
    pos = (cam.center + 0.05 * forward)[None, :]
    surfels = SurfelArray([forward], [cam.rotation[0]], [2.0], [2.0])
    assert_matches_oracle(cam, pos, surfels, 8.0)


def test_matches_oracle_random_scenes():
    rng = np.random.default_rng(13)
    for trial in range(6):
        cam = random_camera(rng, width=int(rng.integers(16, 64)),
                            height=int(rng.integers(16, 64)), frame_id=trial)
        pos, surfels = random_disks(rng, int(rng.integers(1, 40)), cam)
        assert_matches_oracle(cam, pos, surfels, float(rng.choice([1.0, 2.0, 8.0])))


def test_time_window_filters_candidates():
    cam = identity_camera(timestamp=10.0)
    surfels = SurfelArray([[0, 0, 1], [0, 0, 1]], [[1, 0, 0], [1, 0, 0]],
                          [1.0, 1.0], [1.0, 1.0])
    pos = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 3.0]])
    pts = PointCloud(pos, np.array([10.0 - 20.0, 10.0 + 21.0]))  # at and beyond
    depth = render_depth_image(cam, np.array([0, 1]), pts, surfels, 1.0, 20.0)
    assert depth.data[12, 16] == 5.0  # boundary timestamp kept, late one dropped


def test_rasterize_single_equals_batch():
    rng = np.random.default_rng(14)
    cam = random_camera(rng)
    pos, surfels = random_disks(rng, 5, cam)
    batch = render_depth_image(cam, np.arange(5), pos, surfels, 4.0, 1e18)
    single = new_depth_image(cam)
    for i in range(5):
        s = Surfel(surfels.normals[i], surfels.tangents[i],
                   surfels.radii_tangent[i], surfels.radii_bitangent[i])
        rasterize_surfel(single, cam, pos[i], s, 4.0)
    assert np.array_equal(batch.data, single.data)


def test_dilation_grows_coverage_monotonically():
    rng = np.random.default_rng(15)
    cam = random_camera(rng)
    pos, surfels = random_disks(rng, 25, cam)
    cand = np.arange(25)
    d2 = render_depth_image(cam, cand, pos, surfels, 2.0, 1e18)
    d8 = render_depth_image(cam, cand, pos, surfels, 8.0, 1e18)
    assert np.all(d2.data >= d8.data)


def test_depth_to_pgm_quantization(tmp_path):
    cam = identity_camera(fx=40.0, fy=40.0, cx=16.0, cy=12.0, width=32, height=24)
    surfels = SurfelArray([[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]], [1.0], [1.0])
    depth = render_depth_image(cam, np.array([0]), np.array([[0.0, 0.0, 1.2345]]),
                               surfels, 1.0, 1e18)
    depth_to_pgm(depth, tmp_path / "d.pgm")
    img = read_label_image(tmp_path / "d.pgm")  # same container format
    finite = np.isfinite(depth.data)
    assert np.all(img.categories[~finite] == 65535)
    assert np.all(img.categories[finite] == round(1234.5))
