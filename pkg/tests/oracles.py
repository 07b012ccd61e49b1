"""Independent reference implementations used as oracles by the tests.

Everything here is deliberately written the slow, obvious way: brute-force
loops over pixels and points, world-frame geometry, no spatial index, no
bounding boxes, no code shared with the package internals.  Where bitwise
agreement with the library is asserted (fusion labels), scalar expressions
mirror the documented arithmetic exactly; everywhere else plain tolerances
apply.
"""

import itertools
import math

import numpy as np

GRAZING = 1e-3
SENTINEL = 65535


def weight_reference(camera_center, camera_time, position, point_time,
                     d_max, dt_max) -> float:
    """Same falloff law as the library, composed differently on purpose."""
    dx = camera_center[0] - position[0]
    dy = camera_center[1] - position[1]
    dz = camera_center[2] - position[2]
    d = math.sqrt(dx * dx + dy * dy + dz * dz)
    dt = camera_time - point_time
    a = 1.0 - (d / d_max) ** 2
    b = 1.0 - (dt / dt_max) ** 2
    return (a * b) ** 2


def _pixel_rays_world(camera):
    """World-frame unit-z-free ray directions through every pixel center."""
    h, w = camera.height, camera.width
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    dx = (cols + 0.5 - camera.cx) / camera.fx
    dy = (rows + 0.5 - camera.cy) / camera.fy
    dirs_cam = np.stack([dx.ravel(), dy.ravel(), np.ones(h * w)], axis=1)
    return dirs_cam @ camera.rotation  # row-vector form of R^T @ dir


def render_reference(camera, positions, normals, tangents, radii_t, radii_b,
                     dilation_k, timestamps=None, delta_t_thresh=None):
    """Per-pixel nearest ray-disk intersection, one surfel at a time.

    The depth value is the camera-frame Z of the hit, matching the library's
    z-buffer convention (the pixel ray has camera-frame Z slope 1).
    """
    h, w = camera.height, camera.width
    dirs = _pixel_rays_world(camera)
    origin = camera.center
    depth = np.full(h * w, np.inf)

    for i in range(len(positions)):
        if timestamps is not None and abs(timestamps[i] - camera.timestamp) > delta_t_thresh:
            continue
        p0 = positions[i]
        n = normals[i]
        to_cam = origin - p0
        dist = math.sqrt(float(to_cam @ to_cam))
        cos = abs(float(n @ to_cam)) / dist if dist > 0 else 0.0
        if cos <= GRAZING:
            continue
        t_axis = tangents[i]
        b_axis = np.cross(n, t_axis)
        a = dilation_k * radii_t[i]
        b = dilation_k * radii_b[i]

        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (p0 - origin) @ n / denom
            q = origin + s[:, None] * dirs - p0
            et = (q @ t_axis) / a
            eb = (q @ b_axis) / b
            hit = (s > 0) & np.isfinite(s) & (et * et + eb * eb <= 1.0)
        depth[hit] = np.minimum(depth[hit], s[hit])

    return depth.reshape(h, w)


def project_scalar(camera, position):
    """(u, v, z, in_view) for one point, plain scalar math."""
    R = camera.rotation
    cam = R @ np.asarray(position, dtype=np.float64) + camera.translation
    z = float(cam[2])
    if z <= 0:
        return 0.0, 0.0, z, False
    u = camera.fx * float(cam[0]) / z + camera.cx
    v = camera.fy * float(cam[1]) / z + camera.cy
    ok = 0 <= u < camera.width and 0 <= v < camera.height
    return u, v, z, ok


def naive_fusion(scene, surfels, params, fill=False):
    """Label-for-label reference for the fusion pipeline.

    Per camera: rebuild the dilated depth image with render_reference over the
    same candidate rule (distance cap, in view, rasterization time window,
    not edge-on), then apply every vote filter per point with scalar math.
    Vote sums accumulate in camera order per (point, category) cell, which is
    the order the library documents, so label ties resolve identically.
    """
    pts = scene.points
    n = len(pts)
    taxonomy_ids = sorted(int(c.id) for c in scene.taxonomy.categories)
    votes = {}  # point -> {category -> running weight}

    for cam_idx, camera in enumerate(scene.cameras):
        label_img = scene.label_images[cam_idx].categories
        center = camera.center

        cand = []
        for i in range(n):
            delta = center - pts.positions[i]
            d2 = delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]
            if d2 > params.d_max * params.d_max:
                continue
            _, _, _, ok = project_scalar(camera, pts.positions[i])
            if not ok:
                continue
            if abs(pts.timestamps[i] - camera.timestamp) > params.delta_t_thresh:
                continue
            to_cam = center - pts.positions[i]
            dist = math.sqrt(float(to_cam @ to_cam))
            cos = abs(float(surfels.normals[i] @ to_cam)) / dist if dist > 0 else 0.0
            if cos <= GRAZING:
                continue
            cand.append(i)

        cand = np.array(cand, dtype=np.int64)
        depth = render_reference(
            camera, pts.positions[cand], surfels.normals[cand],
            surfels.tangents[cand], surfels.radii_tangent[cand],
            surfels.radii_bitangent[cand], params.dilation_k)

        for i in range(n):
            dt = camera.timestamp - pts.timestamps[i]
            if abs(dt) > params.delta_t_max:
                continue
            delta = center - pts.positions[i]
            d2 = delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]
            if d2 > params.d_max * params.d_max:
                continue
            to_cam = center - pts.positions[i]
            dist = math.sqrt(float(to_cam @ to_cam))
            cos = abs(float(surfels.normals[i] @ to_cam)) / dist if dist > 0 else 0.0
            if cos <= GRAZING:
                continue
            u, v, z, ok = project_scalar(camera, pts.positions[i])
            if not ok:
                continue
            r, c = int(math.floor(v)), int(math.floor(u))
            if abs(z - depth[r, c]) / z > params.tau:
                continue
            cat = int(label_img[r, c])
            if cat == SENTINEL:
                continue
            rd = 1.0 - d2 / (params.d_max * params.d_max)
            rt = 1.0 - (dt * dt) / (params.delta_t_max * params.delta_t_max)
            w = (rd * rd) * (rt * rt)
            if w <= 0:
                continue
            votes.setdefault(i, {})[cat] = votes.setdefault(i, {}).get(cat, 0.0) + w

    labels = np.full(n, SENTINEL, dtype=np.uint16)
    for i, per_cat in votes.items():
        best_cat, best_w = None, -1.0
        for cat in taxonomy_ids:
            w = per_cat.get(cat)
            if w is not None and w > best_w:  # strict: ties keep the lowest id
                best_cat, best_w = cat, w
        labels[i] = best_cat

    if fill:
        direct = np.flatnonzero(labels != SENTINEL)
        if len(direct):
            filled = labels.copy()
            for i in range(n):
                if labels[i] != SENTINEL:
                    continue
                dd = ((pts.positions[direct] - pts.positions[i]) ** 2).sum(axis=1)
                # argmin keeps the first (lowest-index) minimum on exact ties
                filled[i] = labels[direct[np.argmin(dd)]]
            labels = filled
    return labels


def exhaustive_best_selection(bit_rows, n_select):
    """Maximum sum-of-sqrt-column-counts over all subsets of the given size."""
    m = np.asarray(bit_rows, dtype=np.float64)
    best = 0.0
    for combo in itertools.combinations(range(len(m)), min(n_select, len(m))):
        energy = float(np.sqrt(m[list(combo)].sum(axis=0)).sum())
        best = max(best, energy)
    return best


def confusion_reference(pred, gt, category_ids):
    """Dict-based confusion tally: (gt, pred) -> count; sentinel predictions
    recorded under pred == SENTINEL; gt sentinel rows skipped."""
    counts = {}
    for p, g in zip(pred, gt):
        if g == SENTINEL:
            continue
        counts[(int(g), int(p))] = counts.get((int(g), int(p)), 0) + 1
    ious = {}
    for cid in category_ids:
        tp = counts.get((cid, cid), 0)
        fp = sum(v for (g, p), v in counts.items() if p == cid and g != cid)
        fn = sum(v for (g, p), v in counts.items() if g == cid and p != cid)
        union = tp + fp + fn
        if union:
            ious[cid] = tp / union
    return ious
