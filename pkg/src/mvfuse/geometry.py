"""Spatial index over points and per-point oriented-disk (surfel) estimation.

The estimator fits a local frame per point: gather neighbors within a radius
(starting at 0.25 m), subsample to at most 32, run a PCA about the query
point, and double the radius on degeneracy up to 2 m.  The tangent is the
first principal axis, the normal the third; the tangent radius is a fixed
fraction of the final gather radius and the bitangent radius scales by
sqrt(sigma1 / sigma0).

Determinism notes (load-bearing, do not relax):
  - neighbor lists are reduced in (point, neighbor) ascending order, so sums
    do not depend on chunking, worker count, or kd-tree traversal order;
  - subsampling priorities come from a counter-based hash of
    (rng_seed, point_index, neighbor_index), so the kept subset is a uniform
    draw that is independent of evaluation order;
  - eigendecomposition is LAPACK per 3x3 matrix, identical for a single point
    and for a batch.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from .scene import PointCloud, Surfel, SurfelArray, WORLD_UP

_CHUNK_POINTS = 150_000  # gather chunk size; bounds transient pair memory

_MIX_STEP = np.uint64(0x9E3779B97F4A7C15)
_MIX_M1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_M2 = np.uint64(0x94D049BB133111EB)
_KEY_J = np.uint64(0xC2B2AE3D27D4EB4F)


class SpatialIndex:
    """Immutable k-d tree over point positions; queries match a linear scan."""

    def __init__(self, positions: np.ndarray):
        positions = np.ascontiguousarray(positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3 or len(positions) == 0:
            raise ValueError("positions must be a nonempty (N, 3) array")
        self.positions = positions
        self.tree = cKDTree(positions)

    def __len__(self) -> int:
        return len(self.positions)

    def query_radius(self, center, radius: float) -> np.ndarray:
        """Indices of all points with ||p - center|| <= radius, ascending."""
        found = self.tree.query_ball_point(np.asarray(center, dtype=np.float64), radius)
        return np.sort(np.asarray(found, dtype=np.int64))

    def query_nearest(self, centers, k: int = 1):
        """k nearest neighbors for each query row; returns (distances, indices)."""
        d, i = self.tree.query(np.asarray(centers, dtype=np.float64), k=k)
        return d, i


def build_spatial_index(points: Union[PointCloud, np.ndarray]) -> SpatialIndex:
    positions = points.positions if isinstance(points, PointCloud) else np.asarray(points)
    return SpatialIndex(positions)


@dataclass(frozen=True)
class SurfelEstimationParams:
    initial_radius: float = 0.25        # meters, first gather radius
    max_radius: float = 2.0             # meters, doubling stops at this radius
    max_neighbors: int = 32             # subsample cap per neighborhood
    min_neighbors: int = 3              # fewer gathered points => degenerate
    stddev_floor_fraction: float = 0.10  # floor = fraction * radius ...
    stddev_floor_clip: tuple = (0.0025, 0.01)  # ... clipped to this range (m)
    tangent_radius_fraction: float = 0.25
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.initial_radius <= self.max_radius:
            raise ValueError("need 0 < initial_radius <= max_radius")
        if not self.max_neighbors >= self.min_neighbors >= 3:
            raise ValueError("need max_neighbors >= min_neighbors >= 3")
        lo, hi = self.stddev_floor_clip
        if not 0 < lo <= hi:
            raise ValueError("stddev_floor_clip must be increasing and positive")
        if self.stddev_floor_fraction <= 0 or self.tangent_radius_fraction <= 0:
            raise ValueError("fractions must be positive")

    def radii_schedule(self) -> list[float]:
        radii = [self.initial_radius]
        while radii[-1] * 2.0 <= self.max_radius * (1 + 1e-12):
            radii.append(radii[-1] * 2.0)
        return radii

    def stddev_floor(self, radius: float) -> float:
        lo, hi = self.stddev_floor_clip
        return min(max(self.stddev_floor_fraction * radius, lo), hi)


@dataclass(frozen=True)
class RadiusAttempt:
    """One gather-and-test round of the estimator (for trace inspection)."""

    radius: float
    neighbor_count: int   # points within the radius, including the query point
    used_count: int       # after subsampling
    sigma0: float
    sigma1: float
    degenerate: bool


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + _MIX_STEP)
    x = (x ^ (x >> np.uint64(30))) * _MIX_M1
    x = (x ^ (x >> np.uint64(27))) * _MIX_M2
    return x ^ (x >> np.uint64(31))


def _subsample_priority(seed: int, point_idx: np.ndarray, neighbor_idx: np.ndarray) -> np.ndarray:
    """Uniform u64 priority per (point, neighbor) pair; keeping the k smallest
    priorities of a neighborhood is a uniform k-subset, independent of order."""
    base = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
                       + point_idx.astype(np.uint64) * _MIX_STEP)
    return _splitmix64(base ^ (neighbor_idx.astype(np.uint64) + np.uint64(1)) * _KEY_J)


def _gather_pairs(tree: cKDTree, positions: np.ndarray, active: np.ndarray,
                  radius: float) -> tuple[np.ndarray, np.ndarray]:
    """All (row, j) pairs with ||positions[active[row]] - positions[j]|| <= radius,
    sorted by (row, j).  Includes the self pair."""
    sub = cKDTree(positions[active])
    hits = sub.sparse_distance_matrix(tree, radius, output_type="ndarray")
    rows = hits["i"].astype(np.int64)
    cols = hits["j"].astype(np.int64)
    order = np.argsort(rows * len(positions) + cols)
    return rows[order], cols[order]


def _select_subsample(rows: np.ndarray, cols: np.ndarray, counts: np.ndarray,
                      active: np.ndarray, params: SurfelEstimationParams):
    """Cap each row at max_neighbors using hash priorities; preserves the
    (row, j) order of the surviving pairs.  Returns (rows, cols, used_counts)."""
    kmax = params.max_neighbors
    dense = counts > kmax
    if not dense.any():
        return rows, cols, counts.copy()

    starts = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    keep = np.ones(len(rows), dtype=bool)
    pri = None
    # Rows sharing a neighbor count form rectangular blocks; one argpartition
    # call per distinct count keeps this fully vectorized.
    for n in np.unique(counts[dense]):
        rsel = np.flatnonzero(counts == n)
        block = starts[rsel][:, None] + np.arange(n)[None, :]
        if pri is None:
            pri = _subsample_priority(params.rng_seed, active[rows], cols)
        block_pri = pri[block]
        drop_local = np.argpartition(block_pri, kmax, axis=1)[:, kmax:]
        keep[(block[np.arange(len(rsel))[:, None], drop_local]).ravel()] = False

    used = np.minimum(counts, kmax)
    return rows[keep], cols[keep], used


def _second_moment(rows: np.ndarray, cols: np.ndarray, used: np.ndarray,
                   positions: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Per-row 3x3 second-moment matrix of neighbor offsets about the query
    point, divided by the number of used points."""
    d = positions[cols] - positions[active[rows]]
    starts = np.zeros(len(used), dtype=np.int64)
    np.cumsum(used[:-1], out=starts[1:])
    cov = np.empty((len(used), 3, 3))
    for a, b in ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)):
        s = np.add.reduceat(d[:, a] * d[:, b], starts)
        cov[:, a, b] = s
        if a != b:
            cov[:, b, a] = s
    cov /= used.astype(np.float64)[:, None, None]
    return cov


def _canonical_sign(axes: np.ndarray) -> np.ndarray:
    """Flip each row so that the first nonzero of (z, x, y) is positive."""
    s = np.sign(axes[:, 2])
    s = np.where(s != 0, s, np.sign(axes[:, 0]))
    s = np.where(s != 0, s, np.sign(axes[:, 1]))
    s = np.where(s != 0, s, 1.0)
    return axes * s[:, None]


def _surfel_round(tree: cKDTree, positions: np.ndarray, active: np.ndarray,
                  radius: float, params: SurfelEstimationParams):
    """Run one radius round for the active points.

    Returns (normals, tangents, sigma0, sigma1, n_pre, used, degenerate),
    all aligned with ``active``.
    """
    n_active = len(active)
    normals = np.empty((n_active, 3))
    tangents = np.empty((n_active, 3))
    sigma0 = np.empty(n_active)
    sigma1 = np.empty(n_active)
    n_pre = np.empty(n_active, dtype=np.int64)
    n_used = np.empty(n_active, dtype=np.int64)

    for lo in range(0, n_active, _CHUNK_POINTS):
        sel = active[lo:lo + _CHUNK_POINTS]
        rows, cols = _gather_pairs(tree, positions, sel, radius)
        counts = np.bincount(rows, minlength=len(sel))
        rows, cols, used = _select_subsample(rows, cols, counts, sel, params)
        cov = _second_moment(rows, cols, used, positions, sel)
        w, v = np.linalg.eigh(cov)  # ascending eigenvalues
        w = np.maximum(w, 0.0)
        sl = slice(lo, lo + len(sel))
        sigma0[sl] = np.sqrt(w[:, 2])
        sigma1[sl] = np.sqrt(w[:, 1])
        normals[sl] = v[:, :, 0]
        tangents[sl] = v[:, :, 2]
        n_pre[sl] = counts
        n_used[sl] = used

    floor = params.stddev_floor(radius)
    degenerate = (n_pre < params.min_neighbors) | (sigma0 < floor) | (sigma1 < floor)
    return normals, tangents, sigma0, sigma1, n_pre, n_used, degenerate


def _fallback_surfel(params: SurfelEstimationParams):
    r = params.tangent_radius_fraction * params.initial_radius
    return WORLD_UP.copy(), np.array([1.0, 0.0, 0.0]), r, r


def estimate_all_surfels(points: Union[PointCloud, np.ndarray],
                         index: Optional[SpatialIndex] = None,
                         params: SurfelEstimationParams = SurfelEstimationParams(),
                         threads: int = 1) -> SurfelArray:
    """Estimate a surfel per point; output order matches input order and is
    byte-identical for any worker count."""
    positions = points.positions if isinstance(points, PointCloud) else np.asarray(points)
    if index is None:
        index = SpatialIndex(positions)
    n = len(positions)
    normals = np.empty((n, 3))
    tangents = np.empty((n, 3))
    r_tan = np.empty(n)
    r_bit = np.empty(n)

    active = np.arange(n, dtype=np.int64)
    for radius in params.radii_schedule():
        if len(active) == 0:
            break
        rounds = _run_round_parallel(index.tree, positions, active, radius, params, threads)
        nrm, tan, s0, s1, _, _, degenerate = rounds
        done = ~degenerate
        if done.any():
            sel = active[done]
            rt = params.tangent_radius_fraction * radius
            aspect = np.sqrt(s1[done] / s0[done])
            normals[sel] = _canonical_sign(nrm[done])
            tangents[sel] = _canonical_sign(tan[done])
            r_tan[sel] = rt
            r_bit[sel] = aspect * rt
        active = active[degenerate]

    if len(active):
        fb_n, fb_t, fb_rt, fb_rb = _fallback_surfel(params)
        normals[active] = fb_n
        tangents[active] = fb_t
        r_tan[active] = fb_rt
        r_bit[active] = fb_rb

    return SurfelArray(normals, tangents, r_tan, r_bit)


def _run_round_parallel(tree, positions, active, radius, params, threads):
    """Split a round into fixed chunks; chunk boundaries (not thread count)
    define the work, so results are identical at any parallelism."""
    if threads <= 1 or len(active) <= _CHUNK_POINTS:
        return _surfel_round(tree, positions, active, radius, params)

    chunks = [active[lo:lo + _CHUNK_POINTS] for lo in range(0, len(active), _CHUNK_POINTS)]
    parts = [None] * len(chunks)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {pool.submit(_surfel_round, tree, positions, c, radius, params): k
                   for k, c in enumerate(chunks)}
        for fut in futures:
            parts[futures[fut]] = fut.result()
    merged = tuple(np.concatenate([p[f] for p in parts]) for f in range(7))
    return merged


def estimate_surfel(point_index: int, index: SpatialIndex,
                    params: SurfelEstimationParams = SurfelEstimationParams()) -> Surfel:
    surfel, _ = estimate_surfel_trace(point_index, index, params)
    return surfel


def estimate_surfel_trace(point_index: int, index: SpatialIndex,
                          params: SurfelEstimationParams = SurfelEstimationParams()
                          ) -> tuple[Surfel, list[RadiusAttempt]]:
    """Single-point estimation through the same code path as the batch,
    returning the per-radius attempt trace."""
    positions = index.positions
    if not 0 <= point_index < len(positions):
        raise IndexError(f"point index {point_index} out of range")
    active = np.array([point_index], dtype=np.int64)
    attempts: list[RadiusAttempt] = []

    for radius in params.radii_schedule():
        nrm, tan, s0, s1, n_pre, n_used, degenerate = _surfel_round(
            index.tree, positions, active, radius, params)
        attempts.append(RadiusAttempt(
            radius=radius, neighbor_count=int(n_pre[0]), used_count=int(n_used[0]),
            sigma0=float(s0[0]), sigma1=float(s1[0]), degenerate=bool(degenerate[0])))
        if not degenerate[0]:
            rt = params.tangent_radius_fraction * radius
            aspect = math.sqrt(s1[0] / s0[0])
            normal = _canonical_sign(nrm[:1])[0]
            tangent = _canonical_sign(tan[:1])[0]
            return Surfel(normal, tangent, rt, aspect * rt), attempts

    fb_n, fb_t, fb_rt, fb_rb = _fallback_surfel(params)
    return Surfel(fb_n, fb_t, fb_rt, fb_rb), attempts
