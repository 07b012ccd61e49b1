"""Diversity-driven scene selection: binary class-presence vectors, a
sum-of-square-roots objective with diminishing returns per category, a
rare-class prefilter, and greedy maximization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .scene import LabelImage, SENTINEL


@dataclass(frozen=True)
class ClassVector:
    source_id: int
    bits: np.ndarray  # (C,) values in {0, 1}

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1:
            raise ValueError("bits must be a 1-D vector")
        if bits.size and bits.max() > 1:
            raise ValueError("bits must be binary")
        object.__setattr__(self, "bits", bits)


@dataclass(frozen=True)
class SamplingParams:
    categories: int                  # |C|, vector length
    n_select: int = 1                # target selection size
    p_min_fraction: float = 0.02     # presence threshold on labeled pixels
    rarity_percentile: float = 0.25  # quantile defining "rare" categories

    def __post_init__(self):
        if not 0 < self.p_min_fraction < 1:
            raise ValueError("p_min_fraction must lie in (0, 1)")
        if self.n_select < 1:
            raise ValueError("n_select must be >= 1")
        if self.categories < 1:
            raise ValueError("categories must be >= 1")
        if not 0 <= self.rarity_percentile <= 1:
            raise ValueError("rarity_percentile must lie in [0, 1]")


def compute_class_vector(source: Union[LabelImage, np.ndarray, Sequence[int]],
                         params: SamplingParams, source_id: int = 0) -> ClassVector:
    """Presence bit per category: set iff the category holds at least
    p_min_fraction of the labeled pixels.  Sentinel pixels count nowhere,
    neither as presence nor in the denominator.

    Accepts a label image or a precomputed per-category pixel histogram.
    """
    if isinstance(source, LabelImage):
        source = source.categories
    arr = np.asarray(source)
    if arr.ndim == 2:  # label image
        flat = arr.reshape(-1)
        flat = flat[flat != SENTINEL]
        if flat.size and int(flat.max()) >= params.categories:
            raise ValueError("label id outside the declared category range")
        hist = np.bincount(flat.astype(np.int64), minlength=params.categories)
    else:
        hist = np.asarray(arr, dtype=np.int64)
        if hist.ndim != 1 or len(hist) != params.categories:
            raise ValueError("histogram length must equal the category count")
        if hist.min() < 0:
            raise ValueError("histogram counts must be nonnegative")
    total = int(hist.sum())
    if total == 0:
        raise ValueError("no labeled pixels: class vector undefined")
    bits = (hist / total >= params.p_min_fraction).astype(np.uint8)
    return ClassVector(source_id, bits)


def _presence_matrix(vectors: Iterable[ClassVector]) -> np.ndarray:
    vecs = list(vectors)
    if not vecs:
        return np.zeros((0, 0), dtype=np.uint8)
    return np.stack([v.bits for v in vecs])


def objective(selected: Iterable[ClassVector]) -> float:
    """Energy of a selection: sum over categories of sqrt(presence count)."""
    m = _presence_matrix(selected)
    if m.size == 0:
        return 0.0
    return float(np.sqrt(m.sum(axis=0, dtype=np.float64)).sum())


def prefilter_rare(candidates: Sequence[ClassVector],
                   params: SamplingParams) -> list:
    """Keep candidates containing at least one rare category, where rare
    means a presence rate strictly below the configured quantile of the
    nonzero presence rates.  Falls back to the full pool (with a warning)
    when the rule keeps nothing."""
    if len(candidates) == 0:
        raise ValueError("prefilter needs at least one candidate")
    m = _presence_matrix(candidates)
    rarity = m.mean(axis=0, dtype=np.float64)
    nonzero = rarity[rarity > 0]
    if nonzero.size:
        cut = np.quantile(nonzero, params.rarity_percentile)
        rare = (rarity > 0) & (rarity < cut)
        keep = [c for c, row in zip(candidates, m) if row[rare].any()]
        if keep:
            return keep
    warnings.warn("rare-class prefilter kept no candidates; returning the "
                  "pool unfiltered", stacklevel=2)
    return list(candidates)


@dataclass(frozen=True)
class SelectionResult:
    selected_ids: tuple      # source ids in pick order
    energies: tuple          # objective value after each pick

    @property
    def energy(self) -> float:
        return self.energies[-1] if self.energies else 0.0


def greedy_select(candidates: Sequence[ClassVector], n_select: int) -> SelectionResult:
    """Pick up to n_select candidates, each round adding the one with the
    largest energy gain; ties go to the lowest source id."""
    if len(candidates) == 0:
        raise ValueError("greedy selection needs at least one candidate")
    order = np.argsort([c.source_id for c in candidates], kind="stable")
    pool = [candidates[i] for i in order]
    m = _presence_matrix(pool).astype(np.float64)

    counts = np.zeros(m.shape[1])
    remaining = np.ones(len(pool), dtype=bool)
    picked_ids, energies = [], []
    for _ in range(min(n_select, len(pool))):
        delta = np.sqrt(counts + 1.0) - np.sqrt(counts)
        gains = m @ delta
        gains[~remaining] = -1.0
        best = int(np.argmax(gains))  # first max = lowest id (pool is id-sorted)
        remaining[best] = False
        counts += m[best]
        picked_ids.append(pool[best].source_id)
        energies.append(float(np.sqrt(counts).sum()))
    return SelectionResult(tuple(picked_ids), tuple(energies))
