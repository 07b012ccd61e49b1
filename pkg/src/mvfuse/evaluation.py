"""Confusion-matrix IoU evaluation with a per-scene class-inclusion rule and
a mover-category breakdown."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .scene import ClassTaxonomy, SENTINEL


@dataclass
class ConfusionMatrix:
    """Counts over evaluated points: rows are ground truth, columns are
    prediction, both indexed by position in ``category_ids``.  A prediction of
    the sentinel at an evaluated point cannot occupy a column; it is tracked
    per ground-truth row in ``unmatched`` and counts toward false negatives.
    """

    category_ids: tuple
    counts: np.ndarray = None          # (C, C) int64
    unmatched: np.ndarray = None       # (C,) int64, sentinel predictions
    evaluated_points: int = 0
    total_points: int = 0

    def __post_init__(self):
        c = len(self.category_ids)
        if self.counts is None:
            self.counts = np.zeros((c, c), dtype=np.int64)
        if self.unmatched is None:
            self.unmatched = np.zeros(c, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.unmatched = np.asarray(self.unmatched, dtype=np.int64)
        if self.counts.shape != (c, c) or self.unmatched.shape != (c,):
            raise ValueError("confusion matrix shape mismatch")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.category_ids != other.category_ids:
            raise ValueError("cannot merge matrices over different categories")
        return ConfusionMatrix(self.category_ids,
                               self.counts + other.counts,
                               self.unmatched + other.unmatched,
                               self.evaluated_points + other.evaluated_points,
                               self.total_points + other.total_points)


def accumulate(pred, gt, taxonomy: ClassTaxonomy) -> ConfusionMatrix:
    """Tally one scene.  Points whose ground truth is the sentinel or an
    ignore-flagged category contribute nothing."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError("prediction and ground truth lengths differ")

    ids = np.asarray(taxonomy.ids, dtype=np.int64)
    cm = ConfusionMatrix(tuple(int(i) for i in ids))
    cm.total_points = len(gt)

    for arr in (gt, pred):
        if arr.size and (arr.min() < 0 or arr.max() > SENTINEL):
            raise ValueError("label outside the taxonomy")
    known = np.zeros(SENTINEL + 1, dtype=bool)
    known[ids] = True
    known[SENTINEL] = True
    if not (known[gt].all() and known[pred].all()):
        raise ValueError("label outside the taxonomy")

    ignore = np.array([taxonomy.category(int(i)).is_ignore for i in ids])
    keep = gt != SENTINEL
    if ignore.any():
        ignored_ids = ids[ignore]
        keep &= ~np.isin(gt, ignored_ids)
    g = np.searchsorted(ids, gt[keep])
    p_raw = pred[keep]
    cm.evaluated_points = int(keep.sum())

    missing = p_raw == SENTINEL
    np.add.at(cm.unmatched, g[missing], 1)
    p = np.searchsorted(ids, p_raw[~missing])
    np.add.at(cm.counts, (g[~missing], p), 1)
    return cm


def iou_per_category(cm: ConfusionMatrix) -> dict:
    """Map category id -> IoU; categories with an empty union are absent."""
    tp = np.diag(cm.counts)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp + cm.unmatched
    union = tp + fp + fn
    out = {}
    for k, cid in enumerate(cm.category_ids):
        if union[k] > 0:
            out[cid] = float(tp[k] / union[k])
    return out


def included_categories(per_scene_counts: Sequence[dict], min_points: int = 1000,
                        min_scenes: int = 3) -> set:
    """A category qualifies when at least min_scenes scenes contain at least
    min_points of its ground-truth points."""
    qualifying = {}
    for scene in per_scene_counts:
        for cid, n in scene.items():
            if n >= min_points:
                qualifying[cid] = qualifying.get(cid, 0) + 1
    return {cid for cid, scenes in qualifying.items() if scenes >= min_scenes}


def category_counts(gt, taxonomy: ClassTaxonomy) -> dict:
    """Ground-truth points per category for one scene (inclusion-rule input);
    sentinel and ignore-flagged points are not counted."""
    gt = np.asarray(gt)
    out = {}
    for cid in taxonomy.ids:
        if taxonomy.category(cid).is_ignore:
            continue
        n = int((gt == cid).sum())
        if n:
            out[cid] = n
    return out


@dataclass(frozen=True)
class EvalReport:
    miou: Optional[float]
    mover_miou: Optional[float]
    per_category_iou: dict          # id -> IoU over included categories
    coverage: float                 # evaluated / total points
    included: tuple

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "mover_miou": self.mover_miou,
            "per_category_iou": {str(k): v for k, v in
                                 sorted(self.per_category_iou.items())},
            "coverage": self.coverage,
            "included": list(self.included),
        }


def summarize(cm: ConfusionMatrix, included: Iterable[int],
              taxonomy: ClassTaxonomy) -> EvalReport:
    included = sorted(set(included))
    if not included:
        raise ValueError("no categories pass the inclusion rule")
    ious = iou_per_category(cm)
    scored = {cid: ious[cid] for cid in included if cid in ious}
    movers = {cid: v for cid, v in scored.items()
              if taxonomy.category(cid).is_mover}
    miou = float(np.mean(list(scored.values()))) if scored else None
    mover_miou = float(np.mean(list(movers.values()))) if movers else None
    coverage = cm.evaluated_points / cm.total_points if cm.total_points else 0.0
    return EvalReport(miou, mover_miou, scored, float(coverage), tuple(included))


def format_report(report: EvalReport, taxonomy: ClassTaxonomy) -> str:
    """Aligned-column text rendering."""
    lines = []
    name_w = max([len(taxonomy.category(c).name) for c in report.included] + [8])
    for cid in report.included:
        name = taxonomy.category(cid).name
        iou = report.per_category_iou.get(cid)
        val = "absent" if iou is None else f"{iou:.4f}"
        mark = " (mover)" if taxonomy.category(cid).is_mover else ""
        lines.append(f"  {name:<{name_w}} {val}{mark}")
    lines.append(f"  {'mIoU':<{name_w}} " +
                 ("absent" if report.miou is None else f"{report.miou:.4f}"))
    lines.append(f"  {'mover mIoU':<{name_w}} " +
                 ("absent" if report.mover_miou is None else f"{report.mover_miou:.4f}"))
    lines.append(f"  {'coverage':<{name_w}} {report.coverage:.4f}")
    return "\n".join(lines)
