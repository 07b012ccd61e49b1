"""Decoupled training records: one loose fusion pass for input features, one
strict pass for pseudo-ground-truth.

The two passes run with independent parameters so a learner cannot recover
the supervision signal by copying its input features; pseudo-labels are kept
only where the strict pass produced a direct vote (never from neighbor fill).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .fusion import FusionParams, Provenance, fuse
from .geometry import SpatialIndex
from .scene import SceneBundle, SENTINEL


@dataclass(frozen=True)
class TrainingRecord:
    point_index: int
    feature_category: int  # dense input feature (one-hot id semantics)
    pseudo_label: int      # sparse trusted target, SENTINEL when absent


class TrainingRecordSet:
    """Columnar per-point records, in point order."""

    def __init__(self, point_indices, feature_categories, pseudo_labels):
        self.point_indices = np.asarray(point_indices, dtype=np.int64)
        self.feature_categories = np.asarray(feature_categories, dtype=np.uint16)
        self.pseudo_labels = np.asarray(pseudo_labels, dtype=np.uint16)
        if not (len(self.point_indices) == len(self.feature_categories)
                == len(self.pseudo_labels)):
            raise ValueError("record columns must have equal length")

    def __len__(self) -> int:
        return len(self.point_indices)

    def __getitem__(self, i: int) -> TrainingRecord:
        return TrainingRecord(int(self.point_indices[i]),
                              int(self.feature_categories[i]),
                              int(self.pseudo_labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def generate_training_records(scene: SceneBundle, surfels,
                              feature_params: FusionParams,
                              supervision_params: FusionParams,
                              threads: int = 1,
                              feature_fill: bool = True) -> TrainingRecordSet:
    if (supervision_params.delta_t_max > feature_params.delta_t_max
            or supervision_params.tau > feature_params.tau):
        warnings.warn("supervision pass is looser than the feature pass; "
                      "records will be unusually correlated", stacklevel=2)

    index = SpatialIndex(scene.points.positions)
    features = fuse(scene, surfels, feature_params, fill=feature_fill,
                    threads=threads, index=index)
    strict = fuse(scene, surfels, supervision_params, fill=False,
                  threads=threads, index=index)

    pseudo = np.where(strict.provenance == Provenance.DIRECT_VOTE,
                      strict.categories, SENTINEL).astype(np.uint16)
    n = len(scene.points)
    return TrainingRecordSet(np.arange(n, dtype=np.int64),
                             features.categories, pseudo)


def coupling_audit(records: TrainingRecordSet) -> dict:
    """Agreement rate at supervised points, supervision sparsity, and
    per-category counts; agreement is absent (None) with zero supervision."""
    n = len(records)
    supervised = records.pseudo_labels != SENTINEL
    n_sup = int(supervised.sum())
    agreement = None
    if n_sup:
        agree = records.feature_categories[supervised] == records.pseudo_labels[supervised]
        agreement = float(agree.sum() / n_sup)

    def counts(values: np.ndarray) -> dict:
        ids, c = np.unique(values[values != SENTINEL], return_counts=True)
        return {int(i): int(k) for i, k in zip(ids, c)}

    return {
        "points": n,
        "supervised_points": n_sup,
        "sparsity": float(n_sup / n) if n else 0.0,
        "agreement": agreement,
        "pseudo_label_counts": counts(records.pseudo_labels),
        "feature_category_counts": counts(records.feature_categories),
    }


_RECORD_HEADER = "point_index,feature_category,pseudo_label"


def write_records(records: TrainingRecordSet, path) -> None:
    lines = ["%d,%d,%d" % t for t in zip(records.point_indices.tolist(),
                                         records.feature_categories.tolist(),
                                         records.pseudo_labels.tolist())]
    with open(path, "w") as fh:
        fh.write(_RECORD_HEADER + "\n")
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def read_records(path) -> TrainingRecordSet:
    from .scene_io import DataFormatError
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != _RECORD_HEADER:
            raise DataFormatError(f"{path}: expected header '{_RECORD_HEADER}'")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)  # empty file is fine
                data = np.loadtxt(fh, dtype=np.int64, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise DataFormatError(f"{path}: malformed record row ({exc})") from exc
    if data.size == 0:
        data = data.reshape(0, 3)
    if data.shape[1] != 3:
        raise DataFormatError(f"{path}: expected 3 columns")
    return TrainingRecordSet(data[:, 0], data[:, 1].astype(np.uint16),
                             data[:, 2].astype(np.uint16))
