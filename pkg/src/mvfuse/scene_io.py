"""Bit-exact readers and writers for every on-disk format.

Formats:
  - points CSV            header ``x,y,z,t,sensor_id``, floats with 17
                          significant digits (lossless for float64)
  - cameras JSON          array of {frame_id, timestamp, intrinsics{...},
                          camera_from_world (16 row-major values)}
  - label images          binary PGM ``P5``, 16-bit big-endian, maxval 65535
  - per-point label CSV   first line ``count=<N>``, then one id per line
  - fusion config JSON    named parameter objects ``supervision``/``features``
  - taxonomy JSON         category table with mover/ignore flags
  - surfel CSV            header ``nx,ny,nz,tx,ty,tz,r1,r2``

Writers are deterministic byte-for-byte; read(write(x)) == x for valid x.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .fusion import FusionParams, feature_defaults, supervision_defaults
from .scene import (
    SENTINEL,
    CameraFrame,
    Category,
    ClassTaxonomy,
    LabelImage,
    PointCloud,
    SceneBundle,
    SurfelArray,
    validate_scene,
)


class DataFormatError(ValueError):
    """A file failed structural or format validation; message names the spot."""


# Lossless decimal formatting for 64-bit floats.
_F17 = "%.17g"

_POINT_COLUMNS = ("x", "y", "z", "t", "sensor_id")
_SURFEL_COLUMNS = ("nx", "ny", "nz", "tx", "ty", "tz", "r1", "r2")


# ======================================================================
# generic float CSV (shared by points and surfels)
# ======================================================================

def _scan_float_csv(path: Path, columns: Sequence[str], int_columns: set) -> dict:
    """Line-by-line parse used to produce precise error locations."""
    out: dict[str, list] = {c: [] for c in columns}
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header.split(",") != list(columns):
            raise DataFormatError(
                f"{path}: line 1: expected header {','.join(columns)!r}, got {header!r}")
        for lineno, raw in enumerate(f, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != len(columns):
                raise DataFormatError(
                    f"{path}: line {lineno}: expected {len(columns)} fields, got {len(fields)}")
            for col, field in zip(columns, fields):
                try:
                    if col in int_columns:
                        out[col].append(int(field))
                    else:
                        value = float(field)
                        if math.isnan(value) and field.strip().lower() not in ("nan", "-nan", "+nan"):
                            raise ValueError
                        out[col].append(value)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: line {lineno}: non-numeric field {field!r} in column {col!r}")
    return out


def _read_float_csv(path, columns: Sequence[str], int_columns: set = frozenset()) -> dict:
    """Fast columnar CSV read with exact float round-trip; falls back to a
    line scanner to locate the offending line on malformed input."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: file not found")
    dtypes = {c: (np.int64 if c in int_columns else np.float64) for c in columns}
    try:
        frame = pd.read_csv(path, dtype=dtypes, float_precision="round_trip", engine="c")
        if list(frame.columns) != list(columns):
            raise ValueError("header mismatch")
        arrays = {c: frame[c].to_numpy() for c in columns}
        nan_ok = all(np.isfinite(arrays[c]).all() or _has_written_nonfinite(path, c, columns)
                     for c in columns if c not in int_columns)
        if not nan_ok:
            raise ValueError("unexpected NaN")
        return arrays
    except DataFormatError:
        raise
    except Exception:
        # Slow path: locates the exact line or confirms literal nan/inf tokens.
        scanned = _scan_float_csv(path, columns, int_columns)
        return {c: np.array(scanned[c],
                            dtype=np.int64 if c in int_columns else np.float64)
                for c in columns}


def _has_written_nonfinite(path: Path, column: str, columns: Sequence[str]) -> bool:
    """True if NaN/inf in a parsed column came from literal tokens (allowed,
    caught later by scene validation) rather than missing/garbled fields."""
    idx = list(columns).index(column)
    with open(path, "r", encoding="utf-8") as f:
        f.readline()
        for raw in f:
            fields = raw.rstrip("\n").split(",")
            if len(fields) <= idx:
                return False
            token = fields[idx].strip().lower().lstrip("+-")
            if token in ("nan", "inf", "infinity"):
                continue
            try:
                if not math.isfinite(float(fields[idx])):
                    return False
            except ValueError:
                return False
    return True


# ======================================================================
# points
# ======================================================================

def read_points(path) -> PointCloud:
    arrays = _read_float_csv(path, _POINT_COLUMNS, int_columns={"sensor_id"})
    positions = np.column_stack([arrays["x"], arrays["y"], arrays["z"]])
    return PointCloud(positions, arrays["t"], arrays["sensor_id"].astype(np.int32))


def write_points(cloud: PointCloud, path) -> None:
    fmt = ",".join([_F17] * 4) + ",%d"
    lines = [fmt % tup for tup in zip(cloud.positions[:, 0].tolist(),
                                      cloud.positions[:, 1].tolist(),
                                      cloud.positions[:, 2].tolist(),
                                      cloud.timestamps.tolist(),
                                      cloud.sensor_ids.tolist())]
    body = ",".join(_POINT_COLUMNS) + "\n" + "\n".join(lines)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(body + "\n" if lines else body + "\n")


# ======================================================================
# surfels
# ======================================================================

def read_surfels(path) -> SurfelArray:
    arrays = _read_float_csv(path, _SURFEL_COLUMNS)
    normals = np.column_stack([arrays["nx"], arrays["ny"], arrays["nz"]])
    tangents = np.column_stack([arrays["tx"], arrays["ty"], arrays["tz"]])
    return SurfelArray(normals, tangents, arrays["r1"], arrays["r2"])


def write_surfels(surfels: SurfelArray, path) -> None:
    fmt = ",".join([_F17] * 8)
    cols = (surfels.normals[:, 0], surfels.normals[:, 1], surfels.normals[:, 2],
            surfels.tangents[:, 0], surfels.tangents[:, 1], surfels.tangents[:, 2],
            surfels.radii_tangent, surfels.radii_bitangent)
    lines = [fmt % tup for tup in zip(*(c.tolist() for c in cols))]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(_SURFEL_COLUMNS) + "\n")
        if lines:
            f.write("\n".join(lines) + "\n")


# ======================================================================
# cameras
# ======================================================================

def _camera_to_json(cam: CameraFrame) -> dict:
    m = cam.matrix4()
    return {
        "frame_id": cam.frame_id,
        "timestamp": cam.timestamp,
        "intrinsics": {
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
        },
        "camera_from_world": [float(v) for v in m.reshape(16)],
    }


def _camera_from_json(entry, k: int, path: Path) -> CameraFrame:
    def fail(msg):
        raise DataFormatError(f"{path}: camera entry {k}: {msg}")

    if not isinstance(entry, dict):
        fail("not an object")
    for key in ("frame_id", "timestamp", "intrinsics", "camera_from_world"):
        if key not in entry:
            fail(f"missing key {key!r}")
    intr = entry["intrinsics"]
    if not isinstance(intr, dict):
        fail("intrinsics is not an object")
    for key in ("fx", "fy", "cx", "cy", "width", "height"):
        if key not in intr:
            fail(f"intrinsics missing {key!r}")
    m = entry["camera_from_world"]
    if not isinstance(m, list) or len(m) != 16:
        fail("camera_from_world must hold 16 row-major values")
    try:
        mat = np.array([float(v) for v in m], dtype=np.float64).reshape(4, 4)
        cam = CameraFrame(
            frame_id=int(entry["frame_id"]),
            timestamp=float(entry["timestamp"]),
            fx=float(intr["fx"]), fy=float(intr["fy"]),
            cx=float(intr["cx"]), cy=float(intr["cy"]),
            width=int(intr["width"]), height=int(intr["height"]),
            rotation=mat[:3, :3], translation=mat[:3, 3],
        )
    except (TypeError, ValueError) as e:
        fail(f"bad value ({e})")
    if np.abs(mat[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-12:
        fail(f"last transform row must be [0, 0, 0, 1], got {mat[3].tolist()}")
    return cam


def read_cameras(path) -> list[CameraFrame]:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: file not found")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    if not isinstance(data, list):
        raise DataFormatError(f"{path}: top level must be a JSON array of cameras")
    return [_camera_from_json(entry, k, path) for k, entry in enumerate(data)]


def write_cameras(cameras: Sequence[CameraFrame], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump([_camera_to_json(c) for c in cameras], f, indent=2)
        f.write("\n")


# ======================================================================
# label images (16-bit PGM)
# ======================================================================

def read_label_image(path) -> LabelImage:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: file not found")
    with open(path, "rb") as f:
        blob = f.read()

    # PGM header: magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed, then a single whitespace byte before the samples.
    pos = 0
    tokens = []
    while len(tokens) < 4:
        if pos >= len(blob):
            raise DataFormatError(f"{path}: truncated PGM header")
        c = blob[pos:pos + 1]
        if c == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace():
                pos += 1
            tokens.append(blob[start:pos])
    pos += 1  # exactly one whitespace byte separates header from samples

    if tokens[0] != b"P5":
        raise DataFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise DataFormatError(f"{path}: non-numeric PGM header fields")
    if maxval != 65535:
        raise DataFormatError(f"{path}: maxval must be 65535, got {maxval}")
    expected = width * height * 2
    data = blob[pos:pos + expected]
    if len(data) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} sample bytes, found {len(data)}")
    grid = np.frombuffer(data, dtype=">u2").reshape(height, width)
    return LabelImage(grid.astype(np.uint16))


def write_label_image(image: LabelImage, path) -> None:
    header = b"P5\n%d %d\n65535\n" % (image.width, image.height)
    with open(path, "wb") as f:
        f.write(header)
        f.write(image.categories.astype(">u2").tobytes())


# ======================================================================
# per-point label files
# ======================================================================

def read_labels(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: file not found")
    with open(path, "r", encoding="utf-8") as f:
        head = f.readline().strip()
        if not head.startswith("count="):
            raise DataFormatError(f"{path}: line 1: expected 'count=<N>', got {head!r}")
        try:
            declared = int(head[len("count="):])
        except ValueError:
            raise DataFormatError(f"{path}: line 1: bad count value {head!r}")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)  # empty file is fine
                values = np.loadtxt(f, dtype=np.int64, ndmin=1)
        except ValueError:
            f.seek(0)
            f.readline()
            for lineno, raw in enumerate(f, start=2):
                line = raw.strip()
                if line and not line.lstrip("+-").isdigit():
                    raise DataFormatError(
                        f"{path}: line {lineno}: non-integer label {line!r}")
            raise DataFormatError(f"{path}: malformed label rows")
    if len(values) != declared:
        raise DataFormatError(
            f"{path}: declared count {declared} but file has {len(values)} labels")
    if len(values) and (values.min() < 0 or values.max() > SENTINEL):
        raise DataFormatError(f"{path}: label outside [0, {SENTINEL}]")
    return values.astype(np.uint16)


def write_labels(labels, path) -> None:
    labels = np.asarray(labels)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"count={len(labels)}\n")
        if len(labels):
            f.write("\n".join(map(str, labels.tolist())))
            f.write("\n")


# ======================================================================
# taxonomy
# ======================================================================

def read_taxonomy(path) -> ClassTaxonomy:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: file not found")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    if not isinstance(data, dict) or "categories" not in data:
        raise DataFormatError(f"{path}: expected object with a 'categories' array")
    cats = []
    for k, entry in enumerate(data["categories"]):
        if not isinstance(entry, dict) or "id" not in entry or "name" not in entry:
            raise DataFormatError(f"{path}: category entry {k}: needs 'id' and 'name'")
        cats.append(Category(
            id=int(entry["id"]),
            name=str(entry["name"]),
            is_mover=bool(entry.get("is_mover", False)),
            is_ignore=bool(entry.get("is_ignore", False)),
        ))
    try:
        return ClassTaxonomy(cats)
    except ValueError as e:
        raise DataFormatError(f"{path}: {e}")


def write_taxonomy(taxonomy: ClassTaxonomy, path) -> None:
    data = {"categories": [
        {"id": c.id, "name": c.name, "is_mover": c.is_mover, "is_ignore": c.is_ignore}
        for c in taxonomy
    ]}
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


# ======================================================================
# fusion config
# ======================================================================

@dataclass(frozen=True)
class FusionConfig:
    """Parameter sets for both fusion passes plus an optional taxonomy path."""

    supervision: FusionParams
    features: FusionParams
    taxonomy: Optional[str] = None


def default_config() -> FusionConfig:
    return FusionConfig(supervision=supervision_defaults(), features=feature_defaults())


_PARAM_FIELDS = ("delta_t_max", "tau", "dilation_k", "d_max", "delta_t_thresh")


def _params_from_json(obj, defaults: FusionParams, name: str, path: Path) -> FusionParams:
    if not isinstance(obj, dict):
        raise DataFormatError(f"{path}: {name!r} must be an object")
    unknown = set(obj) - set(_PARAM_FIELDS)
    if unknown:
        raise DataFormatError(f"{path}: {name!r} has unknown fields {sorted(unknown)}")
    merged = {f: float(obj.get(f, getattr(defaults, f))) for f in _PARAM_FIELDS}
    try:
        return FusionParams(**merged)
    except ValueError as e:
        raise DataFormatError(f"{path}: {name!r}: {e}")


def read_config(path) -> FusionConfig:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: file not found")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    if not isinstance(data, dict):
        raise DataFormatError(f"{path}: top level must be a JSON object")
    sup = _params_from_json(data.get("supervision", {}), supervision_defaults(),
                            "supervision", path)
    feat = _params_from_json(data.get("features", {}), feature_defaults(),
                             "features", path)
    taxonomy = data.get("taxonomy")
    if taxonomy is not None and not isinstance(taxonomy, str):
        raise DataFormatError(f"{path}: 'taxonomy' must be a path string")
    return FusionConfig(supervision=sup, features=feat, taxonomy=taxonomy)


def write_config(config: FusionConfig, path) -> None:
    def params_dict(p: FusionParams) -> dict:
        return {f: getattr(p, f) for f in _PARAM_FIELDS}

    data = {"supervision": params_dict(config.supervision),
            "features": params_dict(config.features)}
    if config.taxonomy is not None:
        data["taxonomy"] = config.taxonomy
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


# ======================================================================
# whole scenes
# ======================================================================

def _label_image_name(index: int) -> str:
    return f"label_{index:04d}.pgm"


def write_scene(bundle: SceneBundle, directory) -> None:
    """Write a scene directory; two writes of one bundle are byte-identical."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_points(bundle.points, directory / "points.csv")
    write_cameras(bundle.cameras, directory / "cameras.json")
    write_taxonomy(bundle.taxonomy, directory / "taxonomy.json")
    for k, image in enumerate(bundle.label_images):
        write_label_image(image, directory / _label_image_name(k))


def read_scene(directory) -> SceneBundle:
    """Read a scene directory and validate it; raises on any violation."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataFormatError(f"{directory}: scene directory not found")
    points = read_points(directory / "points.csv")
    cameras = read_cameras(directory / "cameras.json")
    taxonomy = read_taxonomy(directory / "taxonomy.json")

    found = sorted(directory.glob("label_*.pgm"))
    if len(found) != len(cameras):
        raise DataFormatError(
            f"{directory}: {len(cameras)} cameras but {len(found)} label images")
    labels = []
    for k in range(len(cameras)):
        expected = directory / _label_image_name(k)
        if not expected.is_file():
            raise DataFormatError(f"{expected}: missing label image")
        labels.append(read_label_image(expected))

    bundle = SceneBundle(points=points, cameras=cameras,
                         label_images=labels, taxonomy=taxonomy)
    report = validate_scene(bundle)
    if report:
        shown = "; ".join(report[:3])
        raise DataFormatError(f"{directory}: invalid scene: {shown}")
    return bundle
