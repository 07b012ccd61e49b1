"""Command line front end.

Subcommands mirror the pipeline stages: ``surfels`` fits oriented disks,
``fuse`` produces per-point labels for one parameter set, ``supervise``
writes decoupled training records, ``sample`` runs diversity selection,
``eval`` scores predictions, ``synth`` generates test scenes and
``validate`` checks a scene directory.

Exit codes: 0 success, 1 data or IO error (one-line diagnostic on stderr),
2 usage error (argparse).  Outputs are deterministic: the same flags and
input files always produce the same bytes, whatever ``--threads`` says.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import scene_io
from .evaluation import (accumulate, category_counts, format_report,
                         included_categories, summarize)
from .fusion import fuse
from .geometry import SurfelEstimationParams, estimate_all_surfels
from .sampling import (ClassVector, SamplingParams, compute_class_vector,
                       greedy_select, prefilter_rare)
from .scene import SENTINEL, SceneBundle, validate_scene
from .supervision import coupling_audit, generate_training_records, write_records
from .synth import SCENARIOS, SynthConfig, generate


def _available_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _emit_summary(args, payload: dict) -> None:
    if getattr(args, "summary", None):
        with open(args.summary, "w", encoding="utf-8", newline="\n") as f:
            json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
            f.write("\n")


def _threads(args) -> int:
    return args.threads if args.threads else _available_threads()


def _scene_with_config(args):
    scene = scene_io.read_scene(args.scene)
    config = scene_io.read_config(args.config)
    if config.taxonomy:
        tax_path = Path(args.config).parent / config.taxonomy
        scene.taxonomy = scene_io.read_taxonomy(tax_path)
        report = validate_scene(scene)
        if report:
            raise scene_io.DataFormatError(
                f"{args.scene}: scene invalid under {tax_path}: {report[0]}")
    return scene, config


def _surfels_for(args, scene, threads: int):
    if getattr(args, "surfels", None):
        surfels = scene_io.read_surfels(args.surfels)
        if len(surfels) != len(scene.points):
            raise scene_io.DataFormatError(
                f"{args.surfels}: {len(surfels)} surfels for "
                f"{len(scene.points)} points")
        return surfels
    params = SurfelEstimationParams(rng_seed=getattr(args, "rng_seed", 0))
    return estimate_all_surfels(scene.points, params=params, threads=threads)


def _cmd_surfels(args) -> int:
    scene = scene_io.read_scene(args.scene)
    threads = _threads(args)
    params = SurfelEstimationParams(rng_seed=args.rng_seed)
    surfels = estimate_all_surfels(scene.points, params=params, threads=threads)
    scene_io.write_surfels(surfels, args.out)
    _emit_summary(args, {"command": "surfels", "points": len(scene.points),
                         "out": str(args.out)})
    return 0


def _cmd_fuse(args) -> int:
    scene, config = _scene_with_config(args)
    params = config.supervision if args.fusion_pass == "supervision" else config.features
    threads = _threads(args)
    surfels = _surfels_for(args, scene, threads)
    if args.fill == "auto":
        fill = args.fusion_pass == "features"
    else:
        fill = args.fill == "on"
    labeling = fuse(scene, surfels, params, fill=fill, threads=threads)
    scene_io.write_labels(labeling.categories, args.out)
    if args.provenance_out:
        scene_io.write_labels(labeling.provenance, args.provenance_out)
    direct = int((labeling.provenance == 1).sum())
    filled = int((labeling.provenance == 2).sum())
    _emit_summary(args, {
        "command": "fuse", "pass": args.fusion_pass, "fill": fill,
        "points": len(labeling), "labeled": int((labeling.categories != SENTINEL).sum()),
        "direct": direct, "filled": filled, "out": str(args.out),
    })
    return 0


def _cmd_supervise(args) -> int:
    scene, config = _scene_with_config(args)
    threads = _threads(args)
    surfels = _surfels_for(args, scene, threads)
    records = generate_training_records(scene, surfels, config.features,
                                        config.supervision, threads=threads)
    write_records(records, args.out)
    audit = coupling_audit(records)
    _emit_summary(args, {"command": "supervise", "out": str(args.out), **audit})
    return 0


def _read_candidate_rows(path: Path):
    if not path.is_file():
        raise scene_io.DataFormatError(f"{path}: file not found")
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split(",")
        if len(header) < 2 or header[0] != "source_id":
            raise scene_io.DataFormatError(
                f"{path}: line 1: expected header 'source_id,<category columns>'")
        ids, rows = [], []
        for lineno, raw in enumerate(f, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != len(header):
                raise scene_io.DataFormatError(
                    f"{path}: line {lineno}: expected {len(header)} fields, "
                    f"got {len(fields)}")
            try:
                ids.append(int(fields[0]))
                rows.append([int(v) for v in fields[1:]])
            except ValueError:
                raise scene_io.DataFormatError(
                    f"{path}: line {lineno}: non-integer field")
    if not rows:
        raise scene_io.DataFormatError(f"{path}: no candidate rows")
    return np.array(ids), np.array(rows, dtype=np.int64)


def _cmd_sample(args) -> int:
    ids, rows = _read_candidate_rows(Path(args.input))
    params = SamplingParams(categories=rows.shape[1], n_select=args.select,
                            p_min_fraction=args.p_min,
                            rarity_percentile=args.rarity_percentile)
    if rows.min() >= 0 and rows.max() <= 1:
        # already binary presence vectors
        vectors = [ClassVector(int(i), r) for i, r in zip(ids, rows)]
    else:
        vectors = [compute_class_vector(r, params, source_id=int(i))
                   for i, r in zip(ids, rows)]
    pool = vectors if args.no_prefilter else prefilter_rare(vectors, params)
    result = greedy_select(pool, args.select)
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write("round,candidate_id,energy\n")
        for k, (cid, energy) in enumerate(zip(result.selected_ids, result.energies)):
            f.write("%d,%d,%.17g\n" % (k, cid, energy))
    _emit_summary(args, {
        "command": "sample", "candidates": len(vectors), "pool": len(pool),
        "selected": list(result.selected_ids), "energy": result.energy,
    })
    return 0


def _cmd_eval(args) -> int:
    if len(args.pred) != len(args.gt):
        raise scene_io.DataFormatError(
            f"{len(args.pred)} --pred files but {len(args.gt)} --gt files")
    taxonomy = scene_io.read_taxonomy(args.taxonomy)
    total = None
    per_scene = []
    for pred_path, gt_path in zip(args.pred, args.gt):
        pred = scene_io.read_labels(pred_path)
        gt = scene_io.read_labels(gt_path)
        if len(pred) != len(gt):
            raise scene_io.DataFormatError(
                f"{pred_path}: {len(pred)} predictions vs {len(gt)} "
                f"ground-truth labels in {gt_path}")
        cm = accumulate(pred, gt, taxonomy)
        total = cm if total is None else total + cm
        per_scene.append(category_counts(gt, taxonomy))
    included = included_categories(per_scene, min_points=args.min_points,
                                   min_scenes=args.min_scenes)
    report = summarize(total, included, taxonomy)
    print(format_report(report, taxonomy))
    _emit_summary(args, {"command": "eval", "scenes": len(per_scene),
                         **report.to_dict()})
    return 0


def _cmd_synth(args) -> int:
    cfg = SynthConfig(scenario=args.scenario, rng_seed=args.seed,
                      duration=args.duration, camera_count=args.cameras,
                      point_density=args.density,
                      tick_sample_prob=args.tick_prob,
                      arena_half_extent=args.arena,
                      image_width=args.image_width,
                      image_height=args.image_height, focal=args.focal)
    scene = generate(cfg)
    out = Path(args.out)
    scene_io.write_scene(scene.bundle, out)
    scene_io.write_labels(scene.gt_labels, out / "gt_labels.csv")
    scene_io.write_labels(scene.region_mask.astype(np.uint16), out / "region_mask.csv")
    _emit_summary(args, {
        "command": "synth", "scenario": args.scenario, "seed": args.seed,
        "points": len(scene.bundle.points), "cameras": len(scene.bundle.cameras),
        "region_points": int(scene.region_mask.sum()), "out": str(out),
    })
    return 0


def _cmd_validate(args) -> int:
    directory = Path(args.scene)
    if not directory.is_dir():
        raise scene_io.DataFormatError(f"{directory}: scene directory not found")
    points = scene_io.read_points(directory / "points.csv")
    cameras = scene_io.read_cameras(directory / "cameras.json")
    taxonomy = scene_io.read_taxonomy(directory / "taxonomy.json")
    images = []
    for k in range(len(cameras)):
        images.append(scene_io.read_label_image(directory / f"label_{k:04d}.pgm"))
    bundle = SceneBundle(points=points, cameras=cameras, label_images=images,
                         taxonomy=taxonomy)
    report = validate_scene(bundle)
    for line in report:
        print(line)
    _emit_summary(args, {"command": "validate", "violations": report})
    if report:
        print(f"{directory}: invalid scene ({len(report)} violations)",
              file=sys.stderr)
        return 1
    print(f"{directory}: ok")
    return 0


def _add_common(p, scene=True, config=False, surfels=False):
    if scene:
        p.add_argument("--scene", required=True, help="scene directory")
    if config:
        p.add_argument("--config", required=True, help="fusion config JSON")
    if surfels:
        p.add_argument("--surfels", help="precomputed surfel CSV (else fitted now)")
        p.add_argument("--rng-seed", type=int, default=0,
                       help="surfel subsampling seed when fitting in-process")
    p.add_argument("--threads", type=int, default=0,
                   help="worker threads (default: available parallelism)")
    p.add_argument("--summary", help="write a JSON run summary here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvfuse",
        description="Fuse posed 2D label images onto lidar points.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("surfels", help="fit oriented disks to a point cloud")
    _add_common(p)
    p.add_argument("--rng-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="surfel CSV path")
    p.set_defaults(func=_cmd_surfels)

    p = sub.add_parser("fuse", help="label points from one parameter set")
    _add_common(p, config=True, surfels=True)
    p.add_argument("--pass", dest="fusion_pass", required=True,
                   choices=["supervision", "features"])
    p.add_argument("--fill", choices=["auto", "on", "off"], default="auto",
                   help="nearest-labeled fill (auto: features only)")
    p.add_argument("--out", required=True, help="per-point label CSV")
    p.add_argument("--provenance-out", help="optional per-point provenance CSV")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("supervise", help="write decoupled training records")
    _add_common(p, config=True, surfels=True)
    p.add_argument("--out", required=True, help="records CSV")
    p.set_defaults(func=_cmd_supervise)

    p = sub.add_parser("sample", help="greedy diversity selection")
    p.add_argument("--input", required=True,
                   help="CSV: source_id plus per-category histogram or 0/1 bits")
    p.add_argument("--select", type=int, default=1, help="rounds to run")
    p.add_argument("--p-min", type=float, default=0.02,
                   help="presence threshold as a fraction of labeled pixels")
    p.add_argument("--rarity-percentile", type=float, default=0.25)
    p.add_argument("--no-prefilter", action="store_true",
                   help="skip the rare-class prefilter")
    p.add_argument("--out", required=True, help="selection CSV")
    p.add_argument("--summary")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="confusion-matrix scoring")
    p.add_argument("--pred", action="append", required=True,
                   help="prediction label file (repeat per scene)")
    p.add_argument("--gt", action="append", required=True,
                   help="ground-truth label file (repeat per scene)")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--min-points", type=int, default=1000)
    p.add_argument("--min-scenes", type=int, default=3)
    p.add_argument("--summary")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic failure-mode scene")
    p.add_argument("--scenario", required=True, choices=list(SCENARIOS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="scene directory to create")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--cameras", type=int, default=1, help="rig poses")
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--tick-prob", type=float, default=0.35)
    p.add_argument("--arena", type=float, default=0.0,
                   help="half extent of a surrounding road ring (0: off)")
    p.add_argument("--image-width", type=int, default=128)
    p.add_argument("--image-height", type=int, default=96)
    p.add_argument("--focal", type=float, default=48.0)
    p.add_argument("--summary")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("validate", help="check a scene directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--summary")
    p.set_defaults(func=_cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (scene_io.DataFormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
