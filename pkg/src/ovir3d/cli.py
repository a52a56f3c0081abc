"""Command-line front end: synth, fuse, query, eval, export-ply, bench.

Configuration resolves in three layers: built-in defaults, then a --config
JSON file, then explicit flags.  Every command that writes files also writes
a run manifest next to its outputs.  Exit codes: 0 success, 2 usage error,
3 input validation error, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import measure_scaling, measure_scene_latency, scaling_spread
from .evaluation import EvalConfig, SceneRecord, evaluate
from .formats import (
    atomic_write_text,
    load_cloud,
    load_frame,
    load_ground_truth,
    load_query,
    save_cloud,
)
from .fusion import FusionConfig, MemoryBank, finalize, fuse_frame, save_bank
from .postprocess import PostprocessConfig, split_and_filter
from .retrieval import (
    DEFAULT_K,
    STRATEGIES,
    build_index,
    load_index,
    rank,
    save_index,
)
from .scene import InvariantError, ScenePointCloud, ValidationError
from .synth import (
    NoiseSpec,
    generate_scene,
    render_orbit,
    standard_intrinsics,
    standard_scene,
    write_scene_dir,
)

PALETTE = np.array(
    [
        [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
        [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
        [210, 245, 60], [250, 190, 212],
    ],
    dtype=np.uint8,
)

_FLAG_TO_KEY = {
    "theta_s": "theta_s",
    "theta_iou": "theta_iou",
    "theta_det": "theta_det",
    "theta_recall": "theta_recall",
    "period": "period_t",
    "eps": "eps",
    "kmeans_k": "kmeans_k",
    "strategy": "strategy",
    "seed": "seed",
}


def resolve_threads() -> int:
    raw = os.environ.get("OVIR_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"OVIR_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise ValidationError(f"OVIR_THREADS must be a positive integer, got {raw!r}")
    return n


def resolve_config(args) -> dict:
    """Merge defaults, optional --config JSON, and explicit flags."""
    merged = {
        **FusionConfig().to_dict(),
        **PostprocessConfig().to_dict(),
        "kmeans_k": DEFAULT_K,
        "strategy": "clustered",
        "seed": 0,
    }
    path = getattr(args, "config", None)
    if path:
        try:
            doc = json.loads(Path(path).read_text("utf-8"))
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        for key in doc:
            if key not in merged:
                raise ValidationError(f"{path}: unknown config key {key!r}")
        merged.update(doc)
    for flag, key in _FLAG_TO_KEY.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    if merged["strategy"] not in STRATEGIES:
        raise ValidationError(f"unknown strategy {merged['strategy']!r}")
    return merged


def fusion_config_from(merged: dict) -> FusionConfig:
    keys = FusionConfig().to_dict().keys()
    return FusionConfig.from_dict({k: merged[k] for k in keys})


def postprocess_config_from(merged: dict) -> PostprocessConfig:
    keys = PostprocessConfig().to_dict().keys()
    return PostprocessConfig.from_dict({k: merged[k] for k in keys})


def write_manifest(path: Path, command: str, inputs: dict, outputs: dict,
                   merged: dict, timings: dict, extra: dict | None = None) -> None:
    doc = {
        "tool": "ovir3d",
        "version": __version__,
        "command": command,
        "threads": resolve_threads(),
        "inputs": inputs,
        "outputs": outputs,
        "config": merged,
        "timings": {k: round(v, 6) for k, v in timings.items()},
    }
    if extra:
        doc.update(extra)
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def _load_scene_frames(scene_dir: Path):
    cloud = load_cloud(scene_dir / "cloud.ply")
    frame_paths = sorted((scene_dir / "frames").glob("*.ovf"))
    if not frame_paths:
        raise ValidationError(f"no frames in {scene_dir / 'frames'}")
    return cloud, frame_paths


def cmd_synth(args) -> int:
    merged = resolve_config(args)
    seed = int(merged["seed"])
    t0 = time.perf_counter()
    spec = standard_scene(num_objects=args.num_objects, seed=seed,
                          density=args.density)
    scene = generate_scene(spec)
    t1 = time.perf_counter()
    noise = NoiseSpec(
        mask_dropout_prob=args.dropout,
        mask_boundary_erosion_px=args.erosion,
        feature_noise_angle=args.feature_noise,
        false_positive_rate=args.fp_rate,
        depth_noise_sigma=args.depth_noise,
    )
    observations = render_orbit(scene, args.frames, standard_intrinsics(), noise,
                                seed=seed)
    t2 = time.perf_counter()
    out = Path(args.out)
    write_scene_dir(scene, observations, out)
    t3 = time.perf_counter()
    write_manifest(
        out / "synth.manifest.json", "synth",
        inputs={},
        outputs={"scene_dir": str(out)},
        merged={**merged, "num_objects": args.num_objects, "frames": args.frames,
                "density": args.density, "noise": {
                    "mask_dropout_prob": args.dropout,
                    "mask_boundary_erosion_px": args.erosion,
                    "feature_noise_angle": args.feature_noise,
                    "false_positive_rate": args.fp_rate,
                    "depth_noise_sigma": args.depth_noise,
                }},
        timings={"generate": t1 - t0, "render": t2 - t1, "write": t3 - t2},
    )
    print(f"wrote scene with {len(scene.cloud)} points, "
          f"{len(observations)} frames to {out}")
    return 0


def cmd_fuse(args) -> int:
    merged = resolve_config(args)
    fusion_cfg = fusion_config_from(merged)
    post_cfg = postprocess_config_from(merged)
    scene_dir = Path(args.scene)
    out = Path(args.out) if args.out else scene_dir
    t0 = time.perf_counter()
    cloud, frame_paths = _load_scene_frames(scene_dir)
    t1 = time.perf_counter()
    bank = MemoryBank(fusion_cfg)
    for path in frame_paths:
        fuse_frame(bank, load_frame(path), cloud)
    finalize(bank)
    t2 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    save_bank(bank, out / "bank.ovb")
    finals = split_and_filter(bank, cloud, post_cfg)
    indexed = build_index(finals, k=int(merged["kmeans_k"]), seed=int(merged["seed"]))
    save_index(indexed, out / "index.ovi", kmeans_k=int(merged["kmeans_k"]),
               seed=int(merged["seed"]))
    t3 = time.perf_counter()
    fuse_seconds = t2 - t1
    fps = len(frame_paths) / fuse_seconds if fuse_seconds > 0 else float("inf")
    write_manifest(
        out / "fuse.manifest.json", "fuse",
        inputs={"scene_dir": str(scene_dir), "frames": len(frame_paths)},
        outputs={"bank": str(out / "bank.ovb"), "index": str(out / "index.ovi")},
        merged=merged,
        timings={"load": t1 - t0, "fuse": fuse_seconds, "postprocess": t3 - t2},
        extra={"fps": round(fps, 3), "instances": len(indexed)},
    )
    print(f"fused {len(frame_paths)} frames -> {len(indexed)} instances "
          f"({fps:.1f} fps); wrote {out / 'index.ovi'}")
    return 0


def _paint_cloud(cloud: ScenePointCloud, groups: list[np.ndarray]) -> ScenePointCloud:
    colors = np.full((len(cloud), 3), 160, dtype=np.uint8)
    for i, idx in enumerate(groups):
        colors[idx] = PALETTE[i % len(PALETTE)]
    return ScenePointCloud(cloud.points, colors)


def cmd_query(args) -> int:
    merged = resolve_config(args)
    instances, _meta = load_index(args.index)
    query = load_query(args.query)
    result = rank(query, instances, args.k, merged["strategy"])
    by_id = {inst.id: inst for inst in instances}
    doc = {
        "query": result.query_label,
        "strategy": merged["strategy"],
        "k": args.k,
        "results": [
            {"id": i, "score": round(s, 6), "num_points": by_id[i].num_points}
            for i, s in result.ranked
        ],
    }
    text = json.dumps(doc, indent=2)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    else:
        print(text)
    if args.ply:
        if not args.cloud:
            raise ValidationError("--ply requires --cloud")
        cloud = load_cloud(args.cloud)
        painted = _paint_cloud(cloud, [by_id[i].point_indices for i in result.ids()])
        save_cloud(painted, args.ply)
    return 0


def cmd_eval(args) -> int:
    merged = resolve_config(args)
    scene_dirs = [Path(s) for s in args.scene]
    if args.index:
        if len(args.index) != len(scene_dirs):
            raise ValidationError("--index count must match --scene count")
        index_paths = [Path(p) for p in args.index]
    else:
        index_paths = [d / "index.ovi" for d in scene_dirs]
    records = []
    for scene_dir, index_path in zip(scene_dirs, index_paths):
        instances, _ = load_index(index_path)
        gt = load_ground_truth(scene_dir / "gt.json")
        queries = {
            p.stem: load_query(p)
            for p in sorted((scene_dir / "queries").glob("*.qe"))
        }
        records.append(SceneRecord(
            name=str(scene_dir), instances=instances, gt=gt, queries=queries,
        ))
    report = evaluate(records, EvalConfig(strategy=merged["strategy"]))
    print(report.format_table())
    if args.out:
        atomic_write_text(args.out, report.to_json() + "\n")
    return 0


def cmd_export_ply(args) -> int:
    instances, _ = load_index(args.index)
    cloud = load_cloud(args.cloud)
    painted = _paint_cloud(cloud, [inst.point_indices for inst in instances])
    save_cloud(painted, args.out)
    print(f"wrote {args.out} with {len(instances)} instances highlighted")
    return 0


def cmd_bench(args) -> int:
    merged = resolve_config(args)
    fusion_cfg = fusion_config_from(merged)
    scene_dir = Path(args.scene)
    cloud, frame_paths = _load_scene_frames(scene_dir)
    frames = [load_frame(p) for p in frame_paths]
    latency = measure_scene_latency(cloud, frames, fusion_cfg, args.reps)
    scaling = measure_scaling(repetitions=args.reps, seed=int(merged["seed"]))
    doc = {
        "scene": str(scene_dir),
        "latency": latency,
        "scaling": scaling,
        "scaling_spread": round(scaling_spread(scaling), 3),
    }
    text = json.dumps(doc, indent=2)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    else:
        print(text)
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with config overrides")
    p.add_argument("--theta-s", type=float, dest="theta_s")
    p.add_argument("--theta-iou", type=float, dest="theta_iou")
    p.add_argument("--theta-det", type=float, dest="theta_det")
    p.add_argument("--theta-recall", type=float, dest="theta_recall")
    p.add_argument("--period", type=int, dest="period")
    p.add_argument("--eps", type=float, dest="eps")
    p.add_argument("--kmeans-k", type=int, dest="kmeans_k")
    p.add_argument("--strategy", choices=STRATEGIES, dest="strategy")
    p.add_argument("--seed", type=int, dest="seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovir3d",
        description="Open-vocabulary 3D instance retrieval over fused region proposals",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--num-objects", type=int, default=5)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--density", type=float, default=2250.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--erosion", type=int, default=0)
    p.add_argument("--feature-noise", type=float, default=0.0)
    p.add_argument("--fp-rate", type=float, default=0.0)
    p.add_argument("--depth-noise", type=float, default=0.0)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse", help="fuse a scene directory into bank + index")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", help="output directory (default: scene dir)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("query", help="rank instances against a query embedding")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True, help=".qe embedding file")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--out", help="write ranking JSON here instead of stdout")
    p.add_argument("--ply", help="write colored point cloud of the top-k hits")
    p.add_argument("--cloud", help="cloud PLY (required with --ply)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="evaluate indexes against ground truth")
    p.add_argument("--scene", action="append", required=True,
                   help="scene directory (repeatable)")
    p.add_argument("--index", action="append",
                   help="index path per scene (default: SCENE/index.ovi)")
    p.add_argument("--out", help="write report JSON here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-ply", help="color the cloud by final instances")
    p.add_argument("--index", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("bench", help="latency distribution and scaling table")
    p.add_argument("--scene", required=True)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        resolve_threads()
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (FileNotFoundError, NotADirectoryError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except InvariantError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
