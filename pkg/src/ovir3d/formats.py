"""File IO: PLY clouds, .ovf frame files, ground-truth JSON, .qe query embeddings.

All binary payloads are little-endian.  Writers emit to a temp file in the
destination directory and os.replace into place, so partially written
artifacts are never observed.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .scene import (
    CameraIntrinsics,
    CameraPose,
    FrameObservation,
    GroundTruthAnnotation,
    GroundTruthInstance,
    QueryEmbedding,
    Region2D,
    ScenePointCloud,
    ValidationError,
)

OVF_MAGIC = "OVIR1"

_PLY_DTYPES = {
    "char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
    "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
    "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# PLY point clouds


def load_cloud(path: str | Path) -> ScenePointCloud:
    """Load a binary little-endian PLY with x, y, z float32 vertex properties."""
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise ValidationError(f"{path}: not a PLY file")
        fmt = None
        elements: list[tuple[str, int, list[tuple[str, str]]]] = []
        while True:
            raw = f.readline()
            if not raw:
                raise ValidationError(f"{path}: truncated PLY header")
            parts = raw.decode("ascii", errors="replace").strip().split()
            if not parts:
                continue
            if parts[0] == "comment":
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if not elements:
                    raise ValidationError(f"{path}: property before element")
                if parts[1] == "list":
                    raise ValidationError(f"{path}: list properties unsupported")
                elements[-1][2].append((parts[2], parts[1]))
            elif parts[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise ValidationError(f"{path}: PLY format must be binary_little_endian, got {fmt}")
        verts = next(((n, c, props) for n, c, props in elements if n == "vertex"), None)
        if verts is None:
            raise ValidationError(f"{path}: PLY has no vertex element")
        if elements[0][0] != "vertex":
            raise ValidationError(f"{path}: vertex element must come first")
        _, count, props = verts
        names = [p[0] for p in props]
        for coord in ("x", "y", "z"):
            if coord not in names:
                raise ValidationError(f"{path}: missing coordinate property {coord!r}")
            if props[names.index(coord)][1] not in ("float", "float32"):
                raise ValidationError(f"{path}: coordinate {coord!r} must be float32")
        dtype = np.dtype([(n, "<" + _PLY_DTYPES[t]) for n, t in props])
        raw = _read_exact(f, dtype.itemsize * count, path, "PLY vertex data")
        data = np.frombuffer(raw, dtype=dtype, count=count)
        pts = np.stack([data["x"], data["y"], data["z"]], axis=1)
        colors = None
        if all(c in names for c in ("red", "green", "blue")):
            colors = np.stack([data["red"], data["green"], data["blue"]], axis=1).astype(np.uint8)
        return ScenePointCloud(points=pts, colors=colors)


def save_cloud(cloud: ScenePointCloud, path: str | Path) -> None:
    props = ["property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.colors is not None:
        props += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
        + props + ["end_header", ""]
    )
    rec = np.empty(len(cloud), dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]
    if cloud.colors is not None:
        rec["red"], rec["green"], rec["blue"] = (
            cloud.colors[:, 0], cloud.colors[:, 1], cloud.colors[:, 2],
        )
    atomic_write_bytes(path, header.encode("ascii") + rec.tobytes())


# ---------------------------------------------------------------------------
# .ovf frame files


def _read_exact(f: BinaryIO, n: int, path, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValidationError(f"{path}: truncated {what} (wanted {n} bytes, got {len(data)})")
    return data


def save_frame(frame: FrameObservation, path: str | Path) -> None:
    intr = frame.intrinsics
    header = {
        "magic": OVF_MAGIC,
        "frame_id": frame.frame_id,
        "width": intr.width,
        "height": intr.height,
        "fx": intr.fx,
        "fy": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
        "pose": [float(v) for v in frame.pose.matrix.ravel()],
        "num_regions": len(frame.regions),
        "feature_dim": frame.feature_dim,
        "has_depth": frame.has_depth,
    }
    chunks = [json.dumps(header).encode("utf-8"), b"\n"]
    if frame.depth is not None:
        chunks.append(np.ascontiguousarray(frame.depth, dtype="<f4").tobytes())
    for region in frame.regions:
        runs = np.ascontiguousarray(region.runs, dtype="<u4")
        chunks.append(struct.pack("<I", runs.size))
        chunks.append(runs.tobytes())
        chunks.append(np.ascontiguousarray(region.feature, dtype="<f4").tobytes())
        chunks.append(struct.pack("<f", region.confidence))
    atomic_write_bytes(path, b"".join(chunks))


def load_frame(path: str | Path) -> FrameObservation:
    with open(path, "rb") as f:
        line = f.readline()
        if not line.endswith(b"\n"):
            raise ValidationError(f"{path}: missing frame header line")
        try:
            header = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: bad frame header JSON: {e}") from e
        if header.get("magic") != OVF_MAGIC:
            raise ValidationError(f"{path}: bad magic {header.get('magic')!r}")
        try:
            width, height = int(header["width"]), int(header["height"])
            intr = CameraIntrinsics(
                fx=float(header["fx"]), fy=float(header["fy"]),
                cx=float(header["cx"]), cy=float(header["cy"]),
                width=width, height=height,
            )
            pose_vals = [float(v) for v in header["pose"]]
            num_regions = int(header["num_regions"])
            feature_dim = int(header["feature_dim"])
            has_depth = bool(header["has_depth"])
            frame_id = int(header["frame_id"])
        except (KeyError, TypeError) as e:
            raise ValidationError(f"{path}: incomplete frame header: {e}") from e
        if len(pose_vals) != 16:
            raise ValidationError(f"{path}: pose must have 16 entries")
        pose = CameraPose(np.array(pose_vals, dtype=np.float64).reshape(4, 4))
        if num_regions < 0 or feature_dim < 0:
            raise ValidationError(f"{path}: negative region count or feature dim")
        depth = None
        if has_depth:
            raw = _read_exact(f, 4 * width * height, path, "depth payload")
            depth = np.frombuffer(raw, dtype="<f4").reshape(height, width)
        regions = []
        for i in range(num_regions):
            (run_count,) = struct.unpack("<I", _read_exact(f, 4, path, f"region {i} run count"))
            runs = np.frombuffer(
                _read_exact(f, 4 * run_count, path, f"region {i} runs"), dtype="<u4"
            )
            feat = np.frombuffer(
                _read_exact(f, 4 * feature_dim, path, f"region {i} feature"), dtype="<f4"
            )
            (conf,) = struct.unpack("<f", _read_exact(f, 4, path, f"region {i} confidence"))
            regions.append(Region2D(runs=runs, feature=feat, confidence=conf))
        trailing = f.read(1)
        if trailing:
            raise ValidationError(f"{path}: trailing bytes after last region")
    return FrameObservation(
        frame_id=frame_id, intrinsics=intr, pose=pose, depth=depth, regions=regions
    )


# ---------------------------------------------------------------------------
# Ground truth JSON


def save_ground_truth(gt: GroundTruthAnnotation, path: str | Path) -> None:
    doc = {
        "instances": [
            {
                "id": inst.instance_id,
                "category": inst.category,
                "point_indices": [int(i) for i in inst.point_indices],
            }
            for inst in gt.instances
        ]
    }
    atomic_write_text(path, json.dumps(doc))


def load_ground_truth(path: str | Path) -> GroundTruthAnnotation:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: bad ground-truth JSON: {e}") from e
    if not isinstance(doc, dict) or "instances" not in doc:
        raise ValidationError(f"{path}: ground truth must have an 'instances' list")
    instances = []
    for entry in doc["instances"]:
        try:
            instances.append(
                GroundTruthInstance(
                    instance_id=int(entry["id"]),
                    category=str(entry["category"]),
                    point_indices=np.asarray(entry["point_indices"], dtype=np.int64),
                )
            )
        except (KeyError, TypeError) as e:
            raise ValidationError(f"{path}: bad ground-truth instance: {e}") from e
    return GroundTruthAnnotation(instances=instances)


# ---------------------------------------------------------------------------
# .qe query embeddings


def save_query(query: QueryEmbedding, path: str | Path) -> None:
    feat = np.ascontiguousarray(query.feature, dtype="<f4")
    atomic_write_bytes(path, struct.pack("<I", feat.size) + feat.tobytes())


def load_query(path: str | Path, label: str | None = None) -> QueryEmbedding:
    path = Path(path)
    with open(path, "rb") as f:
        (dim,) = struct.unpack("<I", _read_exact(f, 4, path, "query dimension"))
        feat = np.frombuffer(_read_exact(f, 4 * dim, path, "query values"), dtype="<f4")
        if f.read(1):
            raise ValidationError(f"{path}: trailing bytes after query vector")
    if label is None:
        label = path.stem
    return QueryEmbedding(feature=feat, label=label)
