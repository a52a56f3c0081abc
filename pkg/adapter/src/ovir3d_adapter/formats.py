"""Writers for the engine's `.ovf` frame and `.qe` query formats.

Implemented against the published byte layout rather than by importing
the engine: the adapter has to run inside a detector environment where
the fusion package may not be installed.  Conformance (every written
file passes the engine's loaders) is proven by the test suite, which
does load the output with the engine.

Layouts, all little-endian:

`.ovf`  one JSON header line (magic "OVIR1", frame_id, intrinsics,
        flattened 4x4 camera-to-world pose, num_regions, feature_dim,
        has_depth), then the float32 depth image if present, then per
        region: uint32 run count, uint32 RLE runs, float32 feature,
        float32 confidence.

`.qe`   uint32 dimension, then the float32 vector.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

OVF_MAGIC = "OVIR1"


class AdapterError(ValueError):
    """Invalid input, config, or detector output."""


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


def encode_mask(mask: np.ndarray) -> np.ndarray:
    """Row-major RLE, alternating background-first run lengths (uint32)."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        raise AdapterError("cannot encode an empty mask")
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def frame_bytes(
    frame_id: int,
    intrinsics,
    pose: np.ndarray,
    depth: np.ndarray | None,
    regions: list[tuple[np.ndarray, np.ndarray, float]],
) -> bytes:
    """Serialize one frame; regions are (runs, feature, confidence) triples."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise AdapterError(f"pose must be 4x4, got {pose.shape}")
    if depth is not None and depth.shape != (intrinsics.height, intrinsics.width):
        raise AdapterError(
            f"resolution mismatch: depth {depth.shape} vs intrinsics "
            f"{(intrinsics.height, intrinsics.width)}"
        )
    dims = {int(np.asarray(feat).size) for _, feat, _ in regions}
    if len(dims) > 1:
        raise AdapterError(f"feature dim must be constant within a frame, got {sorted(dims)}")
    feature_dim = dims.pop() if dims else 0
    header = {
        "magic": OVF_MAGIC,
        "frame_id": int(frame_id),
        "width": intrinsics.width,
        "height": intrinsics.height,
        "fx": intrinsics.fx,
        "fy": intrinsics.fy,
        "cx": intrinsics.cx,
        "cy": intrinsics.cy,
        "pose": [float(v) for v in pose.ravel()],
        "num_regions": len(regions),
        "feature_dim": feature_dim,
        "has_depth": depth is not None,
    }
    chunks = [json.dumps(header).encode("utf-8"), b"\n"]
    if depth is not None:
        chunks.append(np.ascontiguousarray(depth, dtype="<f4").tobytes())
    for runs, feat, conf in regions:
        runs = np.ascontiguousarray(runs, dtype="<u4")
        chunks.append(struct.pack("<I", runs.size))
        chunks.append(runs.tobytes())
        chunks.append(np.ascontiguousarray(feat, dtype="<f4").tobytes())
        chunks.append(struct.pack("<f", float(conf)))
    return b"".join(chunks)


def write_frame(path, frame_id, intrinsics, pose, depth, regions) -> None:
    atomic_write_bytes(path, frame_bytes(frame_id, intrinsics, pose, depth, regions))


def query_bytes(feature: np.ndarray) -> bytes:
    feat = np.ascontiguousarray(feature, dtype="<f4")
    if feat.ndim != 1 or feat.size == 0:
        raise AdapterError("query feature must be a nonempty 1-D vector")
    norm = float(np.linalg.norm(feat.astype(np.float64)))
    if norm == 0.0:
        raise AdapterError("query feature has zero norm")
    return struct.pack("<I", feat.size) + feat.tobytes()


def write_query(path, feature: np.ndarray) -> None:
    atomic_write_bytes(path, query_bytes(feature))
