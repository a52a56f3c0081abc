"""RGB-D sequence directories.

A sequence is a directory with `intrinsics.json`, `poses.json` (one
flattened 4x4 camera-to-world matrix per frame), and `depth/NNNNNN.npy`
float32 depth images in meters; an optional `color/NNNNNN.npy` holds
uint8 RGB images for detectors that use them.  `synthetic_sequence`
fabricates a static-camera scene with raised rectangular blocks over a
background plane, enough for the stub detector to find objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import AdapterError, atomic_write_bytes


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise AdapterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise AdapterError("image dimensions must be positive")


@dataclass(frozen=True)
class SequenceFrame:
    frame_id: int
    depth: np.ndarray  # (H, W) float32 meters, 0 = invalid
    pose: np.ndarray  # (4, 4) camera-to-world
    color: np.ndarray | None = None  # (H, W, 3) uint8


@dataclass(frozen=True)
class RGBDSequence:
    intrinsics: Intrinsics
    frames: list[SequenceFrame]


def load_sequence(path: str | Path) -> RGBDSequence:
    root = Path(path)
    intr_path = root / "intrinsics.json"
    poses_path = root / "poses.json"
    if not intr_path.is_file() or not poses_path.is_file():
        raise AdapterError(f"{root}: not a sequence directory (needs intrinsics.json and poses.json)")
    try:
        doc = json.loads(intr_path.read_text())
        intr = Intrinsics(
            fx=float(doc["fx"]), fy=float(doc["fy"]),
            cx=float(doc["cx"]), cy=float(doc["cy"]),
            width=int(doc["width"]), height=int(doc["height"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise AdapterError(f"{intr_path}: bad intrinsics: {e}") from e
    try:
        pose_list = json.loads(poses_path.read_text())
        poses = [np.array([float(v) for v in p], dtype=np.float64).reshape(4, 4)
                 for p in pose_list]
    except (json.JSONDecodeError, TypeError, ValueError) as e:
        raise AdapterError(f"{poses_path}: bad poses: {e}") from e
    depth_paths = sorted((root / "depth").glob("*.npy"))
    if not depth_paths:
        raise AdapterError(f"{root}: no depth frames")
    if len(depth_paths) != len(poses):
        raise AdapterError(
            f"{root}: {len(depth_paths)} depth frames but {len(poses)} poses"
        )
    frames = []
    for i, (dp, pose) in enumerate(zip(depth_paths, poses)):
        depth = np.load(dp)
        if depth.shape != (intr.height, intr.width):
            raise AdapterError(
                f"{dp}: resolution mismatch: depth {depth.shape} vs intrinsics "
                f"{(intr.height, intr.width)}"
            )
        color_path = root / "color" / dp.name
        color = np.load(color_path) if color_path.is_file() else None
        frames.append(SequenceFrame(
            frame_id=i, depth=depth.astype(np.float32), pose=pose, color=color))
    return RGBDSequence(intrinsics=intr, frames=frames)


def write_sequence(
    path: str | Path,
    intrinsics: Intrinsics,
    depths: list[np.ndarray],
    poses: list[np.ndarray],
    colors: list[np.ndarray] | None = None,
) -> Path:
    if len(depths) != len(poses):
        raise AdapterError(f"{len(depths)} depth frames but {len(poses)} poses")
    root = Path(path)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    if colors is not None:
        (root / "color").mkdir(parents=True, exist_ok=True)
    doc = {
        "fx": intrinsics.fx, "fy": intrinsics.fy,
        "cx": intrinsics.cx, "cy": intrinsics.cy,
        "width": intrinsics.width, "height": intrinsics.height,
    }
    atomic_write_bytes(root / "intrinsics.json", json.dumps(doc).encode())
    pose_list = [[float(v) for v in np.asarray(p, dtype=np.float64).ravel()]
                 for p in poses]
    atomic_write_bytes(root / "poses.json", json.dumps(pose_list).encode())
    for i, depth in enumerate(depths):
        if depth.shape != (intrinsics.height, intrinsics.width):
            raise AdapterError(f"frame {i}: resolution mismatch")
        with open(root / "depth" / f"{i:06d}.npy", "wb") as f:
            np.save(f, np.asarray(depth, dtype=np.float32))
        if colors is not None:
            with open(root / "color" / f"{i:06d}.npy", "wb") as f:
                np.save(f, np.asarray(colors[i], dtype=np.uint8))
    return root


DEFAULT_BLOCKS = (
    (slice(10, 22), slice(8, 24), 1.4),
    (slice(28, 40), slice(40, 56), 1.8),
)


def synthetic_sequence(
    num_frames: int = 20,
    width: int = 64,
    height: int = 48,
    focal: float = 60.0,
    background_depth: float = 2.5,
    blocks=DEFAULT_BLOCKS,
) -> tuple[Intrinsics, list[np.ndarray], list[np.ndarray]]:
    """Static camera over a background plane with raised blocks.

    Returns (intrinsics, depths, poses) ready for write_sequence; each
    block is (row slice, col slice, depth) and sits closer than the
    background so the stub detector segments it.
    """
    if num_frames < 1:
        raise AdapterError("num_frames must be >= 1")
    intr = Intrinsics(fx=focal, fy=focal, cx=(width - 1) / 2, cy=(height - 1) / 2,
                      width=width, height=height)
    depth = np.full((height, width), background_depth, dtype=np.float32)
    for rows, cols, d in blocks:
        depth[rows, cols] = d
    poses = [np.eye(4) for _ in range(num_frames)]
    return intr, [depth.copy() for _ in range(num_frames)], poses
