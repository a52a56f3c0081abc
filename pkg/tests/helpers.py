"""Hand-built miniature scenes for unit tests.

The grid cloud puts one point at the center of every pixel ray at constant
camera depth, so with the identity pose each cloud index r*W + c projects
exactly to pixel (r, c) with zero depth residual.  Region masks then map to
cloud index sets by construction, which keeps fusion tests readable.
"""

from __future__ import annotations

import numpy as np

from ovir3d.scene import (
    CameraIntrinsics,
    CameraPose,
    FrameObservation,
    Region2D,
    ScenePointCloud,
    encode_mask,
)

GRID_W = 16
GRID_H = 12
GRID_Z = 2.0


def grid_intrinsics(width: int = GRID_W, height: int = GRID_H,
                    focal: float = 20.0) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
    )


def identity_pose() -> CameraPose:
    return CameraPose(np.eye(4))


def grid_cloud(intr: CameraIntrinsics | None = None, z: float = GRID_Z) -> ScenePointCloud:
    """One cloud point per pixel at depth z; point index equals row*W + col."""
    intr = intr if intr is not None else grid_intrinsics()
    cols, rows = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    x = (cols - intr.cx) * z / intr.fx
    y = (rows - intr.cy) * z / intr.fy
    pts = np.stack([x.ravel(), y.ravel(), np.full(x.size, z)], axis=1)
    return ScenePointCloud(pts.astype(np.float32))


def flat_depth(intr: CameraIntrinsics, z: float = GRID_Z) -> np.ndarray:
    return np.full((intr.height, intr.width), z, dtype=np.float32)


def rect_mask(intr: CameraIntrinsics, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
    """Boolean mask with rows [r0, r1) and cols [c0, c1) set."""
    mask = np.zeros((intr.height, intr.width), dtype=bool)
    mask[r0:r1, c0:c1] = True
    return mask


def mask_indices(mask: np.ndarray) -> np.ndarray:
    """Cloud indices of a mask under the grid-cloud pixel identity."""
    return np.flatnonzero(mask.ravel()).astype(np.int64)


def basis_features(dim: int, count: int, seed: int = 0) -> np.ndarray:
    """count mutually orthogonal unit feature rows."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, count)))
    return q.T.astype(np.float32)


def make_frame(
    frame_id: int,
    masks: list[np.ndarray],
    features: list[np.ndarray] | np.ndarray,
    intr: CameraIntrinsics | None = None,
    pose: CameraPose | None = None,
    depth: np.ndarray | None = None,
    z: float = GRID_Z,
) -> FrameObservation:
    intr = intr if intr is not None else grid_intrinsics()
    regions = [
        Region2D(runs=encode_mask(mask), feature=np.asarray(feat, dtype=np.float32))
        for mask, feat in zip(masks, features)
    ]
    return FrameObservation(
        frame_id=frame_id,
        intrinsics=intr,
        pose=pose if pose is not None else identity_pose(),
        depth=depth if depth is not None else flat_depth(intr, z),
        regions=regions,
    )
