"""Forward projection of the scene cloud into frames and 2D region lifting.

One O(N) visibility pass per frame serves every region in that frame: the
visible points are kept sorted by linear pixel index, so lifting a region is
a searchsorted of its RLE foreground intervals against that ordering, never
a full-image mask decode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import (
    FrameObservation,
    Region2D,
    ScenePointCloud,
    ValidationError,
    foreground_ranges,
)

DEPTH_TOLERANCE = 0.05
MIN_REGION_POINTS = 25


@dataclass(frozen=True)
class VisibilityResult:
    """Cloud points visible in one frame, with their pixel coordinates.

    ``indices`` is sorted ascending.  ``rows``/``cols`` align with it.
    ``order`` sorts the visible points by linear pixel index; ``lin_sorted``
    and ``cloud_by_lin`` are the corresponding pixel keys and cloud indices.
    """

    width: int
    height: int
    indices: np.ndarray  # (V,) int64, sorted cloud indices
    rows: np.ndarray  # (V,) int64
    cols: np.ndarray  # (V,) int64
    lin_sorted: np.ndarray  # (V,) int64, sorted linear pixel ids
    cloud_by_lin: np.ndarray  # (V,) int64, cloud index at each lin_sorted slot

    @property
    def visible(self) -> np.ndarray:
        return self.indices

    def pixel_of(self, point_index: int) -> tuple[int, int]:
        slot = np.searchsorted(self.indices, point_index)
        if slot >= len(self.indices) or self.indices[slot] != point_index:
            raise KeyError(point_index)
        return int(self.rows[slot]), int(self.cols[slot])


@dataclass(frozen=True)
class Region3D:
    """A 2D region lifted to the cloud: the visible points under its mask."""

    source_region: Region2D
    point_indices: np.ndarray  # sorted int64 cloud indices

    def __len__(self) -> int:
        return self.point_indices.shape[0]


def compute_visibility(
    cloud: ScenePointCloud,
    frame: FrameObservation,
    depth_tolerance: float = DEPTH_TOLERANCE,
) -> VisibilityResult:
    """Project every cloud point into the frame and keep depth-consistent hits.

    A point is visible iff camera-frame z > 0, its rounded pixel lands in
    bounds, and the frame depth there is valid (> 0) and within
    depth_tolerance of z.
    """
    if frame.depth is None:
        raise ValidationError("compute_visibility requires a frame with depth")
    intr = frame.intrinsics
    pose = frame.pose
    pts = cloud.points.astype(np.float64)
    cam = (pts - pose.translation) @ pose.rotation  # world -> camera
    z = cam[:, 2]
    front = z > 0
    idx = np.flatnonzero(front)
    zf = z[idx]
    u = intr.fx * cam[idx, 0] / zf + intr.cx
    v = intr.fy * cam[idx, 1] / zf + intr.cy
    col = np.rint(u).astype(np.int64)
    row = np.rint(v).astype(np.int64)
    inside = (col >= 0) & (col < intr.width) & (row >= 0) & (row < intr.height)
    idx, zf, col, row = idx[inside], zf[inside], col[inside], row[inside]
    d = frame.depth[row, col].astype(np.float64)
    ok = (d > 0) & (np.abs(zf - d) <= depth_tolerance)
    idx, col, row = idx[ok], col[ok], row[ok]
    lin = row * intr.width + col
    order = np.argsort(lin, kind="stable")
    return VisibilityResult(
        width=intr.width,
        height=intr.height,
        indices=idx,
        rows=row,
        cols=col,
        lin_sorted=lin[order],
        cloud_by_lin=idx[order],
    )


def project_region(region: Region2D, vis: VisibilityResult) -> Region3D:
    """Lift one 2D region: visible cloud points whose pixel lies in its mask."""
    starts, ends = foreground_ranges(region.runs)
    lo = np.searchsorted(vis.lin_sorted, starts, side="left")
    hi = np.searchsorted(vis.lin_sorted, ends, side="left")
    lengths = hi - lo
    total = int(lengths.sum())
    if total == 0:
        return Region3D(region, np.empty(0, dtype=np.int64))
    slots = np.repeat(lo, lengths) + np.arange(total) - np.repeat(
        np.cumsum(lengths) - lengths, lengths
    )
    pts = np.sort(vis.cloud_by_lin[slots])
    return Region3D(region, pts)


def project_regions(
    frame: FrameObservation,
    vis: VisibilityResult,
    min_region_points: int = MIN_REGION_POINTS,
) -> list[Region3D]:
    """Lift all regions of a frame, dropping those below min_region_points."""
    out = []
    for region in frame.regions:
        r3d = project_region(region, vis)
        if len(r3d) >= min_region_points:
            out.append(r3d)
    return out
