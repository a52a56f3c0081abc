"""Shared domain types: point cloud, camera, frames, region proposals, queries.

All feature vectors are L2-normalized at construction so cosine similarity
reduces to a plain dot product everywhere downstream.  Loaded arrays are
frozen (non-writeable) because the cloud and frames are shared, immutable
inputs for the lifetime of a fusion run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNIT_NORM_TOL = 1e-6


class ValidationError(ValueError):
    """Raised when an input file or domain object violates its contract."""


class InvariantError(RuntimeError):
    """Raised when an internal invariant is found broken (a bug, not bad input)."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def unit_vector(v: np.ndarray, what: str = "feature") -> np.ndarray:
    """Return v normalized to unit L2 length as float32.

    Normalization is idempotent: a vector whose norm is already within
    ``UNIT_NORM_TOL`` of 1 is returned unchanged, so save/load round-trips
    are bit-exact on float32 payloads.
    """
    v = np.asarray(v, dtype=np.float32)
    if v.ndim != 1 or v.size == 0:
        raise ValidationError(f"{what} must be a nonempty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{what} has non-finite entries")
    norm = float(np.linalg.norm(v.astype(np.float64)))
    if norm == 0.0:
        raise ValidationError(f"{what} has zero norm")
    if abs(norm - 1.0) <= UNIT_NORM_TOL:
        return v
    return (v.astype(np.float64) / norm).astype(np.float32)


# ---------------------------------------------------------------------------
# Run-length mask codec
#
# Masks are stored row-major as alternating run lengths, first run counting
# background (0) pixels.  Runs always sum to width*height.

def encode_mask(mask: np.ndarray) -> np.ndarray:
    """Encode a binary H x W mask into alternating background-first runs (uint32)."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        raise ValidationError("cannot encode an empty mask")
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def decode_mask(runs: np.ndarray, width: int, height: int) -> np.ndarray:
    """Decode alternating background-first runs into a bool H x W mask."""
    runs = np.asarray(runs, dtype=np.int64)
    total = int(runs.sum())
    if total != width * height:
        raise ValidationError(
            f"RLE length mismatch: runs sum to {total}, expected {width * height}"
        )
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    return np.repeat(values, runs).reshape(height, width)


def foreground_ranges(runs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Half-open [start, end) linear-pixel intervals of the foreground runs."""
    edges = np.concatenate(([0], np.cumsum(np.asarray(runs, dtype=np.int64))))
    starts = edges[1:-1:2]
    ends = edges[2::2]
    return starts, ends


def mask_pixel_count(runs: np.ndarray) -> int:
    """Number of foreground pixels encoded by the runs."""
    return int(np.asarray(runs, dtype=np.int64)[1::2].sum())


def intersect_count(a: np.ndarray, b: np.ndarray) -> int:
    """|a ∩ b| for sorted arrays of unique indices."""
    if len(a) > len(b):
        a, b = b, a
    if len(a) == 0:
        return 0
    pos = np.searchsorted(b, a)
    ok = pos < len(b)
    return int(np.count_nonzero(b[pos[ok]] == a[ok]))


# ---------------------------------------------------------------------------
# Core types


@dataclass(frozen=True)
class ScenePointCloud:
    """The N-point scene reconstruction all instance masks index into."""

    points: np.ndarray  # (N, 3) float32, meters, world frame
    colors: np.ndarray | None = None  # (N, 3) uint8

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValidationError("cloud must have shape (N, 3) with N >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _freeze(pts))
        if self.colors is not None:
            col = np.ascontiguousarray(self.colors, dtype=np.uint8)
            if col.shape != pts.shape:
                raise ValidationError("colors must match points shape")
            object.__setattr__(self, "colors", _freeze(col))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be positive")


@dataclass(frozen=True)
class CameraPose:
    """4x4 rigid camera-to-world transform (row-major, meters)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValidationError("pose must be a 4x4 matrix")
        if not np.allclose(m[3], (0.0, 0.0, 0.0, 1.0), atol=1e-6):
            raise ValidationError("pose last row must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-4):
            raise ValidationError("pose rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-4:
            raise ValidationError("pose rotation block must have det +1")
        object.__setattr__(self, "matrix", _freeze(m))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]


@dataclass(frozen=True)
class Region2D:
    """One 2D region proposal: RLE mask + text-aligned feature + confidence."""

    runs: np.ndarray  # uint32 alternating run lengths, background first
    feature: np.ndarray  # (D,) float32, unit length
    confidence: float = 1.0

    def __post_init__(self):
        runs = np.ascontiguousarray(self.runs, dtype=np.uint32)
        if runs.size == 0:
            raise ValidationError("region has no RLE runs")
        object.__setattr__(self, "runs", _freeze(runs))
        object.__setattr__(self, "feature", _freeze(unit_vector(self.feature)))
        if not (0.0 <= self.confidence <= 1.0):
            raise ValidationError("confidence must be in [0, 1]")

    @property
    def pixel_count(self) -> int:
        return mask_pixel_count(self.runs)

    def mask(self, width: int, height: int) -> np.ndarray:
        return decode_mask(self.runs, width, height)


@dataclass(frozen=True)
class FrameObservation:
    """One RGB-D video frame: calibration, pose, depth map, region proposals."""

    frame_id: int
    intrinsics: CameraIntrinsics
    pose: CameraPose
    depth: np.ndarray | None  # (H, W) float32 meters, 0 = invalid
    regions: list[Region2D] = field(default_factory=list)

    def __post_init__(self):
        w, h = self.intrinsics.width, self.intrinsics.height
        if self.depth is not None:
            d = np.ascontiguousarray(self.depth, dtype=np.float32)
            if d.shape != (h, w):
                raise ValidationError(f"depth shape {d.shape} != ({h}, {w})")
            if not np.all(np.isfinite(d)) or np.any(d < 0):
                raise ValidationError("depth values must be finite and >= 0")
            object.__setattr__(self, "depth", _freeze(d))
        total = w * h
        dims = {r.feature.shape[0] for r in self.regions}
        if len(dims) > 1:
            raise ValidationError(f"inconsistent feature dimensions in frame: {sorted(dims)}")
        for r in self.regions:
            if int(np.asarray(r.runs, dtype=np.int64).sum()) != total:
                raise ValidationError("RLE length mismatch: region runs do not cover the frame")

    @property
    def feature_dim(self) -> int:
        return self.regions[0].feature.shape[0] if self.regions else 0

    @property
    def has_depth(self) -> bool:
        return self.depth is not None


@dataclass(frozen=True)
class GroundTruthInstance:
    instance_id: int
    category: str
    point_indices: np.ndarray  # sorted unique int64 cloud indices

    def __post_init__(self):
        idx = np.asarray(self.point_indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValidationError("point_indices must be 1-D")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
            idx = np.unique(idx)
            if idx[0] < 0:
                raise ValidationError("point indices must be non-negative")
        object.__setattr__(self, "point_indices", _freeze(idx))


@dataclass(frozen=True)
class GroundTruthAnnotation:
    instances: list[GroundTruthInstance]

    def __post_init__(self):
        by_cat: dict[str, np.ndarray] = {}
        for inst in self.instances:
            prev = by_cat.get(inst.category)
            if prev is not None and np.intersect1d(prev, inst.point_indices).size:
                raise ValidationError(
                    f"overlapping instances in category {inst.category!r}"
                )
            by_cat[inst.category] = (
                inst.point_indices if prev is None
                else np.union1d(prev, inst.point_indices)
            )

    def categories(self) -> list[str]:
        seen: dict[str, None] = {}
        for inst in self.instances:
            seen.setdefault(inst.category, None)
        return list(seen)

    def masks_for(self, category: str) -> list[np.ndarray]:
        return [i.point_indices for i in self.instances if i.category == category]

    def validate_against(self, num_points: int) -> None:
        for inst in self.instances:
            if inst.point_indices.size and inst.point_indices[-1] >= num_points:
                raise ValidationError(
                    f"ground-truth instance {inst.instance_id} indexes past cloud size {num_points}"
                )


@dataclass(frozen=True)
class QueryEmbedding:
    """A query vector in the same embedding space as the detection features."""

    feature: np.ndarray  # (D,) float32, unit length
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "feature", _freeze(unit_vector(self.feature, "query embedding")))
