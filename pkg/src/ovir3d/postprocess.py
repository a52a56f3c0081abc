"""Final cleanup: DBSCAN-split spatially disconnected instances, drop noise.

The DBSCAN here is deliberately self-contained and deterministic: seeds are
scanned in input order, labels are numbered in discovery order, and border
points join the earliest cluster that reaches them.  Neighbor queries use a
uniform voxel grid of cell size eps.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .fusion import MemoryBank
from .retrieval import FinalInstance
from .scene import ScenePointCloud, ValidationError

NOISE = -1


@dataclass(frozen=True)
class PostprocessConfig:
    eps: float = 0.10
    min_pts: int = 4  # neighborhood size including the point itself
    min_segment_points: int = 50

    def __post_init__(self):
        if self.eps <= 0:
            raise ValidationError("eps must be positive")
        if self.min_pts < 1 or self.min_segment_points < 1:
            raise ValidationError("min_pts and min_segment_points must be >= 1")

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "min_pts": self.min_pts,
            "min_segment_points": self.min_segment_points,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PostprocessConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ValidationError(f"unknown postprocess config keys: {sorted(bad)}")
        return cls(**d)


def _neighbor_lists(pts: np.ndarray, eps: float) -> list[np.ndarray]:
    """eps-ball neighbor indices (including self) per point, via a voxel grid."""
    cells = np.floor(pts / eps).astype(np.int64)
    grid: dict[tuple[int, int, int], list[int]] = {}
    for i, key in enumerate(map(tuple, cells)):
        grid.setdefault(key, []).append(i)
    grid_arr = {k: np.array(v, dtype=np.int64) for k, v in grid.items()}
    eps2 = eps * eps
    out: list[np.ndarray] = []
    for i in range(len(pts)):
        a, b, c = cells[i]
        cand_parts = []
        for da in (-1, 0, 1):
            for db in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    hit = grid_arr.get((a + da, b + db, c + dc))
                    if hit is not None:
                        cand_parts.append(hit)
        cand = np.concatenate(cand_parts)
        diff = pts[cand] - pts[i]
        close = np.einsum("ij,ij->i", diff, diff) <= eps2
        out.append(np.sort(cand[close]))
    return out


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Labels per point: cluster ids in discovery order, NOISE (-1) otherwise."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValidationError("dbscan needs a nonempty (N, d) point array")
    n = len(pts)
    neighbors = _neighbor_lists(pts, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    labels = np.full(n, -2, dtype=np.int64)  # -2 = unvisited
    cid = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        if not core[i]:
            labels[i] = NOISE
            continue
        labels[i] = cid
        queue = deque(int(j) for j in neighbors[i])
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cid  # border point reached from a core
            if labels[j] != -2:
                continue
            labels[j] = cid
            if core[j]:
                queue.extend(int(t) for t in neighbors[j] if labels[t] in (-2, NOISE))
        cid += 1
    return labels


def split_and_filter(
    bank: MemoryBank, cloud: ScenePointCloud, cfg: PostprocessConfig
) -> list[FinalInstance]:
    """DBSCAN each instance; keep clusters of at least min_segment_points.

    Fragments inherit the parent's feature state (mean, stored views, largest
    view).  Output order is (parent id ascending, cluster size descending),
    with fresh sequential ids.
    """
    out: list[FinalInstance] = []
    next_id = 0
    for inst in bank.instances:
        if len(inst.points) == 0:
            continue
        labels = dbscan(cloud.points[inst.points], cfg.eps, cfg.min_pts)
        clusters = []
        for label in range(int(labels.max()) + 1 if labels.max() >= 0 else 0):
            members = inst.points[labels == label]
            if len(members) >= cfg.min_segment_points:
                clusters.append((len(members), label, members))
        clusters.sort(key=lambda t: (-t[0], t[1]))
        for size, _, members in clusters:
            out.append(FinalInstance(
                id=next_id,
                point_indices=members,
                mean_feature=inst.mean_feature.copy(),
                largest_view_feature=inst.largest_view_feature.copy(),
                source_view_count=len(inst.view_features),
                view_features=np.stack(inst.view_features),
                parent_id=inst.id,
            ))
            next_id += 1
    return out
