"""Streaming fusion of lifted 2D regions into a bank of 3D instances.

Each frame is scored against the bank state at frame start (similarity of
region features to instance means, 3D IoU against the visible part of each
instance); mutations are applied afterwards in region order.  Every
period_t frames, and once at finalize, the bank is swept: per-point
detection-rate filtering, median-size instance filtering, and pairwise
merging to a fixed point.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .formats import atomic_write_bytes
from .projection import (
    Region3D,
    VisibilityResult,
    compute_visibility,
    project_regions,
)
from .scene import (
    FrameObservation,
    InvariantError,
    ScenePointCloud,
    ValidationError,
    intersect_count,
)

OVB_MAGIC = "OVIB1"


@dataclass(frozen=True)
class FusionConfig:
    theta_s: float = 0.75
    theta_iou: float = 0.25
    theta_det: float = 0.2
    theta_recall: float = 0.25
    period_t: int = 300
    depth_tolerance: float = 0.05
    min_region_points: int = 25
    max_view_features: int = 1024

    def __post_init__(self):
        for name in ("theta_s", "theta_iou", "theta_det", "theta_recall"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        if self.period_t < 1:
            raise ValidationError("period_t must be >= 1")
        if self.depth_tolerance <= 0:
            raise ValidationError("depth_tolerance must be positive")
        if self.min_region_points < 1 or self.max_view_features < 1:
            raise ValidationError("min_region_points and max_view_features must be >= 1")

    def to_dict(self) -> dict:
        return {
            "theta_s": self.theta_s,
            "theta_iou": self.theta_iou,
            "theta_det": self.theta_det,
            "theta_recall": self.theta_recall,
            "period_t": self.period_t,
            "depth_tolerance": self.depth_tolerance,
            "min_region_points": self.min_region_points,
            "max_view_features": self.max_view_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ValidationError(f"unknown fusion config keys: {sorted(bad)}")
        return cls(**d)


class Instance3D:
    """One fused 3D instance: point set, per-point counters, feature state."""

    __slots__ = (
        "id", "points", "det_count", "vis_count", "mean_feature", "n_regions",
        "segment_sizes", "view_features", "view_sizes", "view_arrivals",
        "largest_view_feature", "largest_view_size", "created_at",
    )

    def __init__(self, instance_id: int, points: np.ndarray, feature: np.ndarray,
                 segment_size: int, created_at: int):
        self.id = instance_id
        self.points = np.asarray(points, dtype=np.int64)
        self.det_count = np.ones(len(self.points), dtype=np.int64)
        self.vis_count = np.ones(len(self.points), dtype=np.int64)
        self.mean_feature = np.asarray(feature, dtype=np.float64).copy()
        self.n_regions = 1
        self.segment_sizes = [int(segment_size)]
        self.view_features = [np.asarray(feature, dtype=np.float32).copy()]
        self.view_sizes = [int(segment_size)]
        self.view_arrivals = 1
        self.largest_view_feature = self.view_features[0]
        self.largest_view_size = int(segment_size)
        self.created_at = created_at

    def num_points(self) -> int:
        return len(self.points)

    def clone(self) -> "Instance3D":
        inst = object.__new__(Instance3D)
        inst.id = self.id
        inst.points = self.points.copy()
        inst.det_count = self.det_count.copy()
        inst.vis_count = self.vis_count.copy()
        inst.mean_feature = self.mean_feature.copy()
        inst.n_regions = self.n_regions
        inst.segment_sizes = list(self.segment_sizes)
        inst.view_features = [f.copy() for f in self.view_features]
        inst.view_sizes = list(self.view_sizes)
        inst.view_arrivals = self.view_arrivals
        inst.largest_view_feature = self.largest_view_feature.copy()
        inst.largest_view_size = self.largest_view_size
        inst.created_at = self.created_at
        return inst

    def snapshot(self) -> dict:
        """Plain-python view of the full state, for equality checks in tests."""
        return {
            "id": self.id,
            "points": self.points.copy(),
            "det_count": self.det_count.copy(),
            "vis_count": self.vis_count.copy(),
            "mean_feature": self.mean_feature.copy(),
            "n_regions": self.n_regions,
            "segment_sizes": list(self.segment_sizes),
            "view_features": np.stack(self.view_features),
            "view_sizes": list(self.view_sizes),
            "view_arrivals": self.view_arrivals,
            "largest_view_feature": self.largest_view_feature.copy(),
            "largest_view_size": self.largest_view_size,
            "created_at": self.created_at,
        }


def _add_view(inst: Instance3D, feature: np.ndarray, size: int, cap: int) -> None:
    """Reservoir-sampled view storage, deterministic per (instance id, arrival)."""
    t = inst.view_arrivals
    inst.view_arrivals = t + 1
    feature = np.asarray(feature, dtype=np.float32)
    if t < cap:
        inst.view_features.append(feature.copy())
        inst.view_sizes.append(int(size))
    else:
        rng = np.random.default_rng([inst.id, t])
        j = int(rng.integers(0, t + 1))
        if j < cap:
            inst.view_features[j] = feature.copy()
            inst.view_sizes[j] = int(size)
    if size > inst.largest_view_size:
        inst.largest_view_feature = feature.copy()
        inst.largest_view_size = int(size)


@dataclass
class SweepStats:
    points_removed: int = 0
    instances_dropped: int = 0
    merges: int = 0


@dataclass
class FusionStats:
    frame_id: int
    num_regions: int
    num_matched: int
    num_new: int
    timings: dict[str, float] = field(default_factory=dict)
    sweep: SweepStats | None = None


class MemoryBank:
    """The instance memory bank; single-writer, fused one frame at a time."""

    def __init__(self, config: FusionConfig | None = None):
        self.config = config if config is not None else FusionConfig()
        self.instances: list[Instance3D] = []
        self.frames_seen = 0
        self.next_id = 0
        self.feature_dim: int | None = None
        self.event_counts = {"assignments": 0, "new_instances": 0, "merges": 0}

    def clone(self) -> "MemoryBank":
        bank = MemoryBank(self.config)
        bank.instances = [i.clone() for i in self.instances]
        bank.frames_seen = self.frames_seen
        bank.next_id = self.next_id
        bank.feature_dim = self.feature_dim
        bank.event_counts = dict(self.event_counts)
        return bank


def _membership(points: np.ndarray, sorted_ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For sorted query points: mask of members of sorted_ref + their positions."""
    pos = np.searchsorted(sorted_ref, points)
    in_range = pos < len(sorted_ref)
    ok = np.zeros(len(points), dtype=bool)
    ok[in_range] = sorted_ref[pos[in_range]] == points[in_range]
    return ok, pos


def score_regions(
    instances: list[Instance3D],
    regions: list[Region3D],
    vis: VisibilityResult,
    memberships: list[tuple[np.ndarray, np.ndarray]] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Similarities and IoUs of every region against every instance.

    Returns (sims, ious), both (num_regions, num_instances) float64.  IoU is
    computed against the visible part of each instance in this frame.
    """
    n_r, n_i = len(regions), len(instances)
    sims = np.zeros((n_r, n_i))
    ious = np.zeros((n_r, n_i))
    if n_r == 0 or n_i == 0:
        return sims, ious
    means = np.stack([inst.mean_feature for inst in instances])
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    np.divide(means, norms, out=means, where=norms > 0)
    feats = np.stack([r.source_region.feature for r in regions]).astype(np.float64)
    sims = feats @ means.T

    if memberships is None:
        memberships = [_membership(inst.points, vis.indices) for inst in instances]
    inst_slot_parts = []
    inst_row_parts = []
    vis_sizes = np.zeros(n_i, dtype=np.int64)
    for j, (inst, (ok, pos)) in enumerate(zip(instances, memberships)):
        slots = pos[ok]
        vis_sizes[j] = len(slots)
        inst_slot_parts.append(slots)
        inst_row_parts.append(np.full(len(slots), j, dtype=np.int64))
    region_slots = [np.searchsorted(vis.indices, r.point_indices) for r in regions]
    region_sizes = np.array([len(r) for r in regions], dtype=np.int64)

    # Counting-sort join on visible-slot ids: group region memberships by slot
    # once, then expand each instance slot's covering-region list by gather.
    n_vis = len(vis.indices)
    counts_per_slot = np.zeros(n_vis, dtype=np.int64)
    for slots in region_slots:
        counts_per_slot[slots] += 1
    r_start = np.zeros(n_vis + 1, dtype=np.int64)
    np.cumsum(counts_per_slot, out=r_start[1:])
    slot_regions = np.empty(int(r_start[-1]), dtype=np.int64)
    next_free = r_start[:-1].copy()
    for i, slots in enumerate(region_slots):
        at = next_free[slots]
        slot_regions[at] = i
        next_free[slots] = at + 1

    inter = np.zeros((n_r, n_i), dtype=np.int64)
    if inst_slot_parts and len(slot_regions):
        i_slots = np.concatenate(inst_slot_parts)
        i_rows = np.concatenate(inst_row_parts)
        lengths = counts_per_slot[i_slots]
        total = int(lengths.sum())
        if total:
            lo = r_start[i_slots]
            expand = np.repeat(lo, lengths) + np.arange(total) - np.repeat(
                np.cumsum(lengths) - lengths, lengths
            )
            pair_region = slot_regions[expand]
            pair_inst = np.repeat(i_rows, lengths)
            counts = np.bincount(pair_region * n_i + pair_inst, minlength=n_r * n_i)
            inter = counts.reshape(n_r, n_i)
    union = region_sizes[:, None] + vis_sizes[None, :] - inter
    np.divide(inter, union, out=ious, where=union > 0)
    return sims, ious


def match_score(region: Region3D, instance: Instance3D, vis: VisibilityResult) -> tuple[float, float]:
    """(cosine similarity, IoU vs the instance's visible part) for one pair."""
    sims, ious = score_regions([instance], [region], vis)
    return float(sims[0, 0]), float(ious[0, 0])


def fuse_frame(bank: MemoryBank, frame: FrameObservation, cloud: ScenePointCloud) -> FusionStats:
    cfg = bank.config
    t0 = time.perf_counter()
    vis = compute_visibility(cloud, frame, cfg.depth_tolerance)
    t1 = time.perf_counter()
    regions = project_regions(frame, vis, cfg.min_region_points)
    t2 = time.perf_counter()

    if regions:
        dim = regions[0].source_region.feature.shape[0]
        if bank.feature_dim is None:
            bank.feature_dim = dim
        elif bank.feature_dim != dim:
            raise ValidationError(
                f"frame feature dim {dim} != bank feature dim {bank.feature_dim}"
            )

    memberships = [_membership(inst.points, vis.indices) for inst in bank.instances]
    for inst, (ok, _) in zip(bank.instances, memberships):
        inst.vis_count[ok] += 1

    sims, ious = score_regions(bank.instances, regions, vis, memberships)
    ids = np.array([inst.id for inst in bank.instances], dtype=np.int64)
    assigned: dict[int, list[Region3D]] = {}
    unmatched: list[Region3D] = []
    for i, region in enumerate(regions):
        cand = np.flatnonzero((sims[i] >= cfg.theta_s) & (ious[i] >= cfg.theta_iou))
        if len(cand) == 0:
            unmatched.append(region)
            continue
        best = cand[np.lexsort((ids[cand], -sims[i, cand], -ious[i, cand]))[0]]
        assigned.setdefault(int(best), []).append(region)
    t3 = time.perf_counter()

    frame_seq = bank.frames_seen
    for j, matched in assigned.items():
        inst = bank.instances[j]
        det_points = np.unique(np.concatenate([r.point_indices for r in matched]))
        in_old, _ = _membership(det_points, inst.points)
        new_points = det_points[~in_old]
        if len(new_points):
            merged = np.concatenate([inst.points, new_points])
            order = np.argsort(merged, kind="stable")
            merged = merged[order]
            det = np.concatenate([inst.det_count, np.zeros(len(new_points), np.int64)])[order]
            # new points count as visible from their addition frame
            visc = np.concatenate([inst.vis_count, np.ones(len(new_points), np.int64)])[order]
            inst.points, inst.det_count, inst.vis_count = merged, det, visc
        ok, pos = _membership(det_points, inst.points)
        if not ok.all():
            raise InvariantError("detected points missing from instance after union")
        inst.det_count[pos] += 1
        for r in matched:
            feat = r.source_region.feature.astype(np.float64)
            inst.mean_feature = (inst.n_regions * inst.mean_feature + feat) / (inst.n_regions + 1)
            inst.n_regions += 1
            inst.segment_sizes.append(len(r))
            _add_view(inst, r.source_region.feature, len(r), cfg.max_view_features)
    for region in unmatched:
        inst = Instance3D(
            bank.next_id, region.point_indices.copy(), region.source_region.feature,
            segment_size=len(region), created_at=frame_seq,
        )
        bank.next_id += 1
        bank.instances.append(inst)
    bank.event_counts["assignments"] += sum(len(v) for v in assigned.values())
    bank.event_counts["new_instances"] += len(unmatched)
    t4 = time.perf_counter()

    bank.frames_seen += 1
    sweep = None
    if bank.frames_seen % cfg.period_t == 0:
        sweep = periodic_sweep(bank)
    t5 = time.perf_counter()
    return FusionStats(
        frame_id=frame.frame_id,
        num_regions=len(regions),
        num_matched=sum(len(v) for v in assigned.values()),
        num_new=len(unmatched),
        timings={
            "visibility": t1 - t0,
            "lift": t2 - t1,
            "score": t3 - t2,
            "update": t4 - t3,
            "sweep": t5 - t4,
            "total": t5 - t0,
        },
        sweep=sweep,
    )


def _merge_pair(keep: Instance3D, absorb: Instance3D, cap: int) -> None:
    merged = np.concatenate([keep.points, absorb.points])
    order = np.argsort(merged, kind="stable")
    merged_sorted = merged[order]
    dup = np.zeros(len(merged_sorted), dtype=bool)
    dup[1:] = merged_sorted[1:] == merged_sorted[:-1]
    uniq = merged_sorted[~dup]
    det = np.zeros(len(uniq), dtype=np.int64)
    visc = np.zeros(len(uniq), dtype=np.int64)
    for inst in (keep, absorb):
        ok, pos = _membership(inst.points, uniq)
        if not ok.all():
            raise InvariantError("merge lost points")
        det[pos] += inst.det_count
        visc[pos] += inst.vis_count
    keep.points, keep.det_count, keep.vis_count = uniq, det, visc
    n_k, n_a = keep.n_regions, absorb.n_regions
    keep.mean_feature = (n_k * keep.mean_feature + n_a * absorb.mean_feature) / (n_k + n_a)
    keep.n_regions = n_k + n_a
    keep.segment_sizes.extend(absorb.segment_sizes)
    for feat, size in zip(absorb.view_features, absorb.view_sizes):
        _add_view(keep, feat, size, cap)
    keep.created_at = min(keep.created_at, absorb.created_at)


def periodic_sweep(bank: MemoryBank) -> SweepStats:
    """Point filter, instance filter, then pairwise merging to a fixed point."""
    cfg = bank.config
    stats = SweepStats()
    for inst in bank.instances:
        observed = inst.vis_count > 0
        rate = np.ones(len(inst.points))
        np.divide(inst.det_count, inst.vis_count, out=rate, where=observed)
        keep = ~(observed & (rate < cfg.theta_det))
        removed = len(inst.points) - int(keep.sum())
        if removed:
            stats.points_removed += removed
            inst.points = inst.points[keep]
            inst.det_count = inst.det_count[keep]
            inst.vis_count = inst.vis_count[keep]

    survivors = []
    for inst in bank.instances:
        if len(inst.points) < float(np.median(inst.segment_sizes)):
            stats.instances_dropped += 1
        else:
            survivors.append(inst)
    bank.instances = survivors

    while True:
        n = len(bank.instances)
        if n < 2:
            break
        means = np.stack([inst.mean_feature for inst in bank.instances])
        norms = np.linalg.norm(means, axis=1, keepdims=True)
        np.divide(means, norms, out=means, where=norms > 0)
        sims = means @ means.T
        found = False
        for p in range(n):
            op = bank.instances[p]
            for q in range(n):
                if p == q or sims[p, q] < cfg.theta_s:
                    continue
                oq = bank.instances[q]
                inter = intersect_count(op.points, oq.points)
                if inter == 0:
                    continue
                union = len(op.points) + len(oq.points) - inter
                iou = inter / union if union else 0.0
                recall = inter / len(oq.points) if len(oq.points) else 0.0
                if iou >= cfg.theta_iou or recall >= cfg.theta_recall:
                    if (op.n_regions, -op.id) >= (oq.n_regions, -oq.id):
                        keep_inst, absorb_inst = op, oq
                    else:
                        keep_inst, absorb_inst = oq, op
                    _merge_pair(keep_inst, absorb_inst, cfg.max_view_features)
                    bank.instances.remove(absorb_inst)
                    stats.merges += 1
                    bank.event_counts["merges"] += 1
                    found = True
                    break
            if found:
                break
        if not found:
            break
    return stats


def finalize(bank: MemoryBank) -> SweepStats:
    """Run one unconditional sweep at sequence end."""
    return periodic_sweep(bank)


# ---------------------------------------------------------------------------
# Bank snapshots (.ovb)


def save_bank(bank: MemoryBank, path: str | Path) -> None:
    dim = bank.feature_dim if bank.feature_dim is not None else 0
    manifest = {
        "magic": OVB_MAGIC,
        "version": 1,
        "config": bank.config.to_dict(),
        "frames_seen": bank.frames_seen,
        "next_id": bank.next_id,
        "feature_dim": dim,
        "instances": [
            {
                "id": inst.id,
                "created_at": inst.created_at,
                "n_regions": inst.n_regions,
                "num_points": len(inst.points),
                "num_segments": len(inst.segment_sizes),
                "num_views": len(inst.view_features),
                "view_arrivals": inst.view_arrivals,
                "largest_view_size": inst.largest_view_size,
            }
            for inst in bank.instances
        ],
    }
    chunks = [json.dumps(manifest).encode("utf-8"), b"\n"]
    for inst in bank.instances:
        chunks.append(inst.points.astype("<u4").tobytes())
        chunks.append(inst.det_count.astype("<u4").tobytes())
        chunks.append(inst.vis_count.astype("<u4").tobytes())
        chunks.append(np.asarray(inst.segment_sizes, dtype="<u4").tobytes())
        chunks.append(np.asarray(inst.view_sizes, dtype="<u4").tobytes())
        if inst.view_features:
            chunks.append(np.stack(inst.view_features).astype("<f4").tobytes())
        chunks.append(inst.largest_view_feature.astype("<f4").tobytes())
        chunks.append(inst.mean_feature.astype("<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def _read_exact(f: BinaryIO, n: int, path, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValidationError(f"{path}: truncated {what}")
    return data


def load_bank(path: str | Path) -> MemoryBank:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            manifest = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: bad bank manifest: {e}") from e
        if manifest.get("magic") != OVB_MAGIC:
            raise ValidationError(f"{path}: bad magic {manifest.get('magic')!r}")
        bank = MemoryBank(FusionConfig.from_dict(manifest["config"]))
        bank.frames_seen = int(manifest["frames_seen"])
        bank.next_id = int(manifest["next_id"])
        dim = int(manifest["feature_dim"])
        bank.feature_dim = dim if dim > 0 else None
        for meta in manifest["instances"]:
            n_pts = int(meta["num_points"])
            n_seg = int(meta["num_segments"])
            n_view = int(meta["num_views"])
            inst = object.__new__(Instance3D)
            inst.id = int(meta["id"])
            inst.created_at = int(meta["created_at"])
            inst.n_regions = int(meta["n_regions"])
            inst.view_arrivals = int(meta["view_arrivals"])
            inst.largest_view_size = int(meta["largest_view_size"])
            inst.points = np.frombuffer(
                _read_exact(f, 4 * n_pts, path, "points"), dtype="<u4"
            ).astype(np.int64)
            inst.det_count = np.frombuffer(
                _read_exact(f, 4 * n_pts, path, "det counts"), dtype="<u4"
            ).astype(np.int64)
            inst.vis_count = np.frombuffer(
                _read_exact(f, 4 * n_pts, path, "vis counts"), dtype="<u4"
            ).astype(np.int64)
            inst.segment_sizes = np.frombuffer(
                _read_exact(f, 4 * n_seg, path, "segment sizes"), dtype="<u4"
            ).astype(int).tolist()
            inst.view_sizes = np.frombuffer(
                _read_exact(f, 4 * n_view, path, "view sizes"), dtype="<u4"
            ).astype(int).tolist()
            views = np.frombuffer(
                _read_exact(f, 4 * n_view * dim, path, "view features"), dtype="<f4"
            ).reshape(n_view, dim)
            inst.view_features = [views[i].copy() for i in range(n_view)]
            inst.largest_view_feature = np.frombuffer(
                _read_exact(f, 4 * dim, path, "largest view feature"), dtype="<f4"
            ).copy()
            inst.mean_feature = np.frombuffer(
                _read_exact(f, 8 * dim, path, "mean feature"), dtype="<f8"
            ).copy()
            bank.instances.append(inst)
        if f.read(1):
            raise ValidationError(f"{path}: trailing bytes after last instance")
    return bank
