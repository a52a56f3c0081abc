"""Representative-feature index building and ranked instance retrieval.

Each final instance carries up to K representative features, the spherical
K-Means centers of its stored view features.  A query is scored against an
instance by the configured ensemble strategy and instances are returned in
descending score order (ties broken by ascending id).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .formats import atomic_write_bytes
from .scene import QueryEmbedding, ValidationError

OVI_MAGIC = "OVII1"
STRATEGIES = ("mean", "clustered", "largest_view")
DEFAULT_K = 64


@dataclass
class FinalInstance:
    """A post-processed instance ready for retrieval."""

    id: int
    point_indices: np.ndarray  # sorted int64 cloud indices
    mean_feature: np.ndarray  # (D,) float64 running mean (not unit)
    largest_view_feature: np.ndarray  # (D,) float32 unit
    source_view_count: int
    view_features: np.ndarray | None = None  # (V, D) float32; dropped after indexing
    representatives: np.ndarray | None = None  # (K', D) float32 unit rows
    parent_id: int | None = None

    @property
    def num_points(self) -> int:
        return len(self.point_indices)


@dataclass
class KMeansResult:
    centers: np.ndarray  # (K', D) float32
    objective_history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _dedupe_rows(features: np.ndarray) -> np.ndarray:
    seen: dict[bytes, None] = {}
    rows = []
    for row in features:
        key = row.tobytes()
        if key not in seen:
            seen[key] = None
            rows.append(row)
    return np.stack(rows)


def build_representatives(view_features: np.ndarray, k: int, seed=0) -> KMeansResult:
    """Spherical K-Means centers of the view features.

    With at most k distinct features the deduplicated features themselves are
    returned unchanged.  Otherwise: k-means++ init from the seeded generator,
    Lloyd iterations with re-normalized centroids, empty clusters reseeded to
    the point farthest from all current centers; stops after 100 iterations
    or when every center moves less than 1e-4.
    """
    feats = np.asarray(view_features, dtype=np.float32)
    if feats.ndim != 2 or len(feats) == 0:
        raise ValidationError("need a nonempty (V, D) feature matrix")
    if k < 1:
        raise ValidationError("k must be >= 1")
    deduped = _dedupe_rows(feats)
    if len(deduped) <= k:
        return KMeansResult(centers=deduped, objective_history=[], n_iter=0)

    f64 = feats.astype(np.float64)
    f64 /= np.linalg.norm(f64, axis=1, keepdims=True)
    n = len(f64)
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(0, n))]
    max_cos = f64 @ f64[chosen[0]]
    for _ in range(1, k):
        dist = np.maximum(0.0, 1.0 - max_cos)
        total = dist.sum()
        if total <= 1e-12:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=dist / total))
        chosen.append(idx)
        np.maximum(max_cos, f64 @ f64[idx], out=max_cos)
    centers = f64[chosen].copy()

    history: list[float] = []
    n_iter = 0
    for _ in range(100):
        n_iter += 1
        sims = f64 @ centers.T
        assign = np.argmax(sims, axis=1)
        best = sims[np.arange(n), assign]
        history.append(float(np.sum(1.0 - best)))
        new_centers = np.zeros_like(centers)
        counts = np.bincount(assign, minlength=k)
        np.add.at(new_centers, assign, f64)
        empties = np.flatnonzero(counts == 0)
        if len(empties):
            # reseed each empty center to the point farthest from all centers
            order = np.argsort(best, kind="stable")
            for slot, point in zip(empties, order[: len(empties)]):
                new_centers[slot] = f64[point]
                counts[slot] = 1
        norms = np.linalg.norm(new_centers, axis=1, keepdims=True)
        bad = norms[:, 0] < 1e-12
        if bad.any():
            new_centers[bad] = centers[bad]
            norms[bad] = 1.0
        new_centers /= norms
        movement = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if movement < 1e-4:
            break
    sims = f64 @ centers.T
    best = sims[np.arange(n), np.argmax(sims, axis=1)]
    history.append(float(np.sum(1.0 - best)))
    return KMeansResult(centers=centers.astype(np.float32), objective_history=history, n_iter=n_iter)


def build_index(instances: list[FinalInstance], k: int = DEFAULT_K, seed: int = 0) -> list[FinalInstance]:
    """Fill representatives for every instance, seeded per instance id."""
    out = []
    for inst in instances:
        if inst.view_features is None:
            raise ValidationError(f"instance {inst.id} has no view features to cluster")
        result = build_representatives(inst.view_features, k, seed=[seed, inst.id])
        out.append(FinalInstance(
            id=inst.id,
            point_indices=inst.point_indices,
            mean_feature=inst.mean_feature,
            largest_view_feature=inst.largest_view_feature,
            source_view_count=inst.source_view_count,
            view_features=None,
            representatives=result.centers,
            parent_id=inst.parent_id,
        ))
    return out


@dataclass(frozen=True)
class RetrievalResult:
    ranked: list[tuple[int, float]]  # (instance id, score), descending score
    query_label: str | None = None

    def ids(self) -> list[int]:
        return [i for i, _ in self.ranked]


def scores_for(query: QueryEmbedding, instances: list[FinalInstance], strategy: str) -> np.ndarray:
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r}")
    q = query.feature.astype(np.float64)
    scores = np.empty(len(instances))
    for i, inst in enumerate(instances):
        if inst.mean_feature.shape[0] != q.shape[0]:
            raise ValidationError(
                f"query dim {q.shape[0]} != instance dim {inst.mean_feature.shape[0]}"
            )
        if strategy == "mean":
            norm = float(np.linalg.norm(inst.mean_feature))
            scores[i] = float(inst.mean_feature @ q) / norm if norm > 1e-300 else -1.0
        elif strategy == "clustered":
            if inst.representatives is None:
                raise ValidationError(f"instance {inst.id} has no representatives")
            scores[i] = float(np.max(inst.representatives.astype(np.float64) @ q))
        else:
            scores[i] = float(inst.largest_view_feature.astype(np.float64) @ q)
    return scores


def rank(
    query: QueryEmbedding,
    instances: list[FinalInstance],
    k_results: int,
    strategy: str = "clustered",
) -> RetrievalResult:
    if k_results < 0:
        raise ValidationError("k_results must be >= 0")
    if not instances or k_results == 0:
        return RetrievalResult(ranked=[], query_label=query.label)
    scores = scores_for(query, instances, strategy)
    ids = np.array([inst.id for inst in instances], dtype=np.int64)
    order = np.lexsort((ids, -scores))[:k_results]
    ranked = [(int(ids[i]), float(scores[i])) for i in order]
    return RetrievalResult(ranked=ranked, query_label=query.label)


# ---------------------------------------------------------------------------
# Index snapshots (.ovi)


def save_index(
    instances: list[FinalInstance],
    path: str | Path,
    kmeans_k: int = DEFAULT_K,
    seed: int = 0,
) -> None:
    if any(inst.representatives is None for inst in instances):
        raise ValidationError("cannot save an index before building representatives")
    dim = instances[0].mean_feature.shape[0] if instances else 0
    manifest = {
        "magic": OVI_MAGIC,
        "version": 1,
        "feature_dim": dim,
        "kmeans_k": kmeans_k,
        "seed": seed,
        "instances": [
            {
                "id": inst.id,
                "num_points": len(inst.point_indices),
                "num_representatives": len(inst.representatives),
                "source_view_count": inst.source_view_count,
                "parent_id": inst.parent_id if inst.parent_id is not None else -1,
            }
            for inst in instances
        ],
    }
    chunks = [json.dumps(manifest).encode("utf-8"), b"\n"]
    for inst in instances:
        chunks.append(inst.point_indices.astype("<u4").tobytes())
        chunks.append(inst.mean_feature.astype("<f8").tobytes())
        chunks.append(inst.largest_view_feature.astype("<f4").tobytes())
        chunks.append(inst.representatives.astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def _read_exact(f: BinaryIO, n: int, path, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValidationError(f"{path}: truncated {what}")
    return data


def load_index(path: str | Path) -> tuple[list[FinalInstance], dict]:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            manifest = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: bad index manifest: {e}") from e
        if manifest.get("magic") != OVI_MAGIC:
            raise ValidationError(f"{path}: bad magic {manifest.get('magic')!r}")
        dim = int(manifest["feature_dim"])
        instances = []
        for meta in manifest["instances"]:
            n_pts = int(meta["num_points"])
            n_rep = int(meta["num_representatives"])
            points = np.frombuffer(
                _read_exact(f, 4 * n_pts, path, "points"), dtype="<u4"
            ).astype(np.int64)
            mean = np.frombuffer(
                _read_exact(f, 8 * dim, path, "mean feature"), dtype="<f8"
            ).copy()
            largest = np.frombuffer(
                _read_exact(f, 4 * dim, path, "largest view feature"), dtype="<f4"
            ).copy()
            reps = np.frombuffer(
                _read_exact(f, 4 * n_rep * dim, path, "representatives"), dtype="<f4"
            ).reshape(n_rep, dim).copy()
            parent = int(meta.get("parent_id", -1))
            instances.append(FinalInstance(
                id=int(meta["id"]),
                point_indices=points,
                mean_feature=mean,
                largest_view_feature=largest,
                source_view_count=int(meta["source_view_count"]),
                view_features=None,
                representatives=reps,
                parent_id=parent if parent >= 0 else None,
            ))
        if f.read(1):
            raise ValidationError(f"{path}: trailing bytes after last instance")
    meta = {k: manifest[k] for k in ("feature_dim", "kmeans_k", "seed")}
    return instances, meta
