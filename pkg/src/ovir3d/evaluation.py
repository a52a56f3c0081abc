"""Retrieval-mAP evaluation over scenes, categories, and IoU thresholds.

For every scene and every category present in its ground truth, all final
instances are ranked by the category's query embedding and scored with
greedy rank-order matching.  Per-category AP averages over the scenes that
contain the category; mAP at a threshold averages over categories; the
overall mAP averages mAP over thresholds 0.50 to 0.95 in steps of 0.05.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .retrieval import FinalInstance, rank
from .scene import (
    GroundTruthAnnotation,
    QueryEmbedding,
    ValidationError,
    intersect_count,
)

OVERALL_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
DEFAULT_THRESHOLDS = (0.25,) + OVERALL_THRESHOLDS


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    strategy: str = "clustered"

    def __post_init__(self):
        for t in self.iou_thresholds:
            if not (0.0 < t <= 1.0):
                raise ValidationError(f"IoU threshold {t} outside (0, 1]")

    def to_dict(self) -> dict:
        return {
            "iou_thresholds": list(self.iou_thresholds),
            "strategy": self.strategy,
        }


@dataclass(frozen=True)
class SceneRecord:
    name: str
    instances: list[FinalInstance]
    gt: GroundTruthAnnotation
    queries: dict[str, QueryEmbedding]


def set_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = intersect_count(a, b)
    union = len(a) + len(b) - inter
    return inter / union if union else 0.0


def average_precision(
    pred_masks: list[np.ndarray],
    gt_masks: list[np.ndarray],
    iou_threshold: float,
    scores: list[float] | None = None,
) -> float:
    """All-point AP with greedy best-IoU matching in rank order.

    pred_masks must already be in descending-score order; each ground-truth
    mask is matched at most once, a prediction is a true positive iff its
    best-IoU unmatched ground truth reaches the threshold.
    """
    if scores is not None and any(
        scores[i] < scores[i + 1] for i in range(len(scores) - 1)
    ):
        raise ValidationError("prediction scores must be non-increasing")
    n_gt = len(gt_masks)
    if n_gt == 0:
        return 0.0
    matched = [False] * n_gt
    ap = 0.0
    tp = 0
    for k, pred in enumerate(pred_masks):
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gt_masks):
            if matched[j]:
                continue
            iou = set_iou(pred, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[best_j] = True
            tp += 1
            ap += (tp / (k + 1)) * (1.0 / n_gt)
    return ap


@dataclass(frozen=True)
class EvalReport:
    categories: list[str]
    thresholds: tuple[float, ...]
    per_scene: list[dict]  # {"scene", "category", "threshold", "ap"}
    per_category_ap: dict  # (category, threshold) -> float
    map_at: dict  # threshold -> float
    overall_map: float

    def to_json(self) -> str:
        doc = {
            "map_at": {f"{t:.2f}": self.map_at[t] for t in self.thresholds},
            "overall_map": self.overall_map,
            "per_category": {
                cat: {f"{t:.2f}": self.per_category_ap[(cat, t)] for t in self.thresholds}
                for cat in self.categories
            },
            "per_scene": self.per_scene,
        }
        return json.dumps(doc)

    def format_table(self) -> str:
        grid = [t for t in OVERALL_THRESHOLDS if t in self.thresholds]
        rows = []
        header = f"{'category':<24}"
        for t in (0.25, 0.5):
            if t in self.thresholds:
                header += f"  mAP_{int(t * 100):<4}"
        header += "  mAP"
        rows.append(header)
        for cat in self.categories:
            line = f"{cat:<24}"
            for t in (0.25, 0.5):
                if t in self.thresholds:
                    line += f"  {self.per_category_ap[(cat, t)]:<8.3f}"
            overall = (
                float(np.mean([self.per_category_ap[(cat, t)] for t in grid]))
                if grid else float("nan")
            )
            line += f"  {overall:.3f}"
            rows.append(line)
        line = f"{'mean':<24}"
        for t in (0.25, 0.5):
            if t in self.thresholds:
                line += f"  {self.map_at[t]:<8.3f}"
        line += f"  {self.overall_map:.3f}"
        rows.append(line)
        return "\n".join(rows)


def evaluate(scenes: list[SceneRecord], cfg: EvalConfig | None = None) -> EvalReport:
    cfg = cfg if cfg is not None else EvalConfig()
    categories: list[str] = []
    for scene in scenes:
        for cat in scene.gt.categories():
            if cat not in categories:
                categories.append(cat)
    categories.sort()
    per_scene = []
    scene_aps: dict[tuple[str, float], list[float]] = {
        (cat, t): [] for cat in categories for t in cfg.iou_thresholds
    }
    for scene in scenes:
        by_id = {inst.id: inst for inst in scene.instances}
        for cat in scene.gt.categories():
            if cat not in scene.queries:
                raise ValidationError(
                    f"scene {scene.name!r} has no query embedding for category {cat!r}"
                )
            result = rank(
                scene.queries[cat], scene.instances, len(scene.instances), cfg.strategy
            )
            preds = [by_id[i].point_indices for i in result.ids()]
            scores = [s for _, s in result.ranked]
            gts = scene.gt.masks_for(cat)
            for t in cfg.iou_thresholds:
                ap = average_precision(preds, gts, t, scores=scores)
                scene_aps[(cat, t)].append(ap)
                per_scene.append(
                    {"scene": scene.name, "category": cat, "threshold": f"{t:.2f}", "ap": ap}
                )
    per_category = {
        key: (float(np.mean(vals)) if vals else 0.0)
        for key, vals in scene_aps.items()
    }
    map_at = {
        t: (
            float(np.mean([per_category[(cat, t)] for cat in categories]))
            if categories else 0.0
        )
        for t in cfg.iou_thresholds
    }
    grid = [t for t in OVERALL_THRESHOLDS if t in cfg.iou_thresholds]
    overall = float(np.mean([map_at[t] for t in grid])) if grid else 0.0
    return EvalReport(
        categories=categories,
        thresholds=cfg.iou_thresholds,
        per_scene=per_scene,
        per_category_ap=per_category,
        map_at=map_at,
        overall_map=overall,
    )
