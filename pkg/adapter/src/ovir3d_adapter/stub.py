"""Deterministic stand-ins for the 2D detector and the text encoder.

The stub detector segments a depth image: pixels clearly closer than
the border depth level are foreground, split into 4-connected
components, each emitted as one region.  The stub encoder hashes query
text into a seeded random unit vector, so text maps to embeddings
reproducibly with no model weights.  Component labels are drawn from
the configured vocabulary in scan order and encoded with the same
encoder, which makes end-to-end retrieval on stub output meaningful:
querying a label's text scores highest on objects the detector tagged
with that label.

Real detector/encoder pairs replace these through the two-function
interface `detect(frame) -> [Detection]`, `encode(text) -> vector`.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass

import numpy as np

from .formats import AdapterError

# Stub-scale stand-ins for the real per-dataset prompt lists; content is
# what varies across vocabularies, file structure never does.
_COCO = (
    "person", "bicycle", "car", "chair", "couch", "potted plant", "bed",
    "dining table", "toilet", "tv", "laptop", "microwave", "oven", "sink",
    "refrigerator", "book", "clock", "vase",
)
_LVIS = (
    "lamp", "basket", "blender", "bookcase", "cabinet", "candle", "carton",
    "chair", "clock", "couch", "fan", "kettle", "ladder", "mirror", "mug",
    "pillow", "plate", "speaker", "stool", "telephone",
)
_SCANNET200 = (
    "wall", "floor", "chair", "table", "door", "couch", "cabinet", "shelf",
    "desk", "office chair", "bed", "pillow", "sink", "picture", "window",
    "toilet", "bookshelf", "monitor", "curtain", "book", "armchair",
    "coffee table", "box", "refrigerator", "lamp", "towel",
)
_IMAGENET21K = (
    "abacus", "accordion", "airliner", "ambulance", "armchair", "backpack",
    "banjo", "barn", "bathtub", "beaker", "bed", "bench", "bicycle",
    "birdhouse", "bookshelf", "chair", "couch", "desk", "lamp", "monitor",
    "table", "teapot", "tripod", "unicycle", "windmill",
)

VOCABULARIES: dict[str, tuple[str, ...]] = {
    "coco": _COCO,
    "lvis": _LVIS,
    "scannet200": _SCANNET200,
    "imagenet21k": _IMAGENET21K,
    "imagenet21k-minus-scannet200": tuple(
        w for w in _IMAGENET21K if w not in set(_SCANNET200)
    ),
}


@dataclass(frozen=True)
class Detection:
    mask: np.ndarray  # (H, W) bool
    label: str
    feature: np.ndarray  # (D,) float32, unit length
    confidence: float


def encode_text(text: str, dim: int = 32) -> np.ndarray:
    """Hash text to a deterministic random unit vector (float32)."""
    if not isinstance(text, str) or not text.strip():
        raise AdapterError("cannot encode an empty query")
    if dim < 1:
        raise AdapterError("feature dim must be >= 1")
    digest = hashlib.sha256(text.strip().encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "big"))
    vec = rng.standard_normal(dim)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


def segment_depth(depth: np.ndarray, margin: float = 0.25,
                  min_pixels: int = 25) -> list[np.ndarray]:
    """Foreground component masks, scan-ordered by first pixel.

    Foreground = valid depth at least `margin` closer than the median
    border depth (the background level for a camera looking at a
    surface); components are 4-connected.
    """
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise AdapterError("depth must be a 2-D image")
    valid = np.isfinite(depth) & (depth > 0)
    border = np.concatenate([
        depth[0, :][valid[0, :]], depth[-1, :][valid[-1, :]],
        depth[1:-1, 0][valid[1:-1, 0]], depth[1:-1, -1][valid[1:-1, -1]],
    ])
    if border.size == 0:
        return []
    foreground = valid & (depth < float(np.median(border)) - margin)
    h, w = depth.shape
    seen = np.zeros((h, w), dtype=bool)
    masks = []
    for r0 in range(h):
        for c0 in range(w):
            if not foreground[r0, c0] or seen[r0, c0]:
                continue
            queue = deque([(r0, c0)])
            seen[r0, c0] = True
            mask = np.zeros((h, w), dtype=bool)
            while queue:
                r, c = queue.popleft()
                mask[r, c] = True
                for rn, cn in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rn < h and 0 <= cn < w and foreground[rn, cn] \
                            and not seen[rn, cn]:
                        seen[rn, cn] = True
                        queue.append((rn, cn))
            if int(mask.sum()) >= min_pixels:
                masks.append(mask)
    return masks


def stub_detector(cfg):
    """detect(frame) closure for an AdapterConfig with the stub detector."""
    vocab = VOCABULARIES[cfg.vocabulary]

    def detect(frame) -> list[Detection]:
        masks = segment_depth(frame.depth, min_pixels=cfg.min_region_pixels)
        total = sum(int(m.sum()) for m in masks)
        detections = []
        for i, mask in enumerate(masks):
            label = vocab[i % len(vocab)]
            confidence = int(mask.sum()) / total
            if confidence < cfg.score_floor:
                continue
            detections.append(Detection(
                mask=mask, label=label,
                feature=encode_text(label, cfg.feature_dim),
                confidence=confidence,
            ))
        return detections

    return detect
