"""Export pipeline: sequence directory to `.ovf` frames, text to `.qe`."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .formats import (
    AdapterError,
    atomic_write_bytes,
    encode_mask,
    write_frame,
    write_query,
)
from .sequence import load_sequence
from .stub import VOCABULARIES, encode_text, stub_detector


@dataclass(frozen=True)
class AdapterConfig:
    detector: str = "stub"
    weights_path: str | None = None
    vocabulary: str = "lvis"
    score_floor: float = 0.0
    feature_layer: str = "pre_classifier"
    device: str = "cpu"
    feature_dim: int = 32
    min_region_pixels: int = 25

    def __post_init__(self):
        if self.vocabulary not in VOCABULARIES:
            raise AdapterError(
                f"unknown vocabulary {self.vocabulary!r}, "
                f"choose from {sorted(VOCABULARIES)}"
            )
        if not VOCABULARIES[self.vocabulary]:
            raise AdapterError(f"vocabulary {self.vocabulary!r} is empty")
        if not (0.0 <= self.score_floor <= 1.0):
            raise AdapterError("score_floor must be in [0, 1]")
        if self.feature_dim < 1 or self.min_region_pixels < 1:
            raise AdapterError("feature_dim and min_region_pixels must be >= 1")


def _resolve_detector(cfg: AdapterConfig, detect):
    if detect is not None:
        return detect
    if cfg.detector != "stub":
        raise AdapterError(
            f"cannot load detector {cfg.detector!r}: only the stub detector is "
            "built in; pass detect= for a real model"
        )
    return stub_detector(cfg)


def export_detections(input_dir, out_dir, cfg: AdapterConfig | None = None,
                      detect=None) -> list[Path]:
    """Run the detector over a sequence and write one `.ovf` per frame.

    `detect(frame) -> [Detection]` defaults to the built-in stub; class
    labels are dropped at this boundary, only mask + feature +
    confidence reach the files.
    """
    cfg = cfg if cfg is not None else AdapterConfig()
    detect = _resolve_detector(cfg, detect)
    sequence = load_sequence(input_dir)
    frames_dir = Path(out_dir) / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    num_regions = 0
    for frame in sequence.frames:
        detections = detect(frame)
        regions = []
        for det in detections:
            feat = np.asarray(det.feature, dtype=np.float32)
            if feat.shape != (cfg.feature_dim,):
                raise AdapterError(
                    f"frame {frame.frame_id}: detector feature shape {feat.shape} "
                    f"does not match configured dim {cfg.feature_dim}"
                )
            regions.append((encode_mask(det.mask), feat, det.confidence))
        path = frames_dir / f"{frame.frame_id:06d}.ovf"
        write_frame(path, frame.frame_id, sequence.intrinsics, frame.pose,
                    frame.depth, regions)
        paths.append(path)
        num_regions += len(regions)
    manifest = {
        "tool": "ovir-export",
        "command": "detections",
        "input": str(input_dir),
        "config": asdict(cfg),
        "frames": len(paths),
        "regions": num_regions,
    }
    atomic_write_bytes(Path(out_dir) / "export.manifest.json",
                       json.dumps(manifest, indent=2).encode())
    return paths


def export_query(text: str, out_path, cfg: AdapterConfig | None = None,
                 encode=None) -> Path:
    """Encode query text and write it as a `.qe` embedding file."""
    cfg = cfg if cfg is not None else AdapterConfig()
    if encode is None:
        encode = lambda t: encode_text(t, cfg.feature_dim)
    write_query(out_path, np.asarray(encode(text), dtype=np.float32))
    return Path(out_path)
