"""Detector-side export package for the ovir3d engine.

Turns RGB-D sequences plus an open-vocabulary 2D detector into the
engine's `.ovf` frame files, and query text into `.qe` embeddings.  A
deterministic stub detector and hash-based text encoder are built in so
the full path runs without model weights; real models plug in through
the same detect/encode interface.
"""

from .export import AdapterConfig, export_detections, export_query
from .formats import AdapterError, encode_mask, write_frame, write_query
from .sequence import (
    Intrinsics,
    RGBDSequence,
    SequenceFrame,
    load_sequence,
    synthetic_sequence,
    write_sequence,
)
from .stub import VOCABULARIES, Detection, encode_text, segment_depth, stub_detector

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AdapterError",
    "Detection",
    "Intrinsics",
    "RGBDSequence",
    "SequenceFrame",
    "VOCABULARIES",
    "encode_mask",
    "encode_text",
    "export_detections",
    "export_query",
    "load_sequence",
    "segment_depth",
    "stub_detector",
    "synthetic_sequence",
    "write_frame",
    "write_query",
    "__version__",
]
