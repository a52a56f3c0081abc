"""Open-vocabulary 3D instance retrieval over fused 2D region proposals.

Streams per-frame region proposals (masks + embedding features) into a 3D
instance memory bank over a reconstructed point cloud, periodically filters
and merges it, post-processes the survivors into final instances, and ranks
them against query embeddings.
"""

__version__ = "0.1.0"

from .fusion import FusionConfig, MemoryBank, finalize, fuse_frame
from .postprocess import PostprocessConfig, split_and_filter
from .retrieval import FinalInstance, build_index, rank
from .scene import (
    CameraIntrinsics,
    CameraPose,
    FrameObservation,
    GroundTruthAnnotation,
    InvariantError,
    QueryEmbedding,
    Region2D,
    ScenePointCloud,
    ValidationError,
)

__all__ = [
    "__version__",
    "CameraIntrinsics",
    "CameraPose",
    "FinalInstance",
    "FrameObservation",
    "FusionConfig",
    "GroundTruthAnnotation",
    "InvariantError",
    "MemoryBank",
    "PostprocessConfig",
    "QueryEmbedding",
    "Region2D",
    "ScenePointCloud",
    "ValidationError",
    "build_index",
    "finalize",
    "fuse_frame",
    "rank",
    "split_and_filter",
]
