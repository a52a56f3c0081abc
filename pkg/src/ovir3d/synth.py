"""Synthetic scene and observation generator, the ground-truth oracle.

Scenes are surface-sampled point clouds of simple shapes on a floor.  Depth
and per-pixel object identity come from a point z-buffer with a small splat
radius so masks are solid at moderate sampling density.  All randomness
flows from explicit seeds; identical seeds give identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from pathlib import Path

from .formats import save_cloud, save_frame, save_ground_truth, save_query
from .scene import (
    CameraIntrinsics,
    CameraPose,
    FrameObservation,
    GroundTruthAnnotation,
    GroundTruthInstance,
    QueryEmbedding,
    Region2D,
    ScenePointCloud,
    ValidationError,
    encode_mask,
    unit_vector,
)


@dataclass(frozen=True)
class ObjectSpec:
    shape: str  # box | sphere | cylinder
    center: tuple[float, float, float]
    dimensions: tuple[float, ...]  # box: (dx, dy, dz); sphere: (r,); cylinder: (r, h)
    feature: np.ndarray
    category: str
    # Objects resting on the floor set this so their never-visible bottom
    # face is not sampled (it could never be recovered by fusion).
    open_bottom: bool = False

    def bounding_radius(self) -> float:
        if self.shape == "box":
            dx, dy, dz = self.dimensions
            return 0.5 * math.sqrt(dx * dx + dy * dy + dz * dz)
        if self.shape == "sphere":
            return self.dimensions[0]
        if self.shape == "cylinder":
            r, h = self.dimensions
            return math.sqrt(r * r + 0.25 * h * h)
        raise ValidationError(f"unknown shape {self.shape!r}")


@dataclass(frozen=True)
class RoomSpec:
    half_extent: float = 3.0
    wall_height: float = 2.5
    floor_density_scale: float = 0.25
    wall_density_scale: float = 0.0  # 0 disables walls


@dataclass(frozen=True)
class SynthSceneSpec:
    objects: list[ObjectSpec]
    room: RoomSpec = field(default_factory=RoomSpec)
    density: float = 1500.0  # points per m^2 on object surfaces
    seed: int = 0
    overlap_tolerance: float = 0.0

    def __post_init__(self):
        if self.density <= 0:
            raise ValidationError("density must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    mask_dropout_prob: float = 0.0
    mask_boundary_erosion_px: int = 0  # negative values dilate (mask bleed)
    feature_noise_angle: float = 0.0  # radians
    false_positive_rate: float = 0.0  # expected false regions per frame
    depth_noise_sigma: float = 0.0  # meters

    def __post_init__(self):
        if not (0.0 <= self.mask_dropout_prob <= 1.0):
            raise ValidationError("mask_dropout_prob must be in [0, 1]")
        if self.feature_noise_angle < 0 or self.false_positive_rate < 0:
            raise ValidationError("noise magnitudes must be >= 0")
        if self.depth_noise_sigma < 0:
            raise ValidationError("depth_noise_sigma must be >= 0")


@dataclass(frozen=True)
class SynthScene:
    """A generated scene: cloud + GT + per-point object ownership."""

    cloud: ScenePointCloud
    gt: GroundTruthAnnotation
    owners: np.ndarray  # (N,) int32, object index or -1 for room geometry
    features: np.ndarray  # (num_objects, D) float32 unit rows
    categories: list[str]
    spec: SynthSceneSpec


def _face_count(area: float, density: float) -> int:
    return max(1, int(round(area * density)))


def _sample_box(rng, center, dims, density, open_bottom):
    cx, cy, cz = center
    dx, dy, dz = dims
    chunks = []
    # (axis, sign, area): top, then sides, then optional bottom
    faces = [(2, +1), (0, +1), (0, -1), (1, +1), (1, -1)]
    if not open_bottom:
        faces.append((2, -1))
    spans = {0: (dy, dz), 1: (dx, dz), 2: (dx, dy)}
    half = np.array([dx, dy, dz]) / 2.0
    for axis, sign in faces:
        a, b = spans[axis]
        n = _face_count(a * b, density)
        uv = rng.random((n, 2))
        pts = np.empty((n, 3))
        other = [i for i in range(3) if i != axis]
        pts[:, other[0]] = (uv[:, 0] - 0.5) * (2 * half[other[0]])
        pts[:, other[1]] = (uv[:, 1] - 0.5) * (2 * half[other[1]])
        pts[:, axis] = sign * half[axis]
        chunks.append(pts)
    pts = np.concatenate(chunks) + np.array([cx, cy, cz])
    return pts


def _sample_sphere(rng, center, dims, density):
    r = dims[0]
    n = _face_count(4 * math.pi * r * r, density)
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r + np.asarray(center)


def _sample_cylinder(rng, center, dims, density, open_bottom):
    cx, cy, cz = center
    r, h = dims
    chunks = []
    n_lat = _face_count(2 * math.pi * r * h, density)
    theta = rng.uniform(0, 2 * math.pi, n_lat)
    z = rng.uniform(-h / 2, h / 2, n_lat)
    chunks.append(np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1))
    caps = [+1] if open_bottom else [+1, -1]
    for sign in caps:
        n_cap = _face_count(math.pi * r * r, density)
        theta = rng.uniform(0, 2 * math.pi, n_cap)
        rad = r * np.sqrt(rng.random(n_cap))
        zc = np.full(n_cap, sign * h / 2)
        chunks.append(np.stack([rad * np.cos(theta), rad * np.sin(theta), zc], axis=1))
    return np.concatenate(chunks) + np.array([cx, cy, cz])


def generate_scene(spec: SynthSceneSpec) -> SynthScene:
    """Surface-sample the scene; GT instances are exact per-object index sets."""
    for i, a in enumerate(spec.objects):
        for b in spec.objects[i + 1:]:
            dist = math.dist(a.center, b.center)
            limit = a.bounding_radius() + b.bounding_radius() - spec.overlap_tolerance
            if dist < limit:
                raise ValidationError(
                    f"objects {a.category!r} and {b.category!r} overlap"
                )
    rng = np.random.default_rng(spec.seed)
    chunks: list[np.ndarray] = []
    owners: list[np.ndarray] = []
    gt_instances = []
    offset = 0
    for i, obj in enumerate(spec.objects):
        if obj.shape == "box":
            pts = _sample_box(rng, obj.center, obj.dimensions, spec.density, obj.open_bottom)
        elif obj.shape == "sphere":
            pts = _sample_sphere(rng, obj.center, obj.dimensions, spec.density)
        elif obj.shape == "cylinder":
            pts = _sample_cylinder(rng, obj.center, obj.dimensions, spec.density, obj.open_bottom)
        else:
            raise ValidationError(f"unknown shape {obj.shape!r}")
        chunks.append(pts)
        owners.append(np.full(len(pts), i, dtype=np.int32))
        gt_instances.append(
            GroundTruthInstance(i, obj.category, np.arange(offset, offset + len(pts)))
        )
        offset += len(pts)
    room = spec.room
    if room.floor_density_scale > 0:
        e = room.half_extent
        n = _face_count((2 * e) ** 2, spec.density * room.floor_density_scale)
        xy = rng.uniform(-e, e, (n, 2))
        chunks.append(np.concatenate([xy, np.zeros((n, 1))], axis=1))
        owners.append(np.full(n, -1, dtype=np.int32))
    if room.wall_density_scale > 0:
        e, h = room.half_extent, room.wall_height
        n = _face_count(2 * e * h, spec.density * room.wall_density_scale)
        for axis, sign in ((0, +1), (0, -1), (1, +1), (1, -1)):
            along = rng.uniform(-e, e, n)
            z = rng.uniform(0, h, n)
            pts = np.empty((n, 3))
            pts[:, axis] = sign * e
            pts[:, 1 - axis] = along
            pts[:, 2] = z
            chunks.append(pts)
            owners.append(np.full(n, -1, dtype=np.int32))
    cloud = ScenePointCloud(np.concatenate(chunks).astype(np.float32))
    features = np.stack([
        np.asarray(o.feature, dtype=np.float32) for o in spec.objects
    ]) if spec.objects else np.zeros((0, 0), dtype=np.float32)
    scene = SynthScene(
        cloud=cloud,
        gt=GroundTruthAnnotation(gt_instances),
        owners=np.concatenate(owners),
        features=features,
        categories=[o.category for o in spec.objects],
        spec=spec,
    )
    scene.gt.validate_against(len(cloud))
    return scene


# ---------------------------------------------------------------------------
# Cameras


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Camera-to-world pose with z forward, x right, y down (OpenCV axes)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-9:
        raise ValidationError("look_at eye and target coincide")
    z = fwd / norm
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    xn = np.linalg.norm(x)
    if xn < 1e-9:  # looking straight along up: pick an arbitrary right vector
        x = np.cross(z, (0.0, 1.0, 0.0))
        xn = np.linalg.norm(x)
    x /= xn
    y = np.cross(z, x)
    mat = np.eye(4)
    mat[:3, 0], mat[:3, 1], mat[:3, 2], mat[:3, 3] = x, y, z, eye
    return CameraPose(mat)


def orbit_poses(
    num_frames: int,
    radius: float = 2.6,
    height: float = 1.6,
    target=(0.0, 0.0, 0.25),
    start_angle: float = 0.0,
) -> list[CameraPose]:
    poses = []
    for k in range(num_frames):
        a = start_angle + 2 * math.pi * k / num_frames
        eye = (radius * math.cos(a), radius * math.sin(a), height)
        poses.append(look_at(eye, target))
    return poses


def standard_intrinsics(width: int = 160, height: int = 120, focal: float = 130.0) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
    )


# ---------------------------------------------------------------------------
# Rendering


def _erode(mask: np.ndarray, steps: int) -> np.ndarray:
    for _ in range(steps):
        m = mask.copy()
        m[1:, :] &= mask[:-1, :]
        m[:-1, :] &= mask[1:, :]
        m[:, 1:] &= mask[:, :-1]
        m[:, :-1] &= mask[:, 1:]
        m[0, :] = m[-1, :] = False
        m[:, 0] = m[:, -1] = False
        mask = m
    return mask


def _dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    for _ in range(steps):
        m = mask.copy()
        m[1:, :] |= mask[:-1, :]
        m[:-1, :] |= mask[1:, :]
        m[:, 1:] |= mask[:, :-1]
        m[:, :-1] |= mask[:, 1:]
        mask = m
    return mask


def _perturb_feature(rng, feature: np.ndarray, max_angle: float) -> np.ndarray:
    """Rotate the feature by a random angle <= max_angle toward a random direction."""
    angle = rng.uniform(0.0, max_angle)
    f = feature.astype(np.float64)
    g = rng.standard_normal(f.shape[0])
    g -= (g @ f) * f
    gn = np.linalg.norm(g)
    if gn < 1e-12:
        return feature
    g /= gn
    return (math.cos(angle) * f + math.sin(angle) * g).astype(np.float32)


def render_observation(
    scene: SynthScene,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    noise: NoiseSpec,
    frame_id: int,
    seed: int = 0,
    min_region_pixels: int = 25,
    splat_radius: int = 1,
) -> FrameObservation:
    """Render depth + per-object region proposals for one camera.

    The z-buffer winner of each pixel (nearest splat; ties to the lower
    point index, so object points beat co-planar room points) defines both
    the depth map and the per-pixel object identity used to cut GT masks.
    """
    rng = np.random.default_rng([seed, frame_id])
    w, h = intrinsics.width, intrinsics.height
    pts = scene.cloud.points.astype(np.float64)
    cam = (pts - pose.translation) @ pose.rotation
    z = cam[:, 2]
    cand = np.flatnonzero(z > 0)
    zc = z[cand]
    col = np.rint(intrinsics.fx * cam[cand, 0] / zc + intrinsics.cx).astype(np.int64)
    row = np.rint(intrinsics.fy * cam[cand, 1] / zc + intrinsics.cy).astype(np.int64)
    r0 = splat_radius
    keep = (col >= -r0) & (col < w + r0) & (row >= -r0) & (row < h + r0)
    cand, zc, col, row = cand[keep], zc[keep], col[keep], row[keep]

    offs = range(-r0, r0 + 1)
    lin_parts, z_parts, idx_parts = [], [], []
    for dr in offs:
        for dc in offs:
            rr, cc = row + dr, col + dc
            ok = (cc >= 0) & (cc < w) & (rr >= 0) & (rr < h)
            lin_parts.append(rr[ok] * w + cc[ok])
            z_parts.append(zc[ok])
            idx_parts.append(cand[ok])
    lin = np.concatenate(lin_parts)
    zs = np.concatenate(z_parts)
    idx = np.concatenate(idx_parts)
    order = np.lexsort((idx, zs, lin))
    lin_s, zs_s, idx_s = lin[order], zs[order], idx[order]
    first = np.ones(len(lin_s), dtype=bool)
    first[1:] = lin_s[1:] != lin_s[:-1]
    win_lin, win_z, win_idx = lin_s[first], zs_s[first], idx_s[first]

    depth_flat = np.zeros(w * h, dtype=np.float32)
    depth_flat[win_lin] = win_z.astype(np.float32)
    owner_flat = np.full(w * h, -1, dtype=np.int32)
    owner_flat[win_lin] = scene.owners[win_idx]
    if noise.depth_noise_sigma > 0:
        jitter = rng.normal(0.0, noise.depth_noise_sigma, win_lin.shape[0])
        depth_flat[win_lin] = np.maximum(
            depth_flat[win_lin] + jitter.astype(np.float32), 1e-3
        )

    regions = []
    k = noise.mask_boundary_erosion_px
    for obj_i in range(len(scene.categories)):
        pix = owner_flat == obj_i
        if int(pix.sum()) < min_region_pixels:
            continue
        if noise.mask_dropout_prob > 0 and rng.random() < noise.mask_dropout_prob:
            continue
        mask = pix.reshape(h, w)
        if k > 0:
            mask = _erode(mask, k)
        elif k < 0:
            mask = _dilate(mask, -k)
        if not mask.any():
            continue
        feat = scene.features[obj_i]
        if noise.feature_noise_angle > 0:
            feat = _perturb_feature(rng, feat, noise.feature_noise_angle)
        regions.append(Region2D(runs=encode_mask(mask), feature=feat, confidence=1.0))

    if noise.false_positive_rate > 0:
        count = int(noise.false_positive_rate)
        frac = noise.false_positive_rate - count
        if frac > 0 and rng.random() < frac:
            count += 1
        dim = scene.features.shape[1]
        for _ in range(count):
            cx = int(rng.integers(0, w))
            cy = int(rng.integers(0, h))
            rad = int(rng.integers(4, max(6, min(w, h) // 8)))
            yy, xx = np.ogrid[:h, :w]
            disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= rad * rad
            feat = rng.standard_normal(dim)
            regions.append(
                Region2D(runs=encode_mask(disk), feature=feat, confidence=0.5)
            )

    return FrameObservation(
        frame_id=frame_id,
        intrinsics=intrinsics,
        pose=pose,
        depth=depth_flat.reshape(h, w),
        regions=regions,
    )


def render_orbit(
    scene: SynthScene,
    num_frames: int,
    intrinsics: CameraIntrinsics,
    noise: NoiseSpec,
    seed: int = 0,
    radius: float = 2.6,
    height: float = 1.6,
    target=(0.0, 0.0, 0.25),
) -> list[FrameObservation]:
    poses = orbit_poses(num_frames, radius=radius, height=height, target=target)
    return [
        render_observation(scene, pose, intrinsics, noise, frame_id=i, seed=seed)
        for i, pose in enumerate(poses)
    ]


# ---------------------------------------------------------------------------
# Canned scenes


def standard_scene(
    num_objects: int = 5,
    seed: int = 0,
    feature_dim: int = 32,
    density: float = 2250.0,
    circle_radius: float = 1.0,
    room: RoomSpec | None = None,
    clearance: float = 0.08,
) -> SynthSceneSpec:
    """Objects on a circle around the origin, floating just above the floor.

    Features are rows of a random orthonormal basis, so categories are
    exactly mutually orthogonal in embedding space.  The default clearance
    keeps every object point farther from the floor than the depth-visibility
    tolerance, so object silhouettes never absorb contact-ring floor points;
    set clearance to 0 for resting objects with genuine contact ambiguity.
    """
    if feature_dim < num_objects:
        raise ValidationError("feature_dim must be >= num_objects")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((feature_dim, num_objects)))
    objects = []
    for i in range(num_objects):
        angle = 2 * math.pi * i / num_objects
        x, y = circle_radius * math.cos(angle), circle_radius * math.sin(angle)
        feat = basis[:, i].astype(np.float32)
        if i % 2 == 0:
            dims = tuple(rng.uniform(0.3, 0.42, 3))
            objects.append(ObjectSpec(
                shape="box", center=(x, y, dims[2] / 2 + clearance),
                dimensions=dims,
                feature=feat, category=f"box{i}", open_bottom=True,
            ))
        else:
            r, hgt = rng.uniform(0.13, 0.18), rng.uniform(0.3, 0.4)
            objects.append(ObjectSpec(
                shape="cylinder", center=(x, y, hgt / 2 + clearance),
                dimensions=(r, hgt),
                feature=feat, category=f"cyl{i}", open_bottom=True,
            ))
    if room is None:
        room = RoomSpec(half_extent=3.0, wall_height=2.5,
                        floor_density_scale=0.15, wall_density_scale=0.0)
    return SynthSceneSpec(objects=objects, room=room, density=density, seed=seed)


def category_queries(scene: SynthScene) -> dict[str, QueryEmbedding]:
    """One query embedding per category: the object's own feature, or the
    normalized mean when several objects share a category."""
    grouped: dict[str, list[np.ndarray]] = {}
    for spec in scene.spec.objects:
        grouped.setdefault(spec.category, []).append(
            np.asarray(spec.feature, dtype=np.float64)
        )
    queries = {}
    for cat, feats in grouped.items():
        vec = feats[0] if len(feats) == 1 else np.mean(feats, axis=0)
        queries[cat] = QueryEmbedding(unit_vector(vec).astype(np.float32), label=cat)
    return queries


def write_scene_dir(
    scene: SynthScene,
    observations: list[FrameObservation],
    out_dir: str | Path,
) -> Path:
    """Write cloud.ply, gt.json, frames/NNNNNN.ovf, queries/<category>.qe."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    save_cloud(scene.cloud, out / "cloud.ply")
    save_ground_truth(scene.gt, out / "gt.json")
    for obs in observations:
        save_frame(obs, out / "frames" / f"{obs.frame_id:06d}.ovf")
    for cat, query in category_queries(scene).items():
        save_query(query, out / "queries" / f"{cat}.qe")
    return out
