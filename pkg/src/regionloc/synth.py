"""Procedural scenes, look-at view sampling and point-splat depth rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .geometry import PinholeCamera, PointCloud, Se3Pose, look_at, project_points


@dataclass(frozen=True)
class SyntheticScene:
    seed: int
    points: np.ndarray
    diameter: float
    primitives: List[dict] = field(default_factory=list)
    counts: List[int] = field(default_factory=list)

    @property
    def cloud(self) -> PointCloud:
        return PointCloud(self.points)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def manifest(self) -> dict:
        return {
            "seed": int(self.seed),
            "n_points": int(len(self.points)),
            "diameter": float(self.diameter),
            "primitives": self.primitives,
            "counts": [int(c) for c in self.counts],
        }


@dataclass(frozen=True)
class ViewSet:
    poses: List[Se3Pose]
    role: str
    camera: PinholeCamera

    def __len__(self):
        return len(self.poses)


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _sample_plane(rng, prim, count):
    c, ax, half = (np.asarray(prim[k]) for k in ("center", "axes", "half_extents"))
    uv = rng.uniform(-1, 1, size=(count, 2)) * half
    return c + uv @ ax


def _sample_sphere(rng, prim, count):
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(prim["center"]) + prim["radius"] * d


def _sample_box(rng, prim, count):
    c, R, half = (np.asarray(prim[k]) for k in ("center", "rotation", "half_extents"))
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]] * 2)
    face = rng.choice(6, size=count, p=areas / areas.sum())
    local = rng.uniform(-1, 1, size=(count, 3)) * half
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    local[np.arange(count), axis] = sign * half[axis]
    return c + local @ R.T


def _area(prim) -> float:
    if prim["type"] == "plane":
        h = prim["half_extents"]
        return 4 * h[0] * h[1]
    if prim["type"] == "sphere":
        return 4 * np.pi * prim["radius"] ** 2
    h = prim["half_extents"]
    return 8 * (h[0] * h[1] + h[0] * h[2] + h[1] * h[2])


def generate_scene(seed: int, n_points: int = 20000, diameter: float = 4.0) -> SyntheticScene:
    """Sample ``n_points`` surface points from 3-6 random primitives.

    The result is centred on its centroid and scaled to fit inside a ball of
    radius ``diameter / 2``.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    r = diameter / 2
    prims = []
    for i in range(int(rng.integers(3, 7))):
        kind = ("plane", "sphere", "box")[i % 3] if i < 3 else str(rng.choice(["plane", "sphere", "box"]))
        center = rng.uniform(-0.5, 0.5, 3) * r
        if kind == "plane":
            R = _random_rotation(rng)
            prims.append(
                {
                    "type": "plane",
                    "center": center.tolist(),
                    "axes": R[:, :2].T.tolist(),
                    "half_extents": (rng.uniform(0.2, 0.45, 2) * r).tolist(),
                }
            )
        elif kind == "sphere":
            prims.append({"type": "sphere", "center": center.tolist(), "radius": float(rng.uniform(0.1, 0.3) * r)})
        else:
            prims.append(
                {
                    "type": "box",
                    "center": center.tolist(),
                    "rotation": _random_rotation(rng).tolist(),
                    "half_extents": (rng.uniform(0.08, 0.25, 3) * r).tolist(),
                }
            )
    areas = np.array([_area(p) for p in prims])
    counts = np.floor(areas / areas.sum() * n_points).astype(int)
    counts[: n_points - counts.sum()] += 1
    samplers = {"plane": _sample_plane, "sphere": _sample_sphere, "box": _sample_box}
    chunks = [samplers[p["type"]](rng, p, int(c)) for p, c in zip(prims, counts) if c > 0]
    pts = np.concatenate(chunks)
    shift = pts.mean(axis=0)
    pts = pts - shift
    rmax = np.linalg.norm(pts, axis=1).max()
    scale = 1.0 if rmax <= r else r / rmax
    pts = pts * scale
    for p in prims:
        p["center"] = ((np.asarray(p["center"]) - shift) * scale).tolist()
        p["scale"] = scale
    return SyntheticScene(int(seed), pts, float(diameter), prims, counts.tolist())


def visible_mask(scene: SyntheticScene, pose: Se3Pose, camera: PinholeCamera) -> np.ndarray:
    px, valid = project_points(pose, camera, scene.points)
    inb = np.zeros(len(px), dtype=bool)
    inb[valid] = camera.in_bounds(px[valid])
    return inb


def sample_views(
    scene: SyntheticScene,
    count: int,
    seed: int,
    camera: Optional[PinholeCamera] = None,
    role: str = "train",
    min_visible: float = 0.1,
) -> ViewSet:
    """Look-at poses on a shell around the scene centroid."""
    if count < 1:
        raise ValueError("count must be >= 1")
    camera = camera or PinholeCamera.default()
    rng = np.random.default_rng(seed)
    centre = scene.centroid
    d = scene.diameter
    poses = []
    attempts = 0
    while len(poses) < count:
        if attempts >= 100 * count:
            raise RuntimeError(f"could only place {len(poses)} of {count} views with {min_visible:.0%} visibility")
        attempts += 1
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        eye = centre + direction * rng.uniform(0.8, 1.1) * d
        target = centre + rng.uniform(-0.04, 0.04, 3) * d
        up = rng.normal(size=3)
        pose = look_at(eye, target, up)
        if visible_mask(scene, pose, camera).mean() >= min_visible:
            poses.append(pose)
    return ViewSet(poses, role, camera)


def render_depth(
    scene, pose: Se3Pose, camera: PinholeCamera, return_index: bool = False
):
    """Splat each point to its nearest pixel, keeping the smallest z-depth.

    Untouched pixels hold 0 (invalid). With ``return_index`` also returns an
    (H, W) array of winning point indices (-1 where empty).
    """
    pts = scene.points if hasattr(scene, "points") else np.asarray(scene, dtype=np.float64)
    R, t = pose.world_to_camera()
    z = (pts @ R.T + t)[:, 2]
    px, valid = project_points(pose, camera, pts)
    depth = np.zeros((camera.height, camera.width))
    index = np.full((camera.height, camera.width), -1, dtype=np.int64)
    idx = np.flatnonzero(valid)
    cols = np.floor(px[idx, 0] + 0.5).astype(np.int64)
    rows = np.floor(px[idx, 1] + 0.5).astype(np.int64)
    ok = (cols >= 0) & (cols < camera.width) & (rows >= 0) & (rows < camera.height)
    idx, cols, rows = idx[ok], cols[ok], rows[ok]
    flat = rows * camera.width + cols
    order = np.lexsort((idx, z[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win = idx[order][first]
    depth.reshape(-1)[flat_sorted[first]] = z[win]
    index.reshape(-1)[flat_sorted[first]] = win
    if return_index:
        return depth, index
    return depth


def coverage(scene: SyntheticScene, fused: np.ndarray, tolerance: float) -> float:
    """Fraction of scene points with a fused point within ``tolerance``."""
    from scipy.spatial import cKDTree

    dist, _ = cKDTree(np.asarray(fused)).query(scene.points, k=1)
    return float(np.mean(dist <= tolerance))


def save_manifest(path, scene: SyntheticScene, extra: Optional[dict] = None) -> None:
    doc = scene.manifest()
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def scene_from_manifest(path) -> Tuple[SyntheticScene, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    return generate_scene(doc["seed"], doc["n_points"], doc["diameter"]), doc
