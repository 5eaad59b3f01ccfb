"""Rigid poses, pinhole projection, depth back-projection and point-cloud fusion.

Poses are stored camera-to-world. Depth is z-depth along the optical axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

CHEIRALITY_EPS = 1e-6

DEPTH_MAGIC = b"SRDI"
_DEPTH_HEADER = struct.Struct("<4sIIf")


class EmptyCloudError(ValueError):
    """Raised when fusion yields no valid point."""


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    nrm = np.linalg.norm(q)
    if not np.isfinite(nrm) or nrm == 0.0:
        raise ValueError("quaternion must be finite and non-zero")
    q = q / nrm
    # canonical hemisphere so equal rotations have equal bytes
    if q[3] < 0 or (q[3] == 0 and q[np.nonzero(q)[0][0]] < 0):
        q = -q
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (x, y, z, w)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.array([R[0, 0], R[1, 1], R[2, 2], tr])
    i = int(np.argmax(diag))
    if i == 3:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
        )
    elif i == 0:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array(
            [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
        )
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
        q = np.array(
            [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
        )
    else:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
        q = np.array(
            [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
        )
    return q


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for an axis-angle vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


@dataclass(frozen=True)
class Se3Pose:
    """Camera-to-world rigid transform.

    ``quat`` is (x, y, z, w) and is renormalized on construction.
    """

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _quat_normalize(self.quat)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Se3Pose":
        return cls()

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: Sequence[float] = (0.0, 0.0, 0.0)) -> "Se3Pose":
        return cls(matrix_to_quat(R), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float], t: Sequence[float] = (0.0, 0.0, 0.0)) -> "Se3Pose":
        rotvec = np.asarray(rotvec, dtype=np.float64)
        theta = np.linalg.norm(rotvec)
        if theta < 1e-12:
            q = np.array([*(0.5 * rotvec), 1.0])
        else:
            q = np.array([*(np.sin(theta / 2) * rotvec / theta), np.cos(theta / 2)])
        return cls(q, t)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Se3Pose") -> "Se3Pose":
        """Return ``self * other`` (apply ``other`` first)."""
        q = _quat_mul(self.quat, other.quat)
        t = self.rotation @ other.translation + self.translation
        return Se3Pose(q, t)

    __matmul__ = compose

    def inverse(self) -> "Se3Pose":
        qi = np.array([-self.quat[0], -self.quat[1], -self.quat[2], self.quat[3]])
        return Se3Pose(qi, -(quat_to_matrix(qi) @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def world_to_camera(self) -> Tuple[np.ndarray, np.ndarray]:
        """(R, t) such that x_cam = R @ x_world + t."""
        Rt = self.rotation.T
        return Rt, -(Rt @ self.translation)

    def rotation_angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        w = min(1.0, abs(self.quat[3]))
        s = np.linalg.norm(self.quat[:3])
        return float(2.0 * np.arctan2(s, w))

    def to_bytes(self) -> bytes:
        return self.translation.tobytes() + self.quat.tobytes()


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls) -> "PinholeCamera":
        return cls(120.0, 120.0, 80.0, 60.0, 160, 120)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_rays(self, pixels: np.ndarray) -> np.ndarray:
        """Camera-frame rays with unit z for each pixel."""
        px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        return np.column_stack(
            [(px[:, 0] - self.cx) / self.fx, (px[:, 1] - self.cy) / self.fy, np.ones(len(px))]
        )

    def in_bounds(self, pixels: np.ndarray) -> np.ndarray:
        px = np.atleast_2d(pixels)
        return (px[:, 0] >= 0) & (px[:, 0] < self.width) & (px[:, 1] >= 0) & (px[:, 1] < self.height)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    view_index: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.view_index is not None:
            object.__setattr__(self, "view_index", np.asarray(self.view_index, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)


def project_points(pose: Se3Pose, camera: PinholeCamera, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized projection.

    Returns (pixels, valid) where ``valid`` is False for points with
    camera-frame z at or below the cheirality epsilon; their pixels are NaN.
    """
    R, t = pose.world_to_camera()
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pc = pts @ R.T + t
    z = pc[:, 2]
    valid = z > CHEIRALITY_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * pc[:, 0] / z + camera.cx
        v = camera.fy * pc[:, 1] / z + camera.cy
    px = np.column_stack([u, v])
    px[~valid] = np.nan
    return px, valid


def project(pose: Se3Pose, camera: PinholeCamera, point: Sequence[float]) -> Optional[np.ndarray]:
    point = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(point)):
        raise ValueError("point must be finite")
    px, valid = project_points(pose, camera, point[None])
    return px[0] if valid[0] else None


def backproject_pixels(
    pose: Se3Pose, camera: PinholeCamera, pixels: np.ndarray, depths: np.ndarray
) -> np.ndarray:
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    if np.any(~(depths > 0)):
        raise ValueError("depth must be positive")
    pc = camera.pixel_rays(pixels) * depths[:, None]
    return pose.apply(pc)


def backproject(pose: Se3Pose, camera: PinholeCamera, pixel: Sequence[float], depth: float) -> np.ndarray:
    return backproject_pixels(pose, camera, np.asarray(pixel, dtype=np.float64)[None], [depth])[0]


def valid_depth_mask(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    return np.isfinite(depth) & (depth > 0)


def sample_depth_pixels(depth: np.ndarray, stride: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Valid pixels on a ``stride`` grid, row-major. Returns (pixels (u, v), depths)."""
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    depth = np.asarray(depth, dtype=np.float64)
    sub = depth[::stride, ::stride]
    rows, cols = np.nonzero(valid_depth_mask(sub))
    pixels = np.column_stack([cols * stride, rows * stride]).astype(np.float64)
    return pixels, sub[rows, cols]


def fuse_point_cloud(
    views: Iterable[Tuple[np.ndarray, Se3Pose]], camera: PinholeCamera, stride: int = 1
) -> PointCloud:
    views = list(views)
    if not views:
        raise ValueError("at least one view is required")
    chunks, owners = [], []
    for i, (depth, pose) in enumerate(views):
        depth = np.asarray(depth)
        if depth.shape != (camera.height, camera.width):
            raise ValueError(f"view {i}: depth shape {depth.shape} does not match camera")
        pixels, d = sample_depth_pixels(depth, stride)
        if len(d):
            chunks.append(backproject_pixels(pose, camera, pixels, d))
            owners.append(np.full(len(d), i, dtype=np.int64))
    if not chunks:
        raise EmptyCloudError("no valid depth pixel in any view")
    return PointCloud(np.concatenate(chunks), np.concatenate(owners))


def pose_error(estimate: Se3Pose, truth: Se3Pose) -> Tuple[float, float]:
    """(translation error in scene units, rotation error in degrees)."""
    dt = float(np.linalg.norm(estimate.translation - truth.translation))
    rel = truth.inverse().compose(estimate)
    return dt, float(np.degrees(rel.rotation_angle()))


def random_pose(rng: np.random.Generator, translation_scale: float = 1.0) -> Se3Pose:
    q = rng.normal(size=4)
    return Se3Pose(q, rng.uniform(-translation_scale, translation_scale, 3))


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> Se3Pose:
    """Camera-to-world pose at ``eye`` with +z looking at ``target`` (y down in image)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Se3Pose.from_matrix(np.column_stack([x, y, z]), eye)


# ---- file formats -------------------------------------------------------

def save_trajectory(path, poses: Sequence[Se3Pose]) -> None:
    lines = []
    for p in poses:
        vals = [*p.translation, *p.quat]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_trajectory(path) -> list:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 values, got {len(vals)}")
        v = [float(x) for x in vals]
        poses.append(Se3Pose(np.array(v[3:]), np.array(v[:3])))
    return poses


def save_depth(path, depth: np.ndarray, scale: float = 1e-6) -> None:
    """Binary raster: header (magic, width, height, float32 scale) then uint32 rows.

    Invalid pixels are stored as 0.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    scale32 = float(np.float32(scale))
    vals = np.where(valid_depth_mask(depth), np.rint(np.nan_to_num(depth) / scale32), 0)
    if vals.max(initial=0) > np.iinfo(np.uint32).max:
        raise ValueError("depth exceeds the representable range for this scale")
    with open(path, "wb") as fh:
        fh.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, scale32))
        fh.write(vals.astype("<u4").tobytes())


def load_depth(path) -> np.ndarray:
    """Load a binary raster or a plain-text matrix (``.txt``). Invalid pixels become 0."""
    path = Path(path)
    if path.suffix == ".txt":
        return np.atleast_2d(np.loadtxt(path, dtype=np.float64))
    data = path.read_bytes()
    if len(data) < _DEPTH_HEADER.size:
        raise ValueError(f"{path}: truncated depth header")
    magic, w, h, scale = _DEPTH_HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise ValueError(f"{path}: bad depth magic {magic!r}")
    body = np.frombuffer(data, dtype="<u4", offset=_DEPTH_HEADER.size)
    if body.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {body.size}")
    return body.reshape(h, w).astype(np.float64) * float(scale)


def save_point_cloud(path, cloud: PointCloud) -> None:
    np.savetxt(path, cloud.points, fmt="%.17g")


def load_point_cloud(path) -> PointCloud:
    return PointCloud(np.loadtxt(path, dtype=np.float64, ndmin=2))
