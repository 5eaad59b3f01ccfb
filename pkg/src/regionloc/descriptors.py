"""Per-pixel descriptor providers.

``OracleDescriptor`` encodes a 3D point with a seeded random projection
followed by a sinusoid, so the base descriptor depends only on the point and
never on the viewing camera. Per-observation Gaussian noise stands in for
viewpoint variation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .geometry import PinholeCamera, Se3Pose, backproject_pixels, sample_depth_pixels

DESC_MAGIC = b"SRCD"
DESC_VERSION = 1
_DESC_HEADER = struct.Struct("<4sIII")


@dataclass
class DescriptorMap:
    dim: int
    pixels: np.ndarray  # (N, 2) (u, v)
    descriptors: np.ndarray  # (N, dim)
    grid: Optional[Tuple[int, int]] = None
    points: Optional[np.ndarray] = None  # world points, when the provider knows them

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64).reshape(-1, self.dim)
        if len(self.pixels) != len(self.descriptors):
            raise ValueError("pixel and descriptor counts differ")
        if not np.all(np.isfinite(self.descriptors)):
            raise ValueError("descriptors must be finite")

    def __len__(self):
        return len(self.pixels)


class OracleDescriptor:
    """Deterministic synthetic descriptor.

    ``cross_scene_shift`` blends in a second embedding seeded by
    ``shift_seed`` to emulate the domain gap between scenes.
    """

    def __init__(
        self,
        scene_seed: int = 0,
        dim: int = 32,
        noise_sigma: float = 0.0,
        frequency: float = 2.0,
        cross_scene_shift: float = 0.0,
        shift_seed: int = 0,
    ):
        if noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        self.scene_seed = int(scene_seed)
        self.dim = int(dim)
        self.noise_sigma = float(noise_sigma)
        self.frequency = float(frequency)
        self.cross_scene_shift = float(cross_scene_shift)
        self.shift_seed = int(shift_seed)
        rng = np.random.default_rng([self.scene_seed, 0x5EED])
        self._W = rng.normal(scale=self.frequency, size=(3, self.dim))
        self._b = rng.uniform(0, 2 * np.pi, self.dim)
        srng = np.random.default_rng([self.scene_seed, self.shift_seed, 0x5417])
        self._Ws = srng.normal(scale=self.frequency, size=(3, self.dim))
        self._bs = srng.uniform(0, 2 * np.pi, self.dim)

    def base(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.sin(pts @ self._W + self._b)
        if self.cross_scene_shift:
            out = out + self.cross_scene_shift * np.sin(pts @ self._Ws + self._bs)
        return out

    def describe_points(self, points: np.ndarray, rng_stream: int = 0) -> np.ndarray:
        out = self.base(points)
        if self.noise_sigma > 0:
            rng = np.random.default_rng([self.scene_seed, int(rng_stream), 0xA015E])
            out = out + rng.normal(scale=self.noise_sigma, size=out.shape)
        return out

    def describe_view(self, depth, pose: Se3Pose, camera: PinholeCamera, stride: int = 1, view_id: int = 0) -> DescriptorMap:
        pixels, d = sample_depth_pixels(depth, stride)
        if len(d) == 0:
            return DescriptorMap(self.dim, pixels, np.zeros((0, self.dim)), points=np.zeros((0, 3)))
        pts = backproject_pixels(pose, camera, pixels, d)
        return DescriptorMap(self.dim, pixels, self.describe_points(pts, view_id), points=pts)


def oracle_describe(
    scene_seed: int, point, noise_sigma: float = 0.0, rng_stream: int = 0, dim: int = 32, **kwargs
) -> np.ndarray:
    prov = OracleDescriptor(scene_seed, dim, noise_sigma, **kwargs)
    return prov.describe_points(np.asarray(point, dtype=np.float64)[None], rng_stream)[0]


class FileDescriptors:
    """Reads externally computed ``SRCD`` files, one per view: ``<dir>/<view_id:06d>.srcd``."""

    def __init__(self, directory):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FileNotFoundError(f"descriptor directory {self.directory} does not exist")
        files = sorted(self.directory.glob("*.srcd"))
        if not files:
            raise FileNotFoundError(f"no .srcd files in {self.directory}")
        self.dim = load_descriptors(files[0]).dim

    def describe_view(self, depth, pose, camera, stride: int = 1, view_id: int = 0) -> DescriptorMap:
        dm = load_descriptors(self.directory / f"{view_id:06d}.srcd")
        grid_px, _ = sample_depth_pixels(depth, stride)
        wanted = {(float(u), float(v)) for u, v in grid_px}
        keep = np.array([(float(u), float(v)) in wanted for u, v in dm.pixels], dtype=bool)
        pix = dm.pixels[keep]
        rows, cols = pix[:, 1].astype(int), pix[:, 0].astype(int)
        pts = backproject_pixels(pose, camera, pix, np.asarray(depth)[rows, cols]) if len(pix) else np.zeros((0, 3))
        return DescriptorMap(dm.dim, pix, dm.descriptors[keep], points=pts)


def describe_view(provider, view, camera: PinholeCamera, stride: int = 1, view_id: int = 0) -> DescriptorMap:
    depth, pose = view
    return provider.describe_view(depth, pose, camera, stride, view_id)


def make_provider(spec: str, **oracle_kwargs):
    """``oracle`` or ``file:<dir>``."""
    if spec == "oracle":
        return OracleDescriptor(**oracle_kwargs)
    if spec.startswith("file:"):
        return FileDescriptors(spec[5:])
    raise ValueError(f"unknown descriptor provider {spec!r}")


def save_descriptors(path, dmap: DescriptorMap) -> None:
    rec = np.column_stack([dmap.pixels, dmap.descriptors]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_DESC_HEADER.pack(DESC_MAGIC, DESC_VERSION, dmap.dim, len(dmap)))
        fh.write(rec.tobytes())


def load_descriptors(path) -> DescriptorMap:
    data = Path(path).read_bytes()
    magic, version, dim, count = _DESC_HEADER.unpack_from(data)
    if magic != DESC_MAGIC:
        raise ValueError(f"{path}: bad descriptor magic {magic!r}")
    if version != DESC_VERSION:
        raise ValueError(f"{path}: unsupported descriptor version {version}")
    rec = np.frombuffer(data, dtype="<f4", offset=_DESC_HEADER.size)
    if rec.size != count * (dim + 2):
        raise ValueError(f"{path}: expected {count} records of dim {dim}")
    rec = rec.reshape(count, dim + 2).astype(np.float64)
    return DescriptorMap(dim, rec[:, :2], rec[:, 2:])
