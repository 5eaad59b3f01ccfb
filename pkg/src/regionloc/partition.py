"""Hierarchical K-Means scene partition.

Class ids are 0-indexed: a leaf reached through per-level branch indices
``(a_1, ..., a_n)`` has composite id ``sum(a_i * m**(n - i))``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import PinholeCamera, PointCloud, Se3Pose, backproject_pixels, sample_depth_pixels

TREE_MAGIC = b"SRCT"
TREE_VERSION = 1
MAX_ITER = 100
N_INIT = 10


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    capped: bool = False
    n_iter: int = 0

    def objective(self, points: np.ndarray) -> float:
        diff = np.asarray(points) - self.centroids[self.assignments]
        return float(np.sum(diff * diff))


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return cdist(points, centers, "sqeuclidean")


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
        idx = min(idx, n - 1)
        while d2[idx] == 0:  # cumsum rounding can land on an already-covered point
            idx = (idx + 1) % n
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(points, points[idx : idx + 1])[:, 0])
    return points[chosen].copy()


def _means(points, assign, centroids):
    k = len(centroids)
    counts = np.bincount(assign, minlength=k)
    sums = np.column_stack([np.bincount(assign, points[:, d], minlength=k) for d in range(points.shape[1])])
    out = centroids.copy()
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz, None]
    return out, counts


def kmeans(points: np.ndarray, k: int, seed: int = 0, n_init: int = N_INIT) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` restarts.

    When ``k`` exceeds the number of distinct points the cluster count is
    capped and ``capped`` is set on the result. Restart ``i`` draws from
    ``default_rng([seed, i])``; ties in the objective keep the earliest.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if len(points) == 0:
        raise ValueError("kmeans needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_unique = len(np.unique(points, axis=0)) if k > 1 else 1
    capped = k > n_unique
    k = min(k, n_unique)
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    best = None
    for i in range(n_init if k > 1 else 1):
        res = _lloyd(points, k, np.random.default_rng([int(seed), i]))
        obj = res.objective(points)
        if best is None or obj < best[0]:
            best = (obj, res)
    best[1].capped = capped
    return best[1]


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator) -> KMeansResult:
    centroids = _kmeanspp(points, k, rng)
    assign = np.argmin(_sq_dists(points, centroids), axis=1)
    it = 0
    for it in range(1, MAX_ITER + 1):
        centroids, counts = _means(points, assign, centroids)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            far = np.sum((points - centroids[assign]) ** 2, axis=1)
            for c in empty:
                idx = int(np.argmax(far))
                centroids[c] = points[idx]
                far[idx] = -1.0
        new = np.argmin(_sq_dists(points, centroids), axis=1)
        if np.array_equal(new, assign) and not len(empty):
            break
        assign = new
    centroids, counts = _means(points, assign, centroids)
    return KMeansResult(assign, centroids, False, it)


@dataclass(frozen=True)
class RegionLabel:
    levels: Tuple[int, ...]
    composite: int


def composite_id(levels: Sequence[int], m: int) -> int:
    c = 0
    for a in levels:
        c = c * m + int(a)
    return c


def composite_ids(levels: np.ndarray, m: int) -> np.ndarray:
    levels = np.asarray(levels, dtype=np.int64)
    n = levels.shape[-1]
    weights = m ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return levels @ weights


def split_composite(composite: int, m: int, n: int) -> Tuple[int, ...]:
    out = []
    for _ in range(n):
        composite, a = divmod(int(composite), m)
        out.append(a)
    if composite:
        raise ValueError("composite id out of range")
    return tuple(reversed(out))


@dataclass
class TreeLevel:
    centroids: np.ndarray  # (K, 3)
    parent: np.ndarray  # (K,) index into previous level, -1 at level 1
    branch: np.ndarray  # (K,) class index among siblings


@dataclass
class PartitionTree:
    m: int
    n: int
    levels: List[TreeLevel]
    leaf_members: List[np.ndarray]  # point indices into the source cloud
    leaf_points: List[np.ndarray]
    leaf_centers: Optional[List[np.ndarray]] = None
    seed: int = 0
    _child_tables: Optional[list] = field(default=None, repr=False, compare=False)
    _leaf_lookup: Optional[dict] = field(default=None, repr=False, compare=False)

    @property
    def n_leaves(self) -> int:
        return len(self.levels[-1].centroids)

    def paths(self, level: Optional[int] = None) -> np.ndarray:
        """(K, level) branch indices from the root to each node of ``level`` (1-based)."""
        level = self.n if level is None else level
        lv = self.levels[level - 1]
        cols = [lv.branch]
        idx = lv.parent
        for up in range(level - 2, -1, -1):
            cols.append(self.levels[up].branch[idx])
            idx = self.levels[up].parent[idx]
        return np.column_stack(cols[::-1]).astype(np.int64)

    def leaf_labels(self) -> np.ndarray:
        return composite_ids(self.paths(), self.m)

    def leaf_index(self, composite: int) -> Optional[int]:
        if self._leaf_lookup is None:
            self._leaf_lookup = {int(c): i for i, c in enumerate(self.leaf_labels())}
        return self._leaf_lookup.get(int(composite))

    def child_table(self, level: int) -> np.ndarray:
        """(K_prev, m) node indices at ``level`` (1-based) per parent, -1 padded."""
        if self._child_tables is None:
            tables = []
            for li, lv in enumerate(self.levels):
                k_prev = 1 if li == 0 else len(self.levels[li - 1].centroids)
                tab = np.full((k_prev, self.m), -1, dtype=np.int64)
                par = np.maximum(lv.parent, 0)
                tab[par, lv.branch] = np.arange(len(lv.centroids))
                tables.append(tab)
            self._child_tables = tables
        return self._child_tables[level - 1]

    def node_members(self, level: int) -> List[np.ndarray]:
        """Member point indices for every node at ``level`` (1-based)."""
        members = list(self.leaf_members)
        for li in range(self.n - 1, level - 1, -1):
            lv = self.levels[li]
            k_prev = len(self.levels[li - 1].centroids)
            grouped = [[] for _ in range(k_prev)]
            for j, p in enumerate(lv.parent):
                grouped[p].append(members[j])
            members = [np.concatenate(g) if g else np.zeros(0, np.int64) for g in grouped]
        return members

    def mean_radius(self, level: Optional[int] = None, points: Optional[np.ndarray] = None) -> float:
        """Mean over nodes of the mean member distance to the node centroid."""
        level = self.n if level is None else level
        if level == self.n:
            groups = self.leaf_points
        else:
            if points is None:
                points = self.cloud_points()
            groups = [points[idx] for idx in self.node_members(level)]
        cents = self.levels[level - 1].centroids
        radii = [np.linalg.norm(g - c, axis=1).mean() for g, c in zip(groups, cents) if len(g)]
        return float(np.mean(radii))

    def mean_leaf_radius(self) -> float:
        return self.mean_radius(self.n)

    def cloud_points(self) -> np.ndarray:
        total = sum(len(i) for i in self.leaf_members)
        pts = np.empty((total, 3))
        for idx, p in zip(self.leaf_members, self.leaf_points):
            pts[idx] = p
        return pts

    def to_bytes(self) -> bytes:
        return dump_tree(self)


def _node_seed(seed: int, path: Tuple[int, ...]) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))


def _kmeans_seed(seed: int, path) -> int:
    return int(_node_seed(seed, path).generate_state(2, dtype=np.uint64)[0])


def build_tree(cloud, m: int, n: int, seed: int = 0) -> PartitionTree:
    """Recursive m-way K-Means partition to depth ``n``.

    Clusters with fewer distinct points than ``m`` get one child per distinct
    point, so every branch reaches depth ``n`` and leaves may number < m**n.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("cannot build a tree from an empty cloud")
    if m < 2 or n < 1:
        raise ValueError("need m >= 2 and n >= 1")
    frontier = [((), np.arange(len(points)))]  # (path, member indices)
    levels = []
    for li in range(n):
        cents, parents, branches, nxt = [], [], [], []
        for pi, (path, members) in enumerate(frontier):
            res = kmeans(points[members], m, _kmeans_seed(seed, path))
            for c in range(len(res.centroids)):
                sub = members[res.assignments == c]
                cents.append(res.centroids[c])
                parents.append(pi if li else -1)
                branches.append(c)
                nxt.append((path + (c,), sub))
        levels.append(
            TreeLevel(np.array(cents), np.array(parents, dtype=np.int64), np.array(branches, dtype=np.int64))
        )
        frontier = nxt
    members = [f[1] for f in frontier]
    return PartitionTree(m, n, levels, members, [points[i] for i in members], None, int(seed))


def label_points(tree: PartitionTree, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy descent for many points. Returns (per-level branch ids (N, n), leaf node index (N,))."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    node = np.zeros(len(pts), dtype=np.int64)
    levels = np.zeros((len(pts), tree.n), dtype=np.int64)
    for li in range(tree.n):
        kids = tree.child_table(li + 1)[node]  # (N, m)
        cents = tree.levels[li].centroids[np.maximum(kids, 0)]
        d = np.sum((cents - pts[:, None, :]) ** 2, axis=2)
        d[kids < 0] = np.inf
        best = np.argmin(d, axis=1)
        levels[:, li] = best
        node = kids[np.arange(len(pts)), best]
    return levels, node


def label_point(tree: PartitionTree, point: Sequence[float]) -> RegionLabel:
    levels, _ = label_points(tree, np.asarray(point, dtype=np.float64)[None])
    lv = tuple(int(a) for a in levels[0])
    return RegionLabel(lv, composite_id(lv, tree.m))


@dataclass
class LabeledPixels:
    pixels: np.ndarray  # (N, 2) (u, v)
    points: np.ndarray  # (N, 3) back-projected world points
    levels: np.ndarray  # (N, n)
    composite: np.ndarray  # (N,)

    def __len__(self):
        return len(self.pixels)

    def __iter__(self):
        for px, lv, c in zip(self.pixels, self.levels, self.composite):
            yield px, RegionLabel(tuple(int(a) for a in lv), int(c))


def label_view(
    tree: PartitionTree, depth: np.ndarray, pose: Se3Pose, camera: PinholeCamera, stride: int = 1
) -> LabeledPixels:
    pixels, d = sample_depth_pixels(depth, stride)
    if len(d) == 0:
        return LabeledPixels(pixels, np.zeros((0, 3)), np.zeros((0, tree.n), np.int64), np.zeros(0, np.int64))
    pts = backproject_pixels(pose, camera, pixels, d)
    levels, _ = label_points(tree, pts)
    return LabeledPixels(pixels, pts, levels, composite_ids(levels, tree.m))


def cluster_leaves(tree: PartitionTree, q: int = 10, seed: int = 0) -> PartitionTree:
    """Attach up to ``q`` K-Means centers to every leaf."""
    if q < 1:
        raise ValueError("q must be >= 1")
    paths = tree.paths()
    centers = []
    for path, pts in zip(paths, tree.leaf_points):
        res = kmeans(pts, min(q, len(pts)), _kmeans_seed(seed, (1 << 30,) + tuple(path)))
        centers.append(res.centroids)
    return replace(tree, leaf_centers=centers, _child_tables=None, _leaf_lookup=None)


# ---- serialization ------------------------------------------------------

_HDR = struct.Struct("<4sIIIIQ")


def _ragged(arrs: List[np.ndarray], width: int) -> Tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(len(arrs) + 1, dtype="<u8")
    offsets[1:] = np.cumsum([len(a) for a in arrs])
    flat = np.concatenate([np.asarray(a).reshape(-1, width) for a in arrs]) if arrs else np.zeros((0, width))
    return offsets, flat


def dump_tree(tree: PartitionTree) -> bytes:
    buf = io.BytesIO()
    # label_base 0 records the 0-indexed class convention
    buf.write(_HDR.pack(TREE_MAGIC, TREE_VERSION, tree.m, tree.n, 0, tree.seed))
    for lv in tree.levels:
        buf.write(struct.pack("<Q", len(lv.centroids)))
        buf.write(lv.centroids.astype("<f8").tobytes())
        buf.write(lv.parent.astype("<i8").tobytes())
        buf.write(lv.branch.astype("<i8").tobytes())
    off, idx = _ragged(tree.leaf_members, 1)
    buf.write(off.tobytes())
    buf.write(idx.astype("<i8").tobytes())
    buf.write(np.concatenate(tree.leaf_points).astype("<f8").tobytes())
    has_centers = tree.leaf_centers is not None
    buf.write(struct.pack("<B", int(has_centers)))
    if has_centers:
        off, flat = _ragged(tree.leaf_centers, 3)
        buf.write(off.tobytes())
        buf.write(flat.astype("<f8").tobytes())
    return buf.getvalue()


def load_tree_bytes(data: bytes) -> PartitionTree:
    magic, version, m, n, label_base, seed = _HDR.unpack_from(data)
    if magic != TREE_MAGIC:
        raise ValueError(f"not a tree file (magic {magic!r})")
    if version != TREE_VERSION:
        raise ValueError(f"unsupported tree format version {version}")
    if label_base != 0:
        raise ValueError("only 0-indexed label convention is supported")
    pos = _HDR.size

    def take(dtype, count):
        nonlocal pos
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr.copy()

    levels = []
    for _ in range(n):
        (k,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        cents = take("<f8", 3 * k).reshape(k, 3)
        levels.append(TreeLevel(cents, take("<i8", k).astype(np.int64), take("<i8", k).astype(np.int64)))
    n_leaves = len(levels[-1].centroids)
    off = take("<u8", n_leaves + 1).astype(np.int64)
    idx = take("<i8", off[-1]).astype(np.int64)
    pts = take("<f8", 3 * off[-1]).reshape(-1, 3)
    members = [idx[a:b] for a, b in zip(off[:-1], off[1:])]
    leaf_points = [pts[a:b] for a, b in zip(off[:-1], off[1:])]
    (has_centers,) = struct.unpack_from("<B", data, pos)
    pos += 1
    centers = None
    if has_centers:
        coff = take("<u8", n_leaves + 1).astype(np.int64)
        flat = take("<f8", 3 * coff[-1]).reshape(-1, 3)
        centers = [flat[a:b] for a, b in zip(coff[:-1], coff[1:])]
    return PartitionTree(m, n, levels, members, leaf_points, centers, seed)


def save_tree(path, tree: PartitionTree) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_tree(tree))


def load_tree(path) -> PartitionTree:
    with open(path, "rb") as fh:
        return load_tree_bytes(fh.read())


def tree_to_json(tree: PartitionTree) -> str:
    doc = {
        "format": "SRCT-json",
        "version": TREE_VERSION,
        "label_base": 0,
        "m": tree.m,
        "n": tree.n,
        "seed": tree.seed,
        "levels": [
            {"centroids": lv.centroids.tolist(), "parent": lv.parent.tolist(), "branch": lv.branch.tolist()}
            for lv in tree.levels
        ],
        "leaf_members": [i.tolist() for i in tree.leaf_members],
        "leaf_points": [p.tolist() for p in tree.leaf_points],
        "leaf_centers": None if tree.leaf_centers is None else [c.tolist() for c in tree.leaf_centers],
    }
    return json.dumps(doc)


def tree_from_json(text: str) -> PartitionTree:
    doc = json.loads(text)
    if doc.get("version") != TREE_VERSION:
        raise ValueError(f"unsupported tree format version {doc.get('version')}")
    levels = [
        TreeLevel(
            np.asarray(lv["centroids"], dtype=np.float64).reshape(-1, 3),
            np.asarray(lv["parent"], dtype=np.int64),
            np.asarray(lv["branch"], dtype=np.int64),
        )
        for lv in doc["levels"]
    ]
    centers = doc.get("leaf_centers")
    return PartitionTree(
        doc["m"],
        doc["n"],
        levels,
        [np.asarray(i, dtype=np.int64) for i in doc["leaf_members"]],
        [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in doc["leaf_points"]],
        None if centers is None else [np.asarray(c, dtype=np.float64).reshape(-1, 3) for c in centers],
        doc["seed"],
    )
