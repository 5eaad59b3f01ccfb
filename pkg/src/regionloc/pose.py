"""One-to-many PnP-RANSAC with Levenberg-Marquardt refinement.

Each correspondence pairs a pixel with a set of candidate 3D points. The
reprojection error of an entry is the minimum over its candidates; hypotheses
are ranked by a sigmoid-kernel consensus score where lower is better.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .geometry import CHEIRALITY_EPS, PinholeCamera, Se3Pose, so3_exp

BEHIND_PENALTY = 1e6
KERNEL_SLOPE = 0.5
MAX_REFINE_ITERS = 20


class NoPoseError(RuntimeError):
    """No RANSAC hypothesis survived."""


@dataclass
class RansacConfig:
    hypotheses: int = 256
    tau: float = 10.0
    max_refine_iters: int = MAX_REFINE_ITERS
    seed: int = 0

    def __post_init__(self):
        if self.hypotheses < 1:
            raise ValueError("hypotheses must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.max_refine_iters < 0:
            raise ValueError("max_refine_iters must be >= 0")


@dataclass
class CorrespondenceSet:
    """Pixels (N, 2) with candidate points padded to (N, q, 3); ``counts`` gives valid candidates."""

    pixels: np.ndarray
    candidates: np.ndarray
    counts: np.ndarray
    camera: PinholeCamera

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.candidates = np.asarray(self.candidates, dtype=np.float64)
        if self.candidates.ndim == 2:
            self.candidates = self.candidates[:, None, :]
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.pixels) != len(self.candidates) or len(self.counts) != len(self.pixels):
            raise ValueError("inconsistent correspondence arrays")
        if np.any(self.counts < 1) or np.any(self.counts > self.candidates.shape[1]):
            raise ValueError("every entry needs at least one candidate")
        q = self.candidates.shape[1]
        self.mask = np.arange(q)[None, :] < self.counts[:, None]
        if not (np.all(np.isfinite(self.pixels)) and np.all(np.isfinite(self.candidates[self.mask]))):
            raise ValueError("correspondences must be finite")

    @classmethod
    def from_lists(cls, pixels, candidate_lists, camera) -> "CorrespondenceSet":
        q = max((len(c) for c in candidate_lists), default=1)
        cand = np.zeros((len(candidate_lists), q, 3))
        counts = np.zeros(len(candidate_lists), dtype=np.int64)
        for i, c in enumerate(candidate_lists):
            c = np.asarray(c, dtype=np.float64).reshape(-1, 3)
            cand[i, : len(c)] = c
            counts[i] = len(c)
        return cls(np.asarray(pixels, dtype=np.float64).reshape(-1, 2), cand, counts, camera)

    def __len__(self):
        return len(self.pixels)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.pixels[idx], self.candidates[idx], self.counts[idx], self.camera)


@dataclass
class ScoredPose:
    pose: Se3Pose
    score: float
    inliers: int
    hypothesis_index: int = -1
    iterations: int = 0
    converged: bool = False
    insufficient_inliers: bool = False
    cost_log: List[Tuple[float, float]] = field(default_factory=list)


# ---- minimal solvers ----------------------------------------------------

def _kabsch(world: np.ndarray, cam: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """R, t with cam = R @ world + t."""
    cw, cc = world.mean(axis=0), cam.mean(axis=0)
    H = (world - cw).T @ (cam - cc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cc - R @ cw


def _polish_depths(s, a2, b2, c2, ca, cb, cg, iters=8):
    """Newton on the three law-of-cosines equations for the ray distances."""
    s1, s2, s3 = (float(x) for x in s)
    for _ in range(iters):
        f1 = s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca - a2
        f2 = s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb - b2
        f3 = s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg - c2
        j12, j13 = 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca
        j21, j23 = 2 * s1 - 2 * s3 * cb, 2 * s3 - 2 * s1 * cb
        j31, j32 = 2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg
        # Cramer's rule on [[0, j12, j13], [j21, 0, j23], [j31, j32, 0]]
        det = j12 * j23 * j31 + j13 * j21 * j32
        if det == 0.0 or not np.isfinite(det):
            break
        d1 = (-f1 * j23 * j32 + j12 * j23 * f3 + j13 * f2 * j32) / det
        d2 = (f1 * j23 * j31 + j13 * (j21 * f3 - f2 * j31)) / det
        d3 = (f1 * j21 * j32 - j12 * (j21 * f3 - f2 * j31)) / det
        s1, s2, s3 = s1 - d1, s2 - d2, s3 - d3
        if max(abs(d1), abs(d2), abs(d3)) <= 1e-15 * max(1.0, abs(s1), abs(s2), abs(s3)):
            break
    return np.array([s1, s2, s3])


def _reprojection(R, t, points, pixels, camera) -> np.ndarray:
    pc = points @ R.T + t
    if np.any(pc[:, 2] <= CHEIRALITY_EPS):
        return np.full(len(points), np.inf)
    u = camera.fx * pc[:, 0] / pc[:, 2] + camera.cx
    v = camera.fy * pc[:, 1] / pc[:, 2] + camera.cy
    return np.hypot(u - pixels[:, 0], v - pixels[:, 1])


def _pmul(a, b):
    out = [0.0] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


def _psub(a, b):
    n = max(len(a), len(b))
    return [(a[i] if i < len(a) else 0.0) - (b[i] if i < len(b) else 0.0) for i in range(n)]


def _pval(c, x):
    out = 0.0
    for coef in reversed(c):
        out = out * x + coef
    return out


def _is_degenerate(pixels: np.ndarray, points: np.ndarray) -> bool:
    """Duplicate pixels, or a first-three triangle with area below 1e-9 of its squared size."""
    px = pixels.tolist()
    for i in range(len(px)):
        for j in range(i + 1, len(px)):
            if abs(px[i][0] - px[j][0]) <= 1e-12 and abs(px[i][1] - px[j][1]) <= 1e-12:
                return True
    (x0, y0, z0), (x1, y1, z1), (x2, y2, z2) = points[:3].tolist()
    e1 = (x1 - x0, y1 - y0, z1 - z0)
    e2 = (x2 - x0, y2 - y0, z2 - z0)
    e3 = (x2 - x1, y2 - y1, z2 - z1)
    scale2 = max(sum(c * c for c in e) for e in (e1, e2, e3))
    cx = e1[1] * e2[2] - e1[2] * e2[1]
    cy = e1[2] * e2[0] - e1[0] * e2[2]
    cz = e1[0] * e2[1] - e1[1] * e2[0]
    area = 0.5 * np.sqrt(cx * cx + cy * cy + cz * cz)
    return not scale2 > 0 or area < 1e-9 * scale2


def p3p_solve(pixels, points, camera: PinholeCamera, tol_px: float = 1e-6) -> List[Se3Pose]:
    """All camera poses mapping three world points onto three pixels.

    Grunert's distance formulation: the three ray-distance equations are
    reduced to a quartic in ``s3 / s1`` by the resultant of two quadratics,
    then each root is polished with Newton steps before aligning the
    triangles with an SVD fit.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(3, 2)
    points = np.asarray(points, dtype=np.float64).reshape(3, 3)
    if _is_degenerate(pixels, points):
        return []
    rays = camera.pixel_rays(pixels)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    ca, cb, cg = rays[1] @ rays[2], rays[0] @ rays[2], rays[0] @ rays[1]
    a2 = np.sum((points[1] - points[2]) ** 2)
    b2 = np.sum((points[0] - points[2]) ** 2)
    c2 = np.sum((points[0] - points[1]) ** 2)
    # normalize by b so the quartic is well scaled
    A, C = a2 / b2, c2 / b2
    # Two quadratics in u = s2/s1 (leading coefficient 1) whose coefficients
    # are polynomials in v = s3/s1, lowest order first:
    #   u^2 + qA u + rA(v) = 0,   u^2 + qB(v) u + rB(v) = 0
    qA = (-2 * cg,)
    rA = (1 - C, 2 * C * cb, -C)
    qB = (0.0, -2 * ca)
    rB = (-A, 2 * A * cb, 1 - A)
    # their resultant in u is a quartic in v
    dr = _psub(rB, rA)
    dq = _psub(qB, qA)
    res = _psub(_pmul(dr, dr), _pmul(dq, _psub(_pmul(qA, rB), _pmul(qB, rA))))
    while len(res) > 1 and res[-1] == 0.0:
        res = res[:-1]
    if len(res) < 2:
        return []
    roots = np.roots(res[::-1])
    scale = max(1.0, np.max(np.abs(roots)))
    vs = np.real(roots[np.abs(np.imag(roots)) <= 1e-4 * scale])

    solutions: List[Se3Pose] = []
    seen: List[Tuple[np.ndarray, np.ndarray]] = []
    for v in vs:
        if v <= 0:
            continue
        den = 1 + v * v - 2 * v * cb
        if den <= 0:
            continue
        s1 = np.sqrt(1.0 / den)
        # candidate u from the linear combination and from quadratic A
        us = []
        qd = qA[0] - _pval(qB, v)
        if abs(qd) > 1e-12:
            us.append((_pval(rB, v) - _pval(rA, v)) / qd)
        disc = cg * cg - (1 - C * (1 + v * v - 2 * v * cb))
        if disc >= -1e-9:
            r = np.sqrt(max(disc, 0.0))
            us += [cg + r, cg - r]
        best, best_res = None, np.inf
        for u in us:
            eqA = u * u - 2 * cg * u + 1 - C * den
            eqB = u * u - 2 * ca * u * v + v * v - A * den
            resid = abs(eqA) + abs(eqB)
            if u > 0 and resid < best_res:
                best, best_res = u, resid
        if best is None:
            continue
        b = np.sqrt(b2)
        s = np.array([s1, best * s1, v * s1]) * b
        s = _polish_depths(s, a2, b2, c2, ca, cb, cg)
        if np.any(s <= CHEIRALITY_EPS):
            continue
        R, t = _kabsch(points, rays * s[:, None])
        if _reprojection(R, t, points, pixels, camera).max() > tol_px:
            continue
        if any(np.abs(R - R0).max() < 1e-9 and np.abs(t - t0).max() < 1e-9 * max(1.0, np.abs(t0).max()) for R0, t0 in seen):
            continue
        seen.append((R, t))
        solutions.append(Se3Pose.from_matrix(R.T, -R.T @ t))
    return solutions


def solve_minimal(pixels, points, camera: PinholeCamera, tau: float = 10.0) -> Optional[Se3Pose]:
    """P3P on the first three matches, disambiguated by the fourth.

    Returns None when no solution survives or the fourth match reprojects
    worse than ``10 * tau``.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(4, 2)
    points = np.asarray(points, dtype=np.float64).reshape(4, 3)
    if _is_degenerate(pixels, points):
        return None
    sols = p3p_solve(pixels[:3], points[:3], camera)
    best, best_err = None, np.inf
    for pose in sols:
        R, t = pose.world_to_camera()
        err = _reprojection(R, t, points[3:], pixels[3:], camera)[0]
        if err < best_err:
            best, best_err = pose, err
    if best is None or not best_err <= 10 * tau:
        return None
    return best


# ---- scoring ------------------------------------------------------------

def reproj_errors(pose: Se3Pose, corr: CorrespondenceSet) -> Tuple[np.ndarray, np.ndarray]:
    """Per-entry min-over-candidates pixel error and the argmin candidate index."""
    R, t = pose.world_to_camera()
    pc = corr.candidates @ R.T + t  # (N, q, 3)
    z = pc[..., 2]
    front = z > CHEIRALITY_EPS
    zs = np.where(front, z, 1.0)
    du = corr.camera.fx * pc[..., 0] / zs + corr.camera.cx - corr.pixels[:, None, 0]
    dv = corr.camera.fy * pc[..., 1] / zs + corr.camera.cy - corr.pixels[:, None, 1]
    err = np.where(front, np.sqrt(du * du + dv * dv), BEHIND_PENALTY)
    err = np.where(corr.mask, err, np.inf)
    k = np.argmin(err, axis=1)
    return err[np.arange(len(err)), k], k


def reproj_error(pose: Se3Pose, entry, camera: PinholeCamera) -> float:
    pixel, candidates = entry
    corr = CorrespondenceSet.from_lists([pixel], [candidates], camera)
    return float(reproj_errors(pose, corr)[0][0])


def kernel_score(errors: np.ndarray, tau: float) -> float:
    return float(np.sum(expit(KERNEL_SLOPE * (np.asarray(errors) - tau))))


def consensus_score(pose: Se3Pose, corr: CorrespondenceSet, tau: float = 10.0) -> float:
    return kernel_score(reproj_errors(pose, corr)[0], tau)


# ---- RANSAC -------------------------------------------------------------

def hypothesis_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_hypothesis(corr: CorrespondenceSet, config: RansacConfig, index: int) -> Optional[Se3Pose]:
    rng = hypothesis_rng(config.seed, index)
    entries = rng.choice(len(corr), size=4, replace=False)
    picks = rng.integers(0, corr.counts[entries])
    return solve_minimal(corr.pixels[entries], corr.candidates[entries, picks], corr.camera, config.tau)


def ransac(corr: CorrespondenceSet, config: RansacConfig = RansacConfig()) -> ScoredPose:
    """Best of ``config.hypotheses`` minimal-sample attempts by consensus score.

    Failed attempts still consume the budget. Ties keep the earliest hypothesis.
    """
    if len(corr) < 4:
        raise ValueError("ransac needs at least 4 correspondences")
    best: Optional[ScoredPose] = None
    for i in range(config.hypotheses):
        pose = generate_hypothesis(corr, config, i)
        if pose is None:
            continue
        err, _ = reproj_errors(pose, corr)
        score = kernel_score(err, config.tau)
        if best is None or score < best.score:
            best = ScoredPose(pose, score, int(np.sum(err < config.tau)), i)
    if best is None:
        raise NoPoseError(f"all {config.hypotheses} hypotheses failed")
    return best


# ---- refinement ---------------------------------------------------------

def _residuals(R, t, X, x, camera):
    pc = X @ R.T + t
    z = pc[:, 2]
    if np.any(z <= CHEIRALITY_EPS):
        return None, pc
    r = np.empty((len(X), 2))
    r[:, 0] = camera.fx * pc[:, 0] / z + camera.cx - x[:, 0]
    r[:, 1] = camera.fy * pc[:, 1] / z + camera.cy - x[:, 1]
    return r, pc


def _jacobian(pc, camera):
    """d(pixel)/d(omega, v) under the left update R' = exp(omega) R, t' = exp(omega) t + v."""
    X, Y, Z = pc[:, 0], pc[:, 1], pc[:, 2]
    n = len(pc)
    J = np.zeros((n, 2, 6))
    # d pixel / d pc
    du = np.stack([camera.fx / Z, np.zeros(n), -camera.fx * X / Z**2], axis=1)
    dv = np.stack([np.zeros(n), camera.fy / Z, -camera.fy * Y / Z**2], axis=1)
    # d pc / d omega = -[pc]x
    neg_skew = np.zeros((n, 3, 3))
    neg_skew[:, 0, 1], neg_skew[:, 0, 2] = Z, -Y
    neg_skew[:, 1, 0], neg_skew[:, 1, 2] = -Z, X
    neg_skew[:, 2, 0], neg_skew[:, 2, 1] = Y, -X
    J[:, 0, :3] = np.einsum("nk,nkj->nj", du, neg_skew)
    J[:, 1, :3] = np.einsum("nk,nkj->nj", dv, neg_skew)
    J[:, 0, 3:] = du
    J[:, 1, 3:] = dv
    return J.reshape(2 * n, 6)


def _retract(R, t, delta):
    E = so3_exp(delta[:3])
    return E @ R, E @ t + delta[3:]


def refine(
    pose: Se3Pose,
    corr: CorrespondenceSet,
    config: RansacConfig = RansacConfig(),
    update_tol: float = 1e-6,
    cost_tol: float = 1e-9,
) -> ScoredPose:
    """Iterative inlier re-selection plus Levenberg-Marquardt steps.

    Every iteration re-picks the nearest candidate per entry under the
    current pose, keeps entries with error below ``tau`` and takes one
    accepted LM step on them. ``cost_log`` holds (before, after) costs of
    every accepted step.
    """
    R, t = pose.world_to_camera()
    lam = 1e-3
    log: List[Tuple[float, float]] = []
    prev_inliers = None
    converged = False
    insufficient = False
    iters = 0
    for _ in range(config.max_refine_iters):
        err, k = reproj_errors(_as_pose(R, t), corr)
        inl = err < config.tau
        if inl.sum() < 4:
            insufficient = True
            break
        iters += 1
        X = corr.candidates[np.flatnonzero(inl), k[inl]]
        x = corr.pixels[inl]
        r, pc = _residuals(R, t, X, x, corr.camera)
        cost0 = float(np.sum(r * r))
        J = _jacobian(pc, corr.camera)
        rv = r.reshape(-1)
        JtJ = J.T @ J
        g = J.T @ rv
        accepted = False
        for _attempt in range(12):
            A = JtJ + lam * np.diag(np.diag(JtJ) + 1e-12)
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            R1, t1 = _retract(R, t, delta)
            r1, _ = _residuals(R1, t1, X, x, corr.camera)
            cost1 = np.inf if r1 is None else float(np.sum(r1 * r1))
            if cost1 <= cost0:
                accepted = True
                break
            lam *= 10
        if not accepted:
            converged = True
            break
        lam = max(lam / 10, 1e-12)
        R, t = R1, t1
        log.append((cost0, cost1))
        same = prev_inliers is not None and np.array_equal(inl, prev_inliers)
        prev_inliers = inl
        if np.linalg.norm(delta) < update_tol or (same and cost0 - cost1 < cost_tol):
            converged = True
            break
    final = _as_pose(R, t)
    err, _ = reproj_errors(final, corr)
    return ScoredPose(
        final if not (insufficient and iters == 0) else pose,
        kernel_score(err, config.tau),
        int(np.sum(err < config.tau)),
        iterations=iters,
        converged=converged,
        insufficient_inliers=insufficient,
        cost_log=log,
    )


def _as_pose(R, t) -> Se3Pose:
    return Se3Pose.from_matrix(R.T, -R.T @ t)


def estimate_pose(corr: CorrespondenceSet, config: RansacConfig = RansacConfig()) -> ScoredPose:
    best = ransac(corr, config)
    out = refine(best.pose, corr, config)
    out.hypothesis_index = best.hypothesis_index
    return out


# ---- text format --------------------------------------------------------

def save_correspondences(path, corr: CorrespondenceSet) -> None:
    lines = [f"{len(corr)} {corr.candidates.shape[1]}"]
    for px, cand, k in zip(corr.pixels, corr.candidates, corr.counts):
        vals = [repr(float(px[0])), repr(float(px[1])), str(int(k))]
        vals += [repr(float(c)) for c in cand[:k].reshape(-1)]
        lines.append(" ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_correspondences(path, camera: PinholeCamera) -> CorrespondenceSet:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    n, q = int(rows[0][0]), int(rows[0][1])
    if len(rows) - 1 != n:
        raise ValueError(f"{path}: header says {n} entries, found {len(rows) - 1}")
    pixels, cands = [], []
    for row in rows[1:]:
        k = int(row[2])
        if k > q or len(row) != 3 + 3 * k:
            raise ValueError(f"{path}: malformed entry {' '.join(row[:3])}")
        pixels.append([float(row[0]), float(row[1])])
        cands.append(np.array(row[3:], dtype=np.float64).reshape(k, 3))
    corr = CorrespondenceSet.from_lists(pixels, cands, camera)
    if corr.candidates.shape[1] < q:
        pad = np.zeros((n, q - corr.candidates.shape[1], 3))
        corr = CorrespondenceSet(corr.pixels, np.concatenate([corr.candidates, pad], axis=1), corr.counts, camera)
    return corr
