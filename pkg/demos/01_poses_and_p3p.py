"""
Poses, projection and minimal solvers
=====================================

A walk through the geometry layer: build a camera, project points,
recover the pose from three of them, then let RANSAC cope with
one-to-many correspondences where each pixel has several candidate points.
"""

import numpy as np

from regionloc.geometry import PinholeCamera, look_at, pose_error, project_points
from regionloc.pose import CorrespondenceSet, RansacConfig, estimate_pose, p3p_solve

rng = np.random.default_rng(0)
cam = PinholeCamera.default()
print(cam)

# a camera 4 units away looking at the origin
truth = look_at([1.0, -0.5, 4.0], [0.0, 0.0, 0.0])
pts = rng.uniform(-1, 1, size=(60, 3))
px, in_front = project_points(truth, cam, pts)
print("all points in front:", in_front.all())

# three correspondences give up to four poses; one of them is the truth
for sol in p3p_solve(px[:3], pts[:3], cam):
    te, re = pose_error(sol, truth)
    print(f"P3P candidate: translation error {te:.2e}, rotation error {re:.2e} deg")

# Now each pixel gets three candidate points and only one is right.
# A third of the pixels get no correct candidate at all.
cands = np.stack([pts, rng.uniform(-1, 1, pts.shape), rng.uniform(-1, 1, pts.shape)], axis=1)
rng.shuffle(cands, axis=1)
bad = rng.choice(60, 20, replace=False)
cands[bad] = rng.uniform(-1, 1, size=(20, 3, 3))
corr = CorrespondenceSet(px + rng.normal(scale=0.5, size=px.shape), cands, np.full(60, 3), cam)

result = estimate_pose(corr, RansacConfig(hypotheses=128, tau=10.0, seed=1))
te, re = pose_error(result.pose, truth)
print(f"RANSAC + refine: {te:.4f} units, {re:.3f} deg, {result.inliers} inliers")
