"""End-to-end acceptance checks. Each test records one PASS/FAIL line."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

import reference
from regionloc import classifier as clf
from regionloc import harness
from regionloc.geometry import (
    PinholeCamera,
    Se3Pose,
    backproject,
    backproject_pixels,
    fuse_point_cloud,
    look_at,
    pose_error,
    project,
    project_points,
    random_pose,
)
from regionloc.partition import build_tree, cluster_leaves, composite_ids, dump_tree, label_view
from regionloc.pose import (
    CorrespondenceSet,
    RansacConfig,
    consensus_score,
    estimate_pose,
    kernel_score,
    p3p_solve,
    refine,
    reproj_error,
)

PILOT = json.loads((Path(__file__).parent / "pilot_thresholds.json").read_text())
CAM = PinholeCamera.default()


@pytest.fixture(scope="module")
def default_world():
    """Default scene, its tree, and the query views of the default config."""
    cfg = harness.ExperimentConfig()
    _, train, query = harness.synth_views(cfg)
    tree = harness.make_tree(cfg, train, cfg.camera)
    return cfg, train, query, tree


def visible_instance(rng, count):
    """Random pose and ``count`` points seen by it, with their exact pixels."""
    pose = look_at(rng.uniform(-3, 3, 3) + [0, 0, 4], rng.uniform(-0.3, 0.3, 3))
    px = rng.uniform(0, [CAM.width, CAM.height], size=(count, 2))
    pts = backproject_pixels(pose, CAM, px, rng.uniform(2.0, 6.0, count))
    return pose, pts, project_points(pose, CAM, pts)[0]


def test_c01_p3p_exactness(verdict):
    rng = np.random.default_rng(101)
    failures, worst = 0, 0.0
    for _ in range(1000):
        pose, pts, px = visible_instance(rng, 3)
        best = math.inf
        for s in p3p_solve(px, pts, CAM):
            ang = s.inverse().compose(pose).rotation_angle()
            rel = np.linalg.norm(s.translation - pose.translation) / np.linalg.norm(pose.translation)
            best = min(best, max(ang, rel))
        failures += best >= 1e-6
        worst = max(worst, best if np.isfinite(best) else 1.0)
    verdict(1, "P3P exactness", failures == 0, f"failures={failures}/1000, worst={worst:.1e}")


def test_c02_scoring_oracle(verdict):
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(100):
        pose = random_pose(rng)
        N, q = int(rng.integers(1, 30)), int(rng.integers(1, 11))
        counts = rng.integers(1, q + 1, N)
        world = pose.apply(rng.uniform([-2, -2, -1], [2, 2, 6], size=(N, q, 3)).reshape(-1, 3)).reshape(N, q, 3)
        px = rng.uniform(0, [CAM.width, CAM.height], size=(N, 2))
        tau = float(rng.uniform(1, 20))
        corr = CorrespondenceSet(px, world, counts, CAM)
        R, t = reference.world_to_camera(pose.quat.tolist(), pose.translation.tolist())
        ref = [
            reference.reprojection_error(R, t, CAM.fx, CAM.fy, CAM.cx, CAM.cy, px[j], world[j, : counts[j]].tolist())
            for j in range(N)
        ]
        ours = [reproj_error(pose, (px[j], world[j, : counts[j]]), CAM) for j in range(N)]
        worst = max(worst, np.max(np.abs(np.subtract(ours, ref)) / np.maximum(1.0, np.abs(ref))))
        s_ref = reference.kernel_sum(ref, tau)
        worst = max(worst, abs(consensus_score(pose, corr, tau) - s_ref) / max(1.0, s_ref))
    mid = kernel_score(np.full(37, 10.0), 10.0)
    # the same midpoint through geometry: every pixel sits exactly tau to the right of its projection
    pose, pts, px = visible_instance(rng, 12)
    corr = CorrespondenceSet(px + [10.0, 0.0], pts[:, None, :], np.ones(12, dtype=int), CAM)
    geo = consensus_score(pose, corr, 10.0)
    ok = worst <= 1e-12 and mid == 18.5 and abs(geo - 6.0) < 1e-9
    verdict(2, "one-to-many scoring oracle", ok, f"max rel diff={worst:.1e}, midpoint={mid}, geometric={geo:.12f}")


def test_c03_ransac_robustness(verdict, default_world):
    cfg, _, query, tree = default_world
    frozen = PILOT["ransac_robustness"]
    radius = frozen["mean_leaf_radius"]
    assert tree.mean_leaf_radius() == pytest.approx(radius, rel=1e-9)
    cam = cfg.camera
    successes, errors = 0, []
    for seed in range(frozen["seeds"]):
        rng = np.random.default_rng(seed)
        depth, truth = query[seed % len(query)]
        lab = label_view(tree, depth, truth, cam, 1)
        idx = rng.choice(len(lab.pixels), 500, replace=False)
        leaves = np.array([tree.leaf_index(c) for c in composite_ids(lab.levels[idx], tree.m)])
        for j in rng.choice(500, 200, replace=False):
            wrong = leaves[j]
            while wrong == leaves[j]:
                wrong = rng.integers(tree.n_leaves)
            leaves[j] = wrong
        px = lab.pixels[idx] + rng.normal(0, 0.5, (500, 2))
        corr = CorrespondenceSet.from_lists(px, [tree.leaf_centers[l] for l in leaves], cam)
        res = estimate_pose(corr, RansacConfig(256, 10.0, 20, seed))
        te, _ = pose_error(res.pose, truth)
        errors.append(te)
        successes += te < radius
    need = frozen["required_successes"]
    verdict(
        3,
        "RANSAC robustness",
        successes >= need,
        f"{successes}/{frozen['seeds']} below radius {radius:.4f}, need {need}; median {np.median(errors):.3f}",
    )


def test_c04_refinement_contract(verdict):
    rng = np.random.default_rng(104)
    worst, monotone, stops = 0.0, True, []
    for trial in range(30):
        pose, pts, px = visible_instance(rng, 40)
        corr = CorrespondenceSet(px, pts[:, None, :], np.ones(40, dtype=int), CAM)
        axis = rng.normal(size=3)
        start = Se3Pose.from_rotvec(axis / np.linalg.norm(axis) * np.radians(3.0)).compose(pose)
        start = Se3Pose(start.quat, start.translation + rng.normal(scale=0.05, size=3))
        out = refine(start, corr, RansacConfig(tau=1e3))
        te, _ = pose_error(out.pose, pose)
        ang = out.pose.inverse().compose(pose).rotation_angle()
        worst = max(worst, ang, te / np.linalg.norm(pose.translation))
        monotone &= all(after <= before for before, after in out.cost_log)
        # noisy, ambiguous problem with the convergence tests disabled runs until the hard stop
        noisy = CorrespondenceSet(px + rng.normal(scale=3.0, size=px.shape), np.stack([pts, pts[::-1]], 1),
                                  np.full(40, 2), CAM)
        hard = refine(start, noisy, RansacConfig(tau=1e4), update_tol=0.0, cost_tol=-1.0)
        monotone &= all(after <= before for before, after in hard.cost_log)
        stops.append(hard.iterations)
    ok = worst < 1e-6 and monotone and max(stops) == 20
    verdict(4, "refinement contract", ok, f"worst recovery={worst:.1e}, monotone={monotone}, max iterations={max(stops)}")


def test_c05_gradient_check(verdict):
    rng = np.random.default_rng(105)
    worst, skipped = 0.0, 0
    for _ in range(200):
        m, n = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        dim, hidden, hh = (int(rng.integers(3, 6)) for _ in range(3))
        p = clf.init_params(dim, m, n, hidden, hh, seed=int(rng.integers(1 << 30)))
        for k in p.keys():
            p[k] = p[k] + 0.5 * rng.normal(size=p[k].shape)
        F = rng.normal(size=(4, dim))
        Y = rng.integers(0, m, size=(4, n))
        _, g = clf.loss_and_grad(p, F, Y)
        errs, sk = reference.finite_difference_errors(p.copy().tensors, g.tensors, m, n, F, Y)
        worst, skipped = max(worst, max(errs.values())), skipped + sk
    verdict(5, "classifier gradient check", worst < 1e-4, f"worst tensor rel error={worst:.1e}, kink coords skipped={skipped}")


def test_c06_loss_anchor(verdict):
    p = clf.init_params(32, 64, 2, hidden=16, seed=0)
    F = np.random.default_rng(106).normal(size=(50, 32))
    Y = np.random.default_rng(107).integers(0, 64, size=(50, 2))
    loss, _ = clf.loss_and_grad(p, F, Y)
    ok = abs(loss - 2 * math.log(64)) < 1e-6 and abs(loss - 8.3178) < 5e-5
    verdict(6, "loss anchor", ok, f"loss={loss:.7f}")


def test_c07_reptile_identity(verdict):
    rng = np.random.default_rng(108)
    worst = 0.0
    for _ in range(20):
        p = clf.init_params(6, 3, 2, 5, 4, seed=int(rng.integers(1 << 30)))
        for k in p.keys():
            p[k] = p[k] + 0.3 * rng.normal(size=p[k].shape)
        F = rng.normal(size=(8, 6))
        Y = rng.integers(0, 3, size=(8, 2))
        eta, eps = float(rng.uniform(1e-4, 0.1)), float(rng.uniform(0, 1))
        out = clf.reptile_step(p, [(F, Y)], eta, eps)
        _, g = clf.loss_and_grad(p, F, Y)
        worst = max(worst, np.max(np.abs(out.flatten() - p.axpy(-eps * eta, g).flatten())))
    verdict(7, "Reptile identity", worst <= 1e-12, f"max abs diff={worst:.1e}")


def test_c08_meta_learning_benefit(verdict):
    cfg = harness.ExperimentConfig()
    cfg.scene.train_views = 10
    cfg.scene.label_stride = 4
    tasks = harness.meta_tasks(cfg, 3, 100)
    held_out = harness.meta_tasks(cfg, 1, 200)[0]
    mc = clf.MetaConfig(cfg.meta.inner_steps, cfg.meta.inner_lr, cfg.meta.outer_step, cfg.meta.iterations)
    ratios = []
    for seed in range(10):
        init = clf.init_params(cfg.descriptors.dim, cfg.tree.m, cfg.tree.n, cfg.classifier.hidden, seed=seed)
        pre = clf.reptile_pretrain(init, tasks, mc, seed)
        tc = clf.TrainConfig(1500, cfg.classifier.learning_rate, seed=seed)
        cold = clf.train_fast(init, held_out, tc, target_accuracy=0.9).reached_at
        warm = clf.train_fast(pre, held_out, tc, target_accuracy=0.9).reached_at
        ratios.append((warm or math.inf) / (cold or math.inf))
    med = float(np.median(ratios))
    verdict(8, "meta-learning benefit", med <= 0.7, f"median iterations ratio={med:.2f}, per seed={np.round(ratios, 2).tolist()}")


@pytest.fixture(scope="module")
def trained(default_world):
    cfg, train, _, tree = default_world
    data = harness.labeled_dataset(tree, train, harness.make_descriptor_provider(cfg), cfg.camera, cfg.scene.label_stride)
    c = cfg.classifier
    res = clf.train_fast(harness._init_params(cfg), data, clf.TrainConfig(c.iterations, c.learning_rate, seed=c.seed))
    return res.params, clf.accuracy(res.params, data)


def test_default_training_accuracy(trained):
    assert trained[1] >= 0.95


def test_c09_leaf_granularity_trend(verdict, default_world, trained):
    cfg, _, _, tree = default_world
    many = harness.ExperimentConfig()
    many.scene.query_views = 20
    _, _, query = harness.synth_views(many)
    medians = {}
    for q in (10, 1):
        results = harness.localize_views(cfg, cluster_leaves(tree, q, cfg.tree.seed), trained[0], query, "classifier")
        medians[q] = float(np.median([r.translation_error for r in results]))
    verdict(9, "leaf-granularity trend", medians[10] <= medians[1],
            f"median translation q=10 {medians[10]:.3f} vs q=1 {medians[1]:.3f} over {len(query)} query seeds")


def test_c10_partition_structure(verdict, default_world):
    cfg, train, _, _ = default_world
    cloud = fuse_point_cloud(train, cfg.camera, cfg.scene.fuse_stride)
    a = build_tree(cloud, 64, 2, seed=0)
    b = build_tree(cloud, 64, 2, seed=0)
    members = np.sort(np.concatenate(a.leaf_members))
    exact = np.array_equal(members, np.arange(len(cloud.points)))
    same = dump_tree(a) == dump_tree(b)
    ok = same and a.n_leaves <= 4096 and exact
    verdict(10, "partition determinism and structure", ok, f"identical={same}, leaves={a.n_leaves}, exact partition={exact}")


def test_c11_oracle_bypass(verdict, tmp_path):
    frozen = PILOT["oracle_bypass"]
    cfg = harness.ExperimentConfig()
    harness.gen_scene(cfg, tmp_path)
    tree = harness.build_tree_stage(cfg, tmp_path)
    # depth files are quantized, so the radius matches the in-memory pilot only to ~1e-8
    assert tree.mean_leaf_radius() == pytest.approx(frozen["mean_leaf_radius"], rel=1e-6)
    report = harness.localize_stage(cfg, tmp_path, mode="oracle-labels")
    ok = report.median_translation < frozen["mean_leaf_radius"] and report.median_rotation < frozen["max_median_rotation_deg"]
    verdict(11, "end-to-end oracle bypass", ok,
            f"median {report.median_translation:.3f} vs radius {frozen['mean_leaf_radius']:.3f}, rotation {report.median_rotation:.2f} deg")


def test_c12_geometry_roundtrips(verdict):
    rng = np.random.default_rng(112)
    worst = 0.0
    for _ in range(1000):
        a, b = random_pose(rng), random_pose(rng)
        px = rng.uniform(0, [CAM.width, CAM.height])
        depth = float(rng.uniform(0.2, 10.0))
        X = backproject(a, CAM, px, depth)
        worst = max(worst, np.max(np.abs(project(a, CAM, X) - px)))
        worst = max(worst, np.max(np.abs(a.compose(a.inverse()).as_matrix() - np.eye(4))))
        worst = max(worst, np.max(np.abs(a.compose(b).inverse().as_matrix() - b.inverse().compose(a.inverse()).as_matrix())))
        worst = max(worst, np.max(np.abs(Se3Pose.from_matrix(a.rotation, a.translation).as_matrix() - a.as_matrix())))
    verdict(12, "geometry round-trips", worst <= 1e-9, f"max abs diff={worst:.1e}")
