import numpy as np
import pytest
from scipy.spatial import cKDTree

from regionloc.geometry import PinholeCamera, Se3Pose, fuse_point_cloud, project_points
from regionloc.synth import coverage, generate_scene, render_depth, sample_views, save_manifest, scene_from_manifest

CAM = PinholeCamera.default()


@pytest.fixture(scope="module")
def scene():
    return generate_scene(3, 8000, 4.0)


def test_generate_scene_contract(scene):
    again = generate_scene(3, 8000, 4.0)
    assert again.points.tobytes() == scene.points.tobytes()
    assert 3 <= len(scene.primitives) <= 6
    assert len(scene.points) == 8000 == sum(scene.counts)
    assert np.linalg.norm(scene.points - scene.centroid, axis=1).max() <= 2.0 + 1e-9
    assert len(generate_scene(0, 1).points) == 1
    with pytest.raises(ValueError):
        generate_scene(0, 0)


def test_manifest_roundtrip(tmp_path, scene):
    save_manifest(tmp_path / "m.json", scene, {"note": 1})
    back, doc = scene_from_manifest(tmp_path / "m.json")
    assert back.points.tobytes() == scene.points.tobytes()
    assert doc["note"] == 1


def test_single_view_looks_at_centroid(scene):
    (pose,) = sample_views(scene, 1, seed=4, camera=CAM).poses
    axis = pose.rotation[:, 2]
    to_centre = scene.centroid - pose.translation
    miss = np.linalg.norm(to_centre - (to_centre @ axis) * axis)
    assert miss <= 0.1 * scene.diameter


def test_views_deterministic_visible_and_distinct(scene):
    a = sample_views(scene, 5, seed=1, camera=CAM)
    b = sample_views(scene, 5, seed=1, camera=CAM)
    c = sample_views(scene, 5, seed=2, camera=CAM)
    assert [p.to_bytes() for p in a.poses] == [p.to_bytes() for p in b.poses]
    assert all(p.to_bytes() != q.to_bytes() for p, q in zip(a.poses, c.poses))
    for pose in a.poses:
        px, ok = project_points(pose, CAM, scene.points)
        assert np.mean(ok & CAM.in_bounds(np.nan_to_num(px, nan=-1))) >= 0.1
    with pytest.raises(RuntimeError):
        sample_views(scene, 2, seed=0, camera=CAM, min_visible=1.01)


def test_render_single_point():
    depth = render_depth(np.array([[0.0, 0.0, 2.0]]), Se3Pose.identity(), CAM)
    assert depth[60, 80] == 2.0 and np.count_nonzero(depth) == 1
    assert np.count_nonzero(render_depth(np.array([[0.0, 0.0, -2.0]]), Se3Pose.identity(), CAM)) == 0


def test_render_keeps_nearest():
    pts = np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 2.0], [0.0, 0.0, 5.0]])
    depth, index = render_depth(pts, Se3Pose.identity(), CAM, return_index=True)
    assert depth[60, 80] == 2.0 and index[60, 80] == 1


def test_render_fuse_bound(scene):
    views = sample_views(scene, 3, seed=5, camera=CAM)
    for pose in views.poses:
        depth = render_depth(scene, pose, CAM)
        fused = fuse_point_cloud([(depth, pose)], CAM).points
        dist, _ = cKDTree(scene.points).query(fused)
        local_z = pose.inverse().apply(fused)[:, 2]
        bound = local_z * np.sqrt(2) / CAM.fx
        assert np.all(dist <= bound + 1e-9)


def test_twenty_views_cover_scene(scene):
    views = sample_views(scene, 20, seed=6, camera=CAM)
    fused = fuse_point_cloud([(render_depth(scene, p, CAM), p) for p in views.poses], CAM).points
    assert coverage(scene, fused, tolerance=0.05 * scene.diameter) >= 0.8
