import numpy as np
import pytest

from regionloc.descriptors import (
    DescriptorMap,
    FileDescriptors,
    OracleDescriptor,
    describe_view,
    load_descriptors,
    make_provider,
    oracle_describe,
    save_descriptors,
)
from regionloc.geometry import PinholeCamera, Se3Pose, look_at

CAM = PinholeCamera(60.0, 60.0, 20.0, 15.0, 40, 30)


def cosine(a, b):
    return np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def test_noise_free_is_deterministic():
    p = np.array([0.3, -0.2, 1.1])
    assert np.array_equal(oracle_describe(4, p), oracle_describe(4, p))
    assert np.array_equal(oracle_describe(4, p, rng_stream=1), oracle_describe(4, p, rng_stream=9))


def test_distinctness_one_unit_apart():
    rng = np.random.default_rng(0)
    prov = OracleDescriptor(1, dim=32)
    a = rng.uniform(-2, 2, size=(1000, 3))
    d = rng.normal(size=(1000, 3))
    b = a + d / np.linalg.norm(d, axis=1, keepdims=True)
    sims = cosine(prov.describe_points(a), prov.describe_points(b))
    assert sims.max() < 0.99


def test_noise_magnitude():
    prov = OracleDescriptor(2, dim=32, noise_sigma=0.1)
    pts = np.random.default_rng(1).uniform(-1, 1, size=(10000 // 32 + 1, 3))
    diff = prov.describe_points(pts, rng_stream=3) - prov.base(pts)
    assert abs(diff.std() - 0.1) <= 0.01
    with pytest.raises(ValueError):
        OracleDescriptor(0, noise_sigma=-1.0)


def test_cross_scene_shift_changes_embedding():
    p = np.array([[0.1, 0.2, 0.3]])
    a = OracleDescriptor(0, cross_scene_shift=0.0).base(p)
    b = OracleDescriptor(0, cross_scene_shift=0.5, shift_seed=1).base(p)
    c = OracleDescriptor(0, cross_scene_shift=0.5, shift_seed=2).base(p)
    assert not np.allclose(a, b) and not np.allclose(b, c)


def test_view_consistency_and_stride():
    prov = OracleDescriptor(5, dim=16)
    depth = np.full((30, 40), 2.0)
    pose_a = Se3Pose.identity()
    one = np.zeros((30, 40))
    one[15, 20] = 2.0
    assert len(describe_view(prov, (one, pose_a), CAM)) == 1
    full = describe_view(prov, (depth, pose_a), CAM, stride=1)
    half = describe_view(prov, (depth, pose_a), CAM, stride=2)
    assert len(full) == 4 * len(half)
    # the centre pixel's point seen from a second camera gets the same descriptor
    point = full.points[15 * 40 + 20]
    pose_b = look_at([1.0, 0.5, -1.0], point)
    depth_b = np.zeros((30, 40))
    z = pose_b.inverse().apply(point[None])[0, 2]
    depth_b[15, 20] = z
    other = describe_view(prov, (depth_b, pose_b), CAM)
    np.testing.assert_allclose(other.points[0], point, atol=1e-12)
    np.testing.assert_allclose(other.descriptors[0], full.descriptors[15 * 40 + 20], atol=1e-12)


def test_descriptor_file_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    dm = DescriptorMap(8, rng.uniform(0, 30, (20, 2)).round(), rng.normal(size=(20, 8)))
    save_descriptors(tmp_path / "000000.srcd", dm)
    back = load_descriptors(tmp_path / "000000.srcd")
    np.testing.assert_allclose(back.descriptors, dm.descriptors.astype(np.float32))
    raw = bytearray((tmp_path / "000000.srcd").read_bytes())
    raw[4] = 5
    (tmp_path / "bad.srcd").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        load_descriptors(tmp_path / "bad.srcd")


def test_file_provider(tmp_path):
    depth = np.zeros((30, 40))
    depth[::2, ::2] = 1.5
    prov = OracleDescriptor(0, dim=8)
    dm = prov.describe_view(depth, Se3Pose.identity(), CAM, stride=2, view_id=0)
    save_descriptors(tmp_path / "000000.srcd", dm)
    fp = make_provider(f"file:{tmp_path}")
    assert isinstance(fp, FileDescriptors) and fp.dim == 8
    got = fp.describe_view(depth, Se3Pose.identity(), CAM, stride=2, view_id=0)
    np.testing.assert_array_equal(got.pixels, dm.pixels)
    np.testing.assert_allclose(got.descriptors, dm.descriptors, atol=1e-6)
    with pytest.raises(FileNotFoundError):
        make_provider(f"file:{tmp_path / 'missing'}")
    with pytest.raises(ValueError):
        make_provider("superpoint")


def test_descriptor_map_validation():
    with pytest.raises(ValueError):
        DescriptorMap(2, np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        DescriptorMap(2, np.zeros((1, 2)), np.array([[np.inf, 0.0]]))
