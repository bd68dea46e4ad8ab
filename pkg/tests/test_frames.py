import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ray_box
from semloc.frames import (CameraIntrinsics, FrameFormatError, NoDepthError, SemanticFrame, back_project,
                           frame_dir, frame_indices, load_frame, quantize_depth, read_pgm, write_camera,
                           write_frame, write_pgm)
from semloc.geometry import Pose, look_rotation, so3_exp
from semloc.synth import TrajectorySpec, render_frame, simulate_dataset, trajectory_poses


def _frame(labels, depth=None, pose=None, instances=None):
    h, w = labels.shape
    cam = CameraIntrinsics(10.0, 10.0, (w - 1) / 2, (h - 1) / 2, w, h)
    depth = np.ones(labels.shape) if depth is None else depth
    return SemanticFrame(labels, depth, pose or Pose.identity(), cam, instances)


def test_all_void_frame_loads(tmp_path):
    f = _frame(np.zeros((4, 4), dtype=int), np.zeros((4, 4)))
    write_camera(tmp_path, f.camera)
    write_frame(tmp_path, 0, f)
    g = load_frame(tmp_path, 0)
    assert g.labels.shape == (4, 4) and np.count_nonzero(g.labels == 0) == 16


def test_missing_frame(tmp_path):
    f = _frame(np.zeros((4, 4), dtype=int))
    write_camera(tmp_path, f.camera)
    write_frame(tmp_path, 0, f)
    with pytest.raises(FileNotFoundError, match="missing file"):
        load_frame(tmp_path, 7)
    assert frame_indices(tmp_path) == [0]


def test_round_trip_exact(tmp_path, rng):
    labels = rng.integers(0, 8, (6, 9))
    depth = quantize_depth(rng.uniform(0, 60, (6, 9)))
    inst = rng.integers(0, 500, (6, 9))
    pose = Pose.from_rt(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 50)
    f = _frame(labels, depth, pose, inst)
    write_camera(tmp_path, f.camera)
    write_frame(tmp_path, 2, f)
    g = load_frame(tmp_path, 2)
    assert np.array_equal(g.labels, labels) and np.array_equal(g.instances, inst)
    assert np.array_equal(g.depth, depth)
    np.testing.assert_allclose(g.odom_pose.matrix(), pose.matrix(), atol=1e-9)
    assert g.camera == f.camera


def test_text_files_are_ascii_lines(tmp_path):
    f = _frame(np.zeros((2, 3), dtype=int))
    write_camera(tmp_path, f.camera)
    write_frame(tmp_path, 0, f)
    for path in (tmp_path / "camera.txt", frame_dir(tmp_path, 0) / "pose.txt"):
        text = path.read_bytes()
        text.decode("ascii")
        assert text.endswith(b"\n") and text.count(b"\n") == 1
    assert len((frame_dir(tmp_path, 0) / "pose.txt").read_text().split()) == 7


def test_dimension_mismatch(tmp_path):
    f = _frame(np.zeros((4, 4), dtype=int))
    write_camera(tmp_path, f.camera)
    write_frame(tmp_path, 0, f)
    write_pgm(frame_dir(tmp_path, 0) / "depth.pgm", np.zeros((4, 5), dtype=int))
    with pytest.raises(FrameFormatError):
        load_frame(tmp_path, 0)


@pytest.mark.parametrize("line", ["1 2 3 0 0 0", "1 2 3 0 0 0 x", "1 2 3 0 0 0 2"])
def test_bad_pose_line(tmp_path, line):
    f = _frame(np.zeros((4, 4), dtype=int))
    write_camera(tmp_path, f.camera)
    write_frame(tmp_path, 0, f)
    (frame_dir(tmp_path, 0) / "pose.txt").write_text(line + "\n")
    with pytest.raises(FrameFormatError):
        load_frame(tmp_path, 0)


def test_near_unit_quaternion_normalized(tmp_path):
    f = _frame(np.zeros((4, 4), dtype=int))
    write_camera(tmp_path, f.camera)
    write_frame(tmp_path, 0, f)
    (frame_dir(tmp_path, 0) / "pose.txt").write_text("1 2 3 0 0 0 1.0004\n")
    g = load_frame(tmp_path, 0)
    np.testing.assert_allclose(g.odom_pose.quat, [0, 0, 0, 1], atol=1e-15)


def test_pgm_with_comment(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n65535\n" + np.array([7, 300], dtype=">u2").tobytes())
    assert read_pgm(path).tolist() == [[7, 300]]
    path.write_bytes(b"P5\n2 1\n65535\n\x00")
    with pytest.raises(FrameFormatError):
        read_pgm(path)


def test_frame_validation():
    with pytest.raises(FrameFormatError):
        _frame(np.zeros((4, 4), dtype=int), -np.ones((4, 4)))
    with pytest.raises(FrameFormatError):
        _frame(np.zeros((4, 4), dtype=int), np.ones((4, 3)))
    with pytest.raises(FrameFormatError):
        CameraIntrinsics(10, 10, 5, 2, 4, 4)
    f = _frame(np.zeros((4, 4), dtype=int))
    with pytest.raises(ValueError):
        f.labels[0, 0] = 3


def test_back_project_principal_ray():
    labels = np.ones((5, 5), dtype=int)
    f = _frame(labels, np.full((5, 5), 2.0))
    np.testing.assert_allclose(back_project(f, 2, 2), [0, 0, 2])
    g = _frame(labels, np.full((5, 5), 2.0), Pose.from_rt(np.eye(3), [1, 0, 0]))
    np.testing.assert_allclose(back_project(g, 2, 2), [1, 0, 2])


def test_back_project_no_depth():
    f = _frame(np.ones((3, 3), dtype=int), np.zeros((3, 3)))
    with pytest.raises(NoDepthError):
        back_project(f, 1, 1)


@settings(max_examples=50)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-50, 50), min_size=3, max_size=3),
       st.integers(0, 7), st.integers(0, 5), st.floats(0.1, 60))
def test_back_project_equivariant(r, t, u, v, d):
    labels = np.ones((6, 8), dtype=int)
    depth = np.full((6, 8), d)
    pose = Pose.from_rt(so3_exp(r), t)
    a = back_project(_frame(labels, depth, pose), u, v)
    b = pose.apply(back_project(_frame(labels, depth), u, v))
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_back_project_lands_on_box_face(small_world, camera):
    pose = Pose.from_rt(look_rotation(0.3, -0.05), [40.0, 45.0, 1.6])
    f = render_frame(small_world, pose, camera)
    hits = 0
    for v in range(0, camera.height, 7):
        for u in range(0, camera.width, 5):
            oid = f.instances[v, u]
            if oid == 0:
                continue
            box = next(b for b in small_world.objects if b.object_id == oid)
            p = back_project(f, u, v)
            ray = pose.rotation @ camera.rays(u, v)
            t = ray_box(pose.trans, ray, box.lo, box.hi)
            np.testing.assert_allclose(p, pose.trans + t * ray, atol=1e-6)
            # the point lies on the box surface
            assert np.all(p >= box.lo - 1e-6) and np.all(p <= box.hi + 1e-6)
            assert np.min(np.abs(np.concatenate([p - box.lo, box.hi - p]))) < 1e-6
            hits += 1
    assert hits > 10


def test_rendered_dataset_round_trip(tmp_path, small_world, camera):
    traj = TrajectorySpec("forward", path=((10.0, 45.0), (40.0, 45.0)), step=5.0)
    sim = simulate_dataset(small_world, traj, camera, tmp_path, odom_noise=0.1, rng_seed=3)
    f = load_frame(tmp_path, 3)
    ref = sim.frames[3]
    assert np.array_equal(f.labels, ref.labels)
    assert np.array_equal(f.instances, ref.instances)
    assert np.array_equal(f.depth, ref.depth)
    np.testing.assert_allclose(f.odom_pose.matrix(), ref.odom_pose.matrix(), atol=1e-12)
    raw = render_frame(small_world, trajectory_poses(traj)[3], camera)
    assert np.array_equal(f.labels, raw.labels)
    assert np.max(np.abs(f.depth - raw.depth)) <= 0.0005 + 1e-12

