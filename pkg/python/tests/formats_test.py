import json

import numpy as np
import pytest

from tossfuse.camera import CameraIntrinsics
from tossfuse.dataset import Clip, Frame, GroundTruth, TossDataset
from tossfuse.dynamics import ContactModel
from tossfuse.errors import ConfigError
from tossfuse.formats import (TRAJECTORY_COLUMNS, hash_tree, load_dataset, pose_from_list, read_depth, read_mask,
                              read_model, read_obj, read_ply, read_sdf, read_trajectory, save_dataset, write_depth,
                              write_json, write_mask, write_model, write_obj, write_ply, write_sdf,
                              write_trajectory)
from tossfuse.geometry import RigidPose, box_mesh
from tossfuse.sdf import SdfGrid

CAMERA = CameraIntrinsics(fx=50, fy=50, cx=8, cy=6, rows=12, cols=16)


def small_dataset() -> TossDataset:
    rng = np.random.default_rng(0)
    clips = []
    for i in range(2):
        frames = []
        for k in range(3):
            depth = np.where(rng.random((12, 16)) < 0.3, rng.uniform(0.3, 1.0, (12, 16)), 0.0)
            frames.append(Frame(depth.astype(np.float32).astype(np.float64), depth > 0, k / 30.0))
        poses = [RigidPose.from_rotvec([0.1 * k, 0, 0], [0, 0, 0.5 + i]) for k in range(3)]
        clips.append(Clip(frames, poses[0], poses))
    model = ContactModel.cube()
    return TossDataset(clips, CAMERA, RigidPose.from_rotvec([1.0, 0, 0], [0, -1, 0.4]), 1 / 30.0,
                       GroundTruth(model, box_mesh(0.06)), {'seed': 7})


def test_trajectory_keeps_full_precision(tmp_path):
    poses = [RigidPose.from_rotvec([0.1, 0.2, 0.3], [1 / 3, 2 / 7, 0.5]), RigidPose()]
    path = tmp_path / 'trajectory.csv'
    write_trajectory(path, poses, np.array([0.001, np.nan]))
    assert path.read_text().splitlines()[0] == ','.join(TRAJECTORY_COLUMNS)
    restored, rms = read_trajectory(path)
    assert np.allclose(restored[0].quaternion, poses[0].quaternion, rtol=0, atol=1e-15)
    assert np.allclose(restored[0].translation, poses[0].translation, rtol=0, atol=1e-15)
    assert rms[0] == pytest.approx(0.001, abs=1e-18) and np.isnan(rms[1])


def test_trajectory_rejects_wrong_columns(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text('frame,x,y\n0,1,2\n')
    with pytest.raises(ConfigError):
        read_trajectory(path)


def test_model_file(tmp_path):
    model = ContactModel.cube(side=0.05, mass=0.2, mu=0.25)
    path = tmp_path / 'model.txt'
    write_model(path, model)
    keys = [line.split()[0] for line in path.read_text().splitlines()[:4]]
    assert keys == ['mass', 'mu', 'inertia', 'vertices']
    restored = read_model(path)
    assert restored.mu == 0.25 and restored.mass == 0.2
    assert np.array_equal(restored.vertices, model.vertices)
    assert np.array_equal(restored.inertia, model.inertia)

    path.write_text('mass 0.1\nmu 0.3\n')
    with pytest.raises(ConfigError):
        read_model(path)


def test_obj_fan_triangulates_quads(tmp_path):
    path = tmp_path / 'quad.obj'
    path.write_text('# square\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n')
    mesh = read_obj(path)
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]
    assert mesh.area == pytest.approx(1.0)

    cube = box_mesh(0.06)
    write_obj(tmp_path / 'cube.obj', cube)
    assert read_obj(tmp_path / 'cube.obj').volume == pytest.approx(cube.volume)


def test_ply_point_cloud(tmp_path):
    vertices = ContactModel.cube().vertices + 1e-4 * np.arange(24).reshape(8, 3)
    write_ply(tmp_path / 'polytope.ply', vertices)
    lines = (tmp_path / 'polytope.ply').read_text().splitlines()
    assert lines[:3] == ['ply', 'format ascii 1.0', 'element vertex 8']
    assert np.allclose(read_ply(tmp_path / 'polytope.ply'), vertices, rtol=1e-8)

    (tmp_path / 'short.ply').write_text('ply\nelement vertex 2\nend_header\n0 0 0\n')
    with pytest.raises(ConfigError):
        read_ply(tmp_path / 'short.ply')
    (tmp_path / 'mesh.ply').write_text('solid cube\n')
    with pytest.raises(ConfigError):
        read_ply(tmp_path / 'mesh.ply')


def test_binary_frames(tmp_path):
    depth = np.zeros((12, 16))
    depth[3, 4] = 0.75
    mask = depth > 0
    write_depth(tmp_path / 'frame.dpt', depth)
    write_mask(tmp_path / 'frame.pgm', mask)
    assert np.array_equal(read_depth(tmp_path / 'frame.dpt'), depth)
    assert np.array_equal(read_mask(tmp_path / 'frame.pgm'), mask)
    assert (tmp_path / 'frame.pgm').read_bytes().startswith(b'P5\n16 12\n255\n')

    (tmp_path / 'short.dpt').write_bytes((tmp_path / 'frame.dpt').read_bytes()[:-4])
    with pytest.raises(ConfigError):
        read_depth(tmp_path / 'short.dpt')


def test_sdf_file(tmp_path):
    grid = SdfGrid.from_function(lambda x: np.linalg.norm(x, axis=1) - 0.25, [-0.5, -0.5, -0.5], 0.125,
                                 (9, 8, 7), 0.25)
    write_sdf(tmp_path / 'grid.sdf', grid)
    restored = read_sdf(tmp_path / 'grid.sdf')
    assert tuple(restored.dims) == (9, 8, 7)
    assert np.allclose(restored.values, grid.values, atol=1e-6)
    assert restored.voxel_size == pytest.approx(0.125)
    (tmp_path / 'junk.sdf').write_bytes(b'nope')
    with pytest.raises(ConfigError):
        read_sdf(tmp_path / 'junk.sdf')


def test_pose_from_list():
    pose = pose_from_list([1, 0, 0, 0, 0.1, 0.2, 0.3])
    assert np.allclose(pose.translation, [0.1, 0.2, 0.3])
    with pytest.raises(ConfigError):
        pose_from_list([1, 0, 0, 0])


def test_dataset_directory(tmp_path):
    dataset = small_dataset()
    save_dataset(dataset, tmp_path / 'data')
    assert (tmp_path / 'data' / 'clip_1' / 'frame_0002.dpt').exists()
    assert json.loads((tmp_path / 'data' / 'dataset.json').read_text())['metadata'] == {'seed': 7}

    restored = load_dataset(tmp_path / 'data')
    assert len(restored) == 2 and len(restored.clips[0]) == 3
    assert restored.dt == pytest.approx(1 / 30.0)
    assert restored.intrinsics == CAMERA
    for clip, original in zip(restored.clips, dataset.clips):
        assert np.array_equal(clip.frames[1].depth, original.frames[1].depth)
        assert np.array_equal(clip.frames[1].mask, original.frames[1].mask)
        assert np.allclose(clip.gt_poses[2].as_matrix4(), original.gt_poses[2].as_matrix4())
    assert restored.ground_truth.model.mu == dataset.ground_truth.model.mu


def test_hash_tree_skips_run_records(tmp_path):
    save_dataset(small_dataset(), tmp_path / 'a')
    save_dataset(small_dataset(), tmp_path / 'b')
    assert hash_tree(tmp_path / 'a') == hash_tree(tmp_path / 'b')

    write_json(tmp_path / 'a' / 'timings.json', {'seconds': 1.5})
    write_json(tmp_path / 'a' / 'manifest.json', {'artifacts': {}})
    write_json(tmp_path / 'a' / 'eval.json.manifest.json', {'artifacts': {}})
    assert hash_tree(tmp_path / 'a') == hash_tree(tmp_path / 'b')
    assert 'clip_0/frame_0000.pgm' in hash_tree(tmp_path / 'a')

    (tmp_path / 'b' / 'dataset.json').write_text('{}')
    assert hash_tree(tmp_path / 'a') != hash_tree(tmp_path / 'b')
