import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from tossfuse.config import IcpConfig
from tossfuse.errors import DegenerateCorrespondenceError, InsufficientOverlapError
from tossfuse.geometry import RigidPose, compose, invert
from tossfuse.icp import best_rigid_transform, icp_align, nearest_correspondences, subsample
from tossfuse.metrics import rotation_translation_error


def brute_force_pairs(source, target, max_dist):
    pairs = []
    for i, point in enumerate(source):
        distances = np.linalg.norm(target - point, axis=1)
        j = int(np.argmin(distances))
        if distances[j] <= max_dist:
            pairs.append((i, j))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def random_perturbation(rng, max_degrees=20.0, max_shift=0.05) -> RigidPose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0, max_degrees))
    shift = rng.normal(size=3)
    shift *= rng.uniform(0, max_shift) / np.linalg.norm(shift)
    return RigidPose.from_rotvec(axis * angle, shift)


def object_cloud(rng, count=500) -> np.ndarray:
    # Anisotropic blob, so the alignment is well conditioned.
    return rng.normal(size=(count, 3)) * [0.05, 0.03, 0.02]


def test_identical_clouds_pair_up():
    cloud = np.random.default_rng(0).normal(size=(50, 3))
    pairs = nearest_correspondences(cloud, cloud, 0.01)
    assert np.array_equal(pairs, np.column_stack([np.arange(50), np.arange(50)]))


def test_single_pair_within_range():
    pairs = nearest_correspondences([[0, 0, 0]], [[0, 0, 0.001], [1, 1, 1]], 0.01)
    assert pairs.tolist() == [[0, 0]]
    assert nearest_correspondences([[0, 0, 0]], [[0, 0, 0.5]], 0.01).shape == (0, 2)


def test_correspondences_match_brute_force():
    rng = np.random.default_rng(1)
    source, target = rng.uniform(size=(200, 3)), rng.uniform(size=(200, 3))
    for max_dist in (0.05, 0.1, 1.0):
        assert np.array_equal(nearest_correspondences(source, target, max_dist),
                              brute_force_pairs(source, target, max_dist))


def test_ties_take_lowest_index():
    pairs = nearest_correspondences([[0, 0, 0]], [[0.1, 0, 0], [0, 0, 0.2], [-0.1, 0, 0]], 1.0)
    assert pairs.tolist() == [[0, 0]]
    pairs = nearest_correspondences([[0, 0, 0]], [[0, 0, 0.2], [-0.1, 0, 0], [0.1, 0, 0]], 1.0)
    assert pairs.tolist() == [[0, 1]]


def test_many_way_ties_take_lowest_index():
    axes = np.vstack([np.eye(3), -np.eye(3)]) * 0.1
    rng = np.random.default_rng(9)
    for _ in range(10):
        target = np.vstack([[0, 0, 0.5], [0.3, 0, 0]] + list(axes[rng.permutation(6)]))
        assert nearest_correspondences([[0, 0, 0]], target, 1.0).tolist() == [[0, 2]]

    three = [[0, 0.1, 0], [0, 0, 0.1], [0.1, 0, 0]]
    for order in ([0, 1, 2], [2, 1, 0], [1, 2, 0], [2, 0, 1]):
        target = np.array([[0, 0, 0.4]] + [three[i] for i in order])
        assert nearest_correspondences([[0, 0, 0]], target, 1.0).tolist() == [[0, 1]]


def test_best_rigid_transform_exact():
    rng = np.random.default_rng(2)
    target = object_cloud(rng, 100)
    assert np.allclose(best_rigid_transform(target, target).as_matrix4(), np.eye(4), atol=1e-9)

    known = random_perturbation(rng)
    source = known.apply(target)
    recovered = best_rigid_transform(source, target)
    assert np.allclose(recovered.as_matrix4(), invert(known).as_matrix4(), atol=1e-9)
    rotation = recovered.matrix
    assert np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-9)
    assert np.linalg.det(rotation) == pytest.approx(1.0)


def test_best_rigid_transform_beats_truth_on_noise():
    rng = np.random.default_rng(3)
    target = object_cloud(rng, 100)
    known = random_perturbation(rng)
    source = invert(known).apply(target) + rng.normal(scale=0.001, size=target.shape)

    def objective(pose):
        return np.sum((target - pose.apply(source)) ** 2)

    assert objective(best_rigid_transform(source, target)) <= objective(known)


def test_best_rigid_transform_rejects_degenerate():
    with pytest.raises(DegenerateCorrespondenceError):
        best_rigid_transform([[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [1, 0, 0]])
    line = np.outer(np.arange(5), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateCorrespondenceError):
        best_rigid_transform(line, line)


def test_icp_recovers_small_motion():
    rng = np.random.default_rng(4)
    source = object_cloud(rng)
    known = RigidPose.from_rotvec(np.radians(10) * np.array([0, 0, 1.0]), [0.02, 0, 0])
    result = icp_align(source, known.apply(source))
    rotation_error, translation_error = rotation_translation_error(result.pose, known)
    assert rotation_error < 0.5
    assert translation_error < 1e-3


def test_icp_identity():
    source = object_cloud(np.random.default_rng(5))
    result = icp_align(source, source)
    assert result.rms_error < 1e-12
    assert result.converged and result.iterations == 1
    assert np.allclose(result.pose.as_matrix4(), np.eye(4), atol=1e-9)


def test_icp_keeps_pose_when_rms_rises():
    # The aligning step pulls a stray point inside the gate, which raises the RMS.
    grid = np.stack(np.meshgrid(*[np.arange(3) * 0.05] * 3, indexing='ij'), axis=-1).reshape(-1, 3)
    source = np.vstack([grid + [0.005, 0, 0], [[1.0, 0, 0]]])
    target = np.vstack([grid, [[1.0 - 0.104, 0, 0]]])
    config = IcpConfig(max_correspondence_distance=0.1, min_correspondences=3)
    result = icp_align(source, target, config)
    assert result.converged
    assert np.allclose(result.pose.as_matrix4(), np.eye(4))
    assert result.rms_error == pytest.approx(0.005)
    assert result.history == [result.rms_error]


def test_icp_disjoint_clouds():
    source = object_cloud(np.random.default_rng(6))
    with pytest.raises(InsufficientOverlapError):
        icp_align(source, source + [10.0, 0, 0])
    with pytest.raises(InsufficientOverlapError):
        icp_align(source[:5], source[:5])


def test_icp_random_perturbations():
    rng = np.random.default_rng(7)
    config = IcpConfig(max_iterations=50, max_correspondence_distance=1.0)
    recovered = 0
    for _ in range(100):
        source = object_cloud(rng)
        known = random_perturbation(rng)
        result = icp_align(source, known.apply(source), config)
        assert (np.diff(result.history) <= 1e-12).all()
        assert result.iterations <= 50
        rotation_error, translation_error = rotation_translation_error(result.pose, known)
        recovered += rotation_error < 0.5 and translation_error < 1e-3
    assert recovered >= 90


def test_icp_equivariance():
    rng = np.random.default_rng(8)
    source = object_cloud(rng)
    known = RigidPose.from_rotvec([0, 0.1, 0.05], [0.01, 0.005, 0])
    target = known.apply(source)
    g = RigidPose.from_rotation(Rotation.random(None, rng), rng.normal(size=3))
    direct = icp_align(source, target).pose
    moved = icp_align(g.apply(source), g.apply(target)).pose
    expected = compose(g, compose(direct, invert(g)))
    assert np.allclose(moved.as_matrix4(), expected.as_matrix4(), atol=1e-6)


def test_subsample():
    cloud = np.arange(30, dtype=float).reshape(10, 3)
    assert len(subsample(cloud, 4)) <= 4
    assert np.array_equal(subsample(cloud, 0), cloud)
    assert np.array_equal(subsample(cloud, 20), cloud)
