import numpy as np
import pytest

from tossfuse.camera import CameraIntrinsics, render_depth
from tossfuse.errors import EmptySurfaceError, InvalidInputError
from tossfuse.geometry import RigidPose, box_mesh
from tossfuse.sdf import SdfGrid, eikonal_residual, extract_surface, redistance, sdf_query, tsdf_integrate

CAMERA = CameraIntrinsics(fx=600, fy=600, cx=160, cy=120, rows=240, cols=320)
HALF = 0.03


def sphere_grid(radius=0.05, dims=64, voxel=0.0025, truncation=0.03) -> SdfGrid:
    origin = np.full(3, -(dims - 1) / 2 * voxel)
    return SdfGrid.from_function(lambda x: np.linalg.norm(x, axis=1) - radius, origin, voxel, (dims,) * 3,
                                 truncation)


def cube_distance(points: np.ndarray) -> np.ndarray:
    outside = np.linalg.norm(np.maximum(np.abs(points) - HALF, 0), axis=1)
    inside = np.minimum(np.abs(points).max(axis=1) - HALF, 0)
    return outside + inside


def cube_grid() -> SdfGrid:
    return SdfGrid.centered(0.064, dims=64, radius_scale=2.5, truncation_voxels=5)


def observe(pose: RigidPose):
    depth = render_depth(box_mesh(2 * HALF), pose, CAMERA)
    return depth, depth > 0


def test_grid_layout():
    grid = cube_grid()
    assert grid.voxel_size == pytest.approx(0.0025)
    assert np.allclose(grid.origin + grid.upper, 0)
    assert grid.truncation == pytest.approx(5 * grid.voxel_size)
    with pytest.raises(InvalidInputError):
        SdfGrid.empty([0, 0, 0], 0.01, (1, 4, 4), 0.05)


def test_sdf_query_interpolates():
    grid = sphere_grid()
    center = grid.origin + grid.voxel_size * np.array([20, 30, 40])
    value, in_bounds = sdf_query(grid, center)
    assert in_bounds and value == pytest.approx(grid.values[20, 30, 40], abs=1e-12)

    next_center = center + np.array([grid.voxel_size, 0, 0])
    midpoint, _ = sdf_query(grid, (center + next_center) / 2)
    assert midpoint == pytest.approx((grid.values[20, 30, 40] + grid.values[21, 30, 40]) / 2, abs=1e-15)

    value, _ = sdf_query(grid, [0.075, 0, 0])
    assert value == pytest.approx(0.025, abs=1e-4)

    samples = sdf_query(grid, [[1, 0, 0], [0, 0, 0]])
    assert list(samples.in_bounds) == [False, True]
    assert samples.values[0] == grid.truncation


def test_sdf_query_is_lipschitz():
    grid = sphere_grid()
    rng = np.random.default_rng(0)
    points = rng.uniform(-0.07, 0.07, size=(500, 3))
    step = rng.normal(size=(500, 3))
    step *= 1e-4 / np.linalg.norm(step, axis=1, keepdims=True)
    a = sdf_query(grid, points).values
    b = sdf_query(grid, points + step).values
    assert (np.abs(a - b) <= 1.8 * 1e-4).all()


def test_sphere_surface():
    grid = sphere_grid()
    mesh = extract_surface(grid)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(radii - 0.05).max() < grid.voxel_size
    values = sdf_query(grid, mesh.vertices).values
    assert np.abs(values).max() < grid.voxel_size


def test_uniform_grid_has_no_surface():
    grid = SdfGrid.from_function(lambda x: np.full(len(x), 0.01), [0, 0, 0], 0.01, (8, 8, 8), 0.05)
    with pytest.raises(EmptySurfaceError):
        extract_surface(grid)
    with pytest.raises(EmptySurfaceError):
        extract_surface(SdfGrid.empty([0, 0, 0], 0.01, (8, 8, 8), 0.05))


def test_eikonal_on_exact_sphere():
    grid = sphere_grid()
    rng = np.random.default_rng(1)
    directions = rng.normal(size=(300, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    samples = directions * rng.uniform(0.045, 0.055, size=(300, 1))
    report = eikonal_residual(grid, samples)
    assert report.mean < 1e-3
    assert report.excluded == 0


def test_eikonal_on_constant_grid():
    grid = SdfGrid.from_function(lambda x: np.zeros(len(x)), np.zeros(3), 0.01, (10, 10, 10), 0.05)
    report = eikonal_residual(grid, [[0.045, 0.045, 0.045], [1, 1, 1]])
    assert report.residuals == pytest.approx([1.0])
    assert report.excluded == 1


def test_integrate_empty_mask_is_noop():
    grid = cube_grid()
    before = grid.copy()
    depth, _ = observe(RigidPose(translation=(0, 0, 0.5)))
    tsdf_integrate(grid, depth, np.zeros_like(depth, dtype=bool), CAMERA, RigidPose(translation=(0, 0, 0.5)))
    assert np.array_equal(grid.values, before.values)
    assert np.array_equal(grid.weights, before.weights)
    with pytest.raises(InvalidInputError):
        tsdf_integrate(grid, depth[:10], depth[:10] > 0, CAMERA, RigidPose())


def test_integrate_twice_doubles_weights():
    pose = RigidPose.from_rotvec([0.4, 0.5, 0.1], [0, 0, 0.5])
    depth, mask = observe(pose)
    once = tsdf_integrate(cube_grid(), depth, mask, CAMERA, pose)
    twice = tsdf_integrate(tsdf_integrate(cube_grid(), depth, mask, CAMERA, pose), depth, mask, CAMERA, pose)
    assert np.array_equal(once.values, twice.values)
    assert np.array_equal(2 * once.weights, twice.weights)
    assert np.abs(once.values).max() <= once.truncation


def test_integrate_order_insensitive():
    a = RigidPose.from_rotvec([0.4, 0.5, 0.1], [0, 0, 0.5])
    b = RigidPose.from_rotvec([-0.6, 0.2, 0.3], [0.01, 0, 0.5])
    grid_ab, grid_ba = cube_grid(), cube_grid()
    for pose in (a, b):
        tsdf_integrate(grid_ab, *observe(pose), CAMERA, pose)
    for pose in (b, a):
        tsdf_integrate(grid_ba, *observe(pose), CAMERA, pose)
    assert np.abs(grid_ab.values - grid_ba.values).max() < 1e-6
    assert np.array_equal(grid_ab.weights, grid_ba.weights)


def test_single_view_surface_near_cube():
    pose = RigidPose.from_rotvec([0.4, 0.5, 0.1], [0, 0, 0.5])
    grid = tsdf_integrate(cube_grid(), *observe(pose), CAMERA, pose)
    mesh = extract_surface(grid)
    distance = np.abs(cube_distance(mesh.vertices))
    assert np.median(distance) < grid.voxel_size
    assert np.percentile(distance, 95) < 2 * grid.voxel_size


def test_eikonal_on_fused_face():
    pose = RigidPose(translation=(0, 0, 0.5))
    grid = tsdf_integrate(cube_grid(), *observe(pose), CAMERA, pose)
    rng = np.random.default_rng(2)
    samples = np.column_stack([rng.uniform(-0.02, 0.02, 200), rng.uniform(-0.02, 0.02, 200),
                               -HALF + rng.uniform(-0.002, 0.002, 200)])
    report = eikonal_residual(grid, samples)
    assert report.mean < 0.2


def test_redistance_recovers_sphere_distance():
    grid = sphere_grid()
    redone = redistance(grid.copy(), extract_surface(grid))
    assert np.array_equal(redone.values < 0, grid.values < 0)
    error = np.abs(redone.values - grid.values)
    assert np.median(error) < 0.1 * grid.voxel_size
    assert error.max() < 0.6 * grid.voxel_size


def test_redistance_fused_views():
    grid = cube_grid()
    for pose in (RigidPose.from_rotvec([0.4, 0.5, 0.1], [0, 0, 0.5]),
                 RigidPose.from_rotvec([-0.6, 0.2, 0.3], [0.01, 0, 0.5])):
        tsdf_integrate(grid, *observe(pose), CAMERA, pose)
    mesh = extract_surface(grid)
    redone = redistance(grid.copy(), mesh)
    unobserved = grid.weights == 0
    assert np.array_equal(redone.values[unobserved], grid.values[unobserved])
    assert np.array_equal(redone.values < 0, grid.values < 0)
    assert np.abs(redone.values).max() <= grid.truncation
    assert eikonal_residual(redone, mesh.vertices).mean < 0.2
