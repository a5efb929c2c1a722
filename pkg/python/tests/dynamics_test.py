import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from tossfuse.config import PgsConfig
from tossfuse.dynamics import (BodyState, ContactModel, RolloutReport, contact_jacobian, estimate_velocities,
                               evaluate_rollouts, integrate_pose, phi, rollout, simulate_step,
                               transitions_from_trajectory)
from tossfuse.errors import InvalidInputError, SolverError
from tossfuse.geometry import RigidPose

FPS = 30.0


def resting_cube(model: ContactModel) -> BodyState:
    return BodyState(RigidPose(translation=(0, 0, 0.03)))


def free_flight(model: ContactModel, steps=10, spin=(2.0, 1.0, 0.0)):
    initial = BodyState(RigidPose.from_rotvec([0.3, 0.1, 0], [0, 0, 1.0]), [1.0, 0, 0.5], spin)
    states = rollout(model, initial, steps, 1 / FPS, substeps=10)
    return np.arange(len(states)) / FPS, states


def test_contact_model_validation():
    cube = ContactModel.cube()
    with pytest.raises(InvalidInputError):
        ContactModel(cube.vertices[:3], 0.3, 0.1, cube.inertia)
    with pytest.raises(InvalidInputError):
        ContactModel(cube.vertices, -0.1, 0.1, cube.inertia)
    with pytest.raises(InvalidInputError):
        ContactModel(cube.vertices, 0.3, 0.1, np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(InvalidInputError):
        ContactModel(cube.vertices, 0.3, 0.0, cube.inertia)


def test_phi():
    model = ContactModel.cube(side=0.1)
    heights = np.sort(phi(model, RigidPose(translation=(0, 0, 0.05))))
    assert np.allclose(heights[:4], 0.0, atol=1e-15)
    assert np.allclose(heights[4:], 0.1)
    assert phi(model, RigidPose(translation=(0, 0, 1))).min() >= 0.95

    tilted = RigidPose.from_rotvec([np.pi / 4, 0, 0], [0, 0, 0.2])
    assert phi(model, tilted).min() == pytest.approx(0.2 - 0.05 * np.sqrt(2))


def test_contact_jacobian_conventions():
    vertices = [[0, 0, 0], [0.05, 0, 0], [0, 0.05, 0], [0, 0, 0.05]]
    model = ContactModel(vertices, 0.3, 0.1, np.eye(3) * 1e-4)
    jacobian = contact_jacobian(model, RigidPose())
    assert jacobian.shape == (4, 3, 6)
    assert np.allclose(jacobian[0, 0], [0, 0, 1, 0, 0, 0])
    sliding = jacobian @ np.array([1.0, 0, 0, 0, 0, 0])
    assert np.allclose(sliding, [[0, 1, 0]] * 4)


def test_contact_jacobian_matches_finite_differences():
    model = ContactModel.cube()
    pose = RigidPose.from_rotvec([0.4, -0.3, 0.8], [0.1, 0.2, 0.3])
    linear, angular = np.array([0.3, -0.2, 0.5]), np.array([1.5, -2.0, 0.7])
    h = 1e-6
    ahead = integrate_pose(pose, linear, angular, h).apply(model.vertices)
    behind = integrate_pose(pose, linear, angular, -h).apply(model.vertices)
    world_velocity = (ahead - behind) / (2 * h)
    predicted = contact_jacobian(model, pose) @ np.concatenate([linear, angular])
    assert np.abs(predicted - world_velocity[:, [2, 0, 1]]).max() < 1e-6


def test_free_flight_step():
    model = ContactModel.cube()
    state = BodyState(RigidPose(translation=(0, 0, 1)))
    next_state, impulse = simulate_step(model, state, dt=0.01)
    assert next_state.linear_velocity[2] == pytest.approx(-0.0981)
    assert next_state.pose.translation[2] == pytest.approx(0.999019)
    assert not impulse.normal.any()


def test_ballistic_rollout_matches_recurrence():
    model = ContactModel.cube()
    linear, angular = np.array([1.0, -0.5, 2.0]), np.array([2.0, 1.0, -3.0])
    start = RigidPose.from_rotvec([0.3, -0.2, 0.1], [0.0, 0.0, 5.0])
    dt = 0.01
    states = rollout(model, BodyState(start, linear, angular), 100, dt)
    for n, state in enumerate(states):
        velocity = linear - [0, 0, 9.81 * n * dt]
        position = start.translation + n * dt * linear - [0, 0, 9.81 * dt ** 2 * n * (n + 1) / 2]
        assert np.allclose(state.linear_velocity, velocity, rtol=1e-9, atol=1e-15)
        assert np.allclose(state.pose.translation, position, rtol=1e-9, atol=1e-15)
        assert np.array_equal(state.angular_velocity, angular)
        expected = start.rotation * Rotation.from_rotvec(n * dt * angular)
        assert (expected.inv() * state.pose.rotation).magnitude() < 1e-9


@pytest.mark.slow
def test_random_steps_dissipate_and_stay_above_ground():
    model = ContactModel.cube()
    rng = np.random.default_rng(11)
    dt = 1 / 300
    for _ in range(10000):
        rotation = Rotation.random(random_state=rng)
        lowest = rotation.apply(model.vertices)[:, 2].min()
        pose = RigidPose.from_rotation(rotation, [0, 0, rng.uniform(0, 0.02) - lowest])
        state = BodyState(pose, rng.normal(scale=0.5, size=3), rng.normal(scale=3.0, size=3))
        next_state, impulse = simulate_step(model, state, dt=dt)
        assert next_state.energy(model) <= state.energy(model) + 1e-6
        assert phi(model, next_state.pose).min() >= -1e-3
        assert impulse.cone_violation(model.mu) <= 1e-12


def test_resting_cube_balances_gravity():
    model = ContactModel.cube()
    state = resting_cube(model)
    dt = 0.01
    next_state, impulse = simulate_step(model, state, dt=dt)
    assert impulse.normal.sum() == pytest.approx(model.mass * 9.81 * dt, abs=1e-8)
    assert impulse.cone_violation(model.mu) <= 1e-12
    assert np.allclose(next_state.pose.translation, state.pose.translation, atol=1e-6)
    assert np.abs(next_state.velocity).max() < 1e-6


def test_zero_gravity_rest_is_exact():
    model = ContactModel.cube()
    state = BodyState(RigidPose(translation=(0, 0, 0.5)))
    next_state, _ = simulate_step(model, state, dt=0.01, config=PgsConfig(gravity=0.0))
    assert np.array_equal(next_state.pose.quaternion, state.pose.quaternion)
    assert np.array_equal(next_state.pose.translation, state.pose.translation)
    assert not next_state.velocity.any()
    with pytest.raises(InvalidInputError):
        simulate_step(model, state, dt=0.0)


def test_rollout_is_repeated_steps():
    model = ContactModel.cube()
    initial = BodyState(RigidPose.from_rotvec([0.2, 0, 0], [0, 0, 0.1]), [0.1, 0, 0], [0, 1.0, 0])
    states = rollout(model, initial, 20, 0.01)
    assert len(states) == 21
    state = initial
    for expected in states[1:]:
        state, _ = simulate_step(model, state, None, 0.01)
        assert np.array_equal(state.pose.quaternion, expected.pose.quaternion)
        assert np.array_equal(state.velocity, expected.velocity)
    with pytest.raises(InvalidInputError):
        rollout(model, initial, 0, 0.01)


def test_dropped_cube_comes_to_rest():
    model = ContactModel.cube()
    initial = BodyState(RigidPose(translation=(0, 0, 0.1)))
    states = rollout(model, initial, 60, 1 / FPS, substeps=10)
    energies = np.array([state.energy(model) for state in states])
    assert (np.diff(energies) <= 1e-6).all()
    assert max(state.kinetic_energy(model) for state in states[-10:]) < 1e-6
    assert states[-1].pose.translation[2] == pytest.approx(0.03, abs=1e-3)


def test_tumbling_cube_stays_above_ground():
    model = ContactModel.cube()
    initial = BodyState(RigidPose.from_rotvec([0.5, 0.3, 0], [0, 0, 0.2]), [0.2, 0, -0.5], [3.0, 0, 1.0])
    states = rollout(model, initial, 45, 1 / FPS, substeps=10)
    assert min(phi(model, state.pose).min() for state in states) >= -1e-3


def test_solver_failure_carries_step():
    model = ContactModel.cube()
    strict = PgsConfig(max_iterations=1, tolerance=1e-12, failure_residual=1e-12)
    with pytest.raises(SolverError) as info:
        rollout(model, resting_cube(model), 3, 0.01, config=strict)
    assert info.value.step == 0
    assert info.value.residual > 1e-12


def test_velocities_from_two_poses():
    poses = [RigidPose(), RigidPose(translation=(0.01, 0, 0))]
    linear, angular = estimate_velocities([0.0, 0.1], poses)
    assert np.allclose(linear, [[0.1, 0, 0]] * 2)
    assert not angular.any()


def test_constant_pose_has_zero_velocity():
    pose = RigidPose.from_rotvec([0.1, 0.2, 0.3], [0, 0, 0.4])
    transitions = transitions_from_trajectory(np.arange(5) / FPS, [pose] * 5)
    assert len(transitions) == 4
    for transition in transitions:
        assert np.allclose(transition.state.velocity, 0, atol=1e-12)
        assert not transition.impulse.any()
        assert transition.dt == pytest.approx(1 / FPS)


def test_jittered_timestamps_rejected():
    poses = [RigidPose()] * 4
    with pytest.raises(InvalidInputError):
        transitions_from_trajectory([0.0, 0.1, 0.2, 0.35], poses)
    with pytest.raises(InvalidInputError):
        transitions_from_trajectory([0.0, 0.1, 0.1, 0.2], poses)
    with pytest.raises(InvalidInputError):
        estimate_velocities([0.0, 0.1], poses[:2], scheme='forward')


def test_transitions_need_three_poses():
    poses = [RigidPose(), RigidPose(translation=(0.01, 0, 0))]
    with pytest.raises(InvalidInputError):
        transitions_from_trajectory([0.0, 0.1], poses)
    assert len(transitions_from_trajectory([0.0, 0.1, 0.2], poses + [RigidPose(translation=(0.02, 0, 0))])) == 2


def test_velocities_track_simulator():
    model = ContactModel.cube()
    times, states = free_flight(model)
    linear, angular = estimate_velocities(times, [state.pose for state in states], 'central')
    for k in range(1, len(states) - 1):
        truth = states[k]
        error = np.linalg.norm(linear[k] - truth.linear_velocity)
        assert error < 0.05 * np.linalg.norm(truth.linear_velocity)
        assert np.allclose(angular[k], truth.angular_velocity, atol=1e-9)


def test_backward_scheme_matches_integrator():
    model = ContactModel.cube()
    initial = BodyState(RigidPose(translation=(0, 0, 1.0)), [0.5, 0, 0], [0, 0, 2.0])
    states = rollout(model, initial, 5, 0.01)
    linear, angular = estimate_velocities(np.arange(6) * 0.01, [s.pose for s in states], 'backward')
    for k in range(1, 6):
        assert np.allclose(linear[k], states[k].linear_velocity, atol=1e-9)
        assert np.allclose(angular[k], states[k].angular_velocity, atol=1e-9)


def test_rollout_evaluation_report():
    model = ContactModel.cube()
    trajectories = []
    for spin in ([2.0, 1.0, 0.0], [0.0, -1.0, 3.0], [1.0, 1.0, 1.0]):
        times, states = free_flight(model, spin=spin)
        trajectories.append((times, [state.pose for state in states]))
    report = evaluate_rollouts(model, trajectories)
    assert isinstance(report, RolloutReport)
    assert report.rotation_error_deg.shape == (3, 11)
    assert report.translation_mean.shape == (11,)
    assert (report.rotation_ci95 >= 0).all()
    assert report.translation_error_m[:, 0] == pytest.approx([0, 0, 0], abs=1e-12)
    assert report.translation_mean.max() < 0.05
    assert set(report.to_dict()) >= {'rotation_mean_deg', 'translation_ci95_m', 'terminal_height_error_m'}
    assert len(report) == 3 and report.within(1.0) == 3
    assert report.within(-1.0) == 0
    with pytest.raises(InvalidInputError):
        evaluate_rollouts(model, [])
