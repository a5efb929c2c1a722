"""
    Rigid-body toss simulation against the ground plane `z = 0`.

    A body is a convex polytope of contact vertices with known mass and
    inertia. Linear velocity is world-frame, angular velocity body-frame.
    Each vertex carries a contact frame with rows `(e_z, e_x, e_y)`:
    normal first, then the two tangents.

    Steps are semi-implicit: contact impulses come from projected
    Gauss-Seidel over the friction cones, then the pose integrates with the
    post-impact velocity. Vertices closer than `contact_margin` are treated
    as speculative contacts, so a fast vertex cannot tunnel through the ground.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numba
import numpy as np
from scipy import stats
from scipy.spatial.transform import Rotation

from tossfuse.config import PgsConfig
from tossfuse.errors import InvalidInputError, SolverError
from tossfuse.geometry import RigidPose, as_point_cloud, cube_corners
from tossfuse.metrics import rotation_translation_error

logger = logging.getLogger(__name__)

GRAVITY = 9.81


@dataclass(eq=False)
class ContactModel:
    vertices: np.ndarray
    mu: float
    mass: float
    inertia: np.ndarray

    def __post_init__(self):
        self.vertices = as_point_cloud(self.vertices, 'vertices')
        self.inertia = np.asarray(self.inertia, dtype=np.float64).reshape(3, 3)
        self.mu = float(self.mu)
        self.mass = float(self.mass)
        if len(self.vertices) < 4:
            raise InvalidInputError(f'contact model needs at least 4 vertices, got {len(self.vertices)}')
        if self.mu < 0 or not np.isfinite(self.mu):
            raise InvalidInputError('friction coefficient must be non-negative')
        if self.mass <= 0:
            raise InvalidInputError('mass must be positive')
        if not np.allclose(self.inertia, self.inertia.T, rtol=1e-9, atol=1e-15) \
                or np.linalg.eigvalsh(self.inertia).min() <= 0:
            raise InvalidInputError('inertia must be symmetric positive definite')

    @classmethod
    def cube(cls, side: float = 0.06, mass: float = 0.1, mu: float = 0.3) -> 'ContactModel':
        """Uniform-density cube, contact vertices at the 8 corners."""
        return cls(cube_corners(side), mu, mass, np.eye(3) * mass * side ** 2 / 6.0)

    @property
    def mass_matrix(self) -> np.ndarray:
        out = np.zeros((6, 6))
        out[:3, :3] = np.eye(3) * self.mass
        out[3:, 3:] = self.inertia
        return out

    @property
    def inverse_mass_matrix(self) -> np.ndarray:
        out = np.zeros((6, 6))
        out[:3, :3] = np.eye(3) / self.mass
        out[3:, 3:] = np.linalg.inv(self.inertia)
        return out

    def replace(self, **changes) -> 'ContactModel':
        return replace(self, **changes)


@dataclass(eq=False)
class BodyState:
    pose: RigidPose
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.linear_velocity = np.asarray(self.linear_velocity, dtype=np.float64).reshape(3)
        self.angular_velocity = np.asarray(self.angular_velocity, dtype=np.float64).reshape(3)

    @property
    def velocity(self) -> np.ndarray:
        return np.concatenate([self.linear_velocity, self.angular_velocity])

    def kinetic_energy(self, model: ContactModel) -> float:
        v = self.velocity
        return float(0.5 * v @ model.mass_matrix @ v)

    def energy(self, model: ContactModel, gravity: float = GRAVITY) -> float:
        return self.kinetic_energy(model) + model.mass * gravity * float(self.pose.translation[2])


@dataclass(eq=False)
class ContactImpulse:
    normal: np.ndarray
    tangential: np.ndarray
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True

    @classmethod
    def zeros(cls, count: int) -> 'ContactImpulse':
        return cls(np.zeros(count), np.zeros((count, 2)))

    def stacked(self) -> np.ndarray:
        """`(K, 3)` rows of `(normal, tangent 1, tangent 2)`."""
        return np.column_stack([self.normal, self.tangential])

    def cone_violation(self, mu: float) -> float:
        excess = np.linalg.norm(self.tangential, axis=1) - mu * self.normal
        return float(max(0.0, -self.normal.min(initial=0.0), excess.max(initial=0.0)))


@dataclass(eq=False)
class StateTransition:
    state: BodyState
    impulse: np.ndarray
    next_state: BodyState
    dt: float

    def __post_init__(self):
        self.impulse = np.asarray(self.impulse, dtype=np.float64).reshape(6)
        if not self.dt > 0:
            raise InvalidInputError('transition dt must be positive')


def phi(model: ContactModel, pose: RigidPose) -> np.ndarray:
    """Signed height of every contact vertex above the ground."""
    return pose.apply(model.vertices)[:, 2]


def contact_jacobian(model: ContactModel, pose: RigidPose) -> np.ndarray:
    """
    `(K, 3, 6)` maps from `(v_world, omega_body)` to each vertex velocity in
    its contact frame.
    """
    rotation = pose.matrix
    rows = rotation[[2, 0, 1]]
    jacobian = np.zeros((len(model.vertices), 3, 6))
    jacobian[:, :, :3] = np.eye(3)[[2, 0, 1]]
    jacobian[:, :, 3:] = np.cross(model.vertices[:, None, :], rows[None, :, :])
    return jacobian


@numba.njit(cache=False, nogil=True)
def _tangent_block(a11, a12, a22, c1, c2, t1, t2, radius, tol):
    # min 0.5 t'At + c't over the disk |t| <= radius, warm-started at t
    trace = a11 + a22
    gap = np.sqrt((a11 - a22) ** 2 + 4.0 * a12 * a12)
    top = 0.5 * (trace + gap)
    if top <= 0.0:
        return 0.0, 0.0
    step = 1.0 / top
    for _ in range(50):
        n1 = t1 - step * (a11 * t1 + a12 * t2 + c1)
        n2 = t2 - step * (a12 * t1 + a22 * t2 + c2)
        norm = np.sqrt(n1 * n1 + n2 * n2)
        if norm > radius:
            if norm > 0.0:
                n1 *= radius / norm
                n2 *= radius / norm
        change = max(abs(n1 - t1), abs(n2 - t2))
        t1, t2 = n1, n2
        if change < tol:
            break
    return t1, t2


@numba.njit(cache=False, nogil=True)
def _projected_gauss_seidel(delassus, bias, mu, max_iterations, tolerance):
    size = bias.shape[0]
    impulse = np.zeros(size)
    residual = np.inf
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        change = 0.0
        for k in range(size // 3):
            i = 3 * k
            r = bias[i]
            for j in range(size):
                r += delassus[i, j] * impulse[j]
            previous = impulse[i]
            if delassus[i, i] > 0.0:
                impulse[i] = max(0.0, previous - r / delassus[i, i])
            change = max(change, abs(impulse[i] - previous))

            r1 = bias[i + 1]
            r2 = bias[i + 2]
            for j in range(size):
                r1 += delassus[i + 1, j] * impulse[j]
                r2 += delassus[i + 2, j] * impulse[j]
            a11 = delassus[i + 1, i + 1]
            a12 = delassus[i + 1, i + 2]
            a22 = delassus[i + 2, i + 2]
            t1 = impulse[i + 1]
            t2 = impulse[i + 2]
            c1 = r1 - a11 * t1 - a12 * t2
            c2 = r2 - a12 * t1 - a22 * t2
            radius = mu * impulse[i]
            n1, n2 = _tangent_block(a11, a12, a22, c1, c2, t1, t2, radius, 0.1 * tolerance)
            change = max(change, abs(n1 - t1), abs(n2 - t2))
            impulse[i + 1] = n1
            impulse[i + 2] = n2
        residual = change
        if change < tolerance:
            break
    return impulse, residual, iterations


def integrate_pose(pose: RigidPose, linear_velocity: np.ndarray, angular_velocity: np.ndarray, dt: float) -> RigidPose:
    """Exponential-map update, body-frame angular velocity."""
    rotation = pose.rotation * Rotation.from_rotvec(np.asarray(angular_velocity) * dt)
    return RigidPose.from_rotation(rotation, pose.translation + dt * np.asarray(linear_velocity))


def simulate_step(model: ContactModel, state: BodyState, u=None, dt: float = 1.0 / 300.0,
                  config: Optional[PgsConfig] = None):
    """
    Advances `state` by `dt` under gravity, the non-contact impulse `u`
    and ground contact. Returns the next state and the contact impulses,
    one row per vertex.
    """
    config = config or PgsConfig()
    if not dt > 0:
        raise InvalidInputError('time step must be positive')
    u = np.zeros(6) if u is None else np.asarray(u, dtype=np.float64).reshape(6)
    inverse_mass = model.inverse_mass_matrix
    force = np.array([0.0, 0.0, -model.mass * config.gravity, 0.0, 0.0, 0.0])
    free_velocity = state.velocity + dt * inverse_mass @ force + inverse_mass @ u

    count = len(model.vertices)
    heights = phi(model, state.pose)
    candidates = np.flatnonzero(heights < config.contact_margin)
    impulse = ContactImpulse.zeros(count)
    velocity = free_velocity
    if len(candidates):
        jacobian = contact_jacobian(model, state.pose)[candidates].reshape(-1, 6)
        delassus = jacobian @ inverse_mass @ jacobian.T
        bias = jacobian @ free_velocity
        gap = heights[candidates]
        bias[0::3] += np.where(gap >= 0, gap, config.stabilization * gap) / dt
        solution, residual, iterations = _projected_gauss_seidel(
            delassus, bias, model.mu, config.max_iterations, config.tolerance)
        if residual > config.failure_residual:
            raise SolverError(f'contact solver stalled at residual {residual:.3e} after {iterations} sweeps',
                              float(residual))
        if residual > config.tolerance:
            logger.debug('PGS stopped at residual %.3e after %d sweeps', residual, iterations)
        velocity = free_velocity + inverse_mass @ jacobian.T @ solution
        stacked = solution.reshape(-1, 3)
        impulse.normal[candidates] = stacked[:, 0]
        impulse.tangential[candidates] = stacked[:, 1:]
        impulse.iterations = int(iterations)
        impulse.residual = float(residual)
        impulse.converged = bool(residual <= config.tolerance)

    pose = integrate_pose(state.pose, velocity[:3], velocity[3:], dt)
    return BodyState(pose, velocity[:3], velocity[3:]), impulse


def rollout(model: ContactModel, initial: BodyState, steps: int, dt: float, substeps: int = 1,
            config: Optional[PgsConfig] = None) -> List[BodyState]:
    """
    `steps + 1` states starting with `initial`, each `dt` apart, every
    interval resolved with `substeps` simulator steps.
    """
    if steps < 1 or substeps < 1:
        raise InvalidInputError('rollout needs at least one step and one substep')
    states = [initial]
    state = initial
    h = dt / substeps
    for step in range(steps):
        for _ in range(substeps):
            try:
                state, _ = simulate_step(model, state, None, h, config)
            except SolverError as e:
                e.step = step
                raise
        states.append(state)
    return states


def _log_relative(a: Rotation, b: Rotation) -> np.ndarray:
    return (a.inv() * b).as_rotvec()


def check_uniform_times(times: np.ndarray, jitter: float = 0.01) -> float:
    times = np.asarray(times, dtype=np.float64)
    steps = np.diff(times)
    if (steps <= 0).any():
        raise InvalidInputError('timestamps must strictly increase')
    dt = float(steps.mean())
    if np.abs(steps - dt).max() > jitter * dt:
        raise InvalidInputError(f'timestamps jitter beyond {jitter:.0%} of the mean step')
    return dt


def estimate_velocities(times, poses: Sequence[RigidPose], scheme: str = 'central'):
    """
    Finite-difference `(N, 3)` linear (world) and angular (body) velocities.

    `central` is second order everywhere, one-sided at the ends. `backward`
    matches the integrator: frame k's velocity carries frame k-1 into frame k.
    """
    if scheme not in ('central', 'backward'):
        raise InvalidInputError(f'unknown velocity scheme {scheme!r}')
    if len(poses) != len(times) or len(poses) < 2:
        raise InvalidInputError('need at least 2 timed poses')
    dt = check_uniform_times(times)
    positions = np.array([pose.translation for pose in poses])
    rotations = [pose.rotation for pose in poses]
    n = len(poses)
    linear = np.zeros((n, 3))
    angular = np.zeros((n, 3))
    if n == 2 or scheme == 'backward':
        linear[1:] = np.diff(positions, axis=0) / dt
        linear[0] = linear[1]
        for k in range(1, n):
            angular[k] = _log_relative(rotations[k - 1], rotations[k]) / dt
        angular[0] = angular[1] if n == 2 else _log_relative(rotations[0], rotations[1]) / dt
        return linear, angular

    linear[1:-1] = (positions[2:] - positions[:-2]) / (2 * dt)
    linear[0] = (-3 * positions[0] + 4 * positions[1] - positions[2]) / (2 * dt)
    linear[-1] = (3 * positions[-1] - 4 * positions[-2] + positions[-3]) / (2 * dt)
    for k in range(1, n - 1):
        angular[k] = _log_relative(rotations[k - 1], rotations[k + 1]) / (2 * dt)
    angular[0] = (4 * _log_relative(rotations[0], rotations[1])
                  - _log_relative(rotations[0], rotations[2])) / (2 * dt)
    angular[-1] = -(4 * _log_relative(rotations[-1], rotations[-2])
                    - _log_relative(rotations[-1], rotations[-3])) / (2 * dt)
    return linear, angular


def transitions_from_trajectory(times, poses: Sequence[RigidPose], scheme: str = 'central',
                                impulses=None) -> List[StateTransition]:
    """
    Consecutive `(state, u, next_state)` triples from world-frame poses.
    `u` is zero unless `impulses` (one 6-vector per transition) is given.
    """
    if len(poses) < 3:
        raise InvalidInputError(f'need at least 3 poses for transitions, got {len(poses)}')
    linear, angular = estimate_velocities(times, poses, scheme)
    dt = check_uniform_times(times)
    states = [BodyState(pose, linear[k], angular[k]) for k, pose in enumerate(poses)]
    if impulses is None:
        impulses = np.zeros((len(states) - 1, 6))
    return [StateTransition(states[k], impulses[k], states[k + 1], dt) for k in range(len(states) - 1)]


@dataclass
class RolloutReport:
    """
    Per-step errors of open-loop rollouts against held-out trajectories.
    Arrays are `(trajectories, steps + 1)`.
    """
    rotation_error_deg: np.ndarray
    translation_error_m: np.ndarray
    rotation_mean: np.ndarray
    rotation_ci95: np.ndarray
    translation_mean: np.ndarray
    translation_ci95: np.ndarray
    terminal_height_error_m: np.ndarray

    def __len__(self) -> int:
        return len(self.terminal_height_error_m)

    def within(self, tolerance: float) -> int:
        """Rollouts ending within `tolerance` of the observed final height."""
        return int((self.terminal_height_error_m <= tolerance).sum())

    def to_dict(self) -> dict:
        return {
            'rotation_mean_deg': self.rotation_mean.tolist(),
            'rotation_ci95_deg': self.rotation_ci95.tolist(),
            'translation_mean_m': self.translation_mean.tolist(),
            'translation_ci95_m': self.translation_ci95.tolist(),
            'terminal_height_error_m': self.terminal_height_error_m.tolist(),
        }


def _confidence_band(samples: np.ndarray, level: float = 0.95) -> np.ndarray:
    count = samples.shape[0]
    if count < 2:
        return np.zeros(samples.shape[1])
    spread = np.std(samples, axis=0, ddof=1) / np.sqrt(count)
    return stats.t.ppf(0.5 + level / 2, count - 1) * spread


def evaluate_rollouts(model: ContactModel, trajectories: Sequence, steps: int = 99, substeps: int = 10,
                      config: Optional[PgsConfig] = None) -> RolloutReport:
    """
    Rolls `model` out from the first frames of each `(times, world poses)`
    trajectory and compares against the rest of it.
    """
    if not trajectories:
        raise InvalidInputError('no trajectories to evaluate')
    horizon = min([steps] + [len(poses) - 1 for _, poses in trajectories])
    if horizon < 1:
        raise InvalidInputError('trajectory too short for a rollout')
    rotation_rows, translation_rows, terminal = [], [], []
    for times, poses in trajectories:
        dt = check_uniform_times(times)
        linear, angular = estimate_velocities(times[:3], poses[:3], 'central')
        states = rollout(model, BodyState(poses[0], linear[0], angular[0]), horizon, dt, substeps, config)
        errors = np.array([rotation_translation_error(state.pose, truth)
                           for state, truth in zip(states, poses[:horizon + 1])])
        rotation_rows.append(errors[:, 0])
        translation_rows.append(errors[:, 1])
        terminal.append(abs(states[-1].pose.translation[2] - poses[horizon].translation[2]))
    rotation = np.array(rotation_rows)
    translation = np.array(translation_rows)
    return RolloutReport(rotation, translation, rotation.mean(axis=0), _confidence_band(rotation),
                         translation.mean(axis=0), _confidence_band(translation), np.array(terminal))
