"""
    Synthetic toss datasets.

    Each toss starts at release (no arm, no grasp), is simulated against the
    ground, and rendered by a fixed pinhole camera into masked depth frames,
    then corrupted by depth noise, pixel dropout and mask erosion.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from tossfuse.camera import CameraIntrinsics, derive_mask, look_at, render_depth
from tossfuse.config import NoiseConfig, PgsConfig, SynthConfig, config_to_dict
from tossfuse.dataset import Clip, Frame, GroundTruth, TossDataset
from tossfuse.dynamics import BodyState, ContactModel, simulate_step
from tossfuse.errors import ConfigError, InvalidInputError
from tossfuse.geometry import RigidPose, TriangleMesh, compose, convex_hull_mesh, invert

logger = logging.getLogger(__name__)


def camera_from_config(config: SynthConfig) -> Tuple[CameraIntrinsics, RigidPose]:
    intrinsics = CameraIntrinsics(config.fx, config.fy, config.cx, config.cy, config.height, config.width)
    return intrinsics, look_at(config.camera_eye, config.camera_target)


def random_release(rng: np.random.Generator, config: SynthConfig) -> BodyState:
    x, y = rng.uniform(-config.xy_range, config.xy_range, size=2)
    z = rng.uniform(*config.height_range)
    orientation = Rotation.random(None, rng)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(0.0, config.max_horizontal_speed)
    linear = np.array([speed * np.cos(heading), speed * np.sin(heading), rng.uniform(*config.vertical_speed_range)])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angular = axis * rng.uniform(0.0, config.max_spin)
    return BodyState(RigidPose.from_rotation(orientation, [x, y, z]), linear, angular)


def simulate_toss(model: ContactModel, initial: BodyState, frames: int, fps: float, substeps: int,
                  pgs: Optional[PgsConfig] = None) -> List[BodyState]:
    """States at every frame, `substeps` simulator steps apart."""
    states = [initial]
    state = initial
    h = 1.0 / (fps * substeps)
    for _ in range(frames - 1):
        for _ in range(substeps):
            state, _ = simulate_step(model, state, None, h, pgs)
        states.append(state)
    return states


def apply_noise(depth: np.ndarray, rng: np.random.Generator, noise: NoiseConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Noisy depth and eroded mask from a clean render. Dropped pixels keep
    their mask bit but lose depth.
    """
    mask = derive_mask(depth)
    depth = depth.copy()
    if noise.mask_erosion > 0:
        mask = ndimage.binary_erosion(mask, iterations=noise.mask_erosion)
    if noise.depth_sigma > 0:
        valid = depth > 0
        depth[valid] = np.maximum(depth[valid] + rng.normal(0.0, noise.depth_sigma, int(valid.sum())), 1e-6)
    if noise.dropout_rate > 0:
        depth[(rng.random(depth.shape) < noise.dropout_rate) & (depth > 0)] = 0.0
    return depth, mask


def _toss(index: int, model: ContactModel, mesh: TriangleMesh, intrinsics: CameraIntrinsics,
          camera_from_world: RigidPose, noise: NoiseConfig, seed: int, config: SynthConfig) -> Clip:
    rng = np.random.default_rng([seed, index])
    noise_rng = np.random.default_rng([noise.seed, seed, index])
    states = simulate_toss(model, random_release(rng, config), config.frames, config.fps, config.substeps, config.pgs)
    poses = [compose(camera_from_world, state.pose) for state in states]
    frames = []
    for k, pose in enumerate(poses):
        clean = render_depth(mesh, pose, intrinsics)
        if k == 0 and not clean.any():
            raise ConfigError(f'toss {index}: camera does not see the object at release')
        depth, mask = apply_noise(clean, noise_rng, noise)
        frames.append(Frame(depth, mask, k / config.fps))
    if not frames[0].mask.any():
        raise ConfigError(f'toss {index}: mask is empty at release')
    logger.debug('Toss %d: rest height %.4f m', index, states[-1].pose.translation[2])
    return Clip(frames, poses[0], poses)


def generate_toss_dataset(true_model: ContactModel, n_tosses: int, camera: Tuple[CameraIntrinsics, RigidPose],
                          noise: Optional[NoiseConfig] = None, seed: int = 42,
                          config: Optional[SynthConfig] = None, threads: int = 1) -> TossDataset:
    """
    `n_tosses` simulated clips of `true_model` seen from `camera`
    (intrinsics, world-from-camera). Clip `i` draws from a generator seeded
    with `(seed, i)`, so the result does not depend on `threads`.
    """
    if n_tosses < 1:
        raise InvalidInputError('need at least one toss')
    config = config or SynthConfig()
    noise = noise or config.noise
    intrinsics, world_from_camera = camera
    mesh = convex_hull_mesh(true_model.vertices)
    camera_from_world = invert(world_from_camera)

    def job(index):
        return _toss(index, true_model, mesh, intrinsics, camera_from_world, noise, seed, config)

    if threads <= 1:
        clips = [job(i) for i in range(n_tosses)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            clips = list(executor.map(job, range(n_tosses)))
    logger.info('Generated %d tosses of %d frames', n_tosses, config.frames)
    metadata = {'seed': seed, 'noise': config_to_dict(noise), 'synth': config_to_dict(config)}
    return TossDataset(clips, intrinsics, world_from_camera, 1.0 / config.fps,
                       GroundTruth(true_model, mesh), metadata)


def synthesize(config: Optional[SynthConfig] = None, threads: int = 1) -> TossDataset:
    """Dataset of the default cube under `config`."""
    config = config or SynthConfig()
    model = ContactModel.cube(config.cube_side, config.mass, config.mu)
    return generate_toss_dataset(model, config.n_tosses, camera_from_config(config), config.noise,
                                 config.seed, config, threads)
