"""
    Per-clip 6-DoF tracking from masked depth, and multi-clip TSDF reconstruction.

    Poses are camera-from-object. Frame-to-frame mode chains ICP between
    consecutive observed clouds; model-to-frame mode registers a rendering
    of a shape prior against every observed frame instead, so it does not drift.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from tossfuse.camera import CameraIntrinsics, backproject, mask_area, render_depth
from tossfuse.config import TrackerConfig, TsdfConfig
from tossfuse.dataset import Clip, Frame, validate_clip
from tossfuse.errors import (DegenerateCorrespondenceError, InsufficientOverlapError, InvalidInputError,
                             TrackingLostError)
from tossfuse.geometry import RigidPose, TriangleMesh, compose, interpolate_poses, invert
from tossfuse.icp import icp_align, subsample
from tossfuse.sdf import SdfGrid, extract_surface, redistance, tsdf_integrate

logger = logging.getLogger(__name__)


@dataclass
class TrackResult:
    poses: List[RigidPose]
    rms: np.ndarray
    mode: str
    skipped: List[int] = field(default_factory=list)
    grid: Optional[SdfGrid] = None
    mesh: Optional[TriangleMesh] = None


def _valid_mask(frame: Frame) -> np.ndarray:
    return frame.mask.astype(bool) & (frame.depth > 0)


def _observed_cloud(frame: Frame, intrinsics: CameraIntrinsics, max_points: int) -> np.ndarray:
    return subsample(backproject(frame.depth, frame.mask, intrinsics), max_points)


def predict_pose(poses: List[Optional[RigidPose]], good: List[int], frame: int, constant_velocity: bool = True) -> RigidPose:
    """
    Constant-velocity extrapolation from the last two tracked frames.

    Rotation and object origin are extrapolated separately, which is exact
    for ballistic flight with a constant spin.
    """
    last = poses[good[-1]]
    if not constant_velocity or len(good) < 2:
        return last
    a, b = good[-1], good[-2]
    previous = poses[b]
    scale = (frame - a) / (a - b)
    spin = (last.rotation * previous.rotation.inv()).as_rotvec()
    rotation = Rotation.from_rotvec(scale * spin) * last.rotation
    return RigidPose.from_rotation(rotation, last.translation + scale * (last.translation - previous.translation))


def recentered(seed: RigidPose, source: np.ndarray, target: np.ndarray) -> RigidPose:
    """
    `seed` followed by the translation carrying the moved `source` centroid
    onto the `target` centroid. The rotation of `seed` is kept.
    """
    if not len(source) or not len(target):
        return seed
    shift = target.mean(axis=0) - seed.apply(source).mean(axis=0)
    return compose(RigidPose(translation=shift), seed)


def _two_pass(source, target, config: TrackerConfig, initial: RigidPose):
    coarse = icp_align(source, target, config.icp, initial=initial)
    try:
        return icp_align(source, target, config.fine_icp, initial=coarse.pose)
    except InsufficientOverlapError:
        return coarse


def _model_to_frame(prior: TriangleMesh, predicted: RigidPose, observed: np.ndarray,
                    intrinsics: CameraIntrinsics, config: TrackerConfig):
    pose = predicted
    result = None
    for _ in range(config.prior_refinements):
        rendered = render_depth(prior, pose, intrinsics)
        source = subsample(backproject(rendered, rendered > 0, intrinsics), config.max_points)
        seed = recentered(RigidPose.identity(), source, observed) if config.recenter else RigidPose.identity()
        result = _two_pass(source, observed, config, seed)
        pose = compose(result.pose, pose)
    return pose, result.rms_error


def track_clip(clip: Clip, intrinsics: CameraIntrinsics, initial_pose: Optional[RigidPose] = None,
               shape_prior: Optional[TriangleMesh] = None,
               config: Optional[TrackerConfig] = None) -> TrackResult:
    """
    Tracks every frame of `clip`, frame 0 pinned to `initial_pose`.

    Frames with fewer than `min_mask_pixels` valid pixels are skipped and
    their poses interpolated afterwards. An ICP failure raises
    `TrackingLostError` naming the last frame tracked successfully.
    """
    config = config or TrackerConfig()
    validate_clip(clip, intrinsics)
    initial = initial_pose or clip.initial_pose
    if not _valid_mask(clip.frames[0]).any():
        raise InvalidInputError('frame 0 has an empty mask')

    mode = 'model' if shape_prior is not None else 'frame'
    count = len(clip)
    poses: List[Optional[RigidPose]] = [None] * count
    rms = np.full(count, np.nan)
    poses[0] = initial
    rms[0] = 0.0
    good = [0]
    skipped = []
    last_cloud = _observed_cloud(clip.frames[0], intrinsics, config.max_points)

    for k in range(1, count):
        frame = clip.frames[k]
        if mask_area(_valid_mask(frame)) < config.min_mask_pixels:
            skipped.append(k)
            logger.warning('Frame %d has %d mask pixels, skipping', k, mask_area(_valid_mask(frame)))
            continue
        observed = _observed_cloud(frame, intrinsics, config.max_points)
        predicted = predict_pose(poses, good, k, config.constant_velocity)
        try:
            if shape_prior is not None:
                pose, error = _model_to_frame(shape_prior, predicted, observed, intrinsics, config)
            else:
                previous = poses[good[-1]]
                motion = compose(predicted, invert(previous))
                if config.recenter:
                    motion = recentered(motion, last_cloud, observed)
                result = _two_pass(last_cloud, observed, config, motion)
                pose, error = compose(result.pose, previous), result.rms_error
        except (InsufficientOverlapError, DegenerateCorrespondenceError) as e:
            raise TrackingLostError(f'lost track at frame {k}: {e}', good[-1]) from e
        poses[k] = pose
        rms[k] = error
        good.append(k)
        last_cloud = observed
        logger.debug('Frame %d: rms %.3e m', k, error)

    _fill_skipped(poses, good)
    logger.info('Tracked %d frames (%s mode), %d skipped, median rms %.2e m',
                count, mode, len(skipped), float(np.nanmedian(rms)))
    return TrackResult(poses, rms, mode, skipped)


def _fill_skipped(poses: List[Optional[RigidPose]], good: List[int]):
    for k, pose in enumerate(poses):
        if pose is not None:
            continue
        position = np.searchsorted(good, k)
        before = good[position - 1]
        if position == len(good):
            poses[k] = poses[before]
            continue
        after = good[position]
        poses[k] = interpolate_poses(poses[before], poses[after], (k - before) / (after - before))


def track_clips(clips: Sequence[Clip], intrinsics: CameraIntrinsics, shape_prior: Optional[TriangleMesh] = None,
                config: Optional[TrackerConfig] = None, threads: int = 1) -> List[TrackResult]:
    """
    Tracks independent clips concurrently, results in clip order.
    """
    def job(clip):
        return track_clip(clip, intrinsics, shape_prior=shape_prior, config=config)

    if threads <= 1:
        return [job(clip) for clip in clips]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(job, clips))


def estimate_bounding_radius(clips: Sequence[Clip], poses: Sequence[Sequence[RigidPose]],
                             intrinsics: CameraIntrinsics, stride: int = 1) -> float:
    """
    Robust object radius from observed points mapped into the object frame.
    """
    norms = []
    for clip, clip_poses in zip(clips, poses):
        for k in range(0, len(clip), stride):
            frame = clip.frames[k]
            points = backproject(frame.depth, frame.mask, intrinsics)
            if len(points):
                norms.append(np.linalg.norm(invert(clip_poses[k]).apply(points), axis=1))
    if not norms:
        raise InvalidInputError('no observed points to size the reconstruction grid')
    return float(np.percentile(np.concatenate(norms), 99.5)) * 1.1


def reconstruct(clips: Sequence[Clip], poses: Sequence[Sequence[RigidPose]], intrinsics: CameraIntrinsics,
                config: Optional[TsdfConfig] = None) -> Tuple[SdfGrid, TriangleMesh]:
    """
    Fuses every used frame into an object-frame TSDF grid and meshes it.
    With `config.redistance` the observed voxels then hold distances to
    that mesh.
    """
    config = config or TsdfConfig()
    if not clips or not sum(len(clip) for clip in clips):
        raise InvalidInputError('reconstruction needs at least one frame')
    if len(poses) != len(clips):
        raise InvalidInputError(f'{len(poses)} pose tracks for {len(clips)} clips')
    for clip, clip_poses in zip(clips, poses):
        if len(clip_poses) != len(clip):
            raise InvalidInputError(f'{len(clip_poses)} poses for a clip of {len(clip)} frames')

    radius = config.bounding_radius or estimate_bounding_radius(clips, poses, intrinsics, config.frame_stride)
    grid = SdfGrid.centered(radius, config.dims, config.radius_scale, config.truncation_voxels)
    fused = 0
    for clip, clip_poses in zip(clips, poses):
        for k in range(0, len(clip), config.frame_stride):
            frame = clip.frames[k]
            tsdf_integrate(grid, frame.depth, frame.mask, intrinsics, clip_poses[k])
            fused += 1
    logger.info('Fused %d frames from %d clips into a %s grid, voxel %.2f mm',
                fused, len(clips), grid.dims, grid.voxel_size * 1e3)
    mesh = extract_surface(grid)
    if config.redistance:
        redistance(grid, mesh)
    return grid, mesh
