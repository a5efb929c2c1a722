"""
    Cyclic refinement: track, reconstruct, learn contact geometry, reproject
    it into the camera, ICP-align against the observations, re-track.

    Stages are memoized on a `CyclePipeline`, so the ablation variants share
    their common prefix instead of recomputing it:

        b  frame-to-frame tracking of the evaluation clip
        c  all clips tracked and fused into one TSDF
        d  contact model learned from the b trajectory, no re-tracking
        e  c's reconstruction reprojected, ICP-refined, evaluation clip re-tracked
        f  d, then re-tracking with the learned hull as prior, then re-learning
        g  d, then reprojection, ICP refinement and re-tracking with the learned
           hull as prior, then re-learning; repeated `cycles` times
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from tossfuse.camera import CameraIntrinsics, backproject, derive_mask, render_depth, render_points
from tossfuse.config import VARIANTS, CycleConfig, IcpConfig, resolve_threads
from tossfuse.dataset import Clip, Frame, TossDataset, validate_clip
from tossfuse.dynamics import ContactModel, RolloutReport, evaluate_rollouts, transitions_from_trajectory
from tossfuse.errors import (ConfigError, DegenerateCorrespondenceError, InsufficientOverlapError,
                             InvalidInputError, SolverError, StageError, TossFuseError)
from tossfuse.formats import (write_depth, write_json, write_mask, write_model, write_obj, write_ply,
                              write_trajectory)
from tossfuse.geometry import PointCloud, RigidPose, TriangleMesh, compose, decimate_to_polytope
from tossfuse.icp import icp_align
from tossfuse.learning import fit, refined_geometry
from tossfuse.metrics import EvalReport, evaluate_geometry, evaluate_trajectory
from tossfuse.sdf import SdfGrid
from tossfuse.tracker import TrackResult, reconstruct, track_clip, track_clips

logger = logging.getLogger(__name__)

EVAL_POINTS = 1000
EVAL_POINTS_SEED = 0


@dataclass(eq=False)
class RefinedFrame:
    depth: np.ndarray
    mask: np.ndarray
    correction: RigidPose
    fallback: bool = False
    rms: float = float('nan')


@dataclass(eq=False)
class StageResult:
    name: str
    poses: List[RigidPose]
    rms: np.ndarray
    mesh: Optional[TriangleMesh]
    report: EvalReport
    seconds: float = 0.0
    model: Optional[ContactModel] = None
    grid: Optional[SdfGrid] = None
    refined: Optional[List[RefinedFrame]] = None
    train_loss: Optional[Tuple[float, float]] = None
    rollouts: Optional[RolloutReport] = None
    rest_tolerance: float = 0.005

    def summary(self) -> dict:
        summary = {'stage': self.name, **self.report.row()}
        if self.refined is not None:
            summary['fallback_frames'] = [k for k, frame in enumerate(self.refined) if frame.fallback]
            summary['corrections'] = [frame.correction.as_matrix4().tolist() for frame in self.refined]
        if self.model is not None:
            summary['mu'] = self.model.mu
        if self.train_loss is not None:
            summary['train_loss'] = list(self.train_loss)
        if self.rollouts is not None:
            summary['rollouts'] = len(self.rollouts)
            summary['rollouts_at_rest'] = self.rollouts.within(self.rest_tolerance)
        return summary


@dataclass(eq=False)
class CycleReport:
    variant: str
    cycles: int
    stages: List[StageResult] = field(default_factory=list)

    @property
    def final(self) -> StageResult:
        if not self.stages:
            raise InvalidInputError('no stage has run')
        return self.stages[-1]

    def stage(self, name: str) -> StageResult:
        for result in self.stages:
            if result.name == name:
                return result
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {'variant': self.variant, 'cycles': self.cycles,
                'stages': [result.summary() for result in self.stages],
                'reports': {result.name: result.report.to_dict() for result in self.stages}}

    def timings(self) -> Dict[str, float]:
        return {result.name: result.seconds for result in self.stages}


def _map_frames(function: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1:
        return [function(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(function, items))


def reproject_refined(geom: TriangleMesh, poses: Sequence[RigidPose], intrinsics: CameraIntrinsics,
                      threads: int = 1) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Renders `geom` at every pose, returning `(depth, mask)` per frame.
    """
    def job(pose):
        depth = render_depth(geom, pose, intrinsics)
        return depth, derive_mask(depth)

    return _map_frames(job, list(poses), threads)


def _refine_one(observed, predicted, intrinsics: CameraIntrinsics, config: IcpConfig,
                geom: Optional[TriangleMesh], pose: Optional[RigidPose], splat_radius: int) -> RefinedFrame:
    depth_pred, mask_pred = predicted
    source = backproject(depth_pred, mask_pred, intrinsics)
    target = backproject(observed[0], observed[1], intrinsics)
    try:
        result = icp_align(source, target, config)
    except (InsufficientOverlapError, DegenerateCorrespondenceError) as e:
        logger.debug('ICP refinement fell back: %s', e)
        return RefinedFrame(depth_pred.copy(), np.asarray(mask_pred, dtype=bool).copy(),
                            RigidPose.identity(), fallback=True)
    if geom is not None and pose is not None:
        depth = render_depth(geom, compose(result.pose, pose), intrinsics)
    else:
        depth = render_points(result.pose.apply(source), RigidPose.identity(), intrinsics, splat_radius)
    return RefinedFrame(depth, derive_mask(depth), result.pose, rms=result.rms_error)


def icp_refine_frames(observed: Sequence[Tuple[np.ndarray, np.ndarray]],
                      predicted: Sequence[Tuple[np.ndarray, np.ndarray]], intrinsics: CameraIntrinsics,
                      config: Optional[IcpConfig] = None, geom: Optional[TriangleMesh] = None,
                      poses: Optional[Sequence[RigidPose]] = None, splat_radius: int = 1,
                      threads: int = 1) -> List[RefinedFrame]:
    """
    Aligns each predicted depth map to its observation and re-renders it.

    With `geom` and `poses`, the mesh is rendered again at the corrected pose;
    otherwise the aligned predicted points are splatted. Frames whose ICP
    lacks overlap keep the prediction and are flagged as fallbacks.
    """
    config = config or IcpConfig()
    if len(observed) != len(predicted):
        raise InvalidInputError(f'{len(observed)} observed frames but {len(predicted)} predicted')
    if (geom is None) != (poses is None):
        raise InvalidInputError('mesh re-rendering needs both geom and poses')
    if poses is not None and len(poses) != len(predicted):
        raise InvalidInputError(f'{len(poses)} poses for {len(predicted)} frames')

    def job(k):
        return _refine_one(observed[k], predicted[k], intrinsics, config, geom,
                           None if poses is None else poses[k], splat_radius)

    refined = _map_frames(job, range(len(observed)), threads)
    fallbacks = sum(frame.fallback for frame in refined)
    if fallbacks:
        logger.warning('%d of %d frames kept the unrefined prediction', fallbacks, len(refined))
    return refined


def refined_clip(clip: Clip, refined: Sequence[RefinedFrame]) -> Clip:
    """The clip with its depth and masks replaced, timestamps and RGB kept."""
    frames = [Frame(r.depth, r.mask, frame.timestamp, frame.rgb) for frame, r in zip(clip.frames, refined)]
    return clip.with_frames(frames)


def world_transitions(dataset: TossDataset, clip: Clip, poses: Sequence[RigidPose], scheme: str):
    world = [compose(dataset.world_from_camera, pose) for pose in poses]
    return transitions_from_trajectory(clip.timestamps, world, scheme)


def held_out_trajectories(dataset: TossDataset, exclude: int, limit: int) -> list:
    """
    `(times, world poses)` of up to `limit` ground-truth clips other than
    `exclude`, in dataset order.
    """
    trajectories = []
    for index, clip in enumerate(dataset.clips):
        if len(trajectories) >= limit:
            break
        if index == exclude or clip.gt_poses is None or len(clip) < 3:
            continue
        trajectories.append((clip.timestamps, [compose(dataset.world_from_camera, p) for p in clip.gt_poses]))
    return trajectories


def rollout_report(model: ContactModel, trajectories: list, config: CycleConfig) -> Optional[RolloutReport]:
    """
    Rollouts of `model` against `trajectories`, or None when there are none
    or the simulator stalls.
    """
    if not trajectories:
        return None
    try:
        report = evaluate_rollouts(model, trajectories, config.rollout_steps, config.rollout_substeps)
    except (SolverError, InvalidInputError) as e:
        logger.warning('Rollout evaluation skipped: %s', e)
        return None
    logger.info('Rollouts: %d of %d end within %.1f mm of the observed height',
                report.within(config.rest_tolerance), len(report), config.rest_tolerance * 1e3)
    return report


class CyclePipeline:
    """
    Runs and caches the stages of one dataset under one configuration.
    """

    def __init__(self, dataset: TossDataset, config: Optional[CycleConfig] = None, threads: Optional[int] = None):
        self.config = config or CycleConfig()
        dataset.validate()
        if not 0 <= self.config.eval_clip < len(dataset):
            raise ConfigError(f'eval_clip {self.config.eval_clip} outside {len(dataset)} clips')
        self.dataset = dataset
        self.threads = resolve_threads(threads if threads is not None else self.config.threads)
        self._cache: Dict[str, StageResult] = {}
        self._eval_points: Optional[PointCloud] = None
        self._held_out: Optional[list] = None

    @property
    def clip(self) -> Clip:
        return self.dataset.clips[self.config.eval_clip]

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.dataset.intrinsics

    def _points(self) -> Optional[PointCloud]:
        truth = self.dataset.ground_truth
        if truth is None:
            return None
        if self._eval_points is None:
            self._eval_points = truth.mesh.sample_surface(EVAL_POINTS, seed=EVAL_POINTS_SEED)
        return self._eval_points

    def evaluate(self, poses: Sequence[RigidPose], mesh: Optional[TriangleMesh],
                 clip: Optional[Clip] = None) -> EvalReport:
        clip = clip or self.clip
        report = EvalReport()
        points = self._points()
        if points is not None and clip.gt_poses is not None:
            evaluate_trajectory(poses, clip.gt_poses, points, self.config.auc_threshold, report)
        if mesh is not None and self.dataset.ground_truth is not None:
            evaluate_geometry(mesh, self.dataset.ground_truth.mesh, report,
                              self.config.chamfer_samples, self.config.chamfer_seed)
        return report

    def _stage(self, name: str, build: Callable[[], StageResult]) -> StageResult:
        if name in self._cache:
            return self._cache[name]
        logger.info('Stage %s: start', name)
        start = time.perf_counter()
        result = build()
        result.seconds = time.perf_counter() - start
        self._cache[name] = result
        logger.info('Stage %s: %.1f s, %s', name, result.seconds, result.report.row())
        return result

    def _initial_model(self, mesh: TriangleMesh) -> ContactModel:
        config = self.config
        truth = self.dataset.ground_truth
        mass = config.mass if config.mass is not None else (truth.model.mass if truth else None)
        inertia = np.reshape(config.inertia, (3, 3)) if config.inertia is not None else \
            (truth.model.inertia if truth else None)
        if mass is None or inertia is None:
            raise ConfigError('learning needs the body mass and inertia (config or dataset ground truth)')
        vertices = decimate_to_polytope(mesh, config.polytope_vertices)
        return ContactModel(vertices, config.mu_init, mass, np.array(inertia, dtype=float))

    def _rollouts(self, model: ContactModel) -> Optional[RolloutReport]:
        if self._held_out is None:
            self._held_out = held_out_trajectories(self.dataset, self.config.eval_clip, self.config.rollout_clips)
        return rollout_report(model, self._held_out, self.config)

    def _learn(self, name: str, initial: ContactModel, poses: Sequence[RigidPose]) -> StageResult:
        transitions = world_transitions(self.dataset, self.clip, poses, self.config.train.velocity_scheme)
        trained = fit(initial, transitions, self.config.train)
        hull = refined_geometry(trained.model)
        return StageResult(name, list(poses), np.full(len(poses), np.nan), hull, self.evaluate(poses, hull),
                           model=trained.model, train_loss=(trained.initial_loss, trained.final_loss),
                           rollouts=self._rollouts(trained.model), rest_tolerance=self.config.rest_tolerance)

    def _retrack(self, clip: Clip, prior: TriangleMesh) -> TrackResult:
        return track_clip(clip, self.intrinsics, shape_prior=prior, config=self.config.tracker)

    def _refine(self, mesh: TriangleMesh, poses: Sequence[RigidPose]) -> Tuple[Clip, List[RefinedFrame]]:
        predicted = reproject_refined(mesh, poses, self.intrinsics, self.threads)
        observed = [(frame.depth, frame.mask) for frame in self.clip.frames]
        refined = icp_refine_frames(observed, predicted, self.intrinsics, self.config.icp, mesh, poses,
                                    threads=self.threads)
        return refined_clip(self.clip, refined), refined

    def baseline(self) -> StageResult:
        def build():
            tracked = track_clip(self.clip, self.intrinsics, config=self.config.tracker)
            grid, mesh = reconstruct([self.clip], [tracked.poses], self.intrinsics, self.config.tsdf)
            return StageResult('b', tracked.poses, tracked.rms, mesh, self.evaluate(tracked.poses, mesh), grid=grid)
        return self._stage('b', build)

    def multi_clip(self) -> StageResult:
        def build():
            tracked = track_clips(self.dataset.clips, self.intrinsics, config=self.config.tracker,
                                  threads=self.threads)
            grid, mesh = reconstruct(self.dataset.clips, [t.poses for t in tracked], self.intrinsics,
                                     self.config.tsdf)
            own = tracked[self.config.eval_clip]
            return StageResult('c', own.poses, own.rms, mesh, self.evaluate(own.poses, mesh), grid=grid)
        return self._stage('c', build)

    def learned(self) -> StageResult:
        def build():
            initial = self._initial_model(self.multi_clip().mesh)
            return self._learn('d', initial, self.baseline().poses)
        return self._stage('d', build)

    def refined_reconstruction(self) -> StageResult:
        def build():
            mesh = self.multi_clip().mesh
            clip, refined = self._refine(mesh, self.baseline().poses)
            tracked = self._retrack(clip, mesh)
            result = StageResult('e', tracked.poses, tracked.rms, mesh, self.evaluate(tracked.poses, mesh))
            result.refined = refined
            return result
        return self._stage('e', build)

    def retracked(self) -> StageResult:
        def build():
            learned = self.learned()
            tracked = self._retrack(self.clip, learned.mesh)
            result = self._learn('f', learned.model, tracked.poses)
            result.rms = tracked.rms
            return result
        return self._stage('f', build)

    def cycle_name(self, index: int) -> str:
        return 'g' if self.config.cycles == 1 else f'g{index}'

    def cycle(self, index: int) -> StageResult:
        """Round `index` (1-based) of the full loop."""
        name = self.cycle_name(index)

        def build():
            previous = self.learned() if index == 1 else self.cycle(index - 1)
            poses = self.baseline().poses if index == 1 else previous.poses
            clip, refined = self._refine(previous.mesh, poses)
            tracked = self._retrack(clip, previous.mesh)
            result = self._learn(name, previous.model, tracked.poses)
            result.rms = tracked.rms
            result.refined = refined
            return result
        return self._stage(name, build)

    def stages_for(self, variant: str) -> List[Tuple[str, Callable[[], StageResult]]]:
        if variant not in VARIANTS:
            raise ConfigError(f'unknown variant {variant!r}')
        stages = [('b', self.baseline)]
        if variant != 'b':
            stages.append(('c', self.multi_clip))
        if variant in ('d', 'f', 'g'):
            stages.append(('d', self.learned))
        if variant == 'e':
            stages.append(('e', self.refined_reconstruction))
        if variant == 'f':
            stages.append(('f', self.retracked))
        if variant == 'g':
            stages.extend((self.cycle_name(i), partial(self.cycle, i)) for i in range(1, self.config.cycles + 1))
        return stages

    def run(self, variant: Optional[str] = None) -> CycleReport:
        variant = variant or self.config.variant
        report = CycleReport(variant, self.config.cycles)
        for name, stage in self.stages_for(variant):
            try:
                report.stages.append(stage())
            except TossFuseError as e:
                raise StageError(name, e, report) from e
        return report


def run_cycle(dataset: TossDataset, config: Optional[CycleConfig] = None, threads: Optional[int] = None) -> CycleReport:
    """
    Runs every stage the configured variant needs, in order.

    A failing stage raises `StageError` carrying the stage name and the
    report of the stages completed before it.
    """
    return CyclePipeline(dataset, config, threads).run()


def apply_to_new_clip(model: ContactModel, geom: TriangleMesh, clip: Clip, intrinsics: CameraIntrinsics,
                      config: Optional[CycleConfig] = None, gt_mesh: Optional[TriangleMesh] = None
                      ) -> Tuple[TrackResult, EvalReport]:
    """
    Model-to-frame tracking of an unseen clip with the learned hull as the
    shape prior; nothing is re-learned. `model` is carried for the caller's
    rollouts and is not consulted by the tracker.
    """
    config = config or CycleConfig()
    if not len(clip):
        raise InvalidInputError('clip has no frames')
    validate_clip(clip, intrinsics)
    tracked = track_clip(clip, intrinsics, shape_prior=geom, config=config.tracker)
    report = EvalReport()
    if clip.gt_poses is not None:
        points = (gt_mesh or geom).sample_surface(EVAL_POINTS, seed=EVAL_POINTS_SEED)
        evaluate_trajectory(tracked.poses, clip.gt_poses, points, config.auc_threshold, report)
    if gt_mesh is not None:
        evaluate_geometry(geom, gt_mesh, report, config.chamfer_samples, config.chamfer_seed)
    logger.info('New clip of %d frames: %s (mu %.3f)', len(clip), report.row(), model.mu)
    return tracked, report


ABLATION_LABELS = {
    'b': 'single toss, frame-to-frame',
    'c': 'all tosses, no dynamics',
    'd': 'dynamics, no re-tracking',
    'e': 'refinement, no dynamics',
    'f': 'dynamics, no ICP refinement',
    'g': 'full cycle',
}


@dataclass(eq=False)
class AblationResult:
    reports: Dict[str, CycleReport]
    summary: pd.DataFrame
    checks: Dict[str, bool]


def ordering_checks(summary: pd.DataFrame) -> Dict[str, bool]:
    cd = summary['CD(cm)']
    add = summary['ADD(%)']
    if cd.isna().any() or add.isna().any():
        return {}
    return {
        'g_lowest_cd': bool(cd['g'] == cd.min()),
        'cd_g_below_d': bool(cd['g'] < cd['d']),
        'cd_d_below_c': bool(cd['d'] < cd['c']),
        'add_g_at_least_b': bool(add['g'] >= add['b']),
    }


def run_ablation(dataset: TossDataset, config: Optional[CycleConfig] = None,
                 variants: Sequence[str] = VARIANTS, threads: Optional[int] = None) -> AblationResult:
    """
    Evaluates the variants on one shared stage cache and tabulates the final
    stage of each, one row per variant.
    """
    pipeline = CyclePipeline(dataset, config, threads)
    reports = {variant: pipeline.run(variant) for variant in variants}
    rows = [{'variant': v, 'label': ABLATION_LABELS[v], **reports[v].final.report.row()} for v in variants]
    summary = pd.DataFrame(rows).set_index('variant')
    checks = ordering_checks(summary) if set('bcdg') <= set(variants) else {}
    for name, passed in checks.items():
        (logger.info if passed else logger.warning)('Ordering %s: %s', name, 'holds' if passed else 'violated')
    return AblationResult(reports, summary, checks)


def write_stage(result: StageResult, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    write_trajectory(directory / 'trajectory.csv', result.poses, result.rms)
    if result.mesh is not None:
        write_obj(directory / 'mesh.obj', result.mesh)
    if result.model is not None:
        write_model(directory / 'model.txt', result.model)
        write_ply(directory / 'polytope.ply', result.model.vertices)
    if result.rollouts is not None:
        write_json(directory / 'rollouts.json', result.rollouts.to_dict())
    if result.refined is not None:
        (directory / 'depth').mkdir(exist_ok=True)
        (directory / 'mask').mkdir(exist_ok=True)
        for k, frame in enumerate(result.refined):
            write_depth(directory / 'depth' / f'frame_{k:04d}.dpt', frame.depth)
            write_mask(directory / 'mask' / f'frame_{k:04d}.pgm', frame.mask)
    write_json(directory / 'report.json', {**result.summary(), 'metrics': result.report.to_dict()})


def write_cycle_report(report: CycleReport, directory) -> Path:
    """
    `stage_<name>/` per executed stage plus `cycle_report.json`. Wall-clock
    timings go to `timings.json`, apart from the reproducible artifacts.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for result in report.stages:
        write_stage(result, directory / f'stage_{result.name}')
    write_json(directory / 'cycle_report.json', report.to_dict())
    write_json(directory / 'timings.json', report.timings())
    return directory
