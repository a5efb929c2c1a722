"""
    `tossfuse` command line. Every subcommand is a thin wrapper over the
    library call of the same name and leaves a manifest next to its
    outputs.
"""
import argparse
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from tossfuse import __version__
from tossfuse.config import (CycleConfig, SynthConfig, VARIANTS, config_to_dict, load_config,
                             resolve_threads)
from tossfuse.dataset import Clip, TossDataset
from tossfuse.dynamics import BodyState, RolloutReport, evaluate_rollouts, rollout
from tossfuse.errors import ConfigError, InvalidInputError, TossFuseError
from tossfuse.formats import (hash_file, hash_tree, load_dataset, pose_from_list, read_json, read_model,
                              read_obj, read_ply, read_trajectory, save_dataset, write_json, write_model,
                              write_obj, write_ply, write_sdf, write_trajectory)
from tossfuse.geometry import RigidPose, box_mesh, decimate_to_polytope
from tossfuse.learning import fit, refined_geometry
from tossfuse.metrics import EvalReport, evaluate_geometry, evaluate_trajectory, format_table
from tossfuse.pipeline import (EVAL_POINTS, EVAL_POINTS_SEED, CyclePipeline, held_out_trajectories,
                               icp_refine_frames, refined_clip, reproject_refined, rollout_report, run_ablation,
                               world_transitions, write_cycle_report)
from tossfuse.synth import synthesize
from tossfuse.tracker import reconstruct, track_clip

logger = logging.getLogger(__name__)

LOG_FORMAT = '[%(levelname)s] %(name)s: %(message)s'
# Points for ADD when `evaluate` gets no `--points` mesh: the default cube.
DEFAULT_EVAL_SIDE = 0.06


class Run:
    """
    One invocation: resolved inputs, the output location and what to echo
    into the manifest.
    """

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.threads = resolve_threads(args.threads)
        self.seeds: Dict[str, Any] = {}
        self.config_path: Optional[str] = getattr(args, 'config', None)

    def cycle_config(self) -> CycleConfig:
        config = load_config(CycleConfig, self.args.config)
        self.seeds.update(train=config.train.seed, chamfer=config.chamfer_seed)
        return config

    def dataset(self) -> TossDataset:
        dataset = load_dataset(self.args.dataset)
        dataset.validate()
        return dataset

    def clip(self, dataset: TossDataset) -> Clip:
        index = self.args.clip
        if not 0 <= index < len(dataset):
            raise InvalidInputError(f'clip {index} outside {len(dataset)} clips')
        return dataset.clips[index]


def write_manifest(written: Path, run: Run, command: str):
    """
    `manifest.json` inside an output directory, or `<name>.manifest.json`
    beside a single output file.
    """
    if written.is_dir():
        path, artifacts = written / 'manifest.json', hash_tree(written)
    else:
        path, artifacts = written.with_name(f'{written.name}.manifest.json'), {written.name: hash_file(written)}
    write_json(path, {
        'command': command,
        'argv': sys.argv[1:],
        'config': run.config_path,
        'seeds': run.seeds,
        'artifacts': artifacts,
        'version': __version__,
    })


def _eval_clip(dataset: TossDataset, clip: Clip, poses: List[RigidPose], config: CycleConfig) -> EvalReport:
    report = EvalReport()
    if clip.gt_poses is not None and dataset.ground_truth is not None:
        points = dataset.ground_truth.mesh.sample_surface(EVAL_POINTS, seed=EVAL_POINTS_SEED)
        evaluate_trajectory(poses, clip.gt_poses, points, config.auc_threshold, report)
    return report


def cmd_synth(run: Run) -> Path:
    config = load_config(SynthConfig, run.args.config)
    if run.args.seed is not None:
        config.seed = run.args.seed
    run.seeds.update(synth=config.seed, noise=config.noise.seed)
    out = Path(run.args.out)
    save_dataset(synthesize(config, run.threads), out)
    return out


def cmd_track(run: Run) -> Path:
    config = run.cycle_config()
    dataset = run.dataset()
    clip = run.clip(dataset)
    prior = read_obj(run.args.prior) if run.args.prior else None
    tracked = track_clip(clip, dataset.intrinsics, shape_prior=prior, config=config.tracker)
    out = Path(run.args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / 'trajectory.csv', tracked.poses, tracked.rms)
    report = _eval_clip(dataset, clip, tracked.poses, config)
    write_json(out / 'report.json', {'mode': tracked.mode, 'skipped': tracked.skipped,
                                     'metrics': report.to_dict()})
    return out


def _trajectory_for(directory: Path, index: int) -> Optional[Path]:
    for candidate in (directory / f'clip_{index}.csv', directory / f'clip_{index}' / 'trajectory.csv'):
        if candidate.exists():
            return candidate
    return None


def cmd_reconstruct(run: Run) -> Path:
    config = run.cycle_config()
    dataset = run.dataset()
    directory = Path(run.args.trajectories)
    clips, poses = [], []
    for i, clip in enumerate(dataset.clips):
        path = _trajectory_for(directory, i)
        if path is not None:
            clips.append(clip)
            poses.append(read_trajectory(path)[0])
    if not clips:
        raise ConfigError(f'{directory}: no clip_<i>.csv or clip_<i>/trajectory.csv found')
    grid, mesh = reconstruct(clips, poses, dataset.intrinsics, config.tsdf)
    out = Path(run.args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_obj(out / 'mesh.obj', mesh)
    write_sdf(out / 'grid.sdf', grid)
    report = EvalReport()
    if dataset.ground_truth is not None:
        evaluate_geometry(mesh, dataset.ground_truth.mesh, report, config.chamfer_samples, config.chamfer_seed)
    write_json(out / 'report.json', {'clips': len(clips), 'metrics': report.to_dict()})
    return out


def _initial_vertices(path: str, config: CycleConfig) -> np.ndarray:
    if path.lower().endswith('.ply'):
        return read_ply(path)
    return decimate_to_polytope(read_obj(path), config.polytope_vertices)


def _rollout_summary(report: RolloutReport, tolerance: float) -> dict:
    return {**report.to_dict(), 'rollouts': len(report), 'rest_tolerance_m': tolerance,
            'rollouts_at_rest': report.within(tolerance)}


def cmd_learn(run: Run) -> Path:
    config = run.cycle_config()
    dataset = run.dataset()
    clip = run.clip(dataset)
    poses, _ = read_trajectory(run.args.trajectory)
    if len(poses) != len(clip):
        raise InvalidInputError(f'{len(poses)} poses for a clip of {len(clip)} frames')
    initial = read_model(run.args.model_init)
    if run.args.prior:
        initial = initial.replace(vertices=_initial_vertices(run.args.prior, config))
    transitions = world_transitions(dataset, clip, poses, config.train.velocity_scheme)
    trained = fit(initial, transitions, config.train)
    report = {'initial_loss': trained.initial_loss, 'final_loss': trained.final_loss,
              'epochs': trained.epochs, 'unconverged_solves': trained.unconverged_solves}
    rollouts = rollout_report(trained.model, held_out_trajectories(dataset, run.args.clip, config.rollout_clips),
                              config)
    if rollouts is not None:
        report['rollouts'] = _rollout_summary(rollouts, config.rest_tolerance)
    out = Path(run.args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_model(out / 'model.txt', trained.model)
    write_ply(out / 'polytope.ply', trained.model.vertices)
    write_obj(out / 'mesh.obj', refined_geometry(trained.model))
    write_json(out / 'report.json', report)
    return out


def read_state(path) -> BodyState:
    data = read_json(path)
    try:
        return BodyState(pose_from_list(data['pose']), np.asarray(data['linear_velocity'], dtype=float),
                         np.asarray(data['angular_velocity'], dtype=float))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f'{path}: state needs pose, linear_velocity and angular_velocity: {e}') from e


def cmd_rollout(run: Run) -> Path:
    model = read_model(run.args.model)
    initial = read_state(run.args.init)
    if run.args.steps < 1:
        raise InvalidInputError('steps must be at least 1')
    states = rollout(model, initial, run.args.steps, run.args.dt, run.args.substeps)
    out = Path(run.args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trajectory(out, [state.pose for state in states])
    return out


def cmd_refine(run: Run) -> Path:
    config = run.cycle_config()
    dataset = run.dataset()
    clip = run.clip(dataset)
    mesh = read_obj(run.args.mesh)
    poses, _ = read_trajectory(run.args.trajectory)
    if len(poses) != len(clip):
        raise InvalidInputError(f'{len(poses)} poses for a clip of {len(clip)} frames')
    predicted = reproject_refined(mesh, poses, dataset.intrinsics, run.threads)
    observed = [(frame.depth, frame.mask) for frame in clip.frames]
    refined = icp_refine_frames(observed, predicted, dataset.intrinsics, config.icp, mesh, poses,
                                threads=run.threads)
    clips = list(dataset.clips)
    clips[run.args.clip] = refined_clip(clip, refined)
    out = Path(run.args.out)
    save_dataset(dataset.with_clips(clips), out)
    write_trajectory(out / 'corrections.csv', [frame.correction for frame in refined],
                     np.array([frame.rms for frame in refined]))
    write_json(out / 'refine.json', {'clip': run.args.clip,
                                     'fallback_frames': [k for k, f in enumerate(refined) if f.fallback]})
    return out


def cmd_pipeline(run: Run) -> Path:
    config = run.cycle_config()
    if run.args.variant:
        config.variant = run.args.variant
    if run.args.cycles is not None:
        if run.args.cycles < 1:
            raise InvalidInputError('cycles must be at least 1')
        config.cycles = run.args.cycles
    report = CyclePipeline(run.dataset(), config, run.threads).run()
    out = write_cycle_report(report, run.args.out)
    write_json(out / 'config.json', config_to_dict(config))
    print(format_table([(f'stage {stage.name}', stage.report) for stage in report.stages]))
    return out


def _is_mesh(path: str) -> bool:
    return path.lower().endswith('.obj')


def _is_model(path: str) -> bool:
    return path.lower().endswith('.txt')


def _evaluate_rollouts(run: Run) -> Path:
    dataset = load_dataset(run.args.gt)
    dataset.validate()
    trajectories = held_out_trajectories(dataset, -1, len(dataset))
    if not trajectories:
        raise ConfigError(f'{run.args.gt}: no ground-truth clips to roll out against')
    report = evaluate_rollouts(read_model(run.args.est), trajectories, run.args.steps, run.args.substeps)
    summary = _rollout_summary(report, run.args.rest_tolerance)
    out = Path(run.args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, summary)
    print(f'{summary["rollouts_at_rest"]} of {len(report)} rollouts end within '
          f'{run.args.rest_tolerance * 1e3:.1f} mm of the observed height')
    return out


def cmd_evaluate(run: Run) -> Path:
    est, gt = run.args.est, run.args.gt
    if _is_model(est):
        return _evaluate_rollouts(run)
    if _is_mesh(est) != _is_mesh(gt):
        raise ConfigError('--est and --gt must both be trajectories (.csv) or both meshes (.obj)')
    report = EvalReport()
    if _is_mesh(est):
        evaluate_geometry(read_obj(est), read_obj(gt), report, run.args.samples, run.args.seed)
        run.seeds.update(chamfer=run.args.seed)
    else:
        geometry = read_obj(run.args.points) if run.args.points else box_mesh(DEFAULT_EVAL_SIDE)
        points = geometry.sample_surface(EVAL_POINTS, seed=EVAL_POINTS_SEED)
        evaluate_trajectory(read_trajectory(est)[0], read_trajectory(gt)[0], points, run.args.auc_threshold, report)
    out = Path(run.args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, report.to_dict())
    print(format_table([(Path(est).name, report)]))
    return out


def cmd_ablate(run: Run) -> Path:
    config = run.cycle_config()
    result = run_ablation(run.dataset(), config, threads=run.threads)
    out = Path(run.args.out)
    out.mkdir(parents=True, exist_ok=True)
    for variant, report in result.reports.items():
        write_cycle_report(report, out / f'variant_{variant}')
    result.summary.to_csv(out / 'summary.csv', float_format='%.17g')
    write_json(out / 'ablation.json', {'checks': result.checks})
    print(format_table([(f'({v}) {result.summary.loc[v, "label"]}', result.reports[v].final.report)
                        for v in result.summary.index]))
    for name, passed in result.checks.items():
        print(f'{name}: {"ok" if passed else "VIOLATED"}')
    return out


COMMANDS: Dict[str, Callable[[Run], Path]] = {
    'synth': cmd_synth,
    'track': cmd_track,
    'reconstruct': cmd_reconstruct,
    'learn': cmd_learn,
    'rollout': cmd_rollout,
    'refine': cmd_refine,
    'pipeline': cmd_pipeline,
    'evaluate': cmd_evaluate,
    'ablate': cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='tossfuse', description='Toss tracking, reconstruction and contact learning.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--threads', type=int, default=None, help='worker cap, default $TOSSFUSE_THREADS or 1')
    parser.add_argument('--log-level', default=None, help='default $TOSSFUSE_LOG_LEVEL or WARNING')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help='generate a synthetic toss dataset')
    synth.add_argument('--config', help='SynthConfig JSON')
    synth.add_argument('--seed', type=int, default=None)
    synth.add_argument('--out', required=True)

    track = commands.add_parser('track', help='track one clip')
    track.add_argument('--dataset', required=True)
    track.add_argument('--clip', type=int, default=0)
    track.add_argument('--prior', help='shape prior mesh, enables model-to-frame tracking')
    track.add_argument('--config', help='CycleConfig JSON')
    track.add_argument('--out', required=True)

    recon = commands.add_parser('reconstruct', help='fuse tracked clips into a mesh')
    recon.add_argument('--dataset', required=True)
    recon.add_argument('--trajectories', required=True, help='directory of clip_<i>.csv trajectories')
    recon.add_argument('--config')
    recon.add_argument('--out', required=True)

    learn = commands.add_parser('learn', help='learn contact geometry and friction from a trajectory')
    learn.add_argument('--dataset', required=True, help='source of timestamps and the camera pose')
    learn.add_argument('--clip', type=int, default=0)
    learn.add_argument('--trajectory', required=True)
    learn.add_argument('--prior', help='initial vertices: a PLY point cloud, or an OBJ mesh to decimate')
    learn.add_argument('--model-init', required=True, help='mass, inertia, mu and fallback vertices')
    learn.add_argument('--config')
    learn.add_argument('--out', required=True)

    roll = commands.add_parser('rollout', help='simulate a contact model from an initial state')
    roll.add_argument('--model', required=True)
    roll.add_argument('--init', required=True, help='JSON with pose, linear_velocity, angular_velocity')
    roll.add_argument('--steps', type=int, required=True)
    roll.add_argument('--dt', type=float, default=1.0 / 30.0)
    roll.add_argument('--substeps', type=int, default=10)
    roll.add_argument('--out', required=True)

    refine = commands.add_parser('refine', help='reproject a mesh and ICP-refine one clip')
    refine.add_argument('--dataset', required=True)
    refine.add_argument('--clip', type=int, default=0)
    refine.add_argument('--mesh', required=True)
    refine.add_argument('--trajectory', required=True)
    refine.add_argument('--config')
    refine.add_argument('--out', required=True)

    pipe = commands.add_parser('pipeline', help='run one variant of the refinement cycle')
    pipe.add_argument('--dataset', required=True)
    pipe.add_argument('--variant', choices=VARIANTS, default=None)
    pipe.add_argument('--cycles', type=int, default=None)
    pipe.add_argument('--config')
    pipe.add_argument('--out', required=True)

    evaluate = commands.add_parser('evaluate', help='compare trajectories or meshes, or roll out a model')
    evaluate.add_argument('--est', required=True, help='trajectory (.csv), mesh (.obj) or contact model (.txt)')
    evaluate.add_argument('--gt', required=True, help='trajectory, mesh, or a dataset directory for a model')
    evaluate.add_argument('--points', help='mesh whose surface samples drive ADD')
    evaluate.add_argument('--auc-threshold', type=float, default=0.1)
    evaluate.add_argument('--samples', type=int, default=10000)
    evaluate.add_argument('--seed', type=int, default=42)
    evaluate.add_argument('--steps', type=int, default=99, help='rollout horizon in frames')
    evaluate.add_argument('--substeps', type=int, default=10)
    evaluate.add_argument('--rest-tolerance', type=float, default=0.005)
    evaluate.add_argument('--out', required=True)

    ablate = commands.add_parser('ablate', help='run every variant and print the summary')
    ablate.add_argument('--dataset', required=True)
    ablate.add_argument('--config')
    ablate.add_argument('--out', required=True)
    return parser


def configure_logging(level: Optional[str]):
    level = (level or os.environ.get('TOSSFUSE_LOG_LEVEL') or 'WARNING').upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f'unknown log level {level!r}')
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def _output_root(out: Path) -> Path:
    return out if out.is_dir() else next(parent for parent in out.parents if parent.exists())


def _entries(root: Path, out: Path) -> set:
    # An existing output directory is tracked recursively, otherwise only the
    # direct children of the nearest existing ancestor.
    return set(root.rglob('*')) if root == out else set(root.iterdir())


def _remove_new(root: Path, out: Path, before: set):
    for path in sorted(_entries(root, out) - before, key=lambda p: len(p.parts), reverse=True):
        if path.is_dir() and not path.is_symlink():
            shutil.rmtree(path, ignore_errors=True)
        else:
            path.unlink(missing_ok=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    root = _output_root(out)
    before = _entries(root, out)
    try:
        configure_logging(args.log_level)
        run = Run(args)
        written = COMMANDS[args.command](run)
        write_manifest(written, run, args.command)
    except (TossFuseError, OSError) as e:
        _remove_new(root, out, before)
        print(f'error: {type(e).__name__}: {e}', file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
