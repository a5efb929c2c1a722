"""
    Pose and shape accuracy: ADD, ADD-S, AUC, 5 degree / 5 cm success rate,
    Chamfer distance.
"""
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial import cKDTree

from tossfuse.errors import InvalidInputError
from tossfuse.geometry import PointCloud, RigidPose, TriangleMesh, as_point_cloud, pairwise_distances

DEFAULT_AUC_THRESHOLD = 0.1
DEFAULT_CHAMFER_SAMPLES = 10000
DEFAULT_CHAMFER_SEED = 42


def _model_points(geom: PointCloud) -> np.ndarray:
    points = as_point_cloud(geom, 'geom')
    if not len(points):
        raise InvalidInputError('model point set is empty')
    return points


def add_error(pose_est: RigidPose, pose_gt: RigidPose, geom: PointCloud) -> float:
    points = _model_points(geom)
    return float(np.linalg.norm(pose_est.apply(points) - pose_gt.apply(points), axis=1).mean())


def adds_error(pose_est: RigidPose, pose_gt: RigidPose, geom: PointCloud) -> float:
    """Closest-point variant of ADD, blind to object symmetries."""
    points = _model_points(geom)
    distances, _ = cKDTree(pose_est.apply(points)).query(pose_gt.apply(points), k=1)
    return float(distances.mean())


def auc(errors: Sequence[float], max_threshold: float = DEFAULT_AUC_THRESHOLD, samples: int = 1000) -> float:
    """
    Area under accuracy-vs-threshold on `[0, max_threshold]`, in percent.
    """
    errors = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    if not len(errors):
        raise InvalidInputError('no errors to integrate')
    if not max_threshold > 0:
        raise InvalidInputError('max_threshold must be positive')
    thresholds = np.linspace(0.0, max_threshold, samples)
    accuracy = np.searchsorted(errors, thresholds, side='right') / len(errors)
    return float(100.0 * trapezoid(accuracy, thresholds) / max_threshold)


def rotation_translation_error(pose_est: RigidPose, pose_gt: RigidPose) -> Tuple[float, float]:
    """Geodesic angle in degrees and translation distance in meters."""
    angle = (pose_gt.rotation.inv() * pose_est.rotation).magnitude()
    return float(np.degrees(angle)), float(np.linalg.norm(pose_est.translation - pose_gt.translation))


def success_rate(traj_est: Sequence[RigidPose], traj_gt: Sequence[RigidPose],
                 max_degrees: float = 5.0, max_meters: float = 0.05) -> float:
    if len(traj_est) != len(traj_gt):
        raise InvalidInputError(f'trajectory lengths differ: {len(traj_est)} vs {len(traj_gt)}')
    if not len(traj_est):
        raise InvalidInputError('trajectories are empty')
    hits = 0
    for est, gt in zip(traj_est, traj_gt):
        degrees, meters = rotation_translation_error(est, gt)
        hits += degrees < max_degrees and meters < max_meters
    return 100.0 * hits / len(traj_est)


def chamfer(cloud_a: PointCloud, cloud_b: PointCloud) -> float:
    a = as_point_cloud(cloud_a, 'cloud_a')
    b = as_point_cloud(cloud_b, 'cloud_b')
    if not len(a) or not len(b):
        raise InvalidInputError('chamfer needs two non-empty clouds')
    forward, backward = pairwise_distances(a, b)
    return 0.5 * float(forward.mean()) + 0.5 * float(backward.mean())


def mesh_chamfer(mesh_a: TriangleMesh, mesh_b: TriangleMesh, samples: int = DEFAULT_CHAMFER_SAMPLES,
                 seed: int = DEFAULT_CHAMFER_SEED) -> float:
    return chamfer(mesh_a.sample_surface(samples, seed), mesh_b.sample_surface(samples, seed))


@dataclass
class EvalReport:
    add_auc_percent: Optional[float] = None
    adds_auc_percent: Optional[float] = None
    sr_percent: Optional[float] = None
    chamfer_cm: Optional[float] = None
    add_errors: List[float] = field(default_factory=list)
    adds_errors: List[float] = field(default_factory=list)
    rotation_errors_deg: List[float] = field(default_factory=list)
    translation_errors_m: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> 'EvalReport':
        return cls(**data)

    def row(self) -> dict:
        """The four summary columns."""
        return {'ADD-S(%)': self.adds_auc_percent, 'ADD(%)': self.add_auc_percent,
                'SR(%)': self.sr_percent, 'CD(cm)': self.chamfer_cm}


def evaluate_trajectory(poses_est: Sequence[RigidPose], poses_gt: Sequence[RigidPose], geom: PointCloud,
                        auc_threshold: float = DEFAULT_AUC_THRESHOLD,
                        report: Optional[EvalReport] = None) -> EvalReport:
    """
    Fills the pose columns of `report` (a new one by default) for a trajectory.
    """
    if len(poses_est) != len(poses_gt):
        raise InvalidInputError(f'trajectory lengths differ: {len(poses_est)} vs {len(poses_gt)}')
    report = report or EvalReport()
    report.add_errors = [add_error(e, g, geom) for e, g in zip(poses_est, poses_gt)]
    report.adds_errors = [adds_error(e, g, geom) for e, g in zip(poses_est, poses_gt)]
    split = [rotation_translation_error(e, g) for e, g in zip(poses_est, poses_gt)]
    report.rotation_errors_deg = [s[0] for s in split]
    report.translation_errors_m = [s[1] for s in split]
    report.add_auc_percent = auc(report.add_errors, auc_threshold)
    report.adds_auc_percent = auc(report.adds_errors, auc_threshold)
    report.sr_percent = success_rate(poses_est, poses_gt)
    return report


def evaluate_geometry(mesh_est: TriangleMesh, mesh_gt: TriangleMesh, report: Optional[EvalReport] = None,
                      samples: int = DEFAULT_CHAMFER_SAMPLES, seed: int = DEFAULT_CHAMFER_SEED) -> EvalReport:
    report = report or EvalReport()
    report.chamfer_cm = 100.0 * mesh_chamfer(mesh_est, mesh_gt, samples, seed)
    return report


def format_table(rows: Sequence[Tuple[str, EvalReport]]) -> str:
    """
    Fixed-width summary, one row per labelled report.
    """
    header = f'{"":<28}{"ADD-S(%)":>10}{"ADD(%)":>10}{"SR(%)":>10}{"CD(cm)":>10}'
    lines = [header]

    def cell(value):
        return f'{"-":>10}' if value is None else f'{value:>10.2f}'

    for label, report in rows:
        lines.append(f'{label:<28}' + ''.join(cell(v) for v in report.row().values()))
    return '\n'.join(lines)
