"""
    Point-to-point iterative closest point.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from tossfuse.config import IcpConfig
from tossfuse.errors import DegenerateCorrespondenceError, InsufficientOverlapError, InvalidInputError
from tossfuse.geometry import PointCloud, RigidPose, as_point_cloud, compose

logger = logging.getLogger(__name__)


@dataclass
class IcpResult:
    pose: RigidPose
    rms_error: float
    iterations: int
    converged: bool
    # RMS correspondence distance before the first step and after each step.
    history: List[float] = field(default_factory=list)


def _nearest(tree: cKDTree, size: int, points: np.ndarray, max_dist: float) -> Tuple[np.ndarray, np.ndarray]:
    # Widen k until no row's k-th neighbour still ties its nearest, then
    # take the lowest index among the tied ones.
    k = min(size, 4)
    while True:
        distances, indices = tree.query(points, k=k, distance_upper_bound=max_dist)
        if k == 1:
            return distances, indices
        nearest = distances[:, 0]
        open_ties = np.isfinite(nearest) & (distances[:, -1] == nearest)
        if k == size or not open_ties.any():
            break
        k = min(size, 2 * k)
    tied = distances == nearest[:, None]
    return nearest, np.where(tied, indices, size).min(axis=1)


def nearest_correspondences(source: PointCloud, target: PointCloud, max_dist: float,
                            tree: Optional[cKDTree] = None) -> np.ndarray:
    """
    `(M, 2)` array of `(source index, target index)` pairs, one per source
    point with a target within `max_dist` (inclusive), ordered by source.
    """
    source = as_point_cloud(source, 'source')
    target = as_point_cloud(target, 'target')
    if not len(source) or not len(target):
        raise InvalidInputError('correspondence search needs non-empty clouds')
    if tree is None:
        tree = cKDTree(target)
    distances, indices = _nearest(tree, len(target), source, np.nextafter(max_dist, np.inf))
    found = np.flatnonzero(np.isfinite(distances))
    return np.column_stack([found, indices[found]]).astype(np.int64)


def best_rigid_transform(source: PointCloud, target: PointCloud) -> RigidPose:
    """
    Least-squares rigid map of matched `source` rows onto `target` rows,
    reflection-corrected SVD.
    """
    source = as_point_cloud(source, 'source')
    target = as_point_cloud(target, 'target')
    if len(source) != len(target):
        raise InvalidInputError('matched clouds must have equal length')
    if len(source) < 3:
        raise DegenerateCorrespondenceError(f'need at least 3 pairs, got {len(source)}')
    source_center = source.mean(axis=0)
    target_center = target.mean(axis=0)
    centered = source - source_center
    spread = np.linalg.svd(centered, compute_uv=False)
    if spread[0] <= 1e-15 or spread[1] <= 1e-9 * spread[0]:
        raise DegenerateCorrespondenceError('correspondences are collinear')
    h = centered.T @ (target - target_center)
    u, _, vt = np.linalg.svd(h)
    if np.linalg.det(vt.T @ u.T) < 0:
        vt[-1] *= -1
    rotation = vt.T @ u.T
    return RigidPose.from_matrix(rotation, target_center - rotation @ source_center)


def icp_align(source: PointCloud, target: PointCloud, config: Optional[IcpConfig] = None,
              initial: Optional[RigidPose] = None) -> IcpResult:
    """
    Aligns `source` onto `target`, starting from `initial`.

    Stops once a step lowers the RMS correspondence distance by less than
    `convergence_tol`, or after `max_iterations` steps. A step that raises
    the RMS is discarded and the previous pose returned.
    """
    config = config or IcpConfig()
    source = as_point_cloud(source, 'source')
    target = as_point_cloud(target, 'target')
    if len(source) < config.min_correspondences or len(target) < config.min_correspondences:
        raise InsufficientOverlapError(
            f'clouds of {len(source)} and {len(target)} points are below '
            f'{config.min_correspondences} correspondences', min(len(source), len(target)))

    tree = cKDTree(target)
    pose = initial or RigidPose.identity()
    current = pose.apply(source)

    def match(points):
        pairs = nearest_correspondences(points, target, config.max_correspondence_distance, tree)
        if len(pairs) < config.min_correspondences:
            raise InsufficientOverlapError(
                f'only {len(pairs)} correspondences within {config.max_correspondence_distance} m',
                len(pairs))
        residual = points[pairs[:, 0]] - target[pairs[:, 1]]
        return pairs, float(np.sqrt(np.mean(np.einsum('ij,ij->i', residual, residual))))

    pairs, rms = match(current)
    history = [rms]
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        step = best_rigid_transform(current[pairs[:, 0]], target[pairs[:, 1]])
        moved = step.apply(current)
        new_pairs, new_rms = match(moved)
        if new_rms > rms:
            converged = True
            break
        history.append(new_rms)
        improvement = rms - new_rms
        current, pose = moved, compose(step, pose)
        pairs, rms = new_pairs, new_rms
        if improvement < config.convergence_tol:
            converged = True
            break

    logger.debug('ICP: %d iterations, rms %.3e m, %d pairs, converged=%s',
                 iterations, rms, len(pairs), converged)
    return IcpResult(pose, rms, iterations, converged, history)


def subsample(cloud: PointCloud, max_points: int) -> PointCloud:
    """
    Deterministic even-stride thinning to at most `max_points` rows.
    """
    if max_points <= 0 or len(cloud) <= max_points:
        return cloud
    index = np.linspace(0, len(cloud) - 1, max_points).round().astype(np.int64)
    return cloud[np.unique(index)]
