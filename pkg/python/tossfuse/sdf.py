"""
    Truncated signed distance voxel grids.

    Values and weights are indexed `[ix, iy, iz]`; voxel `(i, j, k)` has its
    centre at `origin + voxel_size * (i, j, k)`. Positive is outside.
"""
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure

from tossfuse.camera import CameraIntrinsics, check_frame
from tossfuse.errors import EmptySurfaceError, InvalidInputError
from tossfuse.geometry import PointCloud, RigidPose, TriangleMesh, as_point_cloud


@dataclass(eq=False)
class SdfGrid:
    origin: np.ndarray
    voxel_size: float
    dims: Tuple[int, int, int]
    values: np.ndarray
    weights: np.ndarray
    truncation: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        self.voxel_size = float(self.voxel_size)
        self.truncation = float(self.truncation)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise InvalidInputError(f'grid needs at least 2 voxels per axis, got {self.dims}')
        if self.voxel_size <= 0 or self.truncation <= 0:
            raise InvalidInputError('voxel_size and truncation must be positive')
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.values.shape != self.dims or self.weights.shape != self.dims:
            raise InvalidInputError('values and weights must match dims')
        if (self.weights < 0).any():
            raise InvalidInputError('weights must be non-negative')
        np.clip(self.values, -self.truncation, self.truncation, out=self.values)

    @classmethod
    def empty(cls, origin, voxel_size: float, dims: Sequence[int], truncation: float) -> 'SdfGrid':
        dims = tuple(int(d) for d in dims)
        return cls(origin, voxel_size, dims, np.full(dims, float(truncation)), np.zeros(dims), truncation)

    @classmethod
    def centered(cls, bounding_radius: float, dims: int = 64, radius_scale: float = 2.5,
                 truncation_voxels: float = 5.0) -> 'SdfGrid':
        """
        Cubic grid around the origin spanning `radius_scale * bounding_radius`.
        """
        if bounding_radius <= 0:
            raise InvalidInputError('bounding radius must be positive')
        voxel_size = bounding_radius * radius_scale / dims
        origin = np.full(3, -(dims - 1) / 2.0 * voxel_size)
        return cls.empty(origin, voxel_size, (dims, dims, dims), truncation_voxels * voxel_size)

    @classmethod
    def from_function(cls, function: Callable[[np.ndarray], np.ndarray], origin, voxel_size: float,
                      dims: Sequence[int], truncation: float) -> 'SdfGrid':
        """
        Samples an analytic signed distance at every voxel centre, weight 1.
        """
        grid = cls.empty(origin, voxel_size, dims, truncation)
        values = np.asarray(function(grid.centers), dtype=np.float64).reshape(grid.dims)
        grid.values = np.clip(values, -grid.truncation, grid.truncation)
        grid.weights = np.ones(grid.dims)
        return grid

    @cached_property
    def centers(self) -> np.ndarray:
        """Voxel centres in C order of `values`, shape `(N, 3)`."""
        axes = [self.origin[i] + self.voxel_size * np.arange(self.dims[i]) for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, 3)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.voxel_size * (np.asarray(self.dims) - 1)

    def copy(self) -> 'SdfGrid':
        return SdfGrid(self.origin.copy(), self.voxel_size, self.dims,
                       self.values.copy(), self.weights.copy(), self.truncation)


def tsdf_integrate(grid: SdfGrid, depth: np.ndarray, mask: np.ndarray, intrinsics: CameraIntrinsics,
                   camera_from_object: RigidPose) -> SdfGrid:
    """
    Fuses one masked depth frame into `grid` in place and returns it.

    Every voxel projecting onto a masked pixel with valid depth gets the
    observation `min(measured - voxel_depth, truncation)` averaged in with
    weight 1. Voxels more than `truncation` behind the surface are left alone.
    """
    check_frame(intrinsics, depth, mask)
    if grid.truncation <= grid.voxel_size:
        raise InvalidInputError('truncation must exceed the voxel size')
    mask = mask.astype(bool)
    if not mask.any():
        return grid

    points = camera_from_object.apply(grid.centers)
    z = points[:, 2]
    front = np.flatnonzero(z > 1e-9)
    zf = z[front]
    u = np.rint(intrinsics.fx * points[front, 0] / zf + intrinsics.cx)
    v = np.rint(intrinsics.fy * points[front, 1] / zf + intrinsics.cy)
    inside = (u >= 0) & (u < intrinsics.cols) & (v >= 0) & (v < intrinsics.rows)
    index = front[inside]
    u = u[inside].astype(np.int64)
    v = v[inside].astype(np.int64)

    measured = depth[v, u]
    valid = mask[v, u] & (measured > 0)
    index = index[valid]
    sdf = measured[valid] - z[index]
    near = sdf >= -grid.truncation
    index = index[near]
    observation = np.minimum(sdf[near], grid.truncation)

    values = grid.values.reshape(-1)
    weights = grid.weights.reshape(-1)
    previous = weights[index]
    values[index] = (values[index] * previous + observation) / (previous + 1.0)
    weights[index] = previous + 1.0
    return grid


def _observed_cubes(weights: np.ndarray) -> np.ndarray:
    observed = weights > 0
    cubes = np.zeros_like(observed)
    inner = observed[:-1, :-1, :-1].copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                inner &= observed[dx:observed.shape[0] - 1 + dx,
                                  dy:observed.shape[1] - 1 + dy,
                                  dz:observed.shape[2] - 1 + dz]
    cubes[:-1, :-1, :-1] = inner
    return cubes


def extract_surface(grid: SdfGrid) -> TriangleMesh:
    """
    Zero level set by marching cubes over cubes whose 8 corners were observed.
    """
    observed = grid.weights > 0
    if not observed.any():
        raise EmptySurfaceError('grid has no observed voxels')
    seen = grid.values[observed]
    if seen.min() >= 0 or seen.max() <= 0:
        raise EmptySurfaceError('grid has no sign change')
    try:
        vertices, faces, _, _ = measure.marching_cubes(
            grid.values, level=0.0, spacing=(grid.voxel_size,) * 3, mask=_observed_cubes(grid.weights),
            allow_degenerate=False, gradient_direction='ascent')
    except (ValueError, RuntimeError) as e:
        raise EmptySurfaceError(str(e)) from e
    mesh = TriangleMesh(vertices + grid.origin, faces)
    if mesh.is_empty():
        raise EmptySurfaceError('zero level set has no triangles')
    return mesh


def redistance(grid: SdfGrid, mesh: TriangleMesh, density: float = 16.0) -> SdfGrid:
    """
    Replaces every observed value by the distance to `mesh`, keeping the
    fused sign, clipped to the truncation. Distances are taken to a surface
    sampling of about `density` points per voxel face area. Returns `grid`.
    """
    if mesh.is_empty():
        raise EmptySurfaceError('cannot redistance to an empty mesh')
    observed = grid.weights.reshape(-1) > 0
    if not observed.any():
        return grid
    count = int(np.clip(density * mesh.area / grid.voxel_size ** 2, 1000, 400000))
    surface = np.vstack([mesh.vertices, mesh.sample_surface(count, seed=0)])
    values = grid.values.reshape(-1)
    distances, _ = cKDTree(surface).query(grid.centers[observed], distance_upper_bound=grid.truncation)
    signs = np.where(values[observed] < 0, -1.0, 1.0)
    values[observed] = signs * np.minimum(distances, grid.truncation)
    return grid


class SdfSamples(NamedTuple):
    values: np.ndarray
    in_bounds: np.ndarray


def sdf_query(grid: SdfGrid, points) -> Union[SdfSamples, Tuple[float, bool]]:
    """
    Trilinear interpolation; outside the grid returns `+truncation` and a
    cleared `in_bounds` flag. A single 3-vector gives scalars back.
    """
    single = np.ndim(points) == 1
    cloud = as_point_cloud(points)
    index = (cloud - grid.origin) / grid.voxel_size
    upper = np.asarray(grid.dims) - 1
    in_bounds = ((index >= -1e-9) & (index <= upper + 1e-9)).all(axis=1)
    values = np.full(len(cloud), grid.truncation)
    if in_bounds.any():
        coords = np.clip(index[in_bounds], 0, upper).T
        values[in_bounds] = ndimage.map_coordinates(grid.values, coords, order=1, mode='nearest')
    if single:
        return float(values[0]), bool(in_bounds[0])
    return SdfSamples(values, in_bounds)


@dataclass
class EikonalReport:
    residuals: np.ndarray
    mean: float
    max: float
    excluded: int


def eikonal_residual(grid: SdfGrid, samples: PointCloud, step: Optional[float] = None) -> EikonalReport:
    """
    `(|grad sdf| - 1) ** 2` by central differences of width `step`
    (one voxel by default). Samples whose stencil leaves the grid or touches
    a clamped value are excluded and counted.
    """
    cloud = as_point_cloud(samples, 'samples')
    h = grid.voxel_size if step is None else float(step)
    stencil = [cloud]
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = h
        stencil += [cloud + offset, cloud - offset]
    queries = [sdf_query(grid, points) for points in stencil]
    band = grid.truncation * (1 - 1e-9)
    valid = np.ones(len(cloud), dtype=bool)
    for query in queries:
        valid &= query.in_bounds & (np.abs(query.values) < band)
    gradient = np.column_stack([
        (queries[1 + 2 * axis].values - queries[2 + 2 * axis].values) / (2 * h) for axis in range(3)])
    residuals = (np.linalg.norm(gradient[valid], axis=1) - 1.0) ** 2
    if not len(residuals):
        raise InvalidInputError('no samples inside the truncation band')
    return EikonalReport(residuals, float(residuals.mean()), float(residuals.max()),
                         int(len(cloud) - valid.sum()))
