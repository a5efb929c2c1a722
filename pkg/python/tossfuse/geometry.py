"""
    Rigid transforms, point clouds and triangle meshes.

    Point clouds are plain `(N, 3)` float64 arrays. Quaternions are stored
    scalar-first, as `(w, x, y, z)`; `scipy.spatial.transform.Rotation` does
    the rotation algebra.
"""
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Tuple

import numpy as np
import trimesh
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial.transform import Rotation

from tossfuse.errors import DegenerateHullError, InvalidInputError

PointCloud = np.ndarray


def as_point_cloud(points: Iterable, name: str = 'points') -> PointCloud:
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.size == 0:
        return np.zeros((0, 3))
    cloud = np.atleast_2d(cloud)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise InvalidInputError(f'{name} must have shape (N, 3), got {cloud.shape}')
    if not np.isfinite(cloud).all():
        raise InvalidInputError(f'{name} contains non-finite coordinates')
    return cloud


@dataclass(frozen=True, eq=False)
class RigidPose:
    """
    Places a body frame in a parent frame: `x_parent = R @ x_body + t`.
    """

    quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(-1)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if q.shape != (4,) or t.shape != (3,):
            raise InvalidInputError('pose needs a 4-quaternion and a 3-translation')
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm < 1e-12 or not np.isfinite(t).all():
            raise InvalidInputError('pose has a degenerate quaternion or translation')
        q = q / norm
        q.flags.writeable = False
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, 'quaternion', q)
        object.__setattr__(self, 'translation', t)

    @classmethod
    def identity(cls) -> 'RigidPose':
        return cls()

    @classmethod
    def from_rotation(cls, rotation: Rotation, translation=(0.0, 0.0, 0.0)) -> 'RigidPose':
        x, y, z, w = rotation.as_quat()
        return cls(np.array([w, x, y, z]), translation)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, translation=None) -> 'RigidPose':
        """
        Accepts a 3x3 rotation (plus `translation`) or a 4x4 homogeneous matrix.
        """
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape == (4, 4):
            translation = matrix[:3, 3]
            matrix = matrix[:3, :3]
        if translation is None:
            translation = np.zeros(3)
        return cls.from_rotation(Rotation.from_matrix(matrix), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> 'RigidPose':
        return cls.from_rotation(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)), translation)

    @cached_property
    def rotation(self) -> Rotation:
        w, x, y, z = self.quaternion
        return Rotation.from_quat([x, y, z, w])

    @cached_property
    def matrix(self) -> np.ndarray:
        return self.rotation.as_matrix()

    def as_matrix4(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.matrix
        out[:3, 3] = self.translation
        return out

    def apply(self, points) -> PointCloud:
        cloud = np.asarray(points, dtype=np.float64)
        if cloud.ndim == 1:
            return self.matrix @ cloud + self.translation
        return cloud @ self.matrix.T + self.translation

    def compose(self, other: 'RigidPose') -> 'RigidPose':
        return compose(self, other)

    def inverse(self) -> 'RigidPose':
        return invert(self)

    def __repr__(self) -> str:
        q = ', '.join(f'{x:.6g}' for x in self.quaternion)
        t = ', '.join(f'{x:.6g}' for x in self.translation)
        return f'RigidPose(q=({q}), t=({t}))'


def transform_points(pose: RigidPose, cloud: PointCloud) -> PointCloud:
    return pose.apply(as_point_cloud(cloud, 'cloud'))


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """
    `compose(a, b)` applies `b` first, then `a`.
    """
    return RigidPose.from_rotation(a.rotation * b.rotation, a.matrix @ b.translation + a.translation)


def invert(a: RigidPose) -> RigidPose:
    inverse = a.rotation.inv()
    return RigidPose.from_rotation(inverse, -(inverse.as_matrix() @ a.translation))


def interpolate_poses(a: RigidPose, b: RigidPose, fraction: float) -> RigidPose:
    """
    Slerp on rotation, linear on translation.
    """
    relative = (a.rotation.inv() * b.rotation).as_rotvec()
    rotation = a.rotation * Rotation.from_rotvec(fraction * relative)
    return RigidPose.from_rotation(rotation, (1 - fraction) * a.translation + fraction * b.translation)


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = as_point_cloud(self.vertices, 'vertices')
        faces = np.asarray(self.faces, dtype=np.int64)
        if faces.size == 0:
            faces = np.zeros((0, 3), dtype=np.int64)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise InvalidInputError(f'faces must have shape (F, 3), got {faces.shape}')
        if faces.size and (faces.min() < 0 or faces.max() >= len(self.vertices)):
            raise InvalidInputError('face index out of range')
        self.faces = faces[_face_areas(self.vertices, faces) > 0]

    @property
    def face_areas(self) -> np.ndarray:
        return _face_areas(self.vertices, self.faces)

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    @property
    def volume(self) -> float:
        """Signed volume, positive for outward winding."""
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(np.einsum('ij,ij->i', a, np.cross(b, c)).sum() / 6.0)

    @property
    def bounds(self) -> np.ndarray:
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def transformed(self, pose: RigidPose) -> 'TriangleMesh':
        return TriangleMesh(pose.apply(self.vertices), self.faces.copy())

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)

    def sample_surface(self, count: int, seed: Optional[int] = 42) -> PointCloud:
        """
        Area-weighted uniform samples, reproducible for a fixed `seed`.
        """
        if self.is_empty():
            raise InvalidInputError('cannot sample an empty mesh')
        points, _ = trimesh.sample.sample_surface(self.to_trimesh(), int(count), seed=seed)
        return np.asarray(points, dtype=np.float64)


def _face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    if len(faces) == 0:
        return np.zeros(0)
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def box_mesh(side: float = 0.06) -> TriangleMesh:
    """
    Axis-aligned cube of edge `side` centred on the origin, outward winding.
    """
    box = trimesh.creation.box(extents=(side, side, side))
    return TriangleMesh(np.asarray(box.vertices), np.asarray(box.faces))


def cube_corners(side: float = 0.06) -> PointCloud:
    h = side / 2.0
    return np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])


def decimate_to_polytope(mesh: TriangleMesh, count: int) -> PointCloud:
    """
    Farthest-point subset of the mesh vertices.

    Seeded at the lexicographically smallest vertex; each next pick is the
    vertex farthest from everything picked so far, lowest index on ties.
    """
    vertices = mesh.vertices
    if count < 4:
        raise InvalidInputError(f'a 3D polytope needs at least 4 vertices, got {count}')
    if count > len(vertices):
        raise InvalidInputError(f'mesh has {len(vertices)} vertices, cannot pick {count}')
    first = int(np.lexsort(vertices.T[::-1])[0])
    chosen = [first]
    distance = np.linalg.norm(vertices - vertices[first], axis=1)
    for _ in range(count - 1):
        pick = int(np.argmax(distance))
        chosen.append(pick)
        distance = np.minimum(distance, np.linalg.norm(vertices - vertices[pick], axis=1))
    return vertices[chosen].copy()


def convex_hull_mesh(points: PointCloud) -> TriangleMesh:
    """
    Outward-wound convex hull, keeping only the hull vertices.
    """
    points = as_point_cloud(points)
    if len(points) < 4:
        raise DegenerateHullError(f'need at least 4 points for a hull, got {len(points)}')
    centered = points - points.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    if singular[-1] <= 1e-9 * max(singular[0], 1e-300):
        raise DegenerateHullError('points are coplanar')
    try:
        hull = ConvexHull(points)
    except RuntimeError as e:
        raise DegenerateHullError(str(e)) from e

    used = np.unique(hull.simplices)
    remap = np.full(len(points), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    vertices = points[used]
    faces = remap[hull.simplices]

    inside = vertices.mean(axis=0)
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    normals = np.cross(b - a, c - a)
    inward = np.einsum('ij,ij->i', normals, (a + b + c) / 3.0 - inside) < 0
    faces[inward] = faces[inward][:, ::-1]
    return TriangleMesh(vertices, faces)


def bounding_radius(points: PointCloud, percentile: float = 100.0) -> float:
    points = as_point_cloud(points)
    if len(points) == 0:
        raise InvalidInputError('no points to bound')
    return float(np.percentile(np.linalg.norm(points, axis=1), percentile))


def pairwise_distances(a: PointCloud, b: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest distance from every `a` to `b`, and back.
    """
    forward, _ = cKDTree(b).query(a, k=1)
    backward, _ = cKDTree(a).query(b, k=1)
    return forward, backward
