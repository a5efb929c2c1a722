"""
    Pinhole camera: projection, depth rendering, masks and backprojection.

    Camera frame is x right, y down, z forward. Pixel `(u, v)` is the
    continuous image coordinate `(u, v)`, so `backproject` exactly inverts
    `project_point` and rendered depth lies exactly on the surface.
    Depth maps are `(rows, cols)` float64 arrays with 0 as background.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numba
import numpy as np

from tossfuse.errors import BehindCameraError, InvalidInputError
from tossfuse.geometry import PointCloud, RigidPose, TriangleMesh, as_point_cloud

NEAR_PLANE = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    rows: int
    cols: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError('focal lengths must be positive')
        if not (0 <= self.cx < self.cols and 0 <= self.cy < self.rows):
            raise InvalidInputError('principal point must lie inside the image')

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy,
                'rows': self.rows, 'cols': self.cols}


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    """
    World-from-camera pose of a camera at `eye` facing `target`.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    if np.linalg.norm(forward) < 1e-12:
        raise InvalidInputError('camera eye and target coincide')
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise InvalidInputError('camera up vector is parallel to the viewing direction')
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return RigidPose.from_matrix(np.column_stack([right, down, forward]), eye)


def check_frame(intrinsics: CameraIntrinsics, depth: np.ndarray, mask: Optional[np.ndarray] = None):
    if depth.shape != intrinsics.shape:
        raise InvalidInputError(f'depth is {depth.shape}, intrinsics expect {intrinsics.shape}')
    if mask is not None and mask.shape != intrinsics.shape:
        raise InvalidInputError(f'mask is {mask.shape}, intrinsics expect {intrinsics.shape}')


def project_point(intrinsics: CameraIntrinsics, point) -> Tuple[float, float, float]:
    x, y, z = np.asarray(point, dtype=np.float64)
    if z <= 0:
        raise BehindCameraError(f'point at depth {z} is behind the camera')
    return intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy, float(z)


@numba.njit(cache=False, nogil=True)
def _rasterize(triangles, fx, fy, cx, cy, rows, cols, near):
    depth = np.zeros((rows, cols))
    for f in range(triangles.shape[0]):
        a = triangles[f, 0]
        b = triangles[f, 1]
        c = triangles[f, 2]
        if a[2] <= near or b[2] <= near or c[2] <= near:
            continue
        ua = fx * a[0] / a[2] + cx
        va = fy * a[1] / a[2] + cy
        ub = fx * b[0] / b[2] + cx
        vb = fy * b[1] / b[2] + cy
        uc = fx * c[0] / c[2] + cx
        vc = fy * c[1] / c[2] + cy
        area = (ub - ua) * (vc - va) - (uc - ua) * (vb - va)
        if abs(area) < 1e-12:
            continue
        eps = 1e-9 * abs(area)
        u0 = max(int(np.ceil(min(ua, ub, uc) - 1e-9)), 0)
        u1 = min(int(np.floor(max(ua, ub, uc) + 1e-9)), cols - 1)
        v0 = max(int(np.ceil(min(va, vb, vc) - 1e-9)), 0)
        v1 = min(int(np.floor(max(va, vb, vc) + 1e-9)), rows - 1)
        # Plane through the triangle, n . x = d
        e1 = b - a
        e2 = c - a
        n0 = e1[1] * e2[2] - e1[2] * e2[1]
        n1 = e1[2] * e2[0] - e1[0] * e2[2]
        n2 = e1[0] * e2[1] - e1[1] * e2[0]
        d = n0 * a[0] + n1 * a[1] + n2 * a[2]
        for v in range(v0, v1 + 1):
            for u in range(u0, u1 + 1):
                w0 = (uc - ub) * (v - vb) - (vc - vb) * (u - ub)
                w1 = (ua - uc) * (v - vc) - (va - vc) * (u - uc)
                w2 = (ub - ua) * (v - va) - (vb - va) * (u - ua)
                if area > 0:
                    if w0 < -eps or w1 < -eps or w2 < -eps:
                        continue
                elif w0 > eps or w1 > eps or w2 > eps:
                    continue
                rx = (u - cx) / fx
                ry = (v - cy) / fy
                denom = n0 * rx + n1 * ry + n2
                if abs(denom) < 1e-15:
                    continue
                z = d / denom
                if z <= near:
                    continue
                if depth[v, u] == 0.0 or z < depth[v, u]:
                    depth[v, u] = z
    return depth


def render_depth(mesh: TriangleMesh, pose: RigidPose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """
    Rasterizes `mesh` placed by `pose` (camera-from-object) into a depth map.

    Each pixel keeps the nearest exact ray-plane intersection. Triangles
    crossing the near plane are skipped.
    """
    if mesh.is_empty():
        raise InvalidInputError('cannot render an empty mesh')
    camera_vertices = pose.apply(mesh.vertices)
    triangles = np.ascontiguousarray(camera_vertices[mesh.faces])
    k = intrinsics
    return _rasterize(triangles, float(k.fx), float(k.fy), float(k.cx), float(k.cy),
                      int(k.rows), int(k.cols), NEAR_PLANE)


def render_points(cloud: PointCloud, pose: RigidPose, intrinsics: CameraIntrinsics, radius: int = 1) -> np.ndarray:
    """
    Point-splat rendering: each point fills a square of `2 * radius + 1`
    pixels around its rounded projection, nearest depth wins.
    """
    if radius < 0:
        raise InvalidInputError('splat radius must be non-negative')
    points = pose.apply(as_point_cloud(cloud, 'cloud'))
    points = points[points[:, 2] > NEAR_PLANE]
    k = intrinsics
    buffer = np.full(k.shape, np.inf)
    if len(points):
        u = np.rint(k.fx * points[:, 0] / points[:, 2] + k.cx).astype(np.int64)
        v = np.rint(k.fy * points[:, 1] / points[:, 2] + k.cy).astype(np.int64)
        du, dv = np.meshgrid(np.arange(-radius, radius + 1), np.arange(-radius, radius + 1))
        uu = (u[:, None] + du.ravel()).ravel()
        vv = (v[:, None] + dv.ravel()).ravel()
        zz = np.repeat(points[:, 2], du.size)
        inside = (uu >= 0) & (uu < k.cols) & (vv >= 0) & (vv < k.rows)
        np.minimum.at(buffer, (vv[inside], uu[inside]), zz[inside])
    buffer[np.isinf(buffer)] = 0.0
    return buffer


def derive_mask(depth: np.ndarray) -> np.ndarray:
    return np.asarray(depth) != 0


def backproject(depth: np.ndarray, mask: np.ndarray, intrinsics: CameraIntrinsics) -> PointCloud:
    """
    One camera-frame point per masked pixel with positive depth, row-major.
    """
    check_frame(intrinsics, depth, mask)
    rows, cols = np.nonzero(mask.astype(bool) & (depth > 0))
    z = depth[rows, cols]
    x = (cols - intrinsics.cx) * z / intrinsics.fx
    y = (rows - intrinsics.cy) * z / intrinsics.fy
    return np.column_stack([x, y, z]).astype(np.float64)


def mask_area(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))
