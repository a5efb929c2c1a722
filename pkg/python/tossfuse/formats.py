"""
    File formats.

    Meshes are ASCII OBJ, point clouds ASCII PLY. Grids (`SDF1`) and depth
    maps (`DPT1`) are little-endian binary with float32 payloads, masks are
    binary PGM. Trajectories are CSV with a `frame,qw,qx,qy,qz,tx,ty,tz,rms`
    header. Contact models are key/value text.
"""
import os
import json
import struct
import hashlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from tossfuse.camera import CameraIntrinsics
from tossfuse.dataset import Clip, Frame, GroundTruth, TossDataset
from tossfuse.dynamics import ContactModel
from tossfuse.errors import ConfigError
from tossfuse.geometry import PointCloud, RigidPose, TriangleMesh, as_point_cloud
from tossfuse.sdf import SdfGrid

PathLike = Union[str, os.PathLike]
TRAJECTORY_COLUMNS = ['frame', 'qw', 'qx', 'qy', 'qz', 'tx', 'ty', 'tz', 'rms']


def write_obj(path: PathLike, mesh: TriangleMesh):
    with open(path, 'w') as f:
        for x, y, z in mesh.vertices:
            f.write(f'v {x:.9g} {y:.9g} {z:.9g}\n')
        for a, b, c in mesh.faces + 1:
            f.write(f'f {a} {b} {c}\n')


def read_obj(path: PathLike) -> TriangleMesh:
    vertices, faces = [], []
    with open(path, 'r') as f:
        for number, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith('#'):
                continue
            try:
                if parts[0] == 'v':
                    vertices.append([float(x) for x in parts[1:4]])
                elif parts[0] == 'f':
                    corners = [int(p.split('/')[0]) - 1 for p in parts[1:]]
                    # Fan-triangulate polygons.
                    faces += [[corners[0], corners[i], corners[i + 1]] for i in range(1, len(corners) - 1)]
            except ValueError as e:
                raise ConfigError(f'{path}:{number}: malformed OBJ line') from e
    if not vertices:
        raise ConfigError(f'{path}: OBJ has no vertices')
    try:
        return TriangleMesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as e:
        raise ConfigError(f'{path}: {e}') from e


def write_ply(path: PathLike, cloud: PointCloud):
    cloud = as_point_cloud(cloud)
    with open(path, 'w') as f:
        f.write(f'ply\nformat ascii 1.0\nelement vertex {len(cloud)}\n'
                'property float x\nproperty float y\nproperty float z\nend_header\n')
        for x, y, z in cloud:
            f.write(f'{x:.9g} {y:.9g} {z:.9g}\n')


def read_ply(path: PathLike) -> PointCloud:
    with open(path, 'r') as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != 'ply':
        raise ConfigError(f'{path}: not a PLY file')
    try:
        end = lines.index('end_header')
        count = next(int(line.split()[2]) for line in lines if line.startswith('element vertex'))
        rows = [[float(v) for v in line.split()[:3]] for line in lines[end + 1:end + 1 + count]]
        points = np.array(rows, dtype=np.float64).reshape(count, 3)
    except (ValueError, StopIteration, IndexError) as e:
        raise ConfigError(f'{path}: malformed PLY') from e
    return as_point_cloud(points)


def write_sdf(path: PathLike, grid: SdfGrid):
    with open(path, 'wb') as f:
        f.write(b'SDF1')
        f.write(struct.pack('<3I', *grid.dims))
        f.write(struct.pack('<5f', *grid.origin, grid.voxel_size, grid.truncation))
        f.write(grid.values.ravel(order='F').astype('<f4').tobytes())
        f.write(grid.weights.ravel(order='F').astype('<f4').tobytes())


def read_sdf(path: PathLike) -> SdfGrid:
    data = Path(path).read_bytes()
    if data[:4] != b'SDF1' or len(data) < 36:
        raise ConfigError(f'{path}: not an SDF1 grid')
    dims = struct.unpack_from('<3I', data, 4)
    *origin, voxel_size, truncation = struct.unpack_from('<5f', data, 16)
    count = int(np.prod(dims))
    payload = np.frombuffer(data, dtype='<f4', offset=36)
    if payload.size != 2 * count:
        raise ConfigError(f'{path}: expected {2 * count} floats, found {payload.size}')
    values = payload[:count].astype(np.float64).reshape(dims, order='F')
    weights = payload[count:].astype(np.float64).reshape(dims, order='F')
    return SdfGrid(origin, voxel_size, dims, values, weights, truncation)


def write_depth(path: PathLike, depth: np.ndarray):
    rows, cols = depth.shape
    with open(path, 'wb') as f:
        f.write(b'DPT1' + struct.pack('<2I', rows, cols))
        f.write(np.ascontiguousarray(depth, dtype='<f4').tobytes())


def read_depth(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b'DPT1' or len(data) < 12:
        raise ConfigError(f'{path}: not a DPT1 depth map')
    rows, cols = struct.unpack_from('<2I', data, 4)
    payload = np.frombuffer(data, dtype='<f4', offset=12)
    if payload.size != rows * cols:
        raise ConfigError(f'{path}: expected {rows * cols} depths, found {payload.size}')
    return payload.astype(np.float64).reshape(rows, cols)


def write_mask(path: PathLike, mask: np.ndarray):
    rows, cols = mask.shape
    with open(path, 'wb') as f:
        f.write(f'P5\n{cols} {rows}\n255\n'.encode('ascii'))
        f.write((mask.astype(bool).astype(np.uint8) * 255).tobytes())


def read_mask(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, position = [], 0
    while len(tokens) < 4:
        while position < len(data) and data[position:position + 1].isspace():
            position += 1
        if data[position:position + 1] == b'#':
            position = data.index(b'\n', position) + 1
            continue
        start = position
        while position < len(data) and not data[position:position + 1].isspace():
            position += 1
        if start == position:
            raise ConfigError(f'{path}: truncated PGM header')
        tokens.append(data[start:position].decode('ascii'))
    if tokens[0] != 'P5' or tokens[3] != '255':
        raise ConfigError(f'{path}: only 8-bit binary PGM masks are supported')
    cols, rows = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, offset=position + 1)
    if pixels.size != rows * cols:
        raise ConfigError(f'{path}: expected {rows * cols} pixels, found {pixels.size}')
    return pixels.reshape(rows, cols) > 0


def trajectory_frame(poses: List[RigidPose], rms: Optional[np.ndarray] = None) -> pd.DataFrame:
    rms = np.zeros(len(poses)) if rms is None else np.asarray(rms, dtype=np.float64)
    rows = [[k, *pose.quaternion, *pose.translation, rms[k]] for k, pose in enumerate(poses)]
    frame = pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)
    frame['frame'] = frame['frame'].astype(int)
    return frame


def write_trajectory(path: PathLike, poses: List[RigidPose], rms: Optional[np.ndarray] = None):
    trajectory_frame(poses, rms).to_csv(path, index=False, float_format='%.17g')


def read_trajectory(path: PathLike) -> Tuple[List[RigidPose], np.ndarray]:
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ConfigError(f'{path}: unreadable trajectory CSV: {e}') from e
    if list(frame.columns) != TRAJECTORY_COLUMNS:
        raise ConfigError(f'{path}: expected columns {TRAJECTORY_COLUMNS}, got {list(frame.columns)}')
    frame = frame.sort_values('frame')
    quaternions = frame[['qw', 'qx', 'qy', 'qz']].to_numpy(dtype=np.float64)
    translations = frame[['tx', 'ty', 'tz']].to_numpy(dtype=np.float64)
    try:
        poses = [RigidPose(q, t) for q, t in zip(quaternions, translations)]
    except ValueError as e:
        raise ConfigError(f'{path}: {e}') from e
    return poses, frame['rms'].to_numpy(dtype=np.float64)


def write_model(path: PathLike, model: ContactModel):
    with open(path, 'w') as f:
        f.write(f'mass {float(model.mass)!r}\n')
        f.write(f'mu {float(model.mu)!r}\n')
        f.write('inertia ' + ' '.join(repr(float(x)) for x in model.inertia.ravel()) + '\n')
        f.write(f'vertices {len(model.vertices)}\n')
        for x, y, z in model.vertices:
            f.write(f'{float(x)!r} {float(y)!r} {float(z)!r}\n')


def read_model(path: PathLike) -> ContactModel:
    with open(path, 'r') as f:
        lines = [line.split() for line in f if line.strip() and not line.startswith('#')]
    fields: Dict[str, Any] = {}
    try:
        position = 0
        while position < len(lines):
            key, values = lines[position][0], lines[position][1:]
            position += 1
            if key == 'vertices':
                count = int(values[0])
                fields[key] = np.array([[float(v) for v in row] for row in lines[position:position + count]])
                if fields[key].shape != (count, 3):
                    raise ValueError(f'expected {count} vertex rows')
                position += count
            elif key in ('mass', 'mu'):
                fields[key] = float(values[0])
            elif key == 'inertia':
                fields[key] = np.array([float(v) for v in values]).reshape(3, 3)
            else:
                raise ValueError(f'unknown key {key!r}')
        return ContactModel(fields['vertices'], fields['mu'], fields['mass'], fields['inertia'])
    except (KeyError, IndexError, ValueError) as e:
        raise ConfigError(f'{path}: malformed contact model: {e}') from e


def write_json(path: PathLike, data: Any):
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def read_json(path: PathLike) -> Any:
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f'{path}: invalid JSON: {e}') from e


def pose_to_list(pose: RigidPose) -> List[float]:
    return [*map(float, pose.quaternion), *map(float, pose.translation)]


def pose_from_list(values) -> RigidPose:
    values = list(values)
    if len(values) != 7:
        raise ConfigError(f'pose needs 7 numbers (qw qx qy qz tx ty tz), got {len(values)}')
    return RigidPose(values[:4], values[4:])


def write_frames(directory: PathLike, frames: List[Frame]):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(frames):
        write_depth(directory / f'frame_{k:04d}.dpt', frame.depth)
        write_mask(directory / f'frame_{k:04d}.pgm', frame.mask)
        if frame.rgb is not None:
            np.save(directory / f'frame_{k:04d}.rgb.npy', frame.rgb)


def save_dataset(dataset: TossDataset, directory: PathLike):
    """
    `dataset.json` plus one `clip_<i>/` directory of frames per clip;
    synthetic datasets also get `gt_model.txt`, `gt_mesh.obj` and
    per-clip `gt_trajectory.csv`.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    clips = []
    for i, clip in enumerate(dataset.clips):
        clip_dir = directory / f'clip_{i}'
        write_frames(clip_dir, clip.frames)
        if clip.gt_poses is not None:
            write_trajectory(clip_dir / 'gt_trajectory.csv', clip.gt_poses)
        clips.append({'frames': len(clip), 'timestamps': [float(f.timestamp) for f in clip.frames],
                      'initial_pose': pose_to_list(clip.initial_pose)})
    if dataset.ground_truth is not None:
        write_model(directory / 'gt_model.txt', dataset.ground_truth.model)
        write_obj(directory / 'gt_mesh.obj', dataset.ground_truth.mesh)
    write_json(directory / 'dataset.json', {
        'intrinsics': dataset.intrinsics.to_dict(),
        'world_from_camera': pose_to_list(dataset.world_from_camera),
        'dt': dataset.dt,
        'clips': clips,
        'metadata': dataset.metadata,
    })


def load_dataset(directory: PathLike) -> TossDataset:
    directory = Path(directory)
    meta = read_json(directory / 'dataset.json')
    try:
        intrinsics = CameraIntrinsics(**meta['intrinsics'])
        clips = []
        for i, entry in enumerate(meta['clips']):
            clip_dir = directory / f'clip_{i}'
            frames = []
            for k, timestamp in enumerate(entry['timestamps']):
                rgb_path = clip_dir / f'frame_{k:04d}.rgb.npy'
                frames.append(Frame(read_depth(clip_dir / f'frame_{k:04d}.dpt'),
                                    read_mask(clip_dir / f'frame_{k:04d}.pgm'), float(timestamp),
                                    np.load(rgb_path) if rgb_path.exists() else None))
            gt_path = clip_dir / 'gt_trajectory.csv'
            gt_poses = read_trajectory(gt_path)[0] if gt_path.exists() else None
            clips.append(Clip(frames, pose_from_list(entry['initial_pose']), gt_poses))
        ground_truth = None
        if (directory / 'gt_model.txt').exists():
            ground_truth = GroundTruth(read_model(directory / 'gt_model.txt'), read_obj(directory / 'gt_mesh.obj'))
        return TossDataset(clips, intrinsics, pose_from_list(meta['world_from_camera']), float(meta['dt']),
                           ground_truth, meta.get('metadata', {}))
    except (KeyError, TypeError) as e:
        raise ConfigError(f'{directory}: malformed dataset.json: {e}') from e


def hash_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def hash_tree(directory: PathLike, skip=('manifest.json', 'timings.json')) -> Dict[str, str]:
    """SHA-256 of every file under `directory`, keyed by relative POSIX path."""
    directory = Path(directory)
    return {path.relative_to(directory).as_posix(): hash_file(path)
            for path in sorted(directory.rglob('*'))
            if path.is_file() and path.name not in skip and not path.name.endswith('.manifest.json')}
