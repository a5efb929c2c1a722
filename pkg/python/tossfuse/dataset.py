"""
    Toss datasets: clips of masked depth frames plus calibration.
"""
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import numpy as np

from tossfuse.camera import CameraIntrinsics, check_frame
from tossfuse.dynamics import ContactModel
from tossfuse.errors import InvalidInputError
from tossfuse.geometry import RigidPose, TriangleMesh


@dataclass(eq=False)
class Frame:
    depth: np.ndarray
    mask: np.ndarray
    timestamp: float
    # Carried through untouched, the pipeline only reads depth and mask.
    rgb: Optional[np.ndarray] = None


@dataclass(eq=False)
class Clip:
    frames: List[Frame]
    initial_pose: RigidPose
    # Camera-from-object poses, synthetic data only.
    gt_poses: Optional[List[RigidPose]] = None

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([frame.timestamp for frame in self.frames])

    def with_frames(self, frames: List[Frame]) -> 'Clip':
        return replace(self, frames=frames)


@dataclass(eq=False)
class GroundTruth:
    model: ContactModel
    mesh: TriangleMesh


@dataclass(eq=False)
class TossDataset:
    clips: List[Clip]
    intrinsics: CameraIntrinsics
    world_from_camera: RigidPose
    dt: float
    ground_truth: Optional[GroundTruth] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clips)

    def with_clips(self, clips: List[Clip]) -> 'TossDataset':
        return replace(self, clips=clips)

    def validate(self):
        if not self.clips:
            raise InvalidInputError('dataset has no clips')
        for i, clip in enumerate(self.clips):
            validate_clip(clip, self.intrinsics, name=f'clip {i}')


def validate_clip(clip: Clip, intrinsics: CameraIntrinsics, name: str = 'clip'):
    if not len(clip):
        raise InvalidInputError(f'{name} has no frames')
    for frame in clip.frames:
        check_frame(intrinsics, frame.depth, frame.mask)
    times = clip.timestamps
    if len(times) > 1 and (np.diff(times) <= 0).any():
        raise InvalidInputError(f'{name} timestamps must strictly increase')
    if clip.gt_poses is not None and len(clip.gt_poses) != len(clip):
        raise InvalidInputError(f'{name} has {len(clip.gt_poses)} ground-truth poses for {len(clip)} frames')
