"""
    Tunables for every stage, as plain dataclasses.

    Defaults are the artifact constants; `load_config` builds any of them,
    nested ones included, from a JSON file or a dictionary and rejects
    unknown keys.
"""
import os
import json
import typing
import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple, Type, TypeVar, Union

from tossfuse.errors import ConfigError

T = TypeVar('T')


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


@dataclass
class IcpConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-6
    max_correspondence_distance: float = 0.05
    min_correspondences: int = 10

    def __post_init__(self):
        _require(self.max_iterations > 0, 'max_iterations must be positive')
        _require(self.convergence_tol > 0, 'convergence_tol must be positive')
        _require(self.max_correspondence_distance > 0,
                 'max_correspondence_distance must be positive')
        _require(self.min_correspondences > 0, 'min_correspondences must be positive')


@dataclass
class TsdfConfig:
    dims: int = 64
    radius_scale: float = 2.5
    truncation_voxels: float = 5.0
    # Object bounding radius, estimated from the observations when unset.
    bounding_radius: Optional[float] = None
    frame_stride: int = 1
    # Re-distance observed voxels to the extracted surface after fusion.
    redistance: bool = True

    def __post_init__(self):
        _require(self.dims >= 2, 'dims must be at least 2')
        _require(self.truncation_voxels > 1, 'truncation must exceed one voxel')
        _require(self.radius_scale > 0, 'radius_scale must be positive')
        _require(self.frame_stride >= 1, 'frame_stride must be at least 1')
        _require(self.bounding_radius is None or self.bounding_radius > 0,
                 'bounding_radius must be positive')


@dataclass
class TrackerConfig:
    icp: IcpConfig = field(
        default_factory=lambda: IcpConfig(max_correspondence_distance=0.02))
    # Second pass with a tight gate, drops points whose surface left the view.
    fine_icp: IcpConfig = field(
        default_factory=lambda: IcpConfig(max_correspondence_distance=0.005))
    min_mask_pixels: int = 50
    prior_refinements: int = 2
    # Observed clouds are thinned to at most this many points, zero keeps all.
    max_points: int = 3000
    constant_velocity: bool = True
    # Shift every ICP seed so the source and target centroids coincide.
    recenter: bool = True

    def __post_init__(self):
        _require(self.min_mask_pixels >= 0, 'min_mask_pixels must be non-negative')
        _require(self.prior_refinements >= 1, 'prior_refinements must be at least 1')
        _require(self.max_points >= 0, 'max_points must be non-negative')


@dataclass
class PgsConfig:
    max_iterations: int = 200
    tolerance: float = 1e-12
    failure_residual: float = 1e-4
    contact_margin: float = 0.02
    stabilization: float = 0.2
    gravity: float = 9.81

    def __post_init__(self):
        _require(self.max_iterations > 0, 'max_iterations must be positive')
        _require(self.tolerance > 0, 'tolerance must be positive')
        _require(self.failure_residual >= self.tolerance,
                 'failure_residual must not be below tolerance')
        _require(self.contact_margin >= 0, 'contact_margin must be non-negative')
        _require(0 <= self.stabilization <= 1, 'stabilization must be in [0, 1]')


@dataclass
class ImpulseSolverConfig:
    max_iterations: int = 500
    tolerance: float = 1e-6

    def __post_init__(self):
        _require(self.max_iterations > 0, 'max_iterations must be positive')
        _require(self.tolerance > 0, 'tolerance must be positive')


@dataclass
class TrainConfig:
    epochs: int = 500
    optimizer: str = 'adam'
    lr_vertices: float = 1e-3
    lr_mu: float = 1e-2
    cosine_decay: bool = True
    learn_mu: bool = True
    # Prediction, complementarity, penetration and dissipation weights.
    loss_weights: Tuple[float, float, float, float] = (1.0, 100.0, 100.0, 1.0)
    early_stop_tol: float = 1e-6
    early_stop_window: int = 20
    contact_margin: float = 0.02
    batch_size: int = 0
    velocity_scheme: str = 'backward'
    seed: int = 0
    solver: ImpulseSolverConfig = field(default_factory=ImpulseSolverConfig)

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        _require(self.epochs >= 0, 'epochs must be non-negative')
        _require(self.optimizer in ('adam', 'sgd'), f'unknown optimizer {self.optimizer!r}')
        _require(self.lr_vertices > 0 and self.lr_mu > 0, 'learning rates must be positive')
        _require(len(self.loss_weights) == 4 and min(self.loss_weights) >= 0,
                 'loss_weights must be 4 non-negative numbers')
        _require(self.early_stop_window >= 1, 'early_stop_window must be at least 1')
        _require(self.batch_size >= 0, 'batch_size must be non-negative')
        _require(self.velocity_scheme in ('central', 'backward'),
                 f'unknown velocity scheme {self.velocity_scheme!r}')


@dataclass
class NoiseConfig:
    depth_sigma: float = 0.002
    dropout_rate: float = 0.01
    mask_erosion: int = 1
    seed: int = 0

    def __post_init__(self):
        _require(self.depth_sigma >= 0, 'depth_sigma must be non-negative')
        _require(0 <= self.dropout_rate < 1, 'dropout_rate must be in [0, 1)')
        _require(self.mask_erosion >= 0, 'mask_erosion must be non-negative')

    @classmethod
    def clean(cls) -> 'NoiseConfig':
        return cls(depth_sigma=0.0, dropout_rate=0.0, mask_erosion=0)


@dataclass
class SynthConfig:
    n_tosses: int = 10
    frames: int = 100
    fps: float = 30.0
    substeps: int = 10
    seed: int = 42
    cube_side: float = 0.06
    mass: float = 0.1
    mu: float = 0.3
    # Pinhole camera, placed by eye/target in world coordinates (z up).
    width: int = 640
    height: int = 480
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    camera_eye: Tuple[float, float, float] = (0.0, -1.2, 0.45)
    camera_target: Tuple[float, float, float] = (0.0, 0.0, 0.25)
    # Release distribution.
    xy_range: float = 0.1
    height_range: Tuple[float, float] = (0.3, 0.6)
    max_horizontal_speed: float = 0.3
    vertical_speed_range: Tuple[float, float] = (-0.5, 1.0)
    max_spin: float = 10.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    pgs: PgsConfig = field(default_factory=PgsConfig)

    def __post_init__(self):
        self.camera_eye = tuple(float(x) for x in self.camera_eye)
        self.camera_target = tuple(float(x) for x in self.camera_target)
        self.height_range = tuple(float(x) for x in self.height_range)
        self.vertical_speed_range = tuple(float(x) for x in self.vertical_speed_range)
        _require(self.n_tosses >= 1, 'n_tosses must be at least 1')
        _require(self.frames >= 3, 'frames must be at least 3')
        _require(self.fps > 0 and self.substeps >= 1, 'fps and substeps must be positive')
        _require(self.cube_side > 0 and self.mass > 0 and self.mu >= 0,
                 'cube_side and mass must be positive, mu non-negative')
        _require(self.height_range[0] <= self.height_range[1], 'height_range is inverted')
        speed = max(abs(v) for v in self.vertical_speed_range)
        _require(float(self.max_horizontal_speed ** 2 + speed ** 2) <= 1.5 ** 2 + 1e-12,
                 'release speed must not exceed 1.5 m/s')


@dataclass
class CycleConfig:
    variant: str = 'g'
    cycles: int = 1
    eval_clip: int = 0
    polytope_vertices: int = 8
    mu_init: float = 0.5
    # Known body inertia; the dataset ground truth fills these when unset.
    mass: Optional[float] = None
    inertia: Optional[Tuple[float, ...]] = None
    auc_threshold: float = 0.1
    chamfer_samples: int = 10000
    chamfer_seed: int = 42
    # Open-loop rollouts of each learned model on up to `rollout_clips`
    # held-out ground-truth clips; 0 disables them.
    rollout_clips: int = 10
    rollout_steps: int = 99
    rollout_substeps: int = 10
    rest_tolerance: float = 0.005
    threads: int = 1
    icp: IcpConfig = field(default_factory=IcpConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    tsdf: TsdfConfig = field(default_factory=TsdfConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        _require(self.variant in VARIANTS, f'unknown variant {self.variant!r}')
        _require(self.cycles >= 1, 'cycles must be at least 1')
        _require(4 <= self.polytope_vertices <= 32, 'polytope_vertices must be in [4, 32]')
        _require(self.mu_init >= 0, 'mu_init must be non-negative')
        _require(self.mass is None or self.mass > 0, 'mass must be positive')
        if self.inertia is not None:
            self.inertia = tuple(float(x) for x in self.inertia)
            _require(len(self.inertia) == 9, 'inertia needs 9 values')
        _require(self.auc_threshold > 0, 'auc_threshold must be positive')
        _require(self.chamfer_samples > 0, 'chamfer_samples must be positive')
        _require(self.rollout_clips >= 0, 'rollout_clips must be non-negative')
        _require(self.rollout_steps >= 1 and self.rollout_substeps >= 1,
                 'rollout_steps and rollout_substeps must be at least 1')
        _require(self.rest_tolerance > 0, 'rest_tolerance must be positive')
        _require(self.threads >= 1, 'threads must be at least 1')


VARIANTS = ('b', 'c', 'd', 'e', 'f', 'g')


def _build(cls: Type[T], data: Dict[str, Any], where: str) -> T:
    if not isinstance(data, dict):
        raise ConfigError(f'{where}: expected an object, got {type(data).__name__}')
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f'{where}: unknown keys {unknown}')
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f'{where}.{name}')
        elif typing.get_origin(hint) is tuple:
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f'{where}: {e}') from e


def load_config(cls: Type[T], source: Union[str, os.PathLike, Dict[str, Any], None] = None) -> T:
    """
    Builds `cls` from a JSON file path, a parsed dictionary, or defaults.
    """
    if source is None:
        return cls()
    if isinstance(source, dict):
        return _build(cls, source, cls.__name__)
    try:
        with open(source, 'r') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f'{source}: invalid JSON: {e}') from e
    return _build(cls, data, str(source))


def config_to_dict(config: Any) -> Dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(config)))


def resolve_threads(requested: Optional[int] = None) -> int:
    """
    `--threads`, then `TOSSFUSE_THREADS`, then 1.
    """
    if requested is not None:
        value = requested
    else:
        raw = os.environ.get('TOSSFUSE_THREADS', '1')
        try:
            value = int(raw)
        except ValueError as e:
            raise ConfigError(f'TOSSFUSE_THREADS must be an integer, got {raw!r}') from e
    if value < 1:
        raise ConfigError('thread count must be at least 1')
    return value
