"""
Run configuration and per-frame records.
"""
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from apps.augmentation.services.augment import AugmentConfig
from apps.meshes.services.mesh_core import RigidPose
from apps.meshes.services.nicp import NicpConfig
from apps.registration.services.cmaes_opt import OptConfig
from apps.rendering.services.camera_render import CameraIntrinsics
from apps.shape_models.services.shape_model import COEFFICIENT_BOUND, DEFAULT_COMPONENTS


class FrameStatus:
    OK = 'ok'
    FAILED = 'failed'

    CHOICES = [
        (OK, 'Registered'),
        (FAILED, 'Failed'),
    ]


@dataclass(frozen=True)
class SamplingSpec:
    count: int = 100
    translation_mm: float = 50.0
    rotation_deg: float = 20.0
    min_contour_types: int = 2
    base_pose: RigidPose = RigidPose(translation=(0.0, 0.0, 250.0))
    sample_shape: bool = False
    max_attempts_factor: int = 10
    val_fraction: float = 0.1
    augment: bool = True

    @property
    def max_attempts(self):
        return self.count * self.max_attempts_factor


@dataclass(frozen=True)
class RefinementSpec:
    translation_mm: float = 20.0
    rotation_deg: float = 10.0
    shape_bound: float = COEFFICIENT_BOUND
    max_outer_iterations: int = 10
    translation_update_mm: float = 1.0

    def bounds(self, init_pose, K):
        """Box around ``init_pose`` for ``[t, r, alpha]``; ``K = 0`` gives the rigid box."""
        centre = init_pose.as_vector()
        half = np.array([self.translation_mm] * 3 + [self.rotation_deg] * 3)
        pose_box = np.column_stack([centre - half, centre + half])
        shape_box = np.tile([-self.shape_bound, self.shape_bound], (K, 1))
        return np.vstack([pose_box, shape_box])


@dataclass(frozen=True)
class ShapeModelSpec:
    components: int = DEFAULT_COMPONENTS
    require_watertight: bool = False


@dataclass(frozen=True)
class RunPaths:
    canonical_mesh: str = ''
    corpus_dir: str = ''
    model_file: str = ''
    masks_dir: str = ''
    output_dir: str = 'output'

    def model_path(self):
        return Path(self.model_file) if self.model_file else Path(self.output_dir) / 'shape_model.ssm'


@dataclass(frozen=True)
class RunConfig:
    paths: RunPaths = field(default_factory=RunPaths)
    camera: CameraIntrinsics = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    refinement: RefinementSpec = field(default_factory=RefinementSpec)
    shape_model: ShapeModelSpec = field(default_factory=ShapeModelSpec)
    nicp: NicpConfig = field(default_factory=NicpConfig)
    optimizer: OptConfig = field(default_factory=lambda: OptConfig(popsize=15))
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_output_dir(self, output_dir):
        return self.replace(paths=dataclasses.replace(self.paths, output_dir=str(output_dir)))


@dataclass
class FrameRecord:
    """Pose and shape of one frame, with its images and metrics."""
    frame_id: str
    pose: RigidPose
    shape: tuple = ()
    images: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    status: str = FrameStatus.OK
    error: str = None

    @property
    def ok(self):
        return self.status == FrameStatus.OK

    def as_dict(self):
        return {
            'frame_id': self.frame_id,
            'pose': self.pose.as_dict(),
            'shape': [float(a) for a in self.shape],
            'images': dict(self.images),
            'metrics': dict(self.metrics),
            'status': self.status,
            'error': self.error,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            frame_id=str(payload['frame_id']),
            pose=RigidPose.from_dict(payload['pose']),
            shape=tuple(float(a) for a in payload.get('shape', ())),
            images=dict(payload.get('images') or {}),
            metrics=dict(payload.get('metrics') or {}),
            status=payload.get('status', FrameStatus.OK),
            error=payload.get('error'),
        )
