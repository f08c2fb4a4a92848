"""
Run-configuration and frame-record serializers.

A run configuration is one JSON document; every omitted key takes its default.
"""
import logging
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError as DjangoValidationError
from rest_framework import serializers

from apps.augmentation.serializers import AugmentConfigSerializer
from apps.common.exceptions import ConfigError
from apps.common.utils import read_json
from apps.common.validators import validate_existing_path, validate_mesh_file
from apps.meshes.serializers import NicpConfigSerializer
from apps.meshes.services.mesh_core import RigidPose
from apps.pipeline.services.run_config import (
    FrameRecord,
    FrameStatus,
    RefinementSpec,
    RunConfig,
    RunPaths,
    SamplingSpec,
    ShapeModelSpec,
)
from apps.registration.serializers import OptConfigSerializer
from apps.rendering.serializers import CameraIntrinsicsSerializer
from apps.shape_models.services.shape_model import COEFFICIENT_BOUND, DEFAULT_COMPONENTS

logger = logging.getLogger(__name__)


class PoseSerializer(serializers.Serializer):
    rotation = serializers.ListField(child=serializers.FloatField(), min_length=3, max_length=3,
                                     default=[0.0, 0.0, 0.0])
    translation = serializers.ListField(child=serializers.FloatField(), min_length=3, max_length=3,
                                        default=[0.0, 0.0, 0.0])

    def create(self, validated_data):
        return RigidPose.from_dict(validated_data)


class PathsSerializer(serializers.Serializer):
    canonical_mesh = serializers.CharField(default='', allow_blank=True)
    corpus_dir = serializers.CharField(default='', allow_blank=True)
    model_file = serializers.CharField(default='', allow_blank=True)
    masks_dir = serializers.CharField(default='', allow_blank=True)
    output_dir = serializers.CharField(default='output')

    def validate_canonical_mesh(self, value):
        if value:
            try:
                validate_mesh_file(value)
            except DjangoValidationError as exc:
                raise serializers.ValidationError(exc.messages)
        return value


class SamplingSerializer(serializers.Serializer):
    count = serializers.IntegerField(default=100, min_value=1)
    translation_mm = serializers.FloatField(default=50.0, min_value=0.0)
    rotation_deg = serializers.FloatField(default=20.0, min_value=0.0, max_value=180.0)
    min_contour_types = serializers.IntegerField(default=2, min_value=0, max_value=4)
    base_pose = PoseSerializer(default=lambda: {'rotation': [0.0, 0.0, 0.0], 'translation': [0.0, 0.0, 250.0]})
    sample_shape = serializers.BooleanField(default=False)
    max_attempts_factor = serializers.IntegerField(default=10, min_value=1)
    val_fraction = serializers.FloatField(default=0.1, min_value=0.0, max_value=1.0)
    augment = serializers.BooleanField(default=True)


class RefinementSerializer(serializers.Serializer):
    translation_mm = serializers.FloatField(default=20.0)
    rotation_deg = serializers.FloatField(default=10.0)
    shape_bound = serializers.FloatField(default=COEFFICIENT_BOUND)
    max_outer_iterations = serializers.IntegerField(default=10, min_value=1)
    translation_update_mm = serializers.FloatField(default=1.0, min_value=0.0)

    def validate(self, attrs):
        for name in ('translation_mm', 'rotation_deg', 'shape_bound'):
            if attrs[name] <= 0:
                raise serializers.ValidationError({name: ['Bound half-widths must be positive.']})
        return attrs


class ShapeModelSectionSerializer(serializers.Serializer):
    components = serializers.IntegerField(default=DEFAULT_COMPONENTS, min_value=1)
    require_watertight = serializers.BooleanField(default=False)


class RunConfigSerializer(serializers.Serializer):
    """
    Whole run configuration; ``save()`` returns a :class:`RunConfig`.
    """
    paths = PathsSerializer(default=dict)
    camera = CameraIntrinsicsSerializer(default=dict)
    sampling = SamplingSerializer(default=dict)
    refinement = RefinementSerializer(default=dict)
    shape_model = ShapeModelSectionSerializer(default=dict)
    nicp = NicpConfigSerializer(default=dict)
    optimizer = OptConfigSerializer(default=dict)
    augmentation = AugmentConfigSerializer(default=dict)
    seed = serializers.IntegerField(default=lambda: getattr(settings, 'DEFORMREG_SEED', 0))

    @staticmethod
    def _section(serializer_class, data):
        serializer = serializer_class(data=data or {})
        serializer.is_valid(raise_exception=True)
        return serializer.save()

    def create(self, validated_data):
        sampling = dict(self._section(SamplingSerializer, validated_data['sampling']))
        sampling['base_pose'] = RigidPose.from_dict(sampling['base_pose'])
        return RunConfig(
            paths=RunPaths(**self._section(PathsSerializer, validated_data['paths'])),
            camera=self._section(CameraIntrinsicsSerializer, validated_data['camera']),
            sampling=SamplingSpec(**sampling),
            refinement=RefinementSpec(**self._section(RefinementSerializer, validated_data['refinement'])),
            shape_model=ShapeModelSpec(**self._section(ShapeModelSectionSerializer, validated_data['shape_model'])),
            nicp=self._section(NicpConfigSerializer, validated_data['nicp']),
            optimizer=self._section(OptConfigSerializer, validated_data['optimizer']),
            augmentation=self._section(AugmentConfigSerializer, validated_data['augmentation']),
            seed=validated_data['seed'],
        )


class FrameRecordSerializer(serializers.Serializer):
    frame_id = serializers.CharField()
    pose = PoseSerializer()
    shape = serializers.ListField(child=serializers.FloatField(), default=list)
    images = serializers.DictField(child=serializers.CharField(), default=dict)
    metrics = serializers.DictField(default=dict)
    status = serializers.ChoiceField(choices=FrameStatus.CHOICES, default=FrameStatus.OK)
    error = serializers.CharField(default=None, allow_null=True, allow_blank=True)

    def validate_shape(self, value):
        if any(abs(a) > COEFFICIENT_BOUND + 1e-9 for a in value):
            raise serializers.ValidationError('Shape coefficients must lie in [-1, 1].')
        return value

    def create(self, validated_data):
        return FrameRecord.from_dict(validated_data)


def load_run_config(path=None, **overrides):
    """
    Read and validate a run configuration file (or defaults when ``path`` is None).

    ``overrides`` replace top-level sections or the seed before validation.
    """
    payload = read_json(path) if path else {}
    if not isinstance(payload, dict):
        raise ConfigError('Run configuration must be a JSON object', path=str(path))
    payload.update({key: value for key, value in overrides.items() if value is not None})
    serializer = RunConfigSerializer(data=payload)
    if not serializer.is_valid():
        raise ConfigError('Invalid run configuration', errors=serializer.errors)
    try:
        cfg = serializer.save()
    except serializers.ValidationError as exc:
        raise ConfigError('Invalid run configuration', errors=exc.detail)
    logger.info(f"Loaded run configuration from {path or 'defaults'} (seed {cfg.seed})")
    return cfg


def require_paths(cfg, *names):
    """Check that the named ``cfg.paths`` entries are set and exist."""
    errors = {}
    for name in names:
        value = getattr(cfg.paths, name)
        if not value:
            errors[name] = ['This path is required.']
            continue
        try:
            validate_existing_path(value)
        except DjangoValidationError as exc:
            errors[name] = exc.messages
    if errors:
        raise ConfigError('Missing input paths', errors=errors)
    return {name: Path(getattr(cfg.paths, name)) for name in names}


def load_frame_records(path):
    """Records from a JSON list file, or every ``*.json`` record in a directory."""
    path = Path(path)
    if path.is_dir():
        payloads = [read_json(item) for item in sorted(path.glob('*.json'))]
    else:
        payloads = read_json(path)
        if isinstance(payloads, dict):
            payloads = payloads['frames'] if 'frames' in payloads else [payloads]
    records = []
    for payload in payloads:
        serializer = FrameRecordSerializer(data=payload)
        if not serializer.is_valid():
            raise ConfigError(f"Invalid frame record in {path}", errors=serializer.errors)
        records.append(serializer.save())
    return records
