"""
Serializer for the augmentation section of the run configuration.
"""
from rest_framework import serializers

from apps.augmentation.services.augment import AugmentConfig
from apps.common.serializers import IntRangeField, ProbabilityField, RangeField


class AugmentConfigSerializer(serializers.Serializer):
    """
    Augmentation probabilities and ranges; every default is the published setting.
    """
    resize = serializers.ListField(
        child=serializers.IntegerField(min_value=1), min_length=2, max_length=2,
        default=None, allow_null=True,
    )

    dilation_iterations = IntRangeField(default=[1, 3])
    contour_occluders_max = serializers.IntegerField(default=3, min_value=0)
    contour_occluder_fraction = serializers.FloatField(default=0.2, min_value=0.0, max_value=1.0)
    contour_elastic_p = ProbabilityField(default=1.0)
    elastic_sigma = serializers.FloatField(default=4.0, min_value=0.0)
    elastic_alpha = serializers.FloatField(default=10.0, min_value=0.0)

    mask_p = ProbabilityField(default=0.5)
    mask_kernel = IntRangeField(default=[2, 6])

    depth_occluder_p = ProbabilityField(default=0.4)
    depth_occluder_count = IntRangeField(default=[1, 2])
    depth_occluder_length = RangeField(default=[100.0, 400.0])
    depth_occluder_width = RangeField(default=[8.0, 25.0])
    depth_occluder_angle = RangeField(default=[-45.0, 45.0])
    erasing_p = ProbabilityField(default=0.4)
    erasing_patches = IntRangeField(default=[0, 2])
    erasing_ratio = RangeField(default=[0.05, 0.25])
    normalization_p = ProbabilityField(default=0.5)
    normalization_a = RangeField(default=[0.0, 0.2])
    normalization_b = RangeField(default=[0.8, 1.0])
    scale_p = ProbabilityField(default=0.6)
    scale_factor = RangeField(default=[0.7, 1.3])
    scale_shift = RangeField(default=[-30.0, 30.0])
    scale_noise = RangeField(default=[0.01, 0.05])

    def validate_mask_kernel(self, value):
        if value[0] < 1:
            raise serializers.ValidationError('Kernel sizes must be positive.')
        return value

    def validate_dilation_iterations(self, value):
        if value[0] < 0:
            raise serializers.ValidationError('Iteration counts must be non-negative.')
        return value

    def create(self, validated_data):
        return AugmentConfig.from_dict(validated_data)
