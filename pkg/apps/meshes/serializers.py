"""
Serializers for the NICP section of the run configuration.
"""
from django.core.exceptions import ValidationError as DjangoValidationError
from rest_framework import serializers

from apps.common.validators import validate_strictly_decreasing
from apps.meshes.services.nicp import DEFAULT_STIFFNESS_SCHEDULE, CorrespondenceMode, NicpConfig


class NicpConfigSerializer(serializers.Serializer):
    """
    Validates NICP constants; ``save()`` returns a :class:`NicpConfig`.
    """
    stiffness_schedule = serializers.ListField(
        child=serializers.FloatField(), default=list(DEFAULT_STIFFNESS_SCHEDULE),
    )
    normal_threshold = serializers.FloatField(default=0.7, min_value=0.0, max_value=1.0)
    match_weight = serializers.FloatField(default=1.0)
    tikhonov = serializers.FloatField(default=1e-6, min_value=0.0)
    inner_iters_per_stage = serializers.IntegerField(default=10, min_value=1)
    inner_tol = serializers.FloatField(default=1e-4, min_value=0.0)
    translation_weight = serializers.FloatField(default=1.0)
    correspondence_mode = serializers.ChoiceField(
        choices=CorrespondenceMode.CHOICES, default=CorrespondenceMode.SURFACE,
    )

    def validate_stiffness_schedule(self, value):
        """Schedule must be positive and strictly decreasing."""
        try:
            validate_strictly_decreasing(value)
        except DjangoValidationError as exc:
            raise serializers.ValidationError(exc.messages)
        return value

    def validate_match_weight(self, value):
        if value <= 0:
            raise serializers.ValidationError('Match weight must be positive.')
        return value

    def validate_translation_weight(self, value):
        if value <= 0:
            raise serializers.ValidationError('Translation weight must be positive.')
        return value

    def create(self, validated_data):
        return NicpConfig.from_dict(validated_data)
