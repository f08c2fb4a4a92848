"""
Serializer fields shared by the run-configuration sections.
"""
from rest_framework import serializers

from apps.common.validators import validate_probability, validate_range


class RangeField(serializers.ListField):
    """
    A ``[lo, hi]`` pair with ``lo <= hi``.
    """
    child = serializers.FloatField()

    def __init__(self, **kwargs):
        kwargs.setdefault('min_length', 2)
        kwargs.setdefault('max_length', 2)
        validators = list(kwargs.pop('validators', []))
        validators.append(validate_range)
        super().__init__(validators=validators, **kwargs)


class IntRangeField(RangeField):
    child = serializers.IntegerField()


class ProbabilityField(serializers.FloatField):
    def __init__(self, **kwargs):
        validators = list(kwargs.pop('validators', []))
        validators.append(validate_probability)
        super().__init__(validators=validators, **kwargs)
