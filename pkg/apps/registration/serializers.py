"""
Serializers for the optimizer section of the run configuration.
"""
from rest_framework import serializers

from apps.registration.services.cmaes_opt import OptConfig

REGISTRATION_POPSIZE = 15


class OptConfigSerializer(serializers.Serializer):
    """
    CMA-ES settings; bounds are filled in per frame by the refinement step.
    """
    maxiter = serializers.IntegerField(default=100, min_value=1)
    popsize = serializers.IntegerField(default=REGISTRATION_POPSIZE, min_value=4, allow_null=True)
    sigma0 = serializers.FloatField(default=0.15)
    seed = serializers.IntegerField(default=0)
    diagonal_only = serializers.BooleanField(default=False)
    ftol = serializers.FloatField(default=1e-8, min_value=0.0)
    xtol = serializers.FloatField(default=1e-10, min_value=0.0)
    telemetry_path = serializers.CharField(default=None, allow_null=True, allow_blank=True)

    def validate_sigma0(self, value):
        if not 0 < value <= 1:
            raise serializers.ValidationError('sigma0 is a fraction of the box width in (0, 1].')
        return value

    def create(self, validated_data):
        if not validated_data.get('telemetry_path'):
            validated_data['telemetry_path'] = None
        return OptConfig.from_dict(validated_data)
