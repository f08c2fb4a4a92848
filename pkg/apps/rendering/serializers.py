"""
Serializer for camera intrinsics in the run configuration.
"""
from rest_framework import serializers

from apps.rendering.services.camera_render import CameraIntrinsics


class CameraIntrinsicsSerializer(serializers.Serializer):
    """
    Ideal pinhole camera; defaults to a 640x480 image with a 500 px focal length.
    """
    fx = serializers.FloatField(default=500.0)
    fy = serializers.FloatField(default=500.0)
    cx = serializers.FloatField(default=320.0)
    cy = serializers.FloatField(default=240.0)
    width = serializers.IntegerField(default=640, min_value=1)
    height = serializers.IntegerField(default=480, min_value=1)

    def validate(self, attrs):
        if attrs['fx'] <= 0 or attrs['fy'] <= 0:
            raise serializers.ValidationError({'fx': ['Focal lengths must be positive.']})
        if not 0 <= attrs['cx'] < attrs['width']:
            raise serializers.ValidationError({'cx': ['Principal point must lie inside the image.']})
        if not 0 <= attrs['cy'] < attrs['height']:
            raise serializers.ValidationError({'cy': ['Principal point must lie inside the image.']})
        return attrs

    def create(self, validated_data):
        return CameraIntrinsics(**validated_data)
