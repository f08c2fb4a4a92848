"""
Custom validators for the deformreg application.
"""
from pathlib import Path

from django.core.exceptions import ValidationError
from django.utils.translation import gettext_lazy as _

MESH_EXTENSIONS = ('.obj', '.ply')


def validate_probability(value):
    """
    Validate that a probability lies in [0, 1].
    """
    if not 0.0 <= value <= 1.0:
        raise ValidationError(
            _('Probability must lie in [0, 1].'),
            code='invalid_probability'
        )


def validate_range(value):
    """
    Validate a two-element [lo, hi] range with lo <= hi.
    """
    if len(value) != 2:
        raise ValidationError(
            _('Range must have exactly two values.'),
            code='invalid_range'
        )
    if value[0] > value[1]:
        raise ValidationError(
            _('Range lower bound exceeds upper bound.'),
            code='invalid_range'
        )


def validate_strictly_decreasing(values):
    """
    Validate a stiffness schedule: strictly decreasing and positive.
    """
    if not values:
        raise ValidationError(_('Schedule must not be empty.'), code='empty_schedule')
    if any(v <= 0 for v in values):
        raise ValidationError(_('Schedule values must be positive.'), code='invalid_schedule')
    if any(b >= a for a, b in zip(values, values[1:])):
        raise ValidationError(
            _('Schedule must be strictly decreasing.'),
            code='invalid_schedule'
        )


def validate_mesh_file(value):
    """
    Validate mesh file format by extension.
    """
    suffix = Path(str(value)).suffix.lower()
    if suffix not in MESH_EXTENSIONS:
        raise ValidationError(
            _('Unsupported mesh format. Please use OBJ or PLY.'),
            code='invalid_mesh_format'
        )


def validate_existing_path(value):
    """
    Validate that a referenced path exists at run start.
    """
    if not Path(str(value)).exists():
        raise ValidationError(
            _('Path does not exist: %(path)s'),
            code='missing_path',
            params={'path': value},
        )
