"""
Domain exceptions and the handler that turns them into consistent payloads.
"""
import logging

from django.core.exceptions import ValidationError
from rest_framework import serializers

from apps.common.utils import error_response

logger = logging.getLogger(__name__)


class DeformRegError(Exception):
    """
    Base class for registration toolkit errors.
    """
    code = 'error'
    default_message = 'Registration error'

    def __init__(self, message=None, **details):
        self.message = message or self.default_message
        self.details = details
        super().__init__(self.message)

    def as_dict(self):
        return {'code': self.code, 'message': self.message, **self.details}


class ConfigError(DeformRegError):
    code = 'invalid_config'
    default_message = 'Invalid configuration'


class MeshFormatError(DeformRegError):
    code = 'mesh_format'
    default_message = 'Could not parse mesh file'

    def __init__(self, message=None, path=None, line=None, offset=None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if offset is not None:
            location.append(f"offset {offset}")
        if location and message:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message, path=str(path) if path else None, line=line, offset=offset)
        self.line = line
        self.offset = offset


class ModelFormatError(DeformRegError):
    code = 'model_format'
    default_message = 'Could not read shape model container'


class MeshIndexError(DeformRegError):
    code = 'index_out_of_range'
    default_message = 'Mesh index out of range'


class EmptyMeshError(DeformRegError):
    code = 'empty_mesh'
    default_message = 'Mesh has no vertices'


class DegenerateMeshError(DeformRegError):
    code = 'degenerate_mesh'
    default_message = 'no valid normals'


class RankDeficientError(DeformRegError):
    code = 'rank_deficient'
    default_message = 'rank-deficient alignment'


class CorrespondenceError(DeformRegError):
    code = 'no_correspondences'
    default_message = 'no valid correspondences'


class SolverError(DeformRegError):
    code = 'singular_system'
    default_message = 'Linear system could not be solved'

    def __init__(self, message=None, condition_estimate=None):
        if condition_estimate is not None:
            message = f"{message or self.default_message} (condition estimate {condition_estimate:.3e})"
        super().__init__(message, condition_estimate=condition_estimate)
        self.condition_estimate = condition_estimate


class TopologyMismatchError(DeformRegError):
    code = 'topology_mismatch'
    default_message = 'Mesh topology does not match the canonical mesh'


class CorpusSizeError(DeformRegError):
    code = 'corpus_too_small'
    default_message = 'Corpus is smaller than the requested component count'


class InvalidStartingPointError(DeformRegError):
    code = 'invalid_start'
    default_message = 'invalid starting point'


class UndefinedHausdorffError(DeformRegError):
    code = 'undefined_hausdorff'
    default_message = 'undefined Hausdorff'


class NothingToRegisterError(DeformRegError):
    code = 'nothing_to_register'
    default_message = 'nothing to register'


class FrameMismatchError(DeformRegError):
    code = 'frame_mismatch'
    default_message = 'Frame ids do not match'


def custom_exception_handler(exc, context=None):
    """
    Turn any exception into the consistent response payload.
    """
    if isinstance(exc, DeformRegError):
        payload = error_response(exc.message, exc.as_dict())
        logger.error(f"Registration error [{exc.code}]: {exc.message}")
    elif isinstance(exc, (ValidationError, serializers.ValidationError)):
        detail = getattr(exc, 'message_dict', None) or getattr(exc, 'detail', None) or str(exc)
        payload = error_response('Validation failed', detail if isinstance(detail, dict) else {'detail': detail})
        logger.error(f"Validation error: {detail}")
    else:
        # Log unexpected errors
        logger.error(f"Unexpected error: {exc}", exc_info=True)
        payload = error_response('Internal error', {'detail': [str(exc)]}, status_code=500)
    if context:
        payload['context'] = context
    return payload
