"""
Common utility functions for the deformreg application.
"""
import hashlib
import json
import re
from pathlib import Path

import numpy as np


def sanitize_filename(filename):
    """
    Sanitize a frame or artefact name for safe storage.
    """
    filename = str(filename).split('/')[-1].split('\\')[-1]
    filename = re.sub(r'[^\w\-_\.]', '_', filename)

    if len(filename) > 100:
        name, ext = filename.rsplit('.', 1) if '.' in filename else (filename, '')
        filename = name[:95] + ('.' + ext if ext else '')

    return filename


def success_response(message, data=None):
    """
    Create a standardized success payload for command output.
    """
    return {
        'success': True,
        'message': message,
        'data': data,
        'status': 200,
    }


def error_response(message, errors=None, status_code=400):
    """
    Create a standardized error payload for command output.
    """
    return {
        'success': False,
        'message': message,
        'data': None,
        'errors': errors or {},
        'status': status_code,
    }


class NumpyJSONEncoder(json.JSONEncoder):
    """JSON encoder that understands numpy scalars and arrays."""

    def default(self, o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, Path):
            return str(o)
        return super().default(o)


def write_json(path, payload):
    """Write ``payload`` as indented JSON, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True, cls=NumpyJSONEncoder)
    return path


def read_json(path):
    with open(path, 'r', encoding='utf-8') as handle:
        return json.load(handle)


def dumps(payload):
    return json.dumps(payload, sort_keys=True, cls=NumpyJSONEncoder)


def array_digest(*arrays):
    """
    SHA-256 over the canonical little-endian bytes of the given arrays.
    """
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array)
        digest.update(array.astype(array.dtype.newbyteorder('<'), copy=False).tobytes())
    return digest.hexdigest()


def frame_rng(seed, frame_index):
    """
    Independent random stream for one frame, reproducible from (seed, frame index).
    """
    return np.random.default_rng([int(seed), int(frame_index)])
