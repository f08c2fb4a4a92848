"""
PNG and manifest I/O for rendered frames.

A frame directory holds one 8-bit PNG per channel (0/255), ``mask.png``, a 16-bit
``depth.png`` and a ``frame.json`` manifest.
"""
import logging
from pathlib import Path

import numpy as np
from django.conf import settings
from PIL import Image

from apps.common.exceptions import ConfigError
from apps.common.utils import read_json, write_json
from apps.rendering.services.camera_render import CHANNEL_NAMES, LabelImageSet

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'frame.json'
MASK_NAME = 'mask.png'
DEPTH_NAME = 'depth.png'
UINT16_MAX = np.iinfo(np.uint16).max


def depth_scale():
    """Millimetres per unit of the 16-bit depth PNG."""
    return getattr(settings, 'DEFORMREG_DEPTH_PNG_SCALE_MM', 0.1)


def write_binary_png(path, image):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(np.asarray(image, dtype=bool), 255, 0).astype(np.uint8)).save(path)
    return path


def read_binary_png(path):
    with Image.open(path) as image:
        array = np.asarray(image.convert('L'))
    return array > 127


def write_rgb_png(path, image):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)[:, :, :3]).save(path)
    return path


def read_rgb_png(path):
    with Image.open(path) as image:
        return np.asarray(image.convert('RGB'))


def write_depth_png(path, depth, scale=None):
    """16-bit PNG: stored value = round(depth / scale); 0 stays invalid."""
    scale = scale or depth_scale()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    units = np.rint(np.asarray(depth, dtype=np.float64) / scale)
    overflow = units > UINT16_MAX
    if overflow.any():
        logger.warning(f"{int(overflow.sum())} depth values exceed the 16-bit range and were clipped")
    Image.fromarray(np.clip(units, 0, UINT16_MAX).astype(np.uint16)).save(path)
    return path


def read_depth_png(path, scale=None):
    scale = scale or depth_scale()
    with Image.open(path) as image:
        units = np.asarray(image).astype(np.float64)
    return units * scale


def write_frame(directory, label_set, pose=None, cam=None, extra=None):
    """Write channel PNGs, mask, depth and the manifest; returns the manifest dict."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in CHANNEL_NAMES:
        files[name] = write_binary_png(directory / f'{name}.png', label_set.channel(name)).name
    files['mask'] = write_binary_png(directory / MASK_NAME, label_set.full_mask).name
    files['depth'] = write_depth_png(directory / DEPTH_NAME, label_set.depth).name

    manifest = {
        'channels': files,
        'depth_scale_mm': depth_scale(),
        'counts': label_set.channel_counts(),
    }
    if pose is not None:
        manifest['pose'] = pose.as_dict()
    if cam is not None:
        manifest['intrinsics'] = cam.as_dict()
    manifest.update(extra or {})
    write_json(directory / MANIFEST_NAME, manifest)
    return manifest


def read_frame(directory):
    """Read a frame directory written by :func:`write_frame` (or a bare set of channel PNGs)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    manifest = read_json(manifest_path) if manifest_path.exists() else {}
    files = manifest.get('channels', {})

    channels = {}
    shape = None
    for name in CHANNEL_NAMES:
        path = directory / files.get(name, f'{name}.png')
        if path.exists():
            channels[name] = read_binary_png(path)
            shape = channels[name].shape
    if shape is None:
        raise ConfigError(f"No channel images found in {directory}", directory=str(directory))

    mask_path = directory / files.get('mask', MASK_NAME)
    full_mask = read_binary_png(mask_path) if mask_path.exists() else np.zeros(shape, dtype=bool)
    depth_path = directory / files.get('depth', DEPTH_NAME)
    scale = manifest.get('depth_scale_mm')
    depth = read_depth_png(depth_path, scale) if depth_path.exists() else np.zeros(shape)
    for name in CHANNEL_NAMES:
        channels.setdefault(name, np.zeros(shape, dtype=bool))
    return LabelImageSet(channels=channels, full_mask=full_mask, depth=depth, metadata=manifest), manifest
