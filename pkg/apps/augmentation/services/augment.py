"""
Stochastic augmentation of rendered contour, mask and depth images.

Every operator takes a ``numpy.random.Generator`` and draws from it in a fixed order,
so a frame is reproducible from its (seed, frame index) stream. The samplers
(``augment_*``) draw parameters; the operators they call take explicit parameters.
"""
import dataclasses
import logging
from dataclasses import dataclass

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter
from skimage.morphology import skeletonize as zhang_skeletonize

from apps.common.exceptions import ConfigError
from apps.rendering.services.camera_render import CHANNEL_NAMES, LabelImageSet

logger = logging.getLogger(__name__)

CONTOUR_KERNEL = cv2.getStructuringElement(cv2.MORPH_CROSS, (2, 2))
DEPTH_SCALE = 255.0

_RANGES = (
    'dilation_iterations', 'mask_kernel', 'depth_occluder_count', 'depth_occluder_length',
    'depth_occluder_width', 'depth_occluder_angle', 'erasing_patches', 'erasing_ratio',
    'normalization_a', 'normalization_b', 'scale_factor', 'scale_shift', 'scale_noise',
)
_PROBABILITIES = (
    'contour_elastic_p', 'mask_p', 'depth_occluder_p', 'erasing_p', 'normalization_p', 'scale_p',
)


@dataclass(frozen=True)
class AugmentConfig:
    resize: tuple = None
    # contour
    dilation_iterations: tuple = (1, 3)
    contour_occluders_max: int = 3
    contour_occluder_fraction: float = 0.2
    contour_elastic_p: float = 1.0
    elastic_sigma: float = 4.0
    elastic_alpha: float = 10.0
    # mask
    mask_p: float = 0.5
    mask_kernel: tuple = (2, 6)
    # depth
    depth_occluder_p: float = 0.4
    depth_occluder_count: tuple = (1, 2)
    depth_occluder_length: tuple = (100.0, 400.0)
    depth_occluder_width: tuple = (8.0, 25.0)
    depth_occluder_angle: tuple = (-45.0, 45.0)
    erasing_p: float = 0.4
    erasing_patches: tuple = (0, 2)
    erasing_ratio: tuple = (0.05, 0.25)
    normalization_p: float = 0.5
    normalization_a: tuple = (0.0, 0.2)
    normalization_b: tuple = (0.8, 1.0)
    scale_p: float = 0.6
    scale_factor: tuple = (0.7, 1.3)
    scale_shift: tuple = (-30.0, 30.0)
    scale_noise: tuple = (0.01, 0.05)

    def __post_init__(self):
        errors = {}
        for name in _PROBABILITIES:
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors[name] = 'probability must lie in [0, 1]'
        for name in _RANGES:
            value = tuple(getattr(self, name))
            if len(value) != 2 or value[0] > value[1]:
                errors[name] = 'range must be [lo, hi] with lo <= hi'
            object.__setattr__(self, name, value)
        if self.dilation_iterations[0] < 0 or self.mask_kernel[0] < 1:
            errors['kernel'] = 'iteration counts and kernel sizes must be positive'
        if self.contour_occluders_max < 0:
            errors['contour_occluders_max'] = 'must be non-negative'
        if self.resize is not None:
            if len(self.resize) != 2 or min(self.resize) < 1:
                errors['resize'] = 'resize is [width, height]'
            else:
                object.__setattr__(self, 'resize', tuple(int(v) for v in self.resize))
        if errors:
            raise ConfigError('Invalid augmentation configuration', errors=errors)

    @classmethod
    def from_dict(cls, payload):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{key: value for key, value in payload.items() if key in names})


def _uniform(rng, bounds):
    return float(rng.uniform(bounds[0], bounds[1]))


def _integer(rng, bounds):
    return int(rng.integers(bounds[0], bounds[1] + 1))


def _as_u8(image):
    return np.where(np.asarray(image, dtype=bool), 255, 0).astype(np.uint8)


def resize_image(image, size):
    """Nearest-neighbour resize to ``size = (width, height)``; dtype is kept."""
    image = np.asarray(image)
    if image.dtype == bool:
        return cv2.resize(_as_u8(image), size, interpolation=cv2.INTER_NEAREST) > 0
    return cv2.resize(image, size, interpolation=cv2.INTER_NEAREST)


# contour operators

def skeletonize(image):
    """Zhang–Suen thinning to a one-pixel-wide, 8-connected skeleton."""
    image = np.asarray(image, dtype=bool)
    if not image.any():
        return image.copy()
    return zhang_skeletonize(image, method='zhang')


def dilate_contour(image, iterations):
    if iterations <= 0:
        return np.asarray(image, dtype=bool).copy()
    return cv2.dilate(_as_u8(image), CONTOUR_KERNEL, iterations=iterations) > 0


def delete_rectangles(image, rectangles):
    """Zero every ``(x, y, w, h)`` rectangle."""
    out = np.array(image, dtype=bool)
    for x, y, w, h in rectangles:
        out[y:y + h, x:x + w] = False
    return out


def sample_contour_rectangles(shape, rng, count, fraction):
    height, width = shape
    w = max(int(round(fraction * width)), 1)
    h = max(int(round(fraction * height)), 1)
    rectangles = []
    for _ in range(count):
        x = int(rng.integers(0, max(width - w, 0) + 1))
        y = int(rng.integers(0, max(height - h, 0) + 1))
        rectangles.append((x, y, w, h))
    return rectangles


def elastic_displacement_field(shape, rng, sigma=4.0, alpha=10.0):
    """Per-axis displacement (dx, dy): Gaussian-smoothed U[-1, 1] noise scaled by ``alpha``."""
    dx = gaussian_filter(rng.uniform(-1.0, 1.0, shape), sigma, mode='constant') * alpha
    dy = gaussian_filter(rng.uniform(-1.0, 1.0, shape), sigma, mode='constant') * alpha
    return dx, dy


def elastic_remap(image, dx, dy):
    """Backward remap with nearest-neighbour sampling; outside samples are background."""
    height, width = image.shape
    grid_x, grid_y = np.meshgrid(np.arange(width, dtype=np.float32), np.arange(height, dtype=np.float32))
    map_x = grid_x + dx.astype(np.float32)
    map_y = grid_y + dy.astype(np.float32)
    remapped = cv2.remap(_as_u8(image), map_x, map_y, interpolation=cv2.INTER_NEAREST,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return remapped > 0


def augment_contour(image, cfg, rng):
    """
    Skeletonize, dilate with a 2x2 cross, delete up to ``contour_occluders_max``
    rectangles, then remap through a smooth random displacement field.
    """
    if cfg.resize:
        image = resize_image(np.asarray(image, dtype=bool), cfg.resize)
    out = skeletonize(image)
    out = dilate_contour(out, _integer(rng, cfg.dilation_iterations))
    count = int(rng.integers(0, cfg.contour_occluders_max + 1))
    out = delete_rectangles(out, sample_contour_rectangles(out.shape, rng, count, cfg.contour_occluder_fraction))
    if rng.random() < cfg.contour_elastic_p:
        dx, dy = elastic_displacement_field(out.shape, rng, cfg.elastic_sigma, cfg.elastic_alpha)
        out = elastic_remap(out, dx, dy)
    return out


# mask operators

def odd_kernel_size(k):
    return k + 1 if k % 2 == 0 else k


def mask_kernel(k):
    return cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (k, k))


def jitter_mask(image, k, dilate):
    """Single erosion or dilation with a k x k elliptical element."""
    operation = cv2.dilate if dilate else cv2.erode
    return operation(_as_u8(image), mask_kernel(k), iterations=1) > 0


def augment_mask(image, cfg, rng):
    if cfg.resize:
        image = resize_image(np.asarray(image, dtype=bool), cfg.resize)
    image = np.asarray(image, dtype=bool)
    apply = rng.random() < cfg.mask_p
    dilate = rng.random() < 0.5
    k = odd_kernel_size(_integer(rng, cfg.mask_kernel))
    if not apply:
        return image.copy()
    return jitter_mask(image, k, dilate)


# depth operators

def occlude_rectangles(depth, valid, rectangles):
    """
    Zero the pixels covered by rotated rectangles ``((cx, cy), (length, width), angle)``.
    """
    canvas = np.zeros(depth.shape, dtype=np.uint8)
    for rectangle in rectangles:
        corners = cv2.boxPoints(rectangle)
        cv2.fillPoly(canvas, [np.round(corners).astype(np.int32)], 255)
    occluded = canvas > 128
    return np.where(occluded, 0.0, depth), valid & ~occluded


def sample_occluders(shape, rng, cfg):
    height, width = shape
    rectangles = []
    for _ in range(_integer(rng, cfg.depth_occluder_count)):
        centre = (float(rng.uniform(0, width)), float(rng.uniform(0, height)))
        length = min(_uniform(rng, cfg.depth_occluder_length), float(width))
        thickness = min(_uniform(rng, cfg.depth_occluder_width), float(height))
        angle = _uniform(rng, cfg.depth_occluder_angle)
        rectangles.append((centre, (length, thickness), angle))
    return rectangles


def erase_patches(depth, valid, patches, max_ratio):
    """
    Zero axis-aligned ``(x, y, w, h)`` patches, skipping any patch that would push the
    erased share of valid pixels above ``max_ratio``.
    """
    total = int(valid.sum())
    if not total:
        return depth, valid
    erased = np.zeros(depth.shape, dtype=bool)
    for x, y, w, h in patches:
        candidate = erased.copy()
        candidate[y:y + h, x:x + w] = True
        if np.count_nonzero(candidate & valid) > max_ratio * total:
            continue
        erased = candidate
    erased &= valid
    return np.where(erased, 0.0, depth), valid & ~erased


def sample_patches(shape, rng, cfg):
    height, width = shape
    count = _integer(rng, cfg.erasing_patches)
    w_range = (max(width // 20, 1), max(width // 8, 1))
    h_range = (max(height // 20, 1), max(height // 8, 1))
    w = _integer(rng, w_range)
    h = _integer(rng, h_range)
    patches = []
    for _ in range(count):
        x = int(rng.integers(0, max(width - w, 0) + 1))
        y = int(rng.integers(0, max(height - h, 0) + 1))
        patches.append((x, y, w, h))
    return patches


def normalize_depth(depth, valid, a, b):
    """Min-max normalize valid pixels, rescale into [a, b], then map to [0, 255]."""
    if not valid.any():
        return depth
    values = depth[valid]
    low, high = values.min(), values.max()
    unit = (values - low) / (high - low) if high > low else np.zeros_like(values)
    out = np.zeros_like(depth)
    out[valid] = (a + (b - a) * unit) * DEPTH_SCALE
    return out


def perturb_scale(depth, valid, factor, shift, noise_sigma, rng):
    """z' = s z + delta + N(0, sigma^2) on valid pixels, clipped at zero."""
    noise = rng.normal(0.0, noise_sigma, depth.shape) if noise_sigma > 0 else np.zeros(depth.shape)
    out = np.zeros_like(depth)
    out[valid] = np.maximum(factor * depth[valid] + shift + noise[valid], 0.0)
    return out


def augment_depth(depth, cfg, rng):
    """
    Occluder, random erasing, normalization and scale perturbation, in that order, on
    valid (non-zero) pixels. Invalid pixels stay zero.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if cfg.resize:
        depth = resize_image(depth, cfg.resize)
    valid = depth > 0
    out = np.where(valid, depth, 0.0)
    if not valid.any():
        return out

    if rng.random() < cfg.depth_occluder_p:
        out, valid = occlude_rectangles(out, valid, sample_occluders(out.shape, rng, cfg))
    if rng.random() < cfg.erasing_p:
        max_ratio = _uniform(rng, cfg.erasing_ratio)
        out, valid = erase_patches(out, valid, sample_patches(out.shape, rng, cfg), max_ratio)
    if rng.random() < cfg.normalization_p:
        out = normalize_depth(out, valid, _uniform(rng, cfg.normalization_a), _uniform(rng, cfg.normalization_b))
    if rng.random() < cfg.scale_p:
        factor = _uniform(rng, cfg.scale_factor)
        shift = _uniform(rng, cfg.scale_shift)
        sigma = _uniform(rng, cfg.scale_noise) * DEPTH_SCALE
        out = perturb_scale(out, valid, factor, shift, sigma, rng)
    return out


def augment_frame(label_set, cfg, rng):
    """Augment every contour channel, the mask and the depth map of one frame."""
    channels = {name: augment_contour(label_set.channel(name), cfg, rng) for name in CHANNEL_NAMES}
    full_mask = augment_mask(label_set.full_mask, cfg, rng)
    depth = augment_depth(label_set.depth, cfg, rng)
    logger.debug(f"Augmented frame: contour pixels {[int(c.sum()) for c in channels.values()]}")
    return LabelImageSet(channels=channels, full_mask=full_mask, depth=depth,
                         metadata={**label_set.metadata, 'augmented': True})
