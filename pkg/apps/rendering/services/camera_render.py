"""
Software pinhole renderer: z-buffered depth and mask, silhouettes, and labelled contours.

Image origin is top-left, x to the right, y down; pixel (row, col) has its centre at
(col + 0.5, row + 0.5). Camera looks along +z; depth is the camera-space z in mm.
"""
import logging
from dataclasses import dataclass, field

import cv2
import numpy as np
from django.conf import settings
from scipy import ndimage

from apps.common.exceptions import ConfigError
from apps.meshes.services.mesh_core import LABEL_NAMES

logger = logging.getLogger(__name__)

SILHOUETTE = 'sil'
CHANNEL_NAMES = LABEL_NAMES + (SILHOUETTE,)
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        errors = {}
        if self.fx <= 0 or self.fy <= 0:
            errors['focal'] = 'fx and fy must be positive'
        if self.width < 1 or self.height < 1:
            errors['size'] = 'width and height must be positive'
        if not 0 <= self.cx < self.width:
            errors['cx'] = 'principal point must lie inside the image'
        if not 0 <= self.cy < self.height:
            errors['cy'] = 'principal point must lie inside the image'
        if errors:
            raise ConfigError('Invalid camera intrinsics', errors=errors)

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def diagonal(self):
        return float(np.hypot(self.width, self.height))

    def project(self, points):
        """Continuous pixel coordinates (u, v) of camera-space points."""
        points = np.asarray(points, dtype=np.float64)
        with np.errstate(divide='ignore', invalid='ignore'):
            u = self.fx * points[:, 0] / points[:, 2] + self.cx
            v = self.fy * points[:, 1] / points[:, 2] + self.cy
        return u, v

    def as_dict(self):
        return {'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy,
                'width': self.width, 'height': self.height}

    @classmethod
    def from_dict(cls, payload):
        return cls(
            fx=float(payload['fx']), fy=float(payload['fy']),
            cx=float(payload['cx']), cy=float(payload['cy']),
            width=int(payload['width']), height=int(payload['height']),
        )


@dataclass
class LabelImageSet:
    """
    Four binary contour channels, the full mask, and a depth map in mm (0 = invalid).
    """
    channels: dict
    full_mask: np.ndarray
    depth: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.full_mask.shape

    @classmethod
    def empty(cls, shape):
        return cls(
            channels={name: np.zeros(shape, dtype=bool) for name in CHANNEL_NAMES},
            full_mask=np.zeros(shape, dtype=bool),
            depth=np.zeros(shape, dtype=np.float64),
        )

    def channel(self, name):
        return self.channels.get(name, np.zeros(self.shape, dtype=bool))

    def channel_counts(self):
        return {name: int(np.count_nonzero(self.channel(name))) for name in CHANNEL_NAMES}

    def contour_types(self):
        """Number of non-empty contour channels."""
        return sum(1 for count in self.channel_counts().values() if count)

    def check(self):
        """Return a list of violated invariants (empty when consistent)."""
        problems = []
        for name in CHANNEL_NAMES:
            if self.channel(name).shape != self.shape:
                problems.append(f"channel {name} has shape {self.channel(name).shape}")
        if self.depth.shape != self.shape:
            problems.append('depth shape differs from mask shape')
        elif np.any((self.depth > 0) & ~self.full_mask):
            problems.append('depth is set outside the mask')
        if np.any(self.channel(SILHOUETTE) & ~silhouette_mask(self.full_mask)):
            problems.append('silhouette pixels off the mask boundary')
        return problems


def _near_plane():
    return getattr(settings, 'DEFORMREG_NEAR_PLANE_MM', 1.0)


def _chunk_size():
    return getattr(settings, 'DEFORMREG_RASTER_CHUNK', 2_000_000)


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _owned(dx, dy):
    # Antisymmetric in the edge direction, so a shared edge belongs to exactly one triangle.
    return (dy > 0) | ((dy == 0) & (dx < 0))


def _rasterize_chunk(buffer, width, u, v, z, xmin, ymin, nx, ny):
    """Scatter the nearest depth of one batch of faces into ``buffer`` (flat, +inf = empty)."""
    counts = nx * ny
    total = int(counts.sum())
    if not total:
        return
    face = np.repeat(np.arange(len(counts)), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(total) - np.repeat(starts, counts)
    col = xmin[face] + local % nx[face]
    row = ymin[face] + local // nx[face]
    px = col + 0.5
    py = row + 0.5

    ax, bx, cx = u[face, 0], u[face, 1], u[face, 2]
    ay, by, cy = v[face, 0], v[face, 1], v[face, 2]
    area = _edge(ax, ay, bx, by, cx, cy)
    orientation = np.sign(area)

    w0 = orientation * _edge(bx, by, cx, cy, px, py)
    w1 = orientation * _edge(cx, cy, ax, ay, px, py)
    w2 = orientation * _edge(ax, ay, bx, by, px, py)

    inside = (
        ((w0 > 0) | ((w0 == 0) & _owned(orientation * (cx - bx), orientation * (cy - by))))
        & ((w1 > 0) | ((w1 == 0) & _owned(orientation * (ax - cx), orientation * (ay - cy))))
        & ((w2 > 0) | ((w2 == 0) & _owned(orientation * (bx - ax), orientation * (by - ay))))
        & (area != 0)
    )
    if not inside.any():
        return

    face = face[inside]
    doubled = np.abs(area[inside])
    l0 = w0[inside] / doubled
    l1 = w1[inside] / doubled
    l2 = w2[inside] / doubled
    # 1/z is affine in screen space
    inverse_depth = l0 / z[face, 0] + l1 / z[face, 1] + l2 / z[face, 2]
    depth = 1.0 / inverse_depth
    np.minimum.at(buffer, row[inside] * width + col[inside], depth)


def rasterize_depth(camera_points, faces, cam):
    """
    Z-buffer of camera-space triangles; returns depth (mm) with +inf for empty pixels.
    """
    height, width = cam.shape
    buffer = np.full(height * width, np.inf)
    if not len(faces):
        return buffer.reshape(height, width)

    near = _near_plane()
    z = camera_points[:, 2]
    front = np.all(z[faces] >= near, axis=1)
    culled = int(np.count_nonzero(~front))
    if culled:
        logger.debug(f"Near-plane culling removed {culled} of {len(faces)} faces")
    faces = faces[front]
    if not len(faces):
        return buffer.reshape(height, width)

    u_all, v_all = cam.project(camera_points)
    u = u_all[faces]
    v = v_all[faces]
    zf = z[faces]

    xmin = np.maximum(np.ceil(u.min(axis=1) - 0.5), 0).astype(np.int64)
    xmax = np.minimum(np.floor(u.max(axis=1) - 0.5), width - 1).astype(np.int64)
    ymin = np.maximum(np.ceil(v.min(axis=1) - 0.5), 0).astype(np.int64)
    ymax = np.minimum(np.floor(v.max(axis=1) - 0.5), height - 1).astype(np.int64)
    nx = np.maximum(xmax - xmin + 1, 0)
    ny = np.maximum(ymax - ymin + 1, 0)
    counts = nx * ny

    keep = counts > 0
    u, v, zf = u[keep], v[keep], zf[keep]
    xmin, ymin, nx, ny, counts = xmin[keep], ymin[keep], nx[keep], ny[keep], counts[keep]

    chunk = max(int(_chunk_size()), 1)
    boundaries = np.cumsum(counts)
    start = 0
    while start < len(counts):
        offset = boundaries[start - 1] if start else 0
        stop = int(np.searchsorted(boundaries, offset + chunk, side='right'))
        stop = max(stop, start + 1)
        batch = slice(start, stop)
        _rasterize_chunk(buffer, width, u[batch], v[batch], zf[batch],
                         xmin[batch], ymin[batch], nx[batch], ny[batch])
        start = stop
    return buffer.reshape(height, width)


def render_depth_mask(mesh, pose, cam):
    """
    Per-pixel nearest-surface depth and the full mask (depth > 0).
    """
    camera_points = pose.apply(mesh.vertices)
    buffer = rasterize_depth(camera_points, mesh.faces, cam)
    mask = np.isfinite(buffer)
    depth = np.where(mask, buffer, 0.0)
    if not mask.any():
        logger.warning('Render is empty: mesh is outside the view or behind the camera')
    return mask, depth


def silhouette_mask(full_mask):
    """Mask pixels with at least one 4-neighbour outside the mask (image border counts as outside)."""
    full_mask = np.asarray(full_mask, dtype=bool)
    interior = ndimage.binary_erosion(full_mask, structure=FOUR_CONNECTED, border_value=0)
    return full_mask & ~interior


def pixel_points(channel):
    """(x, y) pixel coordinates of the set pixels of a binary image."""
    return np.argwhere(np.asarray(channel, dtype=bool))[:, ::-1].astype(np.float64)


def extract_silhouette(full_mask):
    return pixel_points(silhouette_mask(full_mask))


def _project_to_pixels(camera_points, cam):
    u, v = cam.project(camera_points)
    with np.errstate(invalid='ignore'):
        col = np.floor(u)
        row = np.floor(v)
    inside = (
        (camera_points[:, 2] >= _near_plane())
        & np.isfinite(col) & np.isfinite(row)
        & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    )
    col = np.where(inside, col, 0).astype(np.int64)
    row = np.where(inside, row, 0).astype(np.int64)
    return col, row, inside


def visible_label_vertices(mesh, pose, cam, depth, label, tolerance=None):
    """
    Per-vertex visibility of one label polyline: the vertex projects into the image and
    its depth is within ``tolerance`` of the z-buffer at that pixel.
    """
    if tolerance is None:
        tolerance = getattr(settings, 'DEFORMREG_VISIBILITY_TOLERANCE_MM', 1.0)
    indices = np.asarray(mesh.vertex_labels.get(label, ()), dtype=np.int64)
    if not len(indices):
        return np.zeros(0, dtype=bool), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    camera_points = pose.apply(mesh.vertices[indices])
    col, row, inside = _project_to_pixels(camera_points, cam)
    surface = depth[row, col]
    visible = inside & (surface > 0) & (np.abs(camera_points[:, 2] - surface) <= tolerance)
    return visible, col, row


def render_labeled_contours(mesh, pose, cam, depth):
    """
    Project each label polyline; draw visible vertices and join consecutive visible ones
    with 1-px segments. A missing label yields an empty channel.
    """
    channels = {}
    for label in LABEL_NAMES:
        canvas = np.zeros(cam.shape, dtype=np.uint8)
        visible, col, row = visible_label_vertices(mesh, pose, cam, depth, label)
        for k in np.flatnonzero(visible):
            canvas[row[k], col[k]] = 255
            if k + 1 < len(visible) and visible[k + 1]:
                cv2.line(canvas, (int(col[k]), int(row[k])), (int(col[k + 1]), int(row[k + 1])), 255, 1)
        channels[label] = canvas > 0
    return channels


def render_full(mesh, pose, cam):
    mask, depth = render_depth_mask(mesh, pose, cam)
    channels = render_labeled_contours(mesh, pose, cam, depth)
    channels[SILHOUETTE] = silhouette_mask(mask)
    return LabelImageSet(channels=channels, full_mask=mask, depth=depth)


OVERLAY_COLOURS = {
    'ridge_R': (230, 40, 40),
    'ridge_L': (40, 90, 230),
    'lig': (40, 200, 70),
    SILHOUETTE: (250, 220, 40),
}


def render_overlay(label_set, background=None):
    """
    RGB uint8 overlay of the mask outline and labelled channels on ``background``
    (grey canvas when omitted).
    """
    height, width = label_set.shape
    if background is None:
        canvas = np.full((height, width, 3), 64, dtype=np.uint8)
    else:
        background = np.asarray(background)
        if background.ndim == 2:
            background = np.repeat(background[:, :, None], 3, axis=2)
        canvas = cv2.resize(background[:, :, :3].astype(np.uint8), (width, height),
                            interpolation=cv2.INTER_NEAREST)
    outline = silhouette_mask(label_set.full_mask)
    canvas[outline] = OVERLAY_COLOURS[SILHOUETTE]
    for name in LABEL_NAMES:
        canvas[label_set.channel(name)] = OVERLAY_COLOURS[name]
    return canvas
