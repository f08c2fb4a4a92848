"""
Registration objective and evaluation metrics.

The cost compares rendered labelled contours against input contours with a
pixel-count weighted, symmetric Hausdorff distance. Surface MSE and target
registration error are evaluation-only metrics.
"""
import logging
from dataclasses import dataclass

import numpy as np
import trimesh
from scipy.spatial import cKDTree

from apps.common.exceptions import (
    DegenerateMeshError,
    EmptyMeshError,
    NothingToRegisterError,
    UndefinedHausdorffError,
)
from apps.meshes.services.mesh_core import RigidPose, valid_faces
from apps.rendering.services.camera_render import CHANNEL_NAMES, pixel_points, render_full
from apps.shape_models.services.shape_model import eval_shape

logger = logging.getLogger(__name__)

POSE_DIMENSIONS = 6


def extract_contour(channel):
    """Pixel point set (x = column, y = row) of a binary contour channel."""
    return pixel_points(channel)


def _as_points(points):
    points = np.asarray(points, dtype=np.float64)
    return points.reshape(len(points), -1) if len(points) else points.reshape(0, 2)


def _directed(tree, points):
    distances, _ = tree.query(points, k=1)
    return float(np.max(distances))


def hausdorff(a, b):
    """
    Symmetric Hausdorff distance between two non-empty point sets.
    """
    a = _as_points(a)
    b = _as_points(b)
    if not len(a) or not len(b):
        raise UndefinedHausdorffError(sizes=[len(a), len(b)])
    return max(_directed(cKDTree(b), a), _directed(cKDTree(a), b))


def label_weights(masks):
    """
    w_n = |L_n| / N over the four channels; uniform 1/4 when every channel is empty.
    """
    counts = masks.channel_counts()
    total = sum(counts[name] for name in CHANNEL_NAMES)
    if not total:
        return {name: 1.0 / len(CHANNEL_NAMES) for name in CHANNEL_NAMES}
    return {name: counts[name] / total for name in CHANNEL_NAMES}


def channel_hausdorff(rendered, masks):
    """Per-channel Hausdorff distance; ``None`` where either side is empty."""
    distances = {}
    for name in CHANNEL_NAMES:
        ours = extract_contour(rendered.channel(name))
        theirs = extract_contour(masks.channel(name))
        distances[name] = hausdorff(ours, theirs) if len(ours) and len(theirs) else None
    return distances


def split_parameters(theta, K):
    """``[tx, ty, tz, rx, ry, rz, alpha...]`` to (pose, alpha); missing alpha is zero."""
    theta = np.asarray(theta, dtype=np.float64)
    pose = RigidPose.from_vector(theta[:POSE_DIMENSIONS])
    alpha = np.zeros(K)
    shape_part = theta[POSE_DIMENSIONS:]
    alpha[:len(shape_part)] = shape_part[:K]
    return pose, alpha


def join_parameters(pose, alpha=()):
    return np.concatenate([pose.as_vector(), np.asarray(alpha, dtype=np.float64)])


class RegistrationObjective:
    """
    Weighted Hausdorff cost of a (pose, shape) hypothesis against fixed input contours.

    The KD-trees of the input channels are built once, so one instance can serve as a
    CMA-ES fitness across many evaluations. The instance is read-only after
    construction and safe to call from several workers.
    """

    def __init__(self, model, masks, cam):
        self.model = model
        self.cam = cam
        self.weights = label_weights(masks)
        self.penalty = cam.diagonal
        self.targets = {}
        for name in CHANNEL_NAMES:
            points = extract_contour(masks.channel(name))
            if len(points) and self.weights[name] > 0:
                self.targets[name] = (points, cKDTree(points))
        if not self.targets:
            raise NothingToRegisterError()

    def render(self, pose, alpha):
        return render_full(eval_shape(self.model, alpha), pose, self.cam)

    def channel_costs(self, rendered):
        """Weighted contribution of every active channel."""
        costs = {}
        for name, (points, tree) in self.targets.items():
            ours = extract_contour(rendered.channel(name))
            if not len(ours):
                costs[name] = self.weights[name] * self.penalty
                continue
            distance = max(_directed(tree, ours), _directed(cKDTree(ours), points))
            costs[name] = self.weights[name] * distance
        return costs

    def cost(self, pose, alpha):
        return float(sum(self.channel_costs(self.render(pose, alpha)).values()))

    def __call__(self, theta):
        pose, alpha = split_parameters(theta, self.model.K)
        return self.cost(pose, alpha)


def registration_cost(model, pose, alpha, masks, cam):
    return RegistrationObjective(model, masks, cam).cost(pose, alpha)


def surface_mse(mesh, T_A, T_B, T_pred):
    """Mean squared distance between T_A·T_pred·p and T_B·p over the mesh vertices (mm²)."""
    if not mesh.n_vertices:
        raise EmptyMeshError()
    predicted = T_A.apply(T_pred.apply(mesh.vertices))
    expected = T_B.apply(mesh.vertices)
    return float(np.mean(np.sum((predicted - expected) ** 2, axis=1)))


@dataclass(frozen=True)
class TargetAttachment:
    """Target point carried by a surface triangle: barycentric foot plus a local-frame offset."""
    face: int
    barycentric: tuple
    offset: tuple


def _face_frame(triangle):
    e1 = triangle[1] - triangle[0]
    normal = np.cross(e1, triangle[2] - triangle[0])
    e1_norm, normal_norm = np.linalg.norm(e1), np.linalg.norm(normal)
    if e1_norm <= 0 or normal_norm <= 1e-12 * e1_norm * e1_norm:
        raise DegenerateMeshError('target triangle has zero area')
    e1 = e1 / e1_norm
    normal = normal / normal_norm
    return np.vstack([e1, np.cross(normal, e1), normal])


def attach_target(mesh, point):
    """
    Attach a point (inside or near the surface) to its closest triangle.
    Zero-area triangles are skipped.
    """
    point = np.asarray(point, dtype=np.float64).reshape(1, 3)
    candidates = np.flatnonzero(valid_faces(mesh))
    if not len(candidates):
        raise DegenerateMeshError()
    surface = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces[candidates], process=False)
    closest, _, local = trimesh.proximity.closest_point(surface, point)
    face = int(candidates[int(local[0])])
    triangle = mesh.vertices[mesh.faces[face]]
    barycentric = trimesh.triangles.points_to_barycentric(triangle[None], closest)[0]
    offset = _face_frame(triangle) @ (point[0] - closest[0])
    return TargetAttachment(face=face, barycentric=tuple(barycentric), offset=tuple(offset))


def map_target(mesh, attachment):
    """Position of an attached target on a mesh with the same topology."""
    triangle = mesh.vertices[mesh.faces[attachment.face]]
    foot = np.asarray(attachment.barycentric) @ triangle
    return foot + _face_frame(triangle).T @ np.asarray(attachment.offset)


def target_registration_error(p_target, pose_gt, shape_gt, pose_est, shape_est, model):
    """
    Distance (mm) between the target mapped under the ground-truth and the estimated
    (pose, shape). ``p_target`` is given in canonical mesh coordinates.
    """
    attachment = attach_target(model.canonical_mesh(), p_target)
    truth = pose_gt.apply(map_target(eval_shape(model, shape_gt), attachment)[None])[0]
    estimate = pose_est.apply(map_target(eval_shape(model, shape_est), attachment)[None])[0]
    return float(np.linalg.norm(truth - estimate))
