"""
Triangle-mesh data model, OBJ/PLY I/O, vertex normals, rigid poses and rigid ICP.

All geometry is in millimetres. Poses use fixed-axis (extrinsic) XYZ Euler angles in
degrees and map object coordinates to camera coordinates: p_cam = R p + t.
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import trimesh
from django.conf import settings
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from apps.common.exceptions import (
    DegenerateMeshError,
    EmptyMeshError,
    MeshFormatError,
    MeshIndexError,
    RankDeficientError,
)
from apps.common.utils import read_json, write_json
from apps.common.validators import MESH_EXTENSIONS

logger = logging.getLogger(__name__)

LABEL_NAMES = ('ridge_R', 'ridge_L', 'lig')
LABEL_SUFFIX = '.labels.json'


@dataclass(frozen=True, eq=False)
class TriMesh:
    """
    Immutable triangle mesh with optional anatomical label polylines.

    ``vertex_labels`` maps a label name to an ordered tuple of vertex indices.
    ``normals`` is only set by :func:`compute_vertex_normals` (or carried through
    :func:`apply_pose`); use :attr:`vertex_normals` to get them on demand.
    """
    vertices: np.ndarray
    faces: np.ndarray
    vertex_labels: dict = field(default_factory=dict)
    normals: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, 'vertices', vertices)
        object.__setattr__(self, 'faces', faces)

        n = len(vertices)
        if faces.size and (faces.min() < 0 or faces.max() >= n):
            bad = int(faces.max()) if faces.max() >= n else int(faces.min())
            raise MeshIndexError(
                f"Face index {bad} out of range for {n} vertices",
                index=bad, vertex_count=n,
            )

        labels = {}
        for name, polyline in (self.vertex_labels or {}).items():
            indices = tuple(int(i) for i in polyline)
            if any(i < 0 or i >= n for i in indices):
                raise MeshIndexError(
                    f"Label '{name}' references a vertex outside 0..{n - 1}",
                    label=name, vertex_count=n,
                )
            labels[name] = indices
        object.__setattr__(self, 'vertex_labels', labels)

        if self.normals is not None:
            normals = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != n:
                raise MeshIndexError('Normal count does not match vertex count')
            normals.setflags(write=False)
            object.__setattr__(self, 'normals', normals)
        object.__setattr__(self, 'metadata', dict(self.metadata or {}))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @cached_property
    def edges(self):
        """Unique undirected edges as sorted (E, 2) index pairs."""
        if not self.n_faces:
            return np.zeros((0, 2), dtype=np.int64)
        pairs = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(pairs, axis=0)

    @cached_property
    def vertex_normals(self):
        if self.normals is not None:
            return self.normals
        return compute_vertex_normals(self).normals

    @cached_property
    def bbox_diagonal(self):
        if not self.n_vertices:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def flatten(self):
        """Vertices as a flat 3V vector (x0, y0, z0, x1, ...)."""
        return self.vertices.reshape(-1).copy()

    def with_vertices(self, vertices, metadata=None):
        """Same topology and labels with new vertex positions."""
        return TriMesh(
            vertices=np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
            faces=self.faces,
            vertex_labels=self.vertex_labels,
            metadata=self.metadata if metadata is None else metadata,
        )

    def to_trimesh(self):
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)


@dataclass(frozen=True)
class RigidPose:
    """
    6-DOF rigid transform: extrinsic XYZ Euler angles (degrees) and translation (mm).
    """
    rotation: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        rotation = tuple(float(v) for v in np.asarray(self.rotation, dtype=np.float64).reshape(-1))
        translation = tuple(float(v) for v in np.asarray(self.translation, dtype=np.float64).reshape(-1))
        if len(rotation) != 3 or len(translation) != 3:
            raise ValueError('RigidPose needs three rotation angles and three translation components')
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, rotation_matrix, translation=(0.0, 0.0, 0.0)):
        matrix = np.asarray(rotation_matrix, dtype=np.float64)
        if matrix.shape == (4, 4):
            translation = matrix[:3, 3]
            matrix = matrix[:3, :3]
        angles = Rotation.from_matrix(matrix).as_euler('xyz', degrees=True)
        return cls(rotation=angles, translation=translation)

    @classmethod
    def from_vector(cls, vector):
        """Inverse of :meth:`as_vector`: ``[tx, ty, tz, rx, ry, rz]``."""
        vector = np.asarray(vector, dtype=np.float64)
        return cls(rotation=vector[3:6], translation=vector[0:3])

    @classmethod
    def from_dict(cls, payload):
        return cls(rotation=payload['rotation'], translation=payload['translation'])

    @cached_property
    def rotation_matrix(self):
        return Rotation.from_euler('xyz', self.rotation, degrees=True).as_matrix()

    @property
    def translation_vector(self):
        return np.asarray(self.translation, dtype=np.float64)

    def is_identity(self):
        return not any(self.rotation) and not any(self.translation)

    def as_matrix(self):
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation_matrix
        matrix[:3, 3] = self.translation
        return matrix

    def as_vector(self):
        return np.concatenate([self.translation_vector, np.asarray(self.rotation)])

    def as_dict(self):
        return {'rotation': list(self.rotation), 'translation': list(self.translation)}

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix.T + self.translation_vector

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        rotation = self.rotation_matrix @ other.rotation_matrix
        translation = self.rotation_matrix @ other.translation_vector + self.translation_vector
        return RigidPose.from_matrix(rotation, translation)

    def inverse(self):
        rotation = self.rotation_matrix.T
        return RigidPose.from_matrix(rotation, -rotation @ self.translation_vector)

    def perturbed(self, translation_delta=(0.0, 0.0, 0.0), rotation_delta=(0.0, 0.0, 0.0)):
        return RigidPose(
            rotation=np.asarray(self.rotation) + np.asarray(rotation_delta, dtype=np.float64),
            translation=self.translation_vector + np.asarray(translation_delta, dtype=np.float64),
        )


def rotation_angle_between(a, b):
    """Geodesic angle (degrees) between the rotations of two poses."""
    relative = a.rotation_matrix @ b.rotation_matrix.T
    cosine = np.clip((np.trace(relative) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cosine)))


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def label_sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + LABEL_SUFFIX)


def load_labels(path):
    """Read a label sidecar; a missing file means no labels."""
    path = Path(path)
    if not path.exists():
        return {}
    try:
        payload = read_json(path)
    except ValueError as exc:
        raise MeshFormatError(f"Invalid label sidecar: {exc}", path=path)
    if not isinstance(payload, dict):
        raise MeshFormatError('Label sidecar must map label names to index lists', path=path)
    unknown = set(payload) - set(LABEL_NAMES)
    if unknown:
        logger.warning(f"Ignoring unknown labels {sorted(unknown)} in {path}")
    return {name: payload[name] for name in LABEL_NAMES if name in payload}


def save_labels(labels, path):
    return write_json(path, {name: list(indices) for name, indices in labels.items()})


def _read_obj(path):
    vertices = []
    faces = []
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            for lineno, raw in enumerate(handle, start=1):
                line = raw.split('#', 1)[0].strip()
                if not line:
                    continue
                tokens = line.split()
                if tokens[0] == 'v':
                    if len(tokens) < 4:
                        raise MeshFormatError('Vertex needs three coordinates', path=path, line=lineno)
                    try:
                        vertices.append([float(t) for t in tokens[1:4]])
                    except ValueError:
                        raise MeshFormatError('Invalid vertex coordinate', path=path, line=lineno)
                elif tokens[0] == 'f':
                    if len(tokens) < 4:
                        raise MeshFormatError('Face needs at least three vertices', path=path, line=lineno)
                    polygon = []
                    for token in tokens[1:]:
                        try:
                            index = int(token.split('/')[0])
                        except ValueError:
                            raise MeshFormatError(f"Invalid face index '{token}'", path=path, line=lineno)
                        if index == 0:
                            raise MeshFormatError('Face index 0 is not valid in OBJ', path=path, line=lineno)
                        polygon.append(index - 1 if index > 0 else len(vertices) + index)
                    # fan triangulation
                    for k in range(1, len(polygon) - 1):
                        faces.append([polygon[0], polygon[k], polygon[k + 1]])
    except UnicodeDecodeError as exc:
        raise MeshFormatError('OBJ file is not valid text', path=path, offset=exc.start)
    return np.asarray(vertices, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def _read_ply(path):
    try:
        loaded = trimesh.load(str(path), file_type='ply', process=False, force='mesh')
    except Exception as exc:
        raise MeshFormatError(f"Could not parse PLY: {exc}", path=path)
    faces = getattr(loaded, 'faces', None)
    faces = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces)
    return np.asarray(loaded.vertices, dtype=np.float64), faces


def _write_obj(mesh, path):
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(f"# {mesh.n_vertices} vertices, {mesh.n_faces} faces\n")
        for x, y, z in mesh.vertices:
            handle.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.faces + 1:
            handle.write(f"f {a} {b} {c}\n")


def _write_ply(mesh, path):
    # Binary little-endian with double-precision vertices so coordinates round-trip exactly.
    header = (
        'ply\n'
        'format binary_little_endian 1.0\n'
        f'element vertex {mesh.n_vertices}\n'
        'property double x\nproperty double y\nproperty double z\n'
        f'element face {mesh.n_faces}\n'
        'property list uchar int vertex_indices\n'
        'end_header\n'
    )
    face_records = np.zeros(mesh.n_faces, dtype=[('count', 'u1'), ('index', '<i4', (3,))])
    face_records['count'] = 3
    face_records['index'] = mesh.faces
    with open(path, 'wb') as handle:
        handle.write(header.encode('ascii'))
        handle.write(mesh.vertices.astype('<f8').tobytes())
        handle.write(face_records.tobytes())


def _non_manifold_edge_count(faces):
    if not len(faces):
        return 0
    pairs = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(pairs, axis=0, return_counts=True)
    return int(np.count_nonzero(counts > 2))


def load_mesh(path):
    """
    Load an OBJ or PLY mesh plus its optional ``<stem>.labels.json`` sidecar.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in MESH_EXTENSIONS:
        raise MeshFormatError(f"Unsupported mesh format '{suffix}'", path=path)
    if not path.exists():
        raise MeshFormatError('Mesh file does not exist', path=path)

    if suffix == '.obj':
        vertices, faces = _read_obj(path)
    else:
        vertices, faces = _read_ply(path)

    metadata = {'source': str(path)}
    non_manifold = _non_manifold_edge_count(faces)
    if non_manifold:
        logger.warning(f"{path.name}: {non_manifold} non-manifold edges")
        metadata['non_manifold'] = True

    mesh = TriMesh(
        vertices=vertices,
        faces=faces,
        vertex_labels=load_labels(label_sidecar_path(path)),
        metadata=metadata,
    )
    logger.debug(f"Loaded {path.name}: {mesh.n_vertices} vertices, {mesh.n_faces} faces")
    return mesh


def save_mesh(mesh, path):
    """Write OBJ or PLY by extension; labels go to the sidecar file."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in MESH_EXTENSIONS:
        raise MeshFormatError(f"Unsupported mesh format '{suffix}'", path=path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if suffix == '.obj':
        _write_obj(mesh, path)
    else:
        _write_ply(mesh, path)
    if mesh.vertex_labels:
        save_labels(mesh.vertex_labels, label_sidecar_path(path))
    return path


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def face_cross_products(mesh):
    """Unnormalized face normals; their norm is twice the triangle area."""
    v = mesh.vertices[mesh.faces]
    return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def valid_faces(mesh):
    """Mask of faces whose area is above the mesh-scaled degeneracy threshold."""
    doubled_area = np.linalg.norm(face_cross_products(mesh), axis=1)
    scale = max(mesh.bbox_diagonal, 1.0)
    return doubled_area > 1e-12 * scale * scale


def compute_vertex_normals(mesh):
    """
    Area-weighted average of incident face normals, normalized per vertex.
    """
    if not mesh.n_faces:
        raise DegenerateMeshError()
    cross = face_cross_products(mesh)
    valid = valid_faces(mesh)
    if not valid.any():
        raise DegenerateMeshError()

    accumulated = np.zeros((mesh.n_vertices, 3))
    # the cross product already carries the area weight
    for corner in range(3):
        np.add.at(accumulated, mesh.faces[valid, corner], cross[valid])

    lengths = np.linalg.norm(accumulated, axis=1)
    missing = lengths <= 0
    if missing.any():
        logger.warning(f"{int(missing.sum())} vertices without a valid incident face; using +z normals")
        accumulated[missing] = (0.0, 0.0, 1.0)
        lengths[missing] = 1.0
    normals = accumulated / lengths[:, None]
    return dataclasses.replace(mesh, normals=normals)


def apply_pose(mesh, pose):
    """v' = R v + t; labels and faces unchanged, normals rotated."""
    if pose.is_identity():
        return mesh
    rotation = pose.rotation_matrix
    normals = None if mesh.normals is None else mesh.normals @ rotation.T
    return dataclasses.replace(
        mesh,
        vertices=pose.apply(mesh.vertices),
        normals=normals,
    )


def _require_rank(points, what='source'):
    if len(points) < 3:
        raise RankDeficientError(subject=what)
    centered = points - points.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    if singular[0] <= 0 or singular[1] <= 1e-9 * singular[0]:
        raise RankDeficientError(subject=what)


def kabsch(source_points, target_points):
    """
    Least-squares rotation and translation mapping source points onto target points.
    """
    source_centroid = source_points.mean(axis=0)
    target_centroid = target_points.mean(axis=0)
    H = (source_points - source_centroid).T @ (target_points - target_centroid)
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    if d == 0:
        d = 1.0
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    t = target_centroid - R @ source_centroid
    return R, t


def rigid_icp(source, target, max_iter=None, tol=None):
    """
    Point-to-point ICP with Kabsch updates; returns the pose mapping ``source`` onto ``target``.

    Pairs farther than three times the median distance are dropped each iteration.
    Stops after ``max_iter`` iterations or when the RMS distance changes by less than ``tol``.
    """
    if max_iter is None:
        max_iter = getattr(settings, 'DEFORMREG_ICP_MAX_ITER', 100)
    if tol is None:
        tol = getattr(settings, 'DEFORMREG_ICP_TOL_MM', 1e-6)
    if not source.n_vertices or not target.n_vertices:
        raise EmptyMeshError('rigid_icp needs non-empty source and target')

    src = source.vertices
    _require_rank(src)
    dst = target.vertices
    tree = cKDTree(dst)

    R = np.eye(3)
    t = dst.mean(axis=0) - src.mean(axis=0)
    previous_rms = np.inf
    history = []
    for iteration in range(max_iter):
        moved = src @ R.T + t
        distances, indices = tree.query(moved)
        median = np.median(distances)
        keep = distances <= 3.0 * median if median > 1e-12 else np.ones(len(distances), dtype=bool)
        if keep.sum() < 3:
            keep[:] = True
        matched_src = src[keep]
        _require_rank(matched_src, what='matched source')
        R, t = kabsch(matched_src, dst[indices[keep]])

        rms = float(np.sqrt(np.mean(distances[keep] ** 2)))
        history.append(rms)
        logger.debug(f"ICP iteration {iteration}: rms={rms:.6g} mm, kept={int(keep.sum())}")
        if abs(previous_rms - rms) < tol:
            break
        previous_rms = rms

    logger.info(f"Rigid ICP finished after {len(history)} iterations (rms {history[-1]:.4g} mm)")
    return RigidPose.from_matrix(R, t)
