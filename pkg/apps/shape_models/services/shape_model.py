"""
PCA displacement model over NICP-registered meshes: x(α) = x0 + U diag(σ) α.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from django.utils import timezone

from apps.common.exceptions import CorpusSizeError, ModelFormatError, TopologyMismatchError
from apps.common.utils import array_digest, read_json, write_json
from apps.meshes.services.mesh_core import TriMesh

logger = logging.getLogger(__name__)

DEFAULT_COMPONENTS = 10
COEFFICIENT_BOUND = 1.0

MAGIC = b'DFRGSSM\x00'
FORMAT_VERSION = 1
# magic, version, vertex count, component count, face count, conventions length
HEADER = struct.Struct('<8sIIIII')

CONVENTIONS = {
    'units': 'mm',
    'sigma': 'population',
    'coefficient_bounds': [-COEFFICIENT_BOUND, COEFFICIENT_BOUND],
    'layout': 'x0 + U diag(sigma) alpha, vertices flattened xyz',
    'neutral': 'corpus mean',
}


@dataclass(frozen=True, eq=False)
class ShapeModel:
    """
    ``x0`` is the neutral shape (3V), ``U`` the orthonormal components (3V x K),
    ``sigma`` the per-component standard deviations (mm).
    """
    x0: np.ndarray
    U: np.ndarray
    sigma: np.ndarray
    faces: np.ndarray
    canonical: np.ndarray = None
    vertex_labels: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        x0 = np.array(self.x0, dtype=np.float64).reshape(-1)
        U = np.array(self.U, dtype=np.float64).reshape(len(x0), -1)
        sigma = np.array(self.sigma, dtype=np.float64).reshape(-1)
        if U.shape[1] != len(sigma):
            raise TopologyMismatchError('Component count does not match sigma length')
        canonical = x0.copy() if self.canonical is None else np.array(self.canonical, dtype=np.float64).reshape(-1)
        for name, value in (('x0', x0), ('U', U), ('sigma', sigma), ('canonical', canonical)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, 'faces', np.array(self.faces, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, 'metadata', dict(self.metadata or {}))
        object.__setattr__(self, 'vertex_labels', dict(self.vertex_labels or {}))

    @property
    def K(self):
        return len(self.sigma)

    @property
    def n_vertices(self):
        return len(self.x0) // 3

    def neutral_mesh(self):
        return eval_shape(self, np.zeros(self.K))

    def canonical_mesh(self):
        return TriMesh(vertices=self.canonical.reshape(-1, 3), faces=self.faces, vertex_labels=self.vertex_labels)


def _check_topology(canonical, mesh, name):
    if mesh.n_vertices != canonical.n_vertices or not np.array_equal(mesh.faces, canonical.faces):
        raise TopologyMismatchError(
            f"Mesh '{name}' does not share the canonical topology",
            mesh=name,
            vertices=mesh.n_vertices,
            expected_vertices=canonical.n_vertices,
        )


def build_model(canonical, registered_corpus, K=DEFAULT_COMPONENTS, names=None):
    """
    PCA over per-vertex displacements of the corpus relative to ``canonical``.

    The corpus-mean displacement is folded into ``x0``; the raw canonical is kept on
    the model. Components are signed so their largest-magnitude entry is positive.
    """
    corpus = list(registered_corpus)
    names = list(names) if names is not None else [
        mesh.metadata.get('source', f'corpus[{index}]') for index, mesh in enumerate(corpus)
    ]
    if K < 1:
        raise CorpusSizeError('Component count must be at least 1', components=K)
    if len(corpus) < K:
        raise CorpusSizeError(
            f"Corpus has {len(corpus)} meshes but {K} components were requested",
            corpus_size=len(corpus), components=K,
        )
    for mesh, name in zip(corpus, names):
        _check_topology(canonical, mesh, name)

    base = canonical.flatten()
    displacements = np.stack([mesh.flatten() - base for mesh in corpus])
    mean_displacement = displacements.mean(axis=0)
    centered = displacements - mean_displacement

    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    if len(singular) < K:
        raise CorpusSizeError(
            f"Only {len(singular)} components are available",
            available=len(singular), components=K,
        )
    components = vt[:K].T.copy()
    sigma = singular[:K] / np.sqrt(len(corpus))

    pivots = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[pivots, np.arange(K)])
    signs[signs == 0] = 1.0
    components *= signs

    total = float(np.sum(singular ** 2))
    ratio = (singular[:K] ** 2 / total).tolist() if total > 0 else [0.0] * K
    metadata = {
        'corpus_size': len(corpus),
        'corpus_hashes': {name: array_digest(mesh.vertices, mesh.faces) for mesh, name in zip(corpus, names)},
        'built_at': timezone.now().isoformat(),
        'conventions': CONVENTIONS,
        'explained_variance_ratio': ratio,
    }
    logger.info(
        f"Built shape model: {len(corpus)} meshes, K={K}, "
        f"explained variance {sum(ratio):.3f}"
    )
    return ShapeModel(
        x0=base + mean_displacement,
        U=components,
        sigma=sigma,
        faces=canonical.faces,
        canonical=base,
        vertex_labels=canonical.vertex_labels,
        metadata=metadata,
    )


def clamp_coefficients(alpha, K):
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if len(alpha) != K:
        raise ValueError(f"Expected {K} shape coefficients, got {len(alpha)}")
    return np.clip(alpha, -COEFFICIENT_BOUND, COEFFICIENT_BOUND)


def eval_shape(model, alpha, clamp=True):
    """Mesh for coefficients ``alpha`` (clamped to [-1, 1] unless ``clamp`` is off)."""
    alpha = clamp_coefficients(alpha, model.K) if clamp else np.asarray(alpha, dtype=np.float64)
    flat = model.x0 + model.U @ (model.sigma * alpha)
    return TriMesh(
        vertices=flat.reshape(-1, 3),
        faces=model.faces,
        vertex_labels=model.vertex_labels,
    )


def project_shape(model, mesh):
    """Least-squares coefficients of ``mesh``; components with σ = 0 project to 0."""
    if mesh.n_vertices != model.n_vertices:
        raise TopologyMismatchError(
            'Mesh does not match the model topology',
            vertices=mesh.n_vertices, expected_vertices=model.n_vertices,
        )
    coefficients = model.U.T @ (mesh.flatten() - model.x0)
    safe = np.where(model.sigma > 0, model.sigma, 1.0)
    return np.where(model.sigma > 0, coefficients / safe, 0.0)


def metadata_path(path):
    return Path(path).with_suffix('.json')


def save_model(model, path):
    """
    Binary container (header + little-endian arrays) plus a JSON metadata file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    conventions = json.dumps(CONVENTIONS, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as handle:
        handle.write(HEADER.pack(MAGIC, FORMAT_VERSION, model.n_vertices, model.K, len(model.faces), len(conventions)))
        handle.write(conventions)
        for array in (model.x0, model.U, model.sigma, model.canonical):
            handle.write(np.ascontiguousarray(array, dtype='<f8').tobytes())
        handle.write(np.ascontiguousarray(model.faces, dtype='<i8').tobytes())

    metadata = dict(model.metadata)
    metadata['vertex_labels'] = {name: list(indices) for name, indices in model.vertex_labels.items()}
    metadata['container_sha256'] = array_digest(model.x0, model.U, model.sigma)
    write_json(metadata_path(path), metadata)
    logger.info(f"Saved shape model to {path}")
    return path


def load_model(path):
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"Cannot read shape model: {exc}", path=str(path))
    if len(payload) < HEADER.size:
        raise ModelFormatError('Shape model container is truncated', path=str(path))
    magic, version, n_vertices, K, n_faces, conventions_length = HEADER.unpack_from(payload, 0)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise ModelFormatError('Not a shape model container', path=str(path))

    offset = HEADER.size + conventions_length
    sizes = [('x0', 3 * n_vertices, '<f8'), ('U', 3 * n_vertices * K, '<f8'), ('sigma', K, '<f8'),
             ('canonical', 3 * n_vertices, '<f8'), ('faces', 3 * n_faces, '<i8')]
    arrays = {}
    for name, count, dtype in sizes:
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise ModelFormatError(f"Shape model container is truncated in '{name}'", path=str(path), offset=offset)
        arrays[name] = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).astype(
            np.int64 if name == 'faces' else np.float64
        )
        offset += nbytes

    metadata = read_json(metadata_path(path)) if metadata_path(path).exists() else {}
    labels = metadata.pop('vertex_labels', {})
    return ShapeModel(
        x0=arrays['x0'],
        U=arrays['U'].reshape(3 * n_vertices, K),
        sigma=arrays['sigma'],
        faces=arrays['faces'].reshape(-1, 3),
        canonical=arrays['canonical'],
        vertex_labels=labels,
        metadata=metadata,
    )
