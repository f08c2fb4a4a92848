"""
Non-rigid ICP: per-vertex affine transforms solved from a stiffness-regularized sparse
least-squares system, with normal-gated correspondences and a coarse-to-fine stiffness
schedule.

Unknowns ``x`` are stacked 4x3 affine blocks, one per vertex. For stiffness ``alpha``,
correspondence targets ``P`` and weights ``w`` each inner iteration solves

    A = [alpha * (diag(edge_w) S ⊗ G) ; diag(w) D],   b = [0 ; w * P]
    (AᵀA + λI) x = Aᵀb + λ x_k

where ``S`` is the edge-vertex incidence matrix, ``G = diag(1, 1, 1, translation_weight)``
and ``D`` maps ``x`` to deformed vertex positions. The Tikhonov term is taken around the
current iterate ``x_k`` so that identity stays a fixed point when the data term is zero.
A step that would raise the data term on the current targets is shortened to the
data minimum along ``x_k -> x``; convexity keeps the total energy non-increasing.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import trimesh
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from apps.common.exceptions import (
    ConfigError,
    CorrespondenceError,
    DegenerateMeshError,
    EmptyMeshError,
    SolverError,
)
from apps.meshes.services.mesh_core import TriMesh, compute_vertex_normals

logger = logging.getLogger(__name__)

DEFAULT_STIFFNESS_SCHEDULE = (20.0, 10.0, 5.0, 2.0, 1.0, 0.5, 0.2)


class CorrespondenceMode:
    SURFACE = 'surface'
    VERTEX = 'vertex'

    CHOICES = [
        (SURFACE, 'Closest surface point'),
        (VERTEX, 'Closest target vertex'),
    ]


@dataclass(frozen=True)
class NicpConfig:
    """
    Solver constants. ``inner_tol`` is a fraction of the source bounding-box diagonal.
    """
    stiffness_schedule: tuple = DEFAULT_STIFFNESS_SCHEDULE
    normal_threshold: float = 0.7
    match_weight: float = 1.0
    tikhonov: float = 1e-6
    inner_iters_per_stage: int = 10
    inner_tol: float = 1e-4
    translation_weight: float = 1.0
    correspondence_mode: str = CorrespondenceMode.SURFACE
    edge_weights: tuple = None

    def __post_init__(self):
        schedule = tuple(float(a) for a in self.stiffness_schedule)
        object.__setattr__(self, 'stiffness_schedule', schedule)
        errors = {}
        if not schedule or any(a <= 0 for a in schedule):
            errors['stiffness_schedule'] = 'values must be positive'
        elif any(b >= a for a, b in zip(schedule, schedule[1:])):
            errors['stiffness_schedule'] = 'must be strictly decreasing'
        if not 0.0 <= self.normal_threshold <= 1.0:
            errors['normal_threshold'] = 'must lie in [0, 1]'
        if self.match_weight <= 0:
            errors['match_weight'] = 'must be positive'
        if self.tikhonov < 0:
            errors['tikhonov'] = 'must be non-negative'
        if self.inner_iters_per_stage < 1:
            errors['inner_iters_per_stage'] = 'must be at least 1'
        if self.translation_weight <= 0:
            errors['translation_weight'] = 'must be positive'
        if self.correspondence_mode not in (CorrespondenceMode.SURFACE, CorrespondenceMode.VERTEX):
            errors['correspondence_mode'] = f"unknown mode '{self.correspondence_mode}'"
        if errors:
            raise ConfigError('Invalid NICP configuration', errors=errors)

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload or {})
        if payload.get('edge_weights') is not None:
            payload['edge_weights'] = tuple(payload['edge_weights'])
        if 'stiffness_schedule' in payload:
            payload['stiffness_schedule'] = tuple(payload['stiffness_schedule'])
        return cls(**payload)


@dataclass
class NicpState:
    """Assembled operators and the current affine parameters."""
    vertices: np.ndarray
    edges: np.ndarray
    S: sparse.csr_matrix
    W: sparse.dia_matrix
    D: sparse.csr_matrix
    x: np.ndarray
    stiffness: sparse.csr_matrix
    weights: np.ndarray = None
    targets: np.ndarray = None
    history: list = field(default_factory=list)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def deformed_vertices(self, x=None):
        return self.D @ (self.x if x is None else x)

    def affine_blocks(self):
        return self.x.reshape(self.n_vertices, 4, 3)


def identity_blocks(n_vertices):
    block = np.vstack([np.eye(3), np.zeros((1, 3))])
    return np.tile(block, (n_vertices, 1))


def build_system(source, edges=None, edge_weights=None, translation_weight=1.0):
    """
    Assemble S, W and D for ``source``; ``x`` starts at identity affine blocks.
    """
    vertices = np.asarray(source.vertices, dtype=np.float64)
    n = len(vertices)
    if not n:
        raise EmptyMeshError('Cannot build a NICP system for an empty mesh')
    edges = source.edges if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n_edges = len(edges)
    if not n_edges:
        raise DegenerateMeshError('Mesh has no edges')

    rows = np.repeat(np.arange(n_edges), 2)
    cols = edges.reshape(-1)
    data = np.tile([-1.0, 1.0], n_edges)
    S = sparse.csr_matrix((data, (rows, cols)), shape=(n_edges, n))

    n_components, _ = csgraph.connected_components(
        sparse.csr_matrix((np.ones(n_edges), (edges[:, 0], edges[:, 1])), shape=(n, n)),
        directed=False,
    )
    if n_components > 1:
        logger.warning(f"Source mesh has {n_components} connected components; each deforms independently")

    if edge_weights is None:
        edge_weights = np.ones(n_edges)
    edge_weights = np.asarray(edge_weights, dtype=np.float64)
    if edge_weights.shape != (n_edges,):
        raise ConfigError('Edge weight count does not match edge count',
                          edges=n_edges, weights=int(edge_weights.size))
    W = sparse.diags([1.0, 1.0, 1.0, float(translation_weight)])
    stiffness = sparse.kron(sparse.diags(edge_weights) @ S, W).tocsr()

    homogeneous = np.hstack([vertices, np.ones((n, 1))])
    D = sparse.csr_matrix(
        (homogeneous.reshape(-1), (np.repeat(np.arange(n), 4), np.arange(4 * n))),
        shape=(n, 4 * n),
    )
    return NicpState(
        vertices=vertices,
        edges=edges,
        S=S,
        W=W,
        D=D,
        x=identity_blocks(n),
        stiffness=stiffness,
    )


class CorrespondenceSearch:
    """
    Closest-point queries against a fixed target with normal gating.
    """

    def __init__(self, target, mode=CorrespondenceMode.SURFACE):
        if not target.n_vertices:
            raise EmptyMeshError('Correspondence target is empty')
        if mode == CorrespondenceMode.SURFACE and not target.n_faces:
            raise EmptyMeshError('Surface correspondences need a target with faces')
        self.target = target
        self.mode = mode
        self.target_normals = target.vertex_normals
        if mode == CorrespondenceMode.SURFACE:
            self._mesh = target.to_trimesh()
        else:
            self._tree = cKDTree(target.vertices)

    def closest(self, points):
        """Closest target points and their (interpolated) unit normals."""
        if self.mode == CorrespondenceMode.VERTEX:
            _, index = self._tree.query(points)
            return self.target.vertices[index], self.target_normals[index]

        closest, _, triangle_id = trimesh.proximity.closest_point(self._mesh, points)
        faces = self.target.faces[triangle_id]
        barycentric = trimesh.triangles.points_to_barycentric(
            self.target.vertices[faces], closest,
        )
        normals = np.einsum('ij,ijk->ik', barycentric, self.target_normals[faces])
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(lengths > 0, normals / np.where(lengths > 0, lengths, 1.0), 0.0)
        return np.asarray(closest), normals

    def query(self, points, normals, threshold, weight):
        targets, target_normals = self.closest(points)
        agreement = np.einsum('ij,ij->i', normals, target_normals)
        weights = np.where(agreement > threshold, float(weight), 0.0)
        return targets, weights


def find_correspondences(deformed, target, threshold=0.7, weight=1.0, mode=CorrespondenceMode.SURFACE):
    """
    Nearest target point per deformed vertex, weighted γ where the normals agree (dot > θ).
    """
    search = CorrespondenceSearch(target, mode=mode)
    return search.query(deformed.vertices, deformed.vertex_normals, threshold, weight)


def assemble_system(state, targets, weights, alpha):
    A = sparse.vstack([
        alpha * state.stiffness,
        sparse.diags(weights) @ state.D,
    ]).tocsr()
    b = np.vstack([
        np.zeros((state.stiffness.shape[0], 3)),
        weights[:, None] * targets,
    ])
    return A, b


def _condition_estimate(matrix):
    diagonal = np.abs(matrix.diagonal())
    smallest = diagonal.min()
    return float(diagonal.max() / smallest) if smallest > 0 else float('inf')


def solve_regularized(A, b, tikhonov, x_previous):
    """Solve (AᵀA + λI) x = Aᵀb + λ x_previous with a sparse LU factorization."""
    normal_matrix = (A.T @ A + tikhonov * sparse.identity(A.shape[1])).tocsc()
    rhs = A.T @ b + tikhonov * x_previous
    try:
        factor = splu(normal_matrix)
        x = factor.solve(np.asarray(rhs))
    except RuntimeError as exc:
        raise SolverError(f"Sparse factorization failed: {exc}",
                          condition_estimate=_condition_estimate(normal_matrix))
    if not np.all(np.isfinite(x)):
        raise SolverError('Solution is not finite', condition_estimate=_condition_estimate(normal_matrix))
    return x


def system_energy(A, b, x):
    residual = A @ x - b
    return float(np.sum(residual * residual))


def solve_stage(state, targets, weights, alpha, tikhonov=1e-6):
    """
    One regularized solve at stiffness ``alpha``; updates and returns ``state.x``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if not np.any(weights > 0):
        raise CorrespondenceError()
    targets = np.asarray(targets, dtype=np.float64)
    A, b = assemble_system(state, targets, weights, alpha)
    state.x = solve_regularized(A, b, tikhonov, state.x)
    state.targets = targets
    state.weights = weights
    return state.x


def _weighted_residual(state, x, targets, weights):
    difference = weights[:, None] * (state.deformed_vertices(x) - targets)
    return float(np.sum(difference * difference))


def damp_step(state, x_old, x_new, targets, weights):
    """
    Step fraction ``t`` in [0, 1] along ``x_old -> x_new`` that keeps the data term from
    increasing. The residual is linear in ``x`` so the data term is a quadratic in ``t``;
    when the full step raises it, ``t`` is that quadratic's minimizer.
    """
    r0 = weights[:, None] * (state.deformed_vertices(x_old) - targets)
    r1 = weights[:, None] * (state.deformed_vertices(x_new) - targets)
    if np.sum(r1 * r1) <= np.sum(r0 * r0):
        return 1.0
    step = r1 - r0
    curvature = float(np.sum(step * step))
    if curvature <= 0:
        return 1.0
    return float(np.clip(-np.sum(r0 * step) / curvature, 0.0, 1.0))


def _target_shift(previous, previous_weights, targets, weights):
    """Mean displacement of correspondence targets matched in both iterations."""
    if previous is None:
        return 0.0
    both = (previous_weights > 0) & (weights > 0)
    if not both.any():
        return 0.0
    return float(np.mean(np.linalg.norm(targets[both] - previous[both], axis=1)))


def nicp_register(source, target, cfg=None):
    """
    Deform ``source`` onto ``target`` (prealigned) through the stiffness schedule.

    Returns a mesh with the source topology; per-stage statistics are stored in
    ``metadata['nicp_stages']``.
    """
    cfg = cfg or NicpConfig()
    if not source.n_vertices or not target.n_vertices:
        raise EmptyMeshError('NICP needs non-empty source and target')

    centre = source.vertices.mean(axis=0)
    scale = source.bbox_diagonal
    if scale <= 0:
        raise DegenerateMeshError('Source mesh has zero extent')
    normalized_source = TriMesh(vertices=(source.vertices - centre) / scale, faces=source.faces)
    normalized_target = TriMesh(vertices=(target.vertices - centre) / scale, faces=target.faces)

    state = build_system(
        normalized_source,
        edge_weights=cfg.edge_weights,
        translation_weight=cfg.translation_weight,
    )
    search = CorrespondenceSearch(normalized_target, mode=cfg.correspondence_mode)

    stages = []
    for stage_index, alpha in enumerate(cfg.stiffness_schedule):
        energies = []
        motion = np.inf
        iterations = 0
        for iteration in range(cfg.inner_iters_per_stage):
            current = state.deformed_vertices()
            deformed = compute_vertex_normals(normalized_source.with_vertices(current))
            targets, weights = search.query(
                current, deformed.normals, cfg.normal_threshold, cfg.match_weight,
            )
            if not np.any(weights > 0):
                raise CorrespondenceError(stage=stage_index, stiffness=alpha)

            A, b = assemble_system(state, targets, weights, alpha)
            before = system_energy(A, b, state.x)
            x_new = solve_regularized(A, b, cfg.tikhonov, state.x)
            fraction = damp_step(state, state.x, x_new, targets, weights)
            if fraction < 1.0:
                x_new = state.x + fraction * (x_new - state.x)
            after = system_energy(A, b, x_new)
            energies.append({
                'before': before,
                'after': after,
                'data_before': _weighted_residual(state, state.x, targets, weights),
                'data_after': _weighted_residual(state, x_new, targets, weights),
                'active': int(np.count_nonzero(weights)),
                'step_fraction': fraction,
                'target_shift': _target_shift(state.targets, state.weights, targets, weights) * scale,
            })

            motion = float(np.mean(np.linalg.norm(state.deformed_vertices(x_new) - current, axis=1)))
            state.x = x_new
            state.targets = targets
            state.weights = weights
            iterations = iteration + 1
            logger.debug(f"NICP alpha={alpha:g} iteration {iteration}: energy {before:.6g} -> {after:.6g}, motion {motion:.3g}")
            if motion < cfg.inner_tol:
                break

        stage = {
            'stiffness': alpha,
            'iterations': iterations,
            'energy': energies[-1]['after'],
            'data_residual': energies[-1]['data_after'],
            'active_correspondences': energies[-1]['active'],
            'inner': energies,
        }
        stages.append(stage)
        logger.info(
            f"NICP stage {stage_index + 1}/{len(cfg.stiffness_schedule)} alpha={alpha:g}: "
            f"{iterations} iterations, {stage['active_correspondences']} active correspondences"
        )

    vertices = state.deformed_vertices() * scale + centre
    metadata = dict(source.metadata)
    metadata['nicp_stages'] = stages
    return source.with_vertices(vertices, metadata=metadata)
