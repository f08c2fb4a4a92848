"""
Synthetic fixtures shared by the app test suites.
"""
import numpy as np
import trimesh

from apps.meshes.services.mesh_core import RigidPose, TriMesh

ORGAN_AXES = (60.0, 45.0, 30.0)


def icosphere(subdivisions=3, radius=1.0):
    """Icosphere centred at the origin (subdivisions=3 gives 642 vertices)."""
    sphere = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    return TriMesh(vertices=np.asarray(sphere.vertices), faces=np.asarray(sphere.faces))


def ellipsoid(axes, subdivisions=3):
    unit = icosphere(subdivisions)
    return unit.with_vertices(unit.vertices * np.asarray(axes, dtype=np.float64))


def unit_cube():
    box = trimesh.creation.box(extents=(1.0, 1.0, 1.0))
    return TriMesh(vertices=np.asarray(box.vertices), faces=np.asarray(box.faces))


def single_triangle(z=100.0, size=200.0):
    """Large camera-facing triangle in the plane z, centred on the optical axis."""
    vertices = np.array([
        [-size, -size, z],
        [size, -size, z],
        [0.0, size, z],
    ])
    return TriMesh(vertices=vertices, faces=[[0, 1, 2]])


def surface_polyline(mesh, axes, directions):
    """Nearest-vertex polyline through points on the ellipsoid surface."""
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    points = directions * np.asarray(axes)
    distances = np.linalg.norm(mesh.vertices[None, :, :] - points[:, None, :], axis=2)
    nearest = distances.argmin(axis=1)
    polyline = [int(nearest[0])]
    for index in nearest[1:]:
        if int(index) != polyline[-1]:
            polyline.append(int(index))
    return polyline


def labelled_organ(subdivisions=4, axes=ORGAN_AXES):
    """
    Ellipsoidal test organ with two ridges and a ligament on its -z side.

    Posed with :func:`organ_pose`, the labelled side faces the camera.
    """
    base = ellipsoid(axes, subdivisions)
    s = np.linspace(-1.0, 1.0, 25)
    labels = {}
    for name, x in (('ridge_R', 0.55), ('ridge_L', -0.55)):
        y = 0.6 * s
        z = -np.sqrt(np.clip(1.0 - x * x - y * y, 0.0, None))
        labels[name] = surface_polyline(base, axes, np.column_stack([np.full_like(s, x), y, z]))
    x = 0.3 * s
    y = np.full_like(s, -0.5)
    z = -np.sqrt(np.clip(1.0 - x * x - y * y, 0.0, None))
    labels['lig'] = surface_polyline(base, axes, np.column_stack([x, y, z]))
    return TriMesh(vertices=base.vertices, faces=base.faces, vertex_labels=labels)


def organ_pose(distance=250.0):
    return RigidPose(translation=(0.0, 0.0, distance))


def small_camera(width=160, height=120, focal=200.0):
    from apps.rendering.services.camera_render import CameraIntrinsics

    return CameraIntrinsics(
        fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height,
    )


def smooth_modes(mesh, count=3):
    """
    Orthonormal, smooth displacement fields over the mesh vertices, flattened to 3V.
    """
    v = mesh.vertices / np.abs(mesh.vertices).max(axis=0)
    fields = [
        np.column_stack([v[:, 0], np.zeros(len(v)), np.zeros(len(v))]),
        np.column_stack([np.zeros(len(v)), v[:, 1] * v[:, 0], np.zeros(len(v))]),
        np.column_stack([np.zeros(len(v)), np.zeros(len(v)), v[:, 2] + 0.5 * v[:, 1] ** 2]),
        np.column_stack([v[:, 1] ** 2, v[:, 2], v[:, 0] * v[:, 2]]),
    ][:count]
    matrix = np.column_stack([f.reshape(-1) for f in fields])
    q, _ = np.linalg.qr(matrix)
    return q


def planted_corpus(canonical, modes, amplitudes, count, seed=0):
    """Corpus of ``canonical`` deformed along ``modes`` with Gaussian coefficients."""
    rng = np.random.default_rng(seed)
    base = canonical.flatten()
    meshes = []
    for _ in range(count):
        coefficients = rng.normal(size=modes.shape[1]) * np.asarray(amplitudes)
        meshes.append(canonical.with_vertices((base + modes @ coefficients).reshape(-1, 3)))
    return meshes


def organ_model(K=3, subdivisions=3, rms_mm=(6.0, 4.0, 2.0), count=12, seed=0):
    """
    Shape model of :func:`labelled_organ` with K smooth planted modes; one unit of
    coefficient moves the vertices by roughly ``rms_mm`` (RMS).
    """
    from apps.shape_models.services.shape_model import build_model

    organ = labelled_organ(subdivisions)
    modes = smooth_modes(organ, count=K)
    amplitudes = np.asarray(rms_mm[:K]) * np.sqrt(organ.n_vertices)
    return build_model(organ, planted_corpus(organ, modes, amplitudes, count, seed), K=K)
