import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, override_settings
from numpy.testing import assert_allclose, assert_array_equal

from apps.common.exceptions import ConfigError
from apps.common.synthetic import (
    ORGAN_AXES,
    icosphere,
    labelled_organ,
    organ_pose,
    single_triangle,
    small_camera,
    surface_polyline,
)
from apps.meshes.services.mesh_core import RigidPose, TriMesh, compute_vertex_normals
from apps.rendering.serializers import CameraIntrinsicsSerializer
from apps.rendering.services.camera_render import (
    CHANNEL_NAMES,
    OVERLAY_COLOURS,
    CameraIntrinsics,
    LabelImageSet,
    extract_silhouette,
    render_depth_mask,
    render_full,
    render_labeled_contours,
    render_overlay,
    silhouette_mask,
    visible_label_vertices,
)
from apps.rendering.services.image_io import read_frame, write_frame

VGA = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def ray_hits(origin_to, triangles, eps=1e-9):
    """Möller–Trumbore: parameters t of hits of the ray origin + t * direction."""
    direction = origin_to
    v0, v1, v2 = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(direction, e2)
    det = np.einsum('ij,ij->i', e1, p)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = -v0
    u = np.einsum('ij,ij->i', s, p) * inv
    q = np.cross(s, e1)
    v = (q @ direction) * inv
    t = np.einsum('ij,ij->i', e2, q) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1)
    return t[hit]


class DepthMaskTests(SimpleTestCase):

    def test_triangle_depth_at_centre(self):
        mask, depth = render_depth_mask(single_triangle(z=100.0), RigidPose.identity(), VGA)
        self.assertTrue(mask[240, 320])
        self.assertLessEqual(abs(depth[240, 320] - 100.0), 0.5)

    def test_mesh_behind_camera(self):
        organ = labelled_organ(subdivisions=2)
        mask, depth = render_depth_mask(organ, RigidPose(translation=(0, 0, -300.0)), VGA)
        self.assertFalse(mask.any())
        assert_array_equal(depth, 0.0)

    def test_z_buffer_keeps_nearest(self):
        near = single_triangle(z=50.0, size=40.0)
        far = single_triangle(z=100.0, size=200.0)
        both = TriMesh(
            vertices=np.vstack([near.vertices, far.vertices]),
            faces=[[0, 1, 2], [3, 4, 5]],
        )
        near_mask, _ = render_depth_mask(near, RigidPose.identity(), VGA)
        mask, depth = render_depth_mask(both, RigidPose.identity(), VGA)
        assert_allclose(depth[near_mask], 50.0, atol=1e-9)
        assert_allclose(depth[mask & ~near_mask], 100.0, atol=1e-9)

    def test_near_plane_culls_straddling_faces(self):
        straddling = TriMesh(vertices=[[-50, -50, 0.5], [50, -50, 100], [0, 50, 100]], faces=[[0, 1, 2]])
        mask, _ = render_depth_mask(straddling, RigidPose.identity(), VGA)
        self.assertFalse(mask.any())

    def test_sphere_area_matches_projected_disk(self):
        radius, distance = 50.0, 300.0
        sphere = icosphere(subdivisions=4, radius=radius)
        mask, depth = render_depth_mask(sphere, RigidPose(translation=(0, 0, distance)), VGA)
        rho = VGA.fx * radius / np.sqrt(distance ** 2 - radius ** 2)
        self.assertLess(abs(mask.sum() - np.pi * rho ** 2) / (np.pi * rho ** 2), 0.01)
        self.assertLessEqual(abs(depth[240, 320] - (distance - radius)), 0.5)

    def test_depth_respects_near_plane(self):
        organ = labelled_organ(subdivisions=3)
        _, depth = render_depth_mask(organ, organ_pose(), small_camera())
        self.assertTrue(np.all(depth[depth > 0] >= 1.0))

    def test_translation_along_optical_axis(self):
        triangle = single_triangle(z=100.0)
        mask_a, depth_a = render_depth_mask(triangle, RigidPose.identity(), VGA)
        mask_b, depth_b = render_depth_mask(triangle, RigidPose(translation=(0, 0, 20.0)), VGA)
        common = mask_a & mask_b
        self.assertTrue(common.any())
        assert_allclose(depth_b[common] - depth_a[common], 20.0, atol=1e-9)

    def test_chunked_rasterization_matches(self):
        organ = labelled_organ(subdivisions=3)
        mask, depth = render_depth_mask(organ, organ_pose(), small_camera())
        with override_settings(DEFORMREG_RASTER_CHUNK=500):
            mask_c, depth_c = render_depth_mask(organ, organ_pose(), small_camera())
        assert_array_equal(mask, mask_c)
        assert_array_equal(depth, depth_c)

    def test_shared_edges_leave_no_gaps(self):
        sphere = icosphere(subdivisions=3, radius=50.0)
        mask, _ = render_depth_mask(sphere, RigidPose(translation=(0, 0, 300.0)), VGA)
        from scipy import ndimage
        filled = ndimage.binary_fill_holes(mask)
        assert_array_equal(mask, filled)


class SilhouetteTests(SimpleTestCase):

    def test_square(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[1:4, 1:4] = True
        points = extract_silhouette(mask)
        self.assertEqual(len(points), 8)
        self.assertNotIn([2.0, 2.0], points.tolist())

    def test_single_pixel(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[2, 3] = True
        assert_array_equal(extract_silhouette(mask), [[3.0, 2.0]])

    def test_empty(self):
        self.assertEqual(len(extract_silhouette(np.zeros((4, 4), dtype=bool))), 0)

    def test_image_border_counts_as_outside(self):
        mask = np.ones((4, 4), dtype=bool)
        self.assertEqual(silhouette_mask(mask).sum(), 12)


class LabelledContourTests(SimpleTestCase):

    def setUp(self):
        self.organ = labelled_organ(subdivisions=4)
        self.cam = small_camera(width=320, height=240, focal=400.0)
        self.pose = organ_pose()

    def test_camera_facing_polylines_are_fully_drawn(self):
        _, depth = render_depth_mask(self.organ, self.pose, self.cam)
        channels = render_labeled_contours(self.organ, self.pose, self.cam, depth)
        for label in ('ridge_R', 'ridge_L', 'lig'):
            with self.subTest(label=label):
                visible, col, row = visible_label_vertices(self.organ, self.pose, self.cam, depth, label)
                self.assertTrue(visible.all())
                self.assertTrue(channels[label][row, col].all())

    def test_far_side_polylines_are_hidden(self):
        turned = RigidPose(rotation=(0.0, 180.0, 0.0), translation=(0.0, 0.0, 250.0))
        label_set = render_full(self.organ, turned, self.cam)
        self.assertTrue(label_set.full_mask.any())
        for label in ('ridge_R', 'ridge_L', 'lig'):
            self.assertFalse(label_set.channel(label).any())

    def test_missing_label_gives_empty_channel(self):
        bare = TriMesh(vertices=self.organ.vertices, faces=self.organ.faces)
        label_set = render_full(bare, self.pose, self.cam)
        self.assertFalse(label_set.channel('lig').any())
        self.assertTrue(label_set.channel('sil').any())

    def test_limb_crossing_matches_ray_cast(self):
        phi = np.radians(np.linspace(0.0, 170.0, 40))
        directions = np.column_stack([np.full_like(phi, 0.1), np.sin(phi), -np.cos(phi)])
        polyline = surface_polyline(self.organ, ORGAN_AXES, directions)
        organ = TriMesh(vertices=self.organ.vertices, faces=self.organ.faces, vertex_labels={'lig': polyline})
        _, depth = render_depth_mask(organ, self.pose, self.cam)
        visible, _, _ = visible_label_vertices(organ, self.pose, self.cam, depth, 'lig')

        camera_vertices = self.pose.apply(organ.vertices)
        normals = compute_vertex_normals(organ).normals
        checked = 0
        for k, index in enumerate(polyline):
            point = camera_vertices[index]
            view = point / np.linalg.norm(point)
            if abs(normals[index] @ view) <= 0.5:
                continue
            other = ~np.any(organ.faces == index, axis=1)
            hits = ray_hits(point, camera_vertices[organ.faces[other]])
            oracle = not np.any((hits > 1e-9) & (hits < 1.0 - 1e-9))
            self.assertEqual(bool(visible[k]), oracle, f"vertex {index}")
            checked += 1
        self.assertGreater(checked, 10)
        self.assertTrue(visible.any())
        self.assertFalse(visible.all())


class RenderFullTests(SimpleTestCase):

    def setUp(self):
        self.organ = labelled_organ(subdivisions=3)
        self.cam = small_camera()

    def test_invariants_hold(self):
        label_set = render_full(self.organ, organ_pose(), self.cam)
        self.assertEqual(label_set.check(), [])
        self.assertEqual(label_set.contour_types(), 4)

    def test_outside_frustum(self):
        label_set = render_full(self.organ, RigidPose(translation=(1000.0, 0.0, 250.0)), self.cam)
        for name in CHANNEL_NAMES:
            self.assertFalse(label_set.channel(name).any())

    def test_deterministic(self):
        a = render_full(self.organ, organ_pose(), self.cam)
        b = render_full(self.organ, organ_pose(), self.cam)
        for name in CHANNEL_NAMES:
            assert_array_equal(a.channel(name), b.channel(name))
        assert_array_equal(a.depth, b.depth)

    def test_overlay_colours(self):
        label_set = render_full(self.organ, organ_pose(), self.cam)
        overlay = render_overlay(label_set)
        self.assertEqual(overlay.shape, (self.cam.height, self.cam.width, 3))
        only_right = label_set.channel('ridge_R') & ~label_set.channel('ridge_L') & ~label_set.channel('lig')
        ys, xs = np.nonzero(only_right)
        assert_array_equal(overlay[ys[0], xs[0]], OVERLAY_COLOURS['ridge_R'])

    def test_frame_round_trip(self):
        label_set = render_full(self.organ, organ_pose(), self.cam)
        with tempfile.TemporaryDirectory() as tmp:
            write_frame(Path(tmp) / 'f0', label_set, pose=organ_pose(), cam=self.cam)
            loaded, manifest = read_frame(Path(tmp) / 'f0')
        for name in CHANNEL_NAMES:
            assert_array_equal(loaded.channel(name), label_set.channel(name))
        assert_array_equal(loaded.full_mask, label_set.full_mask)
        assert_allclose(loaded.depth, label_set.depth, atol=0.05 + 1e-9)
        self.assertEqual(manifest['pose'], organ_pose().as_dict())
        self.assertEqual(CameraIntrinsics.from_dict(manifest['intrinsics']), self.cam)

    def test_empty_label_set(self):
        empty = LabelImageSet.empty((4, 5))
        self.assertEqual(empty.contour_types(), 0)
        self.assertEqual(empty.check(), [])


class CameraIntrinsicsTests(SimpleTestCase):

    def test_invalid_principal_point(self):
        with self.assertRaises(ConfigError):
            CameraIntrinsics(fx=500, fy=500, cx=700, cy=240, width=640, height=480)

    def test_serializer_defaults(self):
        serializer = CameraIntrinsicsSerializer(data={})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.save(), VGA)

    def test_serializer_rejects_bad_focal(self):
        serializer = CameraIntrinsicsSerializer(data={'fx': -1})
        self.assertFalse(serializer.is_valid())
        self.assertIn('fx', serializer.errors)
