import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from apps.common.exceptions import ConfigError
from apps.meshes.services.mesh_core import RigidPose
from apps.pipeline.serializers import FrameRecordSerializer, load_frame_records, load_run_config, require_paths
from apps.pipeline.services.run_config import FrameRecord, FrameStatus, RefinementSpec, RunConfig, RunPaths


class RunConfigTests(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def write_config(self, payload):
        path = self.tmp / 'run.json'
        path.write_text(json.dumps(payload))
        return path

    def test_defaults(self):
        cfg = load_run_config()
        self.assertEqual(cfg, RunConfig())
        self.assertEqual(cfg.optimizer.popsize, 15)
        self.assertEqual(cfg.sampling.count, 100)
        self.assertEqual(cfg.sampling.translation_mm, 50.0)
        self.assertEqual(cfg.sampling.rotation_deg, 20.0)
        self.assertEqual(cfg.sampling.min_contour_types, 2)
        self.assertEqual(cfg.refinement.translation_mm, 20.0)
        self.assertEqual(cfg.refinement.rotation_deg, 10.0)
        self.assertEqual(cfg.shape_model.components, 10)

    def test_partial_file_keeps_other_defaults(self):
        cfg = load_run_config(self.write_config({
            'sampling': {'count': 7, 'base_pose': {'translation': [0, 0, 300]}},
            'seed': 5,
        }))
        self.assertEqual(cfg.sampling.count, 7)
        self.assertEqual(cfg.sampling.translation_mm, 50.0)
        self.assertEqual(cfg.sampling.base_pose, RigidPose(translation=(0.0, 0.0, 300.0)))
        self.assertEqual(cfg.seed, 5)

    def test_overrides_replace_sections(self):
        cfg = load_run_config(self.write_config({'seed': 5}), seed=9)
        self.assertEqual(cfg.seed, 9)

    def test_invalid_section_reports_field_errors(self):
        with self.assertRaises(ConfigError) as ctx:
            load_run_config(self.write_config({'sampling': {'rotation_deg': -1}}))
        self.assertIn('sampling', ctx.exception.details['errors'])

    def test_non_positive_refinement_box_is_rejected(self):
        with self.assertRaises(ConfigError):
            load_run_config(self.write_config({'refinement': {'translation_mm': 0}}))

    def test_decreasing_schedule_is_enforced(self):
        with self.assertRaises(ConfigError) as ctx:
            load_run_config(self.write_config({'nicp': {'stiffness_schedule': [1, 2]}}))
        self.assertIn('nicp', ctx.exception.details['errors'])

    def test_config_must_be_an_object(self):
        with self.assertRaises(ConfigError):
            load_run_config(self.write_config([1, 2, 3]))

    def test_require_paths(self):
        cfg = RunConfig(paths=RunPaths(canonical_mesh=str(self.tmp / 'missing.ply'), corpus_dir=str(self.tmp)))
        with self.assertRaises(ConfigError) as ctx:
            require_paths(cfg, 'canonical_mesh', 'corpus_dir', 'masks_dir')
        errors = ctx.exception.details['errors']
        self.assertEqual(set(errors), {'canonical_mesh', 'masks_dir'})
        self.assertEqual(require_paths(cfg, 'corpus_dir'), {'corpus_dir': self.tmp})

    def test_model_path_defaults_into_output_dir(self):
        self.assertEqual(RunPaths(output_dir='out').model_path(), Path('out') / 'shape_model.ssm')
        self.assertEqual(RunPaths(model_file='m.ssm').model_path(), Path('m.ssm'))


class RefinementSpecTests(SimpleTestCase):

    def test_bounds_are_centred_on_the_initial_pose(self):
        init = RigidPose(rotation=(1.0, 2.0, 3.0), translation=(10.0, 20.0, 250.0))
        bounds = RefinementSpec().bounds(init, 3)
        self.assertEqual(bounds.shape, (9, 2))
        assert_array_equal(bounds[:3], [[-10.0, 30.0], [0.0, 40.0], [230.0, 270.0]])
        assert_array_equal(bounds[3:6], [[-9.0, 11.0], [-8.0, 12.0], [-7.0, 13.0]])
        assert_array_equal(bounds[6:], np.tile([-1.0, 1.0], (3, 1)))

    def test_rigid_box(self):
        self.assertEqual(RefinementSpec().bounds(RigidPose(), 0).shape, (6, 2))


class FrameRecordTests(SimpleTestCase):

    def record(self, **changes):
        payload = {
            'frame_id': 'frame_000001',
            'pose': {'rotation': [0, 5, 0], 'translation': [1, 2, 250]},
            'shape': [0.5, -0.25],
            'metrics': {'cost': 1.5},
        }
        payload.update(changes)
        return payload

    def test_serializer_builds_record(self):
        serializer = FrameRecordSerializer(data=self.record())
        self.assertTrue(serializer.is_valid(), serializer.errors)
        record = serializer.save()
        self.assertIsInstance(record, FrameRecord)
        self.assertEqual(record.pose, RigidPose(rotation=(0.0, 5.0, 0.0), translation=(1.0, 2.0, 250.0)))
        self.assertEqual(record.shape, (0.5, -0.25))
        self.assertEqual(record.status, FrameStatus.OK)

    def test_coefficients_outside_unit_box_are_rejected(self):
        serializer = FrameRecordSerializer(data=self.record(shape=[1.5]))
        self.assertFalse(serializer.is_valid())
        self.assertIn('shape', serializer.errors)

    def test_unknown_status_is_rejected(self):
        self.assertFalse(FrameRecordSerializer(data=self.record(status='lost')).is_valid())

    def test_load_single_file_and_sequence(self):
        with tempfile.TemporaryDirectory() as tmp:
            single = Path(tmp) / 'one.json'
            single.write_text(json.dumps(self.record()))
            sequence = Path(tmp) / 'sequence.json'
            sequence.write_text(json.dumps({'frames': [self.record(), self.record(frame_id='frame_000002')]}))
            self.assertEqual([r.frame_id for r in load_frame_records(single)], ['frame_000001'])
            self.assertEqual(len(load_frame_records(sequence)), 2)
