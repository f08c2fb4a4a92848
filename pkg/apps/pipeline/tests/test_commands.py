import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from apps.common.exceptions import ConfigError
from apps.common.synthetic import organ_model, organ_pose, small_camera
from apps.common.utils import read_json, write_json
from apps.pipeline.management.base import parse_pose
from apps.pipeline.services.run_config import FrameRecord
from apps.rendering.services.camera_render import render_full
from apps.rendering.services.image_io import write_frame
from apps.shape_models.services.shape_model import save_model


class CommandTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.model = organ_model(K=2)

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.model_path = save_model(self.model, self.tmp / 'organ.ssm')
        self.config = self.tmp / 'run.json'
        cam = small_camera()
        self.config.write_text(json.dumps({
            'paths': {'model_file': str(self.model_path), 'output_dir': str(self.tmp / 'out')},
            'camera': cam.as_dict(),
            'optimizer': {'popsize': 8, 'maxiter': 4},
            'refinement': {'max_outer_iterations': 1},
        }))

    def tearDown(self):
        self._tmp.cleanup()

    def call(self, name, *args):
        out = StringIO()
        call_command(name, '--config', str(self.config), *args, stdout=out)
        return out.getvalue()

    def write_records(self, name, poses):
        records = [FrameRecord(frame_id=f'f{i}', pose=pose, shape=(0.1, 0.0)).as_dict() for i, pose in enumerate(poses)]
        return write_json(self.tmp / name, {'frames': records})

    def test_evaluate_writes_metrics(self):
        pose = organ_pose()
        gt = self.write_records('gt.json', [pose, pose])
        est = self.write_records('est.json', [pose.perturbed(translation_delta=(0.0, 3.0, 4.0))] * 2)
        output = self.call('evaluate', '--records', str(est), '--gt', str(gt), '--tumor', '10', '5', '3')
        metrics = read_json(self.tmp / 'out' / 'metrics.json')
        self.assertAlmostEqual(metrics['tre_mm']['median'], 5.0, places=9)
        self.assertIn('"success": true', output)

    def test_evaluate_reports_missing_frames(self):
        pose = organ_pose()
        gt = self.write_records('gt.json', [pose, pose])
        est = self.write_records('est.json', [pose])
        with self.assertRaisesMessage(CommandError, 'f1'):
            self.call('evaluate', '--records', str(est), '--gt', str(gt), '--tumor', '0', '0', '0')

    def test_register_and_render_overlay(self):
        masks = render_full(self.model.neutral_mesh(), organ_pose(), small_camera())
        write_frame(self.tmp / 'frame', masks)
        self.call('register', '--masks', str(self.tmp / 'frame'), '--frame-id', 'f0',
                  '--init-pose', json.dumps(organ_pose().as_dict()), '--seed', '2')
        record_path = self.tmp / 'out' / 'records' / 'f0.json'
        self.assertEqual(read_json(record_path)['metrics']['cost'], 0.0)

        self.call('render_overlay', '--record', str(record_path), '--out', str(self.tmp / 'overlay'))
        self.assertTrue((self.tmp / 'overlay' / 'overlays' / 'f0.png').exists())

    def test_track_without_frames_fails_cleanly(self):
        (self.tmp / 'empty').mkdir()
        with self.assertRaises(CommandError):
            self.call('track', '--frames', str(self.tmp / 'empty'), '--init-pose', '{"translation": [0, 0, 250]}')

    def test_invalid_config_is_a_command_error(self):
        self.config.write_text(json.dumps({'sampling': {'count': 0}}))
        with self.assertRaisesMessage(CommandError, 'Invalid run configuration'):
            self.call('gen_data')


class ParsePoseTests(SimpleTestCase):

    def test_inline_and_file(self):
        self.assertEqual(parse_pose('{"rotation": [0, 0, 5], "translation": [1, 2, 3]}').translation, (1.0, 2.0, 3.0))
        with tempfile.TemporaryDirectory() as tmp:
            path = write_json(Path(tmp) / 'pose.json', organ_pose().as_dict())
            self.assertEqual(parse_pose(str(path)), organ_pose())

    def test_malformed_pose(self):
        with self.assertRaises(ConfigError):
            parse_pose('{"rotation": [0, 0]}')
        with self.assertRaises(ConfigError):
            parse_pose('not json')
