import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from apps.common.exceptions import ConfigError, FrameMismatchError, NothingToRegisterError
from apps.common.synthetic import labelled_organ, organ_model, organ_pose, planted_corpus, small_camera
from apps.common.utils import read_json
from apps.meshes.services.mesh_core import RigidPose
from apps.pipeline.serializers import load_frame_records
from apps.pipeline.services.pipeline import evaluate_cmd, refine, refine_cmd, track_sequence_cmd
from apps.pipeline.services.run_config import FrameRecord, FrameStatus, RefinementSpec, RunConfig
from apps.registration.services.cmaes_opt import OptConfig
from apps.registration.services.objective import join_parameters, registration_cost, target_registration_error
from apps.rendering.services.camera_render import LabelImageSet, render_full
from apps.shape_models.services.shape_model import build_model, eval_shape

PIPELINE_LOGGER = 'apps.pipeline.services.pipeline'


def quick_config(output_dir='output', maxiter=12, restarts=2):
    return RunConfig(
        camera=small_camera(),
        optimizer=OptConfig(popsize=10, maxiter=maxiter, seed=0),
        refinement=RefinementSpec(max_outer_iterations=restarts),
    ).with_output_dir(output_dir)


class PipelineTestCase(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.model = organ_model(K=2)
        cls.cam = small_camera()
        cls.pose = organ_pose()
        cls.alpha = np.array([0.6, -0.4])
        cls.masks = render_full(eval_shape(cls.model, cls.alpha), cls.pose, cls.cam)
        cls.init = cls.pose.perturbed(translation_delta=(10.0, 0.0, 0.0), rotation_delta=(0.0, 0.0, 5.0))

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()


class RefineTests(PipelineTestCase):

    def test_fixed_point(self):
        masks = render_full(self.model.neutral_mesh(), self.pose, self.cam)
        pose, alpha, metrics = refine(quick_config(), self.pose, masks, self.model)
        self.assertEqual(pose, self.pose)
        np.testing.assert_array_equal(alpha, np.zeros(2))
        self.assertEqual(metrics['cost'], 0.0)
        self.assertEqual(metrics['restarts'], 1)

    def test_cost_decreases(self):
        cfg = quick_config()
        pose, alpha, metrics = refine(cfg, self.init, self.masks, self.model)
        initial = registration_cost(self.model, self.init, np.zeros(2), self.masks, self.cam)
        self.assertEqual(metrics['initial_cost'], initial)
        self.assertLess(metrics['cost'], initial)
        self.assertAlmostEqual(registration_cost(self.model, pose, alpha, self.masks, self.cam), metrics['cost'])

    def test_result_stays_inside_the_box(self):
        pose, alpha, _ = refine(quick_config(), self.init, self.masks, self.model)
        offset = pose.as_vector() - self.init.as_vector()
        self.assertTrue(np.all(np.abs(offset[:3]) <= 20.0))
        self.assertTrue(np.all(np.abs(offset[3:]) <= 10.0))
        self.assertTrue(np.all(np.abs(alpha) <= 1.0))

    def test_rigid_only_keeps_mean_shape(self):
        _, alpha, metrics = refine(quick_config(), self.init, self.masks, self.model, rigid_only=True)
        np.testing.assert_array_equal(alpha, np.zeros(2))
        self.assertTrue(metrics['rigid_only'])

    def test_ten_component_model_stays_inside_the_box(self):
        organ = labelled_organ(subdivisions=2)
        rng = np.random.default_rng(7)
        modes, _ = np.linalg.qr(rng.normal(size=(3 * organ.n_vertices, 10)))
        corpus = planted_corpus(organ, modes, np.full(10, np.sqrt(organ.n_vertices)), count=15, seed=2)
        model = build_model(organ, corpus, K=10)
        cam = small_camera(80, 60, 100.0)
        masks = render_full(eval_shape(model, np.full(10, 0.2)), self.pose, cam)
        cfg = quick_config(self.tmp, maxiter=3, restarts=1).replace(camera=cam)

        bounds = cfg.refinement.bounds(self.init, model.K)
        self.assertEqual(bounds.shape, (16, 2))
        pose, alpha, metrics = refine(cfg, self.init, masks, model)
        self.assertEqual(len(alpha), 10)
        theta = join_parameters(pose, alpha)
        self.assertTrue(np.all(theta >= bounds[:, 0]))
        self.assertTrue(np.all(theta <= bounds[:, 1]))
        self.assertLessEqual(metrics['cost'], metrics['initial_cost'])

    def test_empty_masks(self):
        with self.assertRaises(NothingToRegisterError):
            refine(quick_config(), self.init, LabelImageSet.empty(self.cam.shape), self.model)

    def test_refine_cmd_writes_record_and_overlay(self):
        record = refine_cmd(quick_config(self.tmp), self.init, self.masks, self.model, frame_id='f01')
        self.assertTrue(Path(record.images['overlay']).exists())
        stored = load_frame_records(self.tmp / 'records' / 'f01.json')[0]
        self.assertEqual(stored.pose, record.pose)
        self.assertEqual(stored.shape, record.shape)
        self.assertIn('sil', record.metrics['channel_hausdorff'])


class TrackTests(PipelineTestCase):
    tumor = np.array([10.0, -5.0, 3.0])

    def test_static_sequence_never_gets_worse(self):
        frames = [(f'f{i}', self.masks) for i in range(3)]
        records = track_sequence_cmd(quick_config(self.tmp, maxiter=8), frames, self.init, self.model)
        costs = [record.metrics['cost'] for record in records]
        self.assertTrue(all(record.ok for record in records))
        self.assertTrue(all(b <= a for a, b in zip(costs, costs[1:])))
        self.assertEqual(len(read_json(self.tmp / 'sequence.json')['frames']), 3)

    def test_static_sequence_at_the_optimum_is_unchanged(self):
        frames = [(f'f{i}', self.masks) for i in range(3)]
        records = track_sequence_cmd(quick_config(self.tmp, maxiter=8), frames, self.pose, self.model,
                                     init_shape=self.alpha)
        for record in records:
            self.assertEqual(record.pose, self.pose)
            np.testing.assert_array_equal(record.shape, self.alpha)
            self.assertEqual(record.metrics['cost'], 0.0)
        self.assertEqual([r.as_dict()['pose'] for r in records[1:]], [records[0].as_dict()['pose']] * 2)

    def test_drifting_sequence_favours_the_chained_start(self):
        neutral = self.model.neutral_mesh()
        truths = [self.pose.perturbed(translation_delta=(2.0 * (i + 1), 0.0, 0.0)) for i in range(6)]
        frames = [(f'f{i}', render_full(neutral, pose, self.cam)) for i, pose in enumerate(truths)]
        # a small budget leaves part of each start offset unrecovered
        cfg = quick_config(self.tmp, maxiter=4, restarts=1)
        zeros = np.zeros(self.model.K)

        chained = track_sequence_cmd(cfg, frames, self.pose, self.model, rigid_only=True)
        chained_tre = [target_registration_error(self.tumor, truth, zeros, record.pose, zeros, self.model)
                       for truth, record in zip(truths, chained)]
        cold_tre = []
        for (frame_id, masks), truth in zip(frames, truths):
            record = refine_cmd(cfg, self.pose, masks, self.model, rigid_only=True, frame_id=frame_id,
                                out_dir=self.tmp / 'cold')
            cold_tre.append(target_registration_error(self.tumor, truth, zeros, record.pose, zeros, self.model))

        self.assertAlmostEqual(chained_tre[0], cold_tre[0], places=9)
        self.assertLessEqual(np.mean(chained_tre), np.mean(cold_tre))

    def test_chain_is_deterministic(self):
        frames = [('a', self.masks), ('b', self.masks)]
        first = track_sequence_cmd(quick_config(self.tmp / 'one', maxiter=6), frames, self.init, self.model)
        second = track_sequence_cmd(quick_config(self.tmp / 'two', maxiter=6), frames, self.init, self.model)
        self.assertEqual([r.pose for r in first], [r.pose for r in second])
        self.assertEqual([r.shape for r in first], [r.shape for r in second])

    def test_failed_frame_is_flagged_and_chain_continues(self):
        frames = [('a', self.masks), ('b', LabelImageSet.empty(self.cam.shape)), ('c', self.masks)]
        with self.assertLogs(PIPELINE_LOGGER, 'ERROR'):
            records = track_sequence_cmd(quick_config(self.tmp, maxiter=6), frames, self.init, self.model)
        self.assertEqual([r.status for r in records], [FrameStatus.OK, FrameStatus.FAILED, FrameStatus.OK])
        self.assertEqual(records[1].error, 'nothing to register')
        self.assertEqual(records[1].pose, records[0].pose)
        self.assertTrue((self.tmp / 'records' / 'b.json').exists())


class EvaluateTests(PipelineTestCase):
    tumor = np.array([10.0, -5.0, 3.0])

    def records(self, poses, shape=(0.3, -0.2)):
        return [FrameRecord(frame_id=f'f{i}', pose=pose, shape=shape) for i, pose in enumerate(poses)]

    def test_identical_records(self):
        gt = self.records([self.pose, self.pose.perturbed(rotation_delta=(0.0, 4.0, 0.0))])
        metrics = evaluate_cmd(gt, gt, self.tumor, self.model)
        self.assertEqual(metrics['tre_mm'], {'mean': 0.0, 'median': 0.0})
        self.assertEqual(metrics['surface_mse_mm2']['mean'], 0.0)

    def test_translation_offset(self):
        poses = [self.pose, self.pose.perturbed(translation_delta=(0.0, 5.0, 0.0))]
        gt = self.records(poses)
        estimates = self.records([p.perturbed(translation_delta=(6.0, 0.0, 8.0)) for p in poses])
        metrics = evaluate_cmd(estimates, gt, self.tumor, self.model)
        for frame in metrics['frames']:
            self.assertAlmostEqual(frame['tre_mm'], 10.0, places=9)
            self.assertAlmostEqual(frame['surface_mse_mm2'], 100.0, places=6)

    def test_shape_error_matches_direct_mapping(self):
        gt = self.records([self.pose], shape=(0.8, 0.1))
        estimates = self.records([self.pose], shape=(0.0, 0.0))
        metrics = evaluate_cmd(estimates, gt, self.tumor, self.model)
        direct = target_registration_error(self.tumor, self.pose, np.array([0.8, 0.1]), self.pose, np.zeros(2), self.model)
        self.assertGreater(direct, 0.0)
        self.assertEqual(metrics['frames'][0]['tre_mm'], direct)
        self.assertEqual(metrics['frames'][0]['surface_mse_mm2'], 0.0)

    def test_mismatched_ids(self):
        gt = self.records([self.pose, self.pose])
        with self.assertRaises(FrameMismatchError) as ctx:
            evaluate_cmd(gt[:1], gt, self.tumor, self.model)
        self.assertEqual(ctx.exception.details['missing'], ['f1'])

    def test_wrong_shape_length_is_a_config_error(self):
        gt = self.records([self.pose, self.pose])
        estimates = self.records([self.pose, self.pose])
        estimates[1].shape = (0.3, -0.2, 0.1)
        with self.assertRaises(ConfigError) as ctx:
            evaluate_cmd(estimates, gt, self.tumor, self.model)
        self.assertEqual(ctx.exception.details, {'frame_id': 'f1', 'expected': 2, 'got': 3})

    def test_short_ground_truth_shape_is_a_config_error(self):
        gt = self.records([self.pose], shape=(0.3,))
        with self.assertRaisesMessage(ConfigError, 'ground truth has 1 shape coefficients'):
            evaluate_cmd(self.records([self.pose]), gt, self.tumor, self.model)

    def test_failed_frame_without_shape_is_not_checked(self):
        gt = self.records([self.pose, self.pose])
        estimates = self.records([self.pose, self.pose])
        estimates[1] = FrameRecord(frame_id='f1', pose=self.pose, status=FrameStatus.FAILED, error='nothing to register')
        self.assertEqual(evaluate_cmd(estimates, gt, self.tumor, self.model)['failed'], ['f1'])

    def test_failed_frames_are_excluded(self):
        gt = self.records([self.pose, self.pose])
        estimates = self.records([self.pose, self.pose])
        estimates[1].status = FrameStatus.FAILED
        metrics = evaluate_cmd(estimates, gt, self.tumor, self.model)
        self.assertEqual(metrics['failed'], ['f1'])
        self.assertEqual(len(metrics['frames']), 1)

    def test_no_successful_frames(self):
        gt = self.records([RigidPose()])
        estimates = self.records([RigidPose()])
        estimates[0].status = FrameStatus.FAILED
        self.assertEqual(evaluate_cmd(estimates, gt, self.tumor, self.model)['tre_mm'], {'mean': None, 'median': None})
