import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from apps.common.exceptions import ConfigError, InvalidStartingPointError
from apps.registration.serializers import OptConfigSerializer
from apps.registration.services.cmaes_opt import OptConfig, default_popsize, minimize, repair_to_bounds


def sphere(x):
    return float(np.sum(np.asarray(x) ** 2))


def rosenbrock(x):
    return float(100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2)


def random_spd(n, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return q @ np.diag(np.logspace(0, 1, n)) @ q.T


class PopsizeTests(SimpleTestCase):

    def test_values(self):
        self.assertEqual(default_popsize(16), 12)
        self.assertEqual(default_popsize(1), 4)

    def test_zero_dimension(self):
        with self.assertRaises(ConfigError):
            default_popsize(0)


class RepairTests(SimpleTestCase):

    def test_clamp(self):
        bounds = [[-1.0, 1.0], [0.0, 2.0]]
        assert_array_equal(repair_to_bounds([0.5, 1.0], bounds), [0.5, 1.0])
        assert_array_equal(repair_to_bounds([-2.0, -1.0], bounds), [-1.0, 0.0])

    def test_matches_component_oracle(self):
        rng = np.random.default_rng(0)
        lo = rng.uniform(-5, 0, 7)
        hi = lo + rng.uniform(0.1, 5, 7)
        bounds = np.column_stack([lo, hi])
        for _ in range(100):
            x = rng.uniform(-10, 10, 7)
            expected = [min(max(x[i], lo[i]), hi[i]) for i in range(7)]
            assert_array_equal(repair_to_bounds(x, bounds), expected)


class MinimizeTests(SimpleTestCase):

    def test_sphere_converges_for_fixed_seeds(self):
        # 16-D from f=144 takes about 180 generations at popsize 15; 100 is not enough for 1e-8
        budget = 250
        bounds = [[-5.0, 5.0]] * 16
        for seed in range(10):
            cfg = OptConfig(maxiter=budget, popsize=15, bounds=bounds, seed=seed)
            result = minimize(sphere, np.full(16, 3.0), cfg)
            self.assertLess(result.f_best, 1e-8, f"seed {seed}")

    def test_constant_function_stops_on_ftol(self):
        cfg = OptConfig(bounds=[[-1.0, 1.0]] * 3, seed=1)
        result = minimize(lambda x: 7.0, np.zeros(3), cfg)
        self.assertEqual(result.termination_reason, 'ftol')
        self.assertEqual(result.f_best, 7.0)
        self.assertEqual(result.generations, 1)

    def test_rosenbrock(self):
        cfg = OptConfig(maxiter=500, bounds=[[-2.0, 2.0]] * 2, seed=3)
        result = minimize(rosenbrock, np.array([-1.2, 1.0]), cfg)
        self.assertLess(np.abs(result.x_best - 1.0).max(), 1e-3)

    def test_rotated_quadratic(self):
        bounds = [[-5.0, 5.0]] * 8
        for seed in range(10):
            Q = random_spd(8, seed)
            cfg = OptConfig(maxiter=150, bounds=bounds, seed=seed)
            result = minimize(lambda x: float(x @ Q @ x), np.full(8, 1.0), cfg)
            self.assertLess(result.f_best, 1e-6, f"seed {seed}")

    def test_deterministic(self):
        cfg = OptConfig(maxiter=40, bounds=[[-5.0, 5.0]] * 4, seed=11)
        a = minimize(sphere, np.full(4, 2.0), cfg)
        b = minimize(sphere, np.full(4, 2.0), cfg)
        self.assertEqual(a.history, b.history)
        assert_array_equal(a.x_best, b.x_best)

    def test_candidates_stay_in_bounds(self):
        bounds = np.array([[0.0, 1.0], [-3.0, -2.0], [10.0, 12.0]])
        seen = []

        def recording(x):
            seen.append(np.array(x))
            return sphere(x)

        result = minimize(recording, np.array([0.5, -2.5, 11.0]), OptConfig(maxiter=30, sigma0=0.9, bounds=bounds))
        seen = np.array(seen)
        self.assertTrue(np.all(seen >= bounds[:, 0]) and np.all(seen <= bounds[:, 1]))
        self.assertTrue(np.all(result.x_best >= bounds[:, 0]) and np.all(result.x_best <= bounds[:, 1]))

    def test_running_minimum_is_monotone(self):
        rng = np.random.default_rng(6)
        noisy = lambda x: sphere(x) + rng.uniform(0, 0.5)  # noqa: E731
        result = minimize(noisy, np.full(5, 1.0), OptConfig(maxiter=60, bounds=[[-2.0, 2.0]] * 5))
        self.assertTrue(np.all(np.diff(result.running_min) <= 0))
        self.assertEqual(result.f_best, result.running_min[-1])

    def test_never_worse_than_start(self):
        result = minimize(sphere, np.full(3, 0.01), OptConfig(maxiter=5, bounds=[[-5.0, 5.0]] * 3))
        self.assertLessEqual(result.f_best, sphere(np.full(3, 0.01)))

    def test_invalid_starting_point(self):
        with self.assertRaises(InvalidStartingPointError):
            minimize(lambda x: np.nan, np.zeros(2), OptConfig(bounds=[[-1.0, 1.0]] * 2))

    def test_non_finite_candidates_rank_last(self):
        def guarded(x):
            return np.inf if x[0] > 0.5 else sphere(x)

        with self.assertLogs('apps.registration.services.cmaes_opt', level='WARNING'):
            result = minimize(guarded, np.array([0.4, 0.4]), OptConfig(maxiter=30, sigma0=0.5, bounds=[[-1.0, 1.0]] * 2))
        self.assertLessEqual(result.x_best[0], 0.5)
        self.assertTrue(np.isfinite(result.f_best))

    def test_diagonal_variant(self):
        cfg = OptConfig(maxiter=400, bounds=[[-5.0, 5.0]] * 10, seed=2, diagonal_only=True)
        weights = np.logspace(0, 2, 10)
        result = minimize(lambda x: float(np.sum(weights * x ** 2)), np.full(10, 1.0), cfg)
        self.assertLess(result.f_best, 1e-6)

    def test_map_fn_gives_same_result(self):
        cfg = OptConfig(maxiter=20, bounds=[[-5.0, 5.0]] * 3, seed=4)
        plain = minimize(sphere, np.full(3, 1.0), cfg)
        mapped = minimize(sphere, np.full(3, 1.0), cfg, map_fn=lambda f, points: [f(x) for x in points])
        self.assertEqual(plain.history, mapped.history)

    def test_telemetry_lines(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'opt' / 'telemetry.jsonl'
            cfg = OptConfig(maxiter=7, bounds=[[-5.0, 5.0]] * 2, telemetry_path=str(path), ftol=0.0, xtol=0.0)
            result = minimize(sphere, np.full(2, 1.0), cfg)
            lines = [json.loads(line) for line in path.read_text().splitlines()]
        self.assertEqual(len(lines), result.generations)
        self.assertEqual(lines[-1]['f_best'], result.f_best)

    def test_missing_or_mismatched_bounds(self):
        with self.assertRaises(ConfigError):
            minimize(sphere, np.zeros(2), OptConfig())
        with self.assertRaises(ConfigError):
            minimize(sphere, np.zeros(2), OptConfig(bounds=[[-1.0, 1.0]]))
        with self.assertRaises(ConfigError):
            minimize(sphere, np.full(2, 3.0), OptConfig(bounds=[[-1.0, 1.0]] * 2))


class OptConfigTests(SimpleTestCase):

    def test_invalid_values(self):
        with self.assertRaises(ConfigError):
            OptConfig(popsize=3)
        with self.assertRaises(ConfigError):
            OptConfig(maxiter=0)
        with self.assertRaises(ConfigError):
            OptConfig(bounds=[[1.0, 1.0]])

    def test_serializer_defaults(self):
        serializer = OptConfigSerializer(data={})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        cfg = serializer.save()
        self.assertEqual(cfg.popsize, 15)
        self.assertEqual(cfg.maxiter, 100)
        self.assertFalse(cfg.diagonal_only)
        self.assertIsNone(cfg.telemetry_path)

    def test_serializer_rejects_small_population(self):
        serializer = OptConfigSerializer(data={'popsize': 2})
        self.assertFalse(serializer.is_valid())
        self.assertIn('popsize', serializer.errors)
