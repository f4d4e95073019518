import math
from unittest import TestCase

import numpy as np
from django.core.exceptions import ImproperlyConfigured
from scipy import special, stats

from stablelab.exceptions import GeometryError
from stablelab.stable_core import (
    RngStream,
    SpaceTimePoint,
    StableParams,
    characteristic_probe,
    levy_constant,
    levy_tail_mass,
    sample_brownian_increment,
    sample_stable_increment,
    sample_subordinator_increment,
    subordinator_cdf,
    subordinator_density,
)


class TestStableParams(TestCase):

    def test_alpha_out_of_range(self):
        with self.assertRaises(ImproperlyConfigured) as ctx:
            StableParams(d=1, alpha=2.5)
        self.assertIn("alpha=2.5", str(ctx.exception))
        with self.assertRaises(ImproperlyConfigured):
            StableParams(d=1, alpha=0.0)

    def test_dimension_must_be_positive_int(self):
        for d in (0, True, 1.5):
            with self.assertRaises(ImproperlyConfigured):
                StableParams(d=d, alpha=1.0)

    def test_subordinator_index(self):
        self.assertEqual(StableParams(d=2, alpha=1.5).subordinator_index, 0.75)

    def test_point_below_half_space(self):
        with self.assertRaises(GeometryError):
            SpaceTimePoint(x=(0.0,), t=-0.1)
        point = SpaceTimePoint(x=0.5, t=0.0)
        self.assertTrue(point.on_boundary)
        self.assertEqual(point.d, 1)


class TestLevyConstants(TestCase):

    def test_cauchy_constant(self):
        self.assertAlmostEqual(levy_constant(StableParams(d=1, alpha=1.0)), 1.0 / math.pi, places=12)

    def test_cauchy_tail_mass(self):
        params = StableParams(d=1, alpha=1.0)
        self.assertAlmostEqual(levy_tail_mass(params, 1.0), 2.0 / math.pi, places=12)
        self.assertAlmostEqual(levy_tail_mass(params, 2.0), 1.0 / math.pi, places=12)

    def test_tail_mass_radius(self):
        with self.assertRaises(ValueError):
            levy_tail_mass(StableParams(d=1, alpha=1.0), 0.0)


class TestRngStream(TestCase):

    def test_replay(self):
        a = RngStream(42, 3).generator.random(5)
        b = RngStream(42, 3).generator.random(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = RngStream(42, 3).generator.random(5)
        b = RngStream(42, 4).generator.random(5)
        c = RngStream(42, 3).child(0).generator.random(5)
        self.assertFalse(np.array_equal(a, b))
        self.assertFalse(np.array_equal(a, c))

    def test_seed_range(self):
        with self.assertRaises(ImproperlyConfigured):
            RngStream(-1)
        with self.assertRaises(ImproperlyConfigured):
            RngStream(2**64)


class TestSubordinator(TestCase):

    def test_cdf_half_matches_erfc(self):
        for dt, s in ((1.0, 0.5), (0.3, 0.05), (2.0, 4.0)):
            expected = special.erfc(dt / (2.0 * math.sqrt(s)))
            self.assertAlmostEqual(subordinator_cdf(0.5, dt, s), expected, delta=1e-7)

    def test_density_half_closed_form(self):
        dt, s = 1.0, 0.7
        expected = dt / (2.0 * math.sqrt(math.pi)) * s ** -1.5 * math.exp(-dt * dt / (4.0 * s))
        self.assertAlmostEqual(subordinator_density(0.5, dt, s), expected, delta=1e-7)

    def test_cdf_at_nonpositive_level(self):
        self.assertEqual(subordinator_cdf(0.3, 1.0, 0.0), 0.0)

    def test_laplace_transform(self):
        beta, dt, lam = 0.6, 0.5, 1.3
        draws = sample_subordinator_increment(beta, dt, RngStream(7), size=40000)
        self.assertTrue(np.all(draws > 0))
        values = np.exp(-lam * draws)
        se = values.std(ddof=1) / math.sqrt(len(values))
        self.assertLess(abs(values.mean() - math.exp(-dt * lam**beta)), 4 * se)

    def test_rejects_bad_arguments(self):
        with self.assertRaises(ImproperlyConfigured):
            sample_subordinator_increment(1.0, 1.0, RngStream(0))
        with self.assertRaises(ValueError):
            sample_subordinator_increment(0.5, 0.0, RngStream(0))

    def test_scalar_draw(self):
        self.assertIsInstance(sample_subordinator_increment(0.5, 1.0, RngStream(0)), float)


class TestIncrements(TestCase):

    def test_characteristic_function(self):
        for alpha in (0.7, 1.0, 1.6):
            params = StableParams(d=2, alpha=alpha)
            samples = sample_stable_increment(params, 1.0, RngStream(11), size=40000)
            self.assertEqual(samples.shape, (40000, 2))
            mean, se = characteristic_probe(samples, (1.0, 0.0))
            self.assertLess(abs(mean - math.exp(-1.0)), 4 * se)

    def test_scaling_in_time(self):
        params = StableParams(d=1, alpha=1.2)
        samples = sample_stable_increment(params, 0.25, RngStream(5), size=40000)
        xi = 2.0
        mean, se = characteristic_probe(samples, (xi,))
        self.assertLess(abs(mean - math.exp(-0.25 * xi**1.2)), 4 * se)

    def test_self_similar_in_law(self):
        # Y_{c dt} has the law of c^{1/alpha} Y_dt
        c, dt = 4.0, 0.05
        for alpha in (0.7, 1.2, 1.8):
            params = StableParams(d=1, alpha=alpha)
            long_step = sample_stable_increment(params, c * dt, RngStream(21), size=5000)[:, 0]
            short_step = sample_stable_increment(params, dt, RngStream(22), size=5000)[:, 0]
            result = stats.ks_2samp(long_step, c ** (1.0 / alpha) * short_step)
            self.assertGreater(result.pvalue, 0.01, msg=f"alpha={alpha}")

    def test_brownian_variance(self):
        draws = sample_brownian_increment(0.3, RngStream(9), size=50000)
        self.assertAlmostEqual(draws.var(), 0.6, delta=0.02)
        self.assertAlmostEqual(draws.mean(), 0.0, delta=0.02)
