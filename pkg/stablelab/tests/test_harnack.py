import math
from unittest import TestCase, mock

import numpy as np
from django.core.exceptions import ImproperlyConfigured
from scipy import integrate

from stablelab.exceptions import GeometryError, PositivityViolation, TailBoundExceeded
from stablelab.harnack import (
    EstimateCI,
    boundary_time_cdf,
    box_hitting_step_check,
    box_sample_points,
    centred_target,
    estimate_box_hitting_probability,
    estimate_boundary_expectation,
    estimate_mean_exit_time,
    fit_exit_scaling,
    harnack_box,
    harnack_ratio_experiment,
    holder_constant_estimate,
    levy_system_check,
    martingale_defect,
    oscillation_profile,
    random_boundary_family,
    resolvent_apply,
    resolvent_monte_carlo,
    resolvent_quadrature,
    resolvent_s_grid,
    standard_shape_family,
)
from stablelab.kernels import GridFunction, exit_cdf_mu, lattice_extension
from stablelab.simulator import AnisotropicBox
from stablelab.stable_core import RngStream, SpaceTimePoint, StableParams, levy_tail_mass


def bump(*axes):
    return np.exp(-sum(a * a for a in axes))


class TestEstimateCI(TestCase):

    def test_from_samples(self):
        estimate = EstimateCI.from_samples([1.0, 2.0, 3.0, 4.0], confidence=0.95)
        self.assertEqual(estimate.mean, 2.5)
        self.assertAlmostEqual(estimate.std_error, np.std([1, 2, 3, 4], ddof=1) / 2.0)
        self.assertLess(estimate.lower, 2.5)
        self.assertGreater(estimate.upper, 2.5)
        self.assertEqual(set(estimate.as_row()), {"mean", "std_error", "n", "lower", "upper"})

    def test_needs_two_samples(self):
        with self.assertRaises(ValueError):
            EstimateCI.from_samples([1.0])

    def test_proportion_interval(self):
        estimate = EstimateCI.from_proportion(0, 10)
        self.assertEqual(estimate.mean, 0.0)
        self.assertEqual(estimate.lower, 0.0)
        self.assertGreater(estimate.upper, 0.0)
        with self.assertRaises(ValueError):
            EstimateCI.from_proportion(0, 0)

    def test_covers(self):
        estimate = EstimateCI(1.0, 0.1, 100, 0.99, 0.7, 1.3)
        self.assertTrue(estimate.covers(1.25))
        self.assertFalse(estimate.covers(1.35))


class TestExitTimes(TestCase):

    def test_geometry(self):
        params = StableParams(d=1, alpha=1.0)
        box = AnisotropicBox(SpaceTimePoint((0.0,), 2.0), 1.0, 1.0)
        with self.assertRaises(GeometryError):
            estimate_mean_exit_time(params, box, SpaceTimePoint((3.0,), 2.0), 10, None, RngStream(0))
        low = AnisotropicBox(SpaceTimePoint((0.0,), 0.2), 1.0, 1.0)
        with self.assertRaises(GeometryError):
            estimate_mean_exit_time(params, low, low.center, 10, None, RngStream(0))

    @mock.patch("stablelab.harnack.info")
    def test_vertical_control_scales_like_r_squared(self, mock_info):
        params = StableParams(d=1, alpha=1.2)
        fit = fit_exit_scaling(params, [0.5, 1.0, 2.0], 800, RngStream(3), wide=True)
        self.assertAlmostEqual(fit.slope, 2.0, delta=0.15)
        self.assertEqual(len(fit.estimates), 3)
        self.assertEqual(mock_info.call_count, 3)

    @mock.patch("stablelab.harnack.info")
    def test_box_exit_times_are_finite(self, mock_info):
        params = StableParams(d=2, alpha=1.5)
        fit = fit_exit_scaling(params, [1.0], 300, RngStream(4))
        self.assertTrue(math.isnan(fit.slope))
        self.assertGreater(fit.estimates[0].mean, 0.0)
        self.assertLess(fit.estimates[0].mean, 1.0 / 8.0 + 0.02)


class TestHitting(TestCase):

    def setUp(self):
        self.params = StableParams(d=1, alpha=1.5)
        self.center = SpaceTimePoint((0.0,), 4.0)

    def test_geometry(self):
        low = SpaceTimePoint((0.0,), 2.0)
        target = centred_target(low, 0.5, 0.5)
        with self.assertRaises(GeometryError):
            estimate_box_hitting_probability(self.params, target, low, low, 10, None, RngStream(0))
        wide = centred_target(self.center, 2.0, 0.5)
        with self.assertRaises(GeometryError):
            estimate_box_hitting_probability(self.params, wide, self.center, self.center, 10, None, RngStream(0))
        target = centred_target(self.center, 0.5, 0.5)
        with self.assertRaises(GeometryError):
            estimate_box_hitting_probability(
                self.params, target, SpaceTimePoint((0.0,), 6.0), self.center, 10, None, RngStream(0)
            )

    def test_probability_is_positive(self):
        target = centred_target(self.center, 0.5, 0.5)
        start = SpaceTimePoint((0.0,), 3.5)
        estimate = estimate_box_hitting_probability(self.params, target, start, self.center, 400, None, RngStream(5))
        self.assertGreater(estimate.mean, 0.0)
        self.assertLessEqual(estimate.upper, 1.0)

    def test_halving_step_keeps_probability(self):
        target = centred_target(self.center, 1.0, 1.0)
        start = SpaceTimePoint((0.0,), 3.2)
        check = box_hitting_step_check(self.params, target, start, self.center, 400, None, RngStream(9))
        self.assertGreater(check.coarse.mean, 0.0)
        self.assertEqual(check.bound, max(check.coarse.std_error, check.fine.std_error, 1e-3))
        self.assertLess(check.change, check.bound)
        self.assertTrue(check.ok)

    def test_target_measure(self):
        target = centred_target(self.center, 0.5, 0.25)
        self.assertAlmostEqual(target.measure(), 0.5 * 0.25)

    def test_shape_family_measures(self):
        unit = AnisotropicBox(SpaceTimePoint((0.0, 0.0), 3.0), 1.0, 1.5)
        for epsilon in (0.3, 0.8):
            for shape in standard_shape_family(unit, epsilon):
                self.assertAlmostEqual(shape.measure(), epsilon * unit.measure(), places=10)
        with self.assertRaises(ValueError):
            standard_shape_family(unit, 0.0)


class TestBoundary(TestCase):

    def setUp(self):
        self.params = StableParams(d=1, alpha=1.0)

    def test_boundary_time_cdf(self):
        cdf = boundary_time_cdf(self.params, 1.0, [0.25, 1.0], 3000, 0.005, RngStream(7))
        for S, estimate in cdf:
            self.assertTrue(estimate.covers(exit_cdf_mu(1.0, S), width=4.0))

    def test_boundary_expectation_is_the_extension(self):
        f = GridFunction.centered(1, 10.0, 0.1, bump)
        start = SpaceTimePoint((0.0,), 1.0)
        estimate = estimate_boundary_expectation(self.params, f, start, 4000, 0.01, RngStream(8))
        exact = lattice_extension(f, self.params, [[0.0]], [1.0])[0]
        self.assertTrue(estimate.covers(exact, width=4.0))

    def test_martingale_defect(self):
        params = StableParams(d=1, alpha=1.5)
        f = GridFunction.centered(1, 10.0, 0.1, bump)
        defect = martingale_defect(params, f, SpaceTimePoint((0.0,), 1.0), 0.1, 2000, 0.01, RngStream(9), pad=1000)
        self.assertLess(abs(defect.mean), 4 * defect.std_error + 1e-3)

    def test_levy_system(self):
        rows = levy_system_check(self.params, 1.0, [1.0, 2.0], 3000, 0.01, RngStream(10))
        for R, estimate, expected in rows:
            self.assertAlmostEqual(expected, levy_tail_mass(self.params, R))
            self.assertTrue(estimate.covers(expected, width=4.0))


class TestHarnack(TestCase):

    def setUp(self):
        self.params = StableParams(d=1, alpha=1.0)
        self.template = GridFunction.centered(1, 3.0, 0.1)

    def test_box_geometry(self):
        with self.assertRaises(GeometryError):
            harnack_box(SpaceTimePoint((0.0,), 0.1), 1.0, 1.0)
        self.assertEqual(harnack_box(SpaceTimePoint((0.0,), 16.0), 1.0).r, 1.0)

    def test_sample_points_cover_box(self):
        box = AnisotropicBox(SpaceTimePoint((0.0, 0.0), 5.0), 1.0, 1.0)
        xs, ts = box_sample_points(box, 3)
        self.assertEqual(xs.shape, (27, 2))
        self.assertTrue(box.contains(xs, ts).all())

    def test_random_family_is_seeded(self):
        first = random_boundary_family(self.template, 3, RngStream(11))
        second = random_boundary_family(self.template, 3, RngStream(11))
        self.assertEqual(len(first), 3)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.values, b.values)
            self.assertTrue(np.all(a.values >= 0.0))

    def test_ratios_are_finite(self):
        family = random_boundary_family(self.template, 3, RngStream(12))
        result = harnack_ratio_experiment(self.params, family, SpaceTimePoint((0.0,), 16.0), per_axis=3)
        self.assertEqual(len(result.ratios), 3)
        self.assertTrue(all(1.0 <= ratio < math.inf for ratio in result.ratios))
        self.assertEqual(result.max_ratio, max(result.ratios))

    def test_negative_datum(self):
        negative = self.template.with_values(-np.ones(self.template.extent))
        with self.assertRaises(PositivityViolation):
            harnack_ratio_experiment(self.params, [negative], SpaceTimePoint((0.0,), 16.0), per_axis=3)


class TestOscillation(TestCase):

    def setUp(self):
        self.params = StableParams(d=1, alpha=1.0)
        self.f = GridFunction.centered(1, 3.0, 0.1, bump)

    def test_theta_and_geometry(self):
        with self.assertRaises(ImproperlyConfigured):
            oscillation_profile(self.params, self.f, SpaceTimePoint((0.0,), 4.0), 0.5, 2)
        with self.assertRaises(GeometryError):
            oscillation_profile(self.params, self.f, SpaceTimePoint((0.0,), 1.0), 0.25, 2)

    @mock.patch("stablelab.harnack.warning")
    def test_levels_are_nested(self, mock_warning):
        profile, fit = oscillation_profile(self.params, self.f, SpaceTimePoint((0.0,), 4.0), 1.0 / 3.0, 3, per_axis=5)
        lows = [a for _, a, _ in profile.levels]
        highs = [b for _, _, b in profile.levels]
        self.assertTrue(all(x <= y for x, y in zip(lows, lows[1:])))
        self.assertTrue(all(x >= y for x, y in zip(highs, highs[1:])))
        self.assertGreater(fit.gamma_hat, 0.0)

    def test_holder_constant_of_linear_data(self):
        g = GridFunction.centered(1, 0.4, 0.05, lambda x: x)
        fit = holder_constant_estimate(g, gamma_probe=1.0, rng=RngStream(13))
        self.assertEqual(fit.gamma_hat, 1.0)
        self.assertAlmostEqual(fit.c_hat, 1.0, places=8)


class TestResolvent(TestCase):

    def setUp(self):
        self.params = StableParams(d=1, alpha=1.5)

    def top_datum(self, ht=0.05):
        heights = ht * np.arange(int(round(8.0 / ht)) + 1)
        profile = np.exp(-4.0 * (heights - 6.5) ** 2)
        return GridFunction([-1.0], 0.25, profile[:, None] * np.ones((1, 9)), heights)

    def test_s_grid_weights(self):
        nodes, weights = resolvent_s_grid(0.01, 10.0, 12)
        self.assertAlmostEqual(weights.sum(), 10.0, places=10)
        self.assertTrue(np.all((nodes > 0) & (nodes < 10.0)))

    def test_killed_green_function(self):
        f = self.top_datum()
        lam = 1.0
        u = resolvent_quadrature(self.params, f, lam, killed=True, pad=0)
        root = math.sqrt(lam)
        fine = np.linspace(0.0, 8.0, 4001)
        datum = np.exp(-4.0 * (fine - 6.5) ** 2)
        for k in (20, 100, 130, 150, 160):
            a = f.heights[k]
            green = (np.exp(-root * np.abs(a - fine)) - np.exp(-root * (a + fine))) / (2.0 * root)
            expected = integrate.trapezoid(green * datum, fine)
            np.testing.assert_allclose(u.values[k], expected, atol=1e-5)
        self.assertTrue(np.all(u.values[0] == 0.0))

    def test_resolvent_identity(self):
        heights = 0.1 * np.arange(41)
        rng = RngStream(14).generator
        values = rng.random((41, 12)) * np.sin(math.pi * heights / 4.1)[:, None]
        values[0] = 0.0
        f = GridFunction([0.0], 0.25, values, heights)
        lam, beta = 1.0, 2.0
        u_lam = resolvent_quadrature(self.params, f, lam, killed=True, pad=0)
        # U_beta f keeps its mass above the window for the outer resolvent
        u_beta = resolvent_quadrature(self.params, f, beta, killed=True, pad=0, crop=False)
        nested = resolvent_quadrature(self.params, u_beta, lam, killed=True, pad=0)
        rows = slice(0, len(heights))
        residual = (beta - lam) * nested.values[rows] - (u_lam.values - u_beta.values[rows])
        self.assertLess(np.abs(residual).max(), 1e-6)

    def test_argument_errors(self):
        f = self.top_datum()
        with self.assertRaises(ImproperlyConfigured):
            resolvent_quadrature(self.params, f, -1.0, pad=0)
        with self.assertRaises(ImproperlyConfigured):
            resolvent_quadrature(self.params, f, 0.0, killed=False, pad=0)
        with self.assertRaises(TailBoundExceeded):
            resolvent_quadrature(self.params, f, 1.0, horizon=1.0, pad=0)
        with self.assertRaises(ImproperlyConfigured):
            resolvent_apply(self.params, f, 1.0, method="series")
        with self.assertRaises(ImproperlyConfigured):
            resolvent_monte_carlo(self.params, f, 1.0, [SpaceTimePoint((0.0,), 1.0)], 10, RngStream(0), route="walk")

    def test_monte_carlo_matches_quadrature(self):
        boundary = GridFunction.centered(1, 3.0, 0.1, bump)
        heights = np.linspace(0.0, 8.0, 81)
        profile = heights * np.exp(-((heights - 1.0) ** 2))
        f = boundary.with_values(profile[:, None] * boundary.values[None, :], heights)
        u = resolvent_apply(self.params, f, 1.0, killed=True)
        point = SpaceTimePoint((0.0,), 1.0)
        quadrature = float(u.interpolator()([[1.0, 0.0]])[0])
        [estimate] = resolvent_apply(
            self.params, f, 1.0, method="monte-carlo", killed=True, points=[point], n=4000, rng=RngStream(15)
        )
        self.assertTrue(estimate.covers(quadrature, width=4.0))
