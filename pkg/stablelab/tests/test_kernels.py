import math
from unittest import TestCase, mock

import numpy as np
from scipy import integrate, special

from stablelab.exceptions import InsufficientPadding
from stablelab.kernels import (
    GridFunction,
    KernelTable,
    ProductSemigroup,
    apply_heat_semigroup_product,
    cauchy_density,
    density_envelope_ratio,
    envelope_constants,
    evaluate_extension,
    exit_cdf_mu,
    exit_cdf_mu_quadrature,
    exit_density_mu,
    exit_mass_mu,
    extend_grid,
    extension_stack,
    harmonic_kernel,
    killed_heat_kernel,
    lattice_extension,
    padding_cells,
    stable_density,
    stable_density_mixture,
)
from stablelab.stable_core import StableParams


def bump(*axes):
    return np.exp(-sum(a * a for a in axes))


class TestStableDensity(TestCase):

    def test_cauchy_oracle(self):
        for d in (1, 2, 3):
            params = StableParams(d=d, alpha=1.0)
            for s, r in ((1.0, 0.0), (0.5, 0.3), (2.0, 3.0), (1.0, 12.0)):
                self.assertAlmostEqual(stable_density(params, s, r), cauchy_density(d, s, r), delta=1e-6)

    def test_gaussian_mixture_oracle(self):
        for alpha in (0.5, 1.5):
            params = StableParams(d=1, alpha=alpha)
            for r in (0.0, 0.7, 2.5):
                self.assertAlmostEqual(
                    stable_density(params, 1.0, r), stable_density_mixture(params, 1.0, r), delta=1e-5
                )

    def test_scaling(self):
        params = StableParams(d=2, alpha=1.2)
        s = 3.0
        scaled = s ** (-2 / 1.2) * stable_density(params, 1.0, 0.8 * s ** (-1 / 1.2))
        self.assertAlmostEqual(stable_density(params, s, 0.8), scaled, delta=1e-7)

    def test_envelope_ratio(self):
        params = StableParams(d=1, alpha=1.0)
        self.assertAlmostEqual(density_envelope_ratio(params, 2.0, 0.0), 1.0 / math.pi, delta=1e-6)
        c1, c2 = envelope_constants(params, [0.5, 1.0, 4.0], [0.0, 1.0, 10.0, 100.0])
        self.assertTrue(0.0 < c1 <= c2)
        self.assertAlmostEqual(c2, 1.0 / math.pi, delta=1e-6)
        self.assertLess(c2, 1.0)

    def test_rejects_nonpositive_time(self):
        params = StableParams(d=1, alpha=1.0)
        with self.assertRaises(ValueError):
            stable_density(params, 0.0, 1.0)
        with self.assertRaises(ValueError):
            stable_density(params, 1.0, -1.0)


class TestExitLaw(TestCase):

    def test_closed_form_cdf(self):
        for t, S in ((1.0, 0.5), (2.0, 3.0), (0.3, 0.01)):
            self.assertAlmostEqual(exit_cdf_mu(t, S), special.erfc(t / (2.0 * math.sqrt(S))), places=14)
            self.assertAlmostEqual(exit_cdf_mu_quadrature(t, S), exit_cdf_mu(t, S), delta=1e-8)

    def test_total_mass(self):
        for t in (0.1, 1.0, 5.0):
            self.assertAlmostEqual(exit_mass_mu(t), 1.0, delta=1e-8)

    def test_density_domain(self):
        with self.assertRaises(ValueError):
            exit_density_mu(0.0, 1.0)
        self.assertEqual(exit_cdf_mu(1.0, 0.0), 0.0)

    def test_harmonic_kernel_routes_agree(self):
        params = StableParams(d=1, alpha=1.0)
        for r in (0.0, 1.0):
            self.assertAlmostEqual(
                harmonic_kernel(params, 1.0, r, method="mixture"),
                harmonic_kernel(params, 1.0, r, method="stable"),
                delta=1e-5,
            )

    def test_harmonic_kernel_method(self):
        with self.assertRaises(ValueError):
            harmonic_kernel(StableParams(d=1, alpha=1.0), 1.0, 0.0, method="fourier")


class TestExtension(TestCase):

    def setUp(self):
        self.params = StableParams(d=1, alpha=1.0)
        self.grid = GridFunction.centered(1, 2.0, 0.25, bump)

    def test_constant_is_harmonic_on_torus(self):
        ones = GridFunction.centered(2, 1.0, 0.25, lambda x, y: np.ones_like(x))
        extended = extend_grid(ones, StableParams(d=2, alpha=1.4), 0.7, pad=0)
        np.testing.assert_allclose(extended.values, 1.0, atol=1e-12)

    def test_semigroup_property(self):
        first = extend_grid(extend_grid(self.grid, self.params, 0.3, pad=0), self.params, 0.5, pad=0)
        both = extend_grid(self.grid, self.params, 0.8, pad=0)
        np.testing.assert_allclose(first.values, both.values, atol=1e-12)

    def test_mass_is_preserved_on_padded_lattice(self):
        extended = extend_grid(self.grid, self.params, 2.0, pad=20, crop=False)
        self.assertAlmostEqual(extended.riemann_sum(), self.grid.riemann_sum(), places=10)
        self.assertEqual(extended.extent, (17 + 40,))

    def test_stack_matches_single_heights(self):
        stack = extension_stack(self.grid, self.params, [0.5, 1.0], pad=8)
        np.testing.assert_allclose(stack.values[1], extend_grid(self.grid, self.params, 1.0, pad=8).values)

    def test_point_evaluation_matches_lattice(self):
        extended = extend_grid(self.grid, self.params, 0.4, pad=4)
        xs = self.grid.points()
        values = evaluate_extension(self.grid, self.params, xs, np.full(len(xs), 0.4), pad=4)
        np.testing.assert_allclose(values, extended.values, atol=1e-10)

    def test_lattice_sum_matches_spectral(self):
        params = StableParams(d=1, alpha=1.5)
        f = GridFunction.centered(1, 3.0, 0.1, bump)
        xs = np.array([[0.0], [0.37], [1.2]])
        ts = [1.0, 1.0, 2.0]
        spectral = evaluate_extension(f, params, xs, ts, pad=7000)
        np.testing.assert_allclose(lattice_extension(f, params, xs, ts), spectral, atol=5e-5)

    def test_lattice_sum_of_zero_data(self):
        zero = GridFunction.centered(1, 1.0, 0.1)
        np.testing.assert_array_equal(lattice_extension(zero, self.params, [[0.0]], [1.0]), [0.0])

    def test_positive_heights_only(self):
        with self.assertRaises(ValueError):
            extension_stack(self.grid, self.params, [0.0, 1.0], pad=0)

    def test_padding_limit(self):
        limits = {"PAD_TOL": 1e-8, "MAX_PAD_CELLS": 4}
        with mock.patch("stablelab.kernels.get_setting", side_effect=limits.get):
            with self.assertRaises(InsufficientPadding) as ctx:
                padding_cells(StableParams(d=1, alpha=0.5), 10.0, 1.0, 0.1)
        self.assertGreater(ctx.exception.escaped_mass, 1e-8)

    def test_padding_for_zero_data(self):
        self.assertEqual(padding_cells(self.params, 1.0, 0.0, 0.1, tol=1e-8), 0)


class TestProductSemigroup(TestCase):

    def test_killed_matches_image_charge_kernel(self):
        heights = 0.05 * np.arange(161)
        column = np.exp(-4.0 * (heights - 6.5) ** 2)
        grid = GridFunction([-1.0], 0.25, column[:, None] * np.ones((1, 9)), heights)
        result = apply_heat_semigroup_product(grid, StableParams(d=1, alpha=1.3), 1.0, killed=True, pad=0)
        fine = np.linspace(0.0, 8.0, 4001)
        datum = np.exp(-4.0 * (fine - 6.5) ** 2)
        for k in (20, 100, 140, 150, 160):
            kernel = [killed_heat_kernel(heights[k], b, 1.0) for b in fine]
            expected = integrate.trapezoid(np.asarray(kernel) * datum, fine)
            np.testing.assert_allclose(result.values[k], expected, atol=1e-6)
        self.assertTrue(np.all(result.values[0] == 0.0))
        self.assertEqual(result.values.shape, grid.values.shape)

    def test_unkilled_gaussian_heat(self):
        heights = 0.1 * np.arange(101)
        column = np.exp(-((heights - 5.0) ** 2))
        grid = GridFunction([-1.0], 0.5, column[:, None] * np.ones((1, 5)), heights)
        s = 0.5
        result = apply_heat_semigroup_product(grid, StableParams(d=1, alpha=1.0), s, killed=False, pad=0)
        expected = (1 + 4 * s) ** -0.5 * np.exp(-((heights - 5.0) ** 2) / (1 + 4 * s))
        np.testing.assert_allclose(result.values, expected[:, None] * np.ones((1, 5)), atol=1e-6)

    def test_integrate_single_node_is_apply(self):
        heights = 0.2 * np.arange(11)
        values = np.outer(np.sin(heights), np.exp(-np.linspace(-1, 1, 9) ** 2))
        grid = GridFunction([-1.0], 0.25, values, heights)
        semigroup = ProductSemigroup(grid, StableParams(d=1, alpha=0.8), pad=3)
        np.testing.assert_allclose(
            semigroup.integrate([0.3], [2.0], 0.5).values,
            2.0 * math.exp(-0.15) * semigroup.apply(0.3).values,
            atol=1e-12,
        )

    def test_needs_uniform_heights_from_zero(self):
        values = np.zeros((3, 5))
        with self.assertRaises(ValueError):
            ProductSemigroup(GridFunction([0.0], 1.0, values, [0.0, 1.0, 3.0]), StableParams(1, 1.0), pad=0)
        with self.assertRaises(ValueError):
            ProductSemigroup(GridFunction([0.0], 1.0, values, [1.0, 2.0, 3.0]), StableParams(1, 1.0), pad=0)

    def test_killed_heat_kernel_vanishes_at_boundary(self):
        self.assertEqual(killed_heat_kernel(0.0, 1.0, 0.5), 0.0)
        self.assertAlmostEqual(killed_heat_kernel(1.0, 2.0, 0.5), killed_heat_kernel(2.0, 1.0, 0.5))


class TestInterchange(TestCase):

    def test_grid_csv(self):
        grid = GridFunction.centered(2, 0.5, 0.25, lambda x, y: x + 10 * y)
        restored = GridFunction.from_csv(grid.to_csv())
        np.testing.assert_array_equal(restored.values, grid.values)
        np.testing.assert_array_equal(restored.origin, grid.origin)

    def test_grid_bytes_with_heights(self):
        grid = GridFunction([0.0], 0.5, np.arange(6.0).reshape(2, 3), [0.5, 1.5])
        restored = GridFunction.from_bytes(grid.to_bytes())
        np.testing.assert_array_equal(restored.values, grid.values)
        np.testing.assert_array_equal(restored.heights, grid.heights)

    def test_crop_and_interpolate(self):
        grid = GridFunction.centered(1, 1.0, 0.25, lambda x: 2.0 * x + 1.0)
        cropped = grid.crop([2], [3])
        np.testing.assert_allclose(cropped.axes()[0], [-0.5, -0.25, 0.0])
        np.testing.assert_allclose(cropped.values, [0.0, 0.5, 1.0])
        interpolate = grid.interpolator()
        np.testing.assert_allclose(interpolate(np.array([[0.1], [0.6], [5.0]])), [1.2, 2.2, 0.0])

    def test_bad_magic(self):
        with self.assertRaises(ValueError):
            GridFunction.from_bytes(b"NOTAGRID" + bytes(32))

    @mock.patch("stablelab.kernels.info")
    def test_kernel_table(self, mock_info):
        params = StableParams(d=1, alpha=1.0)
        table = KernelTable.build(params, [0.5, 1.0, 2.0], [0.0, 0.5, 1.0, 2.0])
        self.assertAlmostEqual(float(table.interpolate(1.0, 0.5)), cauchy_density(1, 1.0, 0.5), delta=1e-6)
        self.assertIs(KernelTable.build(params, [0.5, 1.0, 2.0], [0.0, 0.5, 1.0, 2.0]), table)
        restored = KernelTable.from_csv(table.to_csv())
        np.testing.assert_array_equal(restored.values, table.values)
        self.assertGreater(table.accuracy, 0.0)
