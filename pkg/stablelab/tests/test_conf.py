from unittest import TestCase, mock

from django.conf import settings
from django.core.exceptions import ImproperlyConfigured

from stablelab import conf
from stablelab.conf import DEFAULT_SETTINGS, get_setting, get_stablelab_settings, update_settings
from stablelab.exceptions import (
    GeometryError,
    InsufficientPadding,
    NumericalError,
    ToleranceNotReached,
    WindowTruncationError,
)
from stablelab.workers import ensemble_chunks, ordered_map


class TestSettings(TestCase):

    def setUp(self):
        self.saved = getattr(settings, "STABLELAB_SETTINGS", {})

    def tearDown(self):
        settings.STABLELAB_SETTINGS = self.saved

    def test_defaults_fill_missing_keys(self):
        settings.STABLELAB_SETTINGS = {"CHUNK_SIZE": 10}
        merged = get_stablelab_settings()
        self.assertEqual(merged["CHUNK_SIZE"], 10)
        self.assertEqual(merged["PAD_TOL"], DEFAULT_SETTINGS["PAD_TOL"])

    def test_unknown_key(self):
        settings.STABLELAB_SETTINGS = {"NOT_A_KEY": 1}
        with self.assertRaises(ImproperlyConfigured) as ctx:
            get_stablelab_settings()
        self.assertIn("NOT_A_KEY", str(ctx.exception))

    def test_wrong_type_names_key(self):
        settings.STABLELAB_SETTINGS = {"WORKERS": "four"}
        with self.assertRaises(ImproperlyConfigured) as ctx:
            get_stablelab_settings()
        self.assertIn("WORKERS", str(ctx.exception))

    def test_int_promoted_to_float(self):
        settings.STABLELAB_SETTINGS = {"PAD_TOL": 1}
        self.assertEqual(get_setting("PAD_TOL"), 1.0)

    def test_settings_must_be_dict(self):
        settings.STABLELAB_SETTINGS = [("WORKERS", 2)]
        with self.assertRaises(ImproperlyConfigured):
            get_stablelab_settings()

    def test_update_settings_validates_eagerly(self):
        settings.STABLELAB_SETTINGS = {}
        update_settings({"WORKERS": 3})
        self.assertEqual(get_setting("WORKERS"), 3)
        with self.assertRaises(ImproperlyConfigured):
            update_settings({"WORKERS": 2.5})

    @mock.patch("stablelab.conf.logger")
    def test_info_is_timestamped(self, mock_logger):
        conf.info("hello")
        message = mock_logger.info.call_args[0][0]
        self.assertTrue(message.startswith("["))
        self.assertTrue(message.endswith("] hello"))


class TestWorkers(TestCase):

    @mock.patch("stablelab.workers.info")
    def test_ordered_map_keeps_task_order(self, mock_info):
        tasks = list(range(50))
        result = ordered_map(lambda k: k * k, tasks, workers=4)
        self.assertEqual(result, [k * k for k in tasks])
        mock_info.assert_called_once()

    def test_ordered_map_serial(self):
        self.assertEqual(ordered_map(str, [1, 2], workers=1), ["1", "2"])

    def test_ensemble_chunks(self):
        self.assertEqual(ensemble_chunks(4500, 2000), [(0, 2000), (1, 2000), (2, 500)])
        self.assertEqual(ensemble_chunks(3, 2000), [(0, 3)])

    def test_ensemble_chunks_rejects_empty(self):
        with self.assertRaises(ValueError):
            ensemble_chunks(0)


class TestExceptions(TestCase):

    def test_hierarchy(self):
        self.assertTrue(issubclass(GeometryError, ImproperlyConfigured))
        self.assertTrue(issubclass(ToleranceNotReached, NumericalError))
        self.assertTrue(issubclass(NumericalError, ArithmeticError))

    def test_payloads(self):
        self.assertEqual(ToleranceNotReached("quad", 1e-3).achieved, 1e-3)
        self.assertEqual(InsufficientPadding("pad", 0.5).escaped_mass, 0.5)
        error = WindowTruncationError("edge", 2e-4)
        self.assertEqual(error.edge_contribution, 2e-4)
        self.assertIn("2.000e-04", str(error))
