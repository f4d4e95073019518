import csv
import io
import json
import os
import tempfile
from unittest import TestCase, mock

from django.conf import settings
from django.core.exceptions import ImproperlyConfigured

from stablelab import __version__
from stablelab.cli import (
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_VALIDATION,
    RunManifest,
    config_echo,
    config_from_echo,
    emit_report,
    main,
    run_experiment,
    table_to_csv,
    validate_config,
)
from stablelab.exceptions import GeometryError, ToleranceNotReached
from stablelab.experiments import NOT_RUN, STATEMENTS, experiment_handlers


def manifest_for(experiment="kernel-check", d=1, alpha=1.0, version=__version__, verdicts=None, n=20000):
    config = {"experiment": experiment, "d": d, "alpha": alpha, "n": n}
    return RunManifest(config, {}, version, 0.5, {}, dict(verdicts or {}))


class TestValidateConfig(TestCase):

    def test_defaults(self):
        config = validate_config("", "exit-time", env={})
        self.assertEqual(config.params.d, 1)
        self.assertEqual(config.params.alpha, 1.0)
        self.assertEqual(config.seed, 0)
        self.assertEqual(config.n, 20000)
        self.assertEqual(config.grid.spacing, 0.1)
        self.assertEqual(config.sweep, experiment_handlers["exit-time"].defaults)
        self.assertEqual(config.sources["seed"], "default")

    def test_experiment_from_document(self):
        config = validate_config("[run]\nexperiment = phi\nd = 2\n", env={})
        self.assertEqual(config.experiment, "phi")
        self.assertEqual(config.params.d, 2)
        self.assertEqual(config.sources["d"], "config")

    def test_alpha_domain(self):
        with self.assertRaises(ImproperlyConfigured) as ctx:
            validate_config("[run]\nalpha = 2.5\n", "exit-time", env={})
        self.assertIn("alpha", str(ctx.exception))

    def test_unknown_keys_and_sections(self):
        with self.assertRaises(ImproperlyConfigured):
            validate_config("[run]\ncolour = red\n", "exit-time", env={})
        with self.assertRaises(ImproperlyConfigured):
            validate_config("[lp]\np_list = 1.5\n", "exit-time", env={})
        with self.assertRaises(ImproperlyConfigured):
            validate_config("[exit-time]\nwidth = 2\n", "exit-time", env={})
        with self.assertRaises(ImproperlyConfigured):
            validate_config("", "no-such-experiment", env={})

    def test_value_domains(self):
        for document in ("[run]\nn = 1\n", "[run]\ndt = 0\n", "[run]\nt_max = 0.0001\n", "[run]\nseed = -1\n"):
            with self.assertRaises(ImproperlyConfigured):
                validate_config(document, "exit-time", env={})
        with self.assertRaises(ImproperlyConfigured) as ctx:
            validate_config("", "exit-time", env={"STABLELAB_N": "many"})
        self.assertIn("STABLELAB_N", str(ctx.exception))

    def test_precedence(self):
        document = "[run]\nseed = 3\nworkers = 2\n"
        config = validate_config(document, "exit-time", env={"STABLELAB_SEED": "5"})
        self.assertEqual((config.seed, config.workers), (5, 2))
        self.assertEqual(config.sources["seed"], "env")
        self.assertEqual(config.sources["workers"], "config")
        config = validate_config(document, "exit-time", env={"STABLELAB_SEED": "5"}, flags={"seed": 9, "n": None})
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.sources["seed"], "flag")
        self.assertEqual(config.sources["n"], "default")

    def test_sweep_values(self):
        config = validate_config("[exit-time]\nradii = 0.5, 1, 2\n", "exit-time", env={})
        self.assertEqual(config.sweep["radii"], (0.5, 1.0, 2.0))
        self.assertEqual(config.sources["exit-time.radii"], "config")

    def test_harnack_box_below_boundary(self):
        with self.assertRaises(GeometryError):
            validate_config("[harnack]\ncenter_t = 0.1\n", "harnack", env={})

    def test_echo_round_trip(self):
        config = validate_config("[run]\nalpha = 1.3\nseed = 11\n", "kernel-check", env={})
        restored = config_from_echo(json.loads(json.dumps(config_echo(config))), config.sources)
        self.assertEqual(restored.params, config.params)
        self.assertEqual(restored.seed, 11)
        self.assertEqual(restored.grid, config.grid)
        self.assertEqual(restored.t_grid, config.t_grid)
        self.assertEqual(restored.sweep, config.sweep)
        self.assertEqual(restored.sources, config.sources)


class TestArtifacts(TestCase):

    def test_table_format(self):
        text = table_to_csv([{"a": 1, "b": 0.1, "ok": True}, {"a": 2, "b": 1.0 / 3.0, "ok": False}])
        self.assertEqual(
            text.splitlines(), ["a,b,ok", "1,0.10000000000000001,true", "2,0.33333333333333331,false"]
        )
        self.assertEqual(table_to_csv([]), "")

    def test_manifest_json(self):
        manifest = manifest_for(verdicts={"kernel": "pass"})
        restored = RunManifest.from_json(manifest.to_json())
        self.assertEqual(restored, manifest)
        self.assertEqual(restored.cell, (1, 1.0))
        with self.assertRaises(ImproperlyConfigured):
            RunManifest.from_json('{"config": {}}')


class TestRunExperiment(TestCase):

    def setUp(self):
        self.saved = getattr(settings, "STABLELAB_SETTINGS", {})

    def tearDown(self):
        settings.STABLELAB_SETTINGS = self.saved

    @mock.patch("stablelab.experiments.info")
    @mock.patch("stablelab.conf.info")
    def test_writes_artifacts(self, mock_conf_info, mock_info):
        with tempfile.TemporaryDirectory() as tmp:
            document = "[kernel-check]\ns_values = 1, 2\nr_values = 0, 1\nmu_probes = 0.5, 2\n"
            config = validate_config(document, "kernel-check", env={}, flags={"out_dir": tmp})
            manifest = run_experiment(config)
            directory = os.path.join(tmp, "kernel-check")
            written = sorted(os.listdir(directory))
            self.assertEqual(written, ["density.csv", "exit-law.csv", "manifest.json", "summary.json"])
            self.assertEqual(sorted(manifest.checksums), ["density.csv", "exit-law.csv", "summary.json"])
            with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as stream:
                self.assertEqual(RunManifest.from_json(stream.read()), manifest)
            with open(os.path.join(directory, "density.csv"), encoding="utf-8") as stream:
                self.assertEqual(len(list(csv.DictReader(stream))), 4)
        self.assertIn(manifest.verdicts["kernel"], ("pass", "fail"))
        self.assertEqual(manifest.sources["out_dir"], "flag")
        mock_conf_info.assert_called()
        mock_info.assert_called_once()


class TestReport(TestCase):

    def test_not_run_rows(self):
        report = emit_report([manifest_for(verdicts={"kernel": "pass"})])
        rows = list(csv.DictReader(io.StringIO(report)))
        self.assertEqual(len(rows), len(STATEMENTS))
        verdicts = {row["statement"]: row["verdict"] for row in rows}
        self.assertEqual(verdicts["kernel"], "pass")
        self.assertEqual(verdicts["harnack"], NOT_RUN)

    def test_one_block_per_cell(self):
        report = emit_report([manifest_for(), manifest_for(d=2)])
        rows = list(csv.DictReader(io.StringIO(report)))
        self.assertEqual(len(rows), 2 * len(STATEMENTS))
        self.assertEqual([rows[0]["d"], rows[-1]["d"]], ["1", "2"])

    def test_incompatible_manifests(self):
        with self.assertRaises(ImproperlyConfigured):
            emit_report([])
        with self.assertRaises(ImproperlyConfigured):
            emit_report([manifest_for(), manifest_for(version="0.0.1")])
        with self.assertRaises(ImproperlyConfigured):
            emit_report([manifest_for(), manifest_for(n=100)])
        emit_report([manifest_for(), manifest_for()])


@mock.patch("stablelab.conf.error")
class TestMain(TestCase):

    def run_main(self, argv):
        with mock.patch("sys.stdout", new_callable=io.StringIO) as stdout:
            with mock.patch("sys.stderr", new_callable=io.StringIO) as stderr:
                status = main(argv)
        return status, stdout.getvalue(), stderr.getvalue()

    def test_validation_status(self, mock_error):
        status, _, stderr = self.run_main(["exit-time", "--alpha", "2.5"])
        self.assertEqual(status, EXIT_VALIDATION)
        self.assertIn("alpha", stderr)
        mock_error.assert_called_once()

    @mock.patch("stablelab.cli.run_experiment")
    def test_numeric_status(self, mock_run, mock_error):
        mock_run.side_effect = ToleranceNotReached("quadrature stalled", 1e-3)
        status, _, _ = self.run_main(["kernel-check"])
        self.assertEqual(status, EXIT_NUMERIC)

    @mock.patch("stablelab.cli.run_experiment")
    def test_runtime_status(self, mock_run, mock_error):
        mock_run.side_effect = MemoryError()
        status, _, _ = self.run_main(["kernel-check"])
        self.assertEqual(status, EXIT_RUNTIME)

    @mock.patch("stablelab.cli.run_experiment")
    def test_prints_verdicts(self, mock_run, mock_error):
        mock_run.return_value = manifest_for(verdicts={"kernel": "pass"})
        status, stdout, _ = self.run_main(["kernel-check", "--seed", "4"])
        self.assertEqual(status, EXIT_OK)
        self.assertEqual(stdout, "kernel: pass\n")
        self.assertEqual(mock_run.call_args[0][0].seed, 4)
        mock_error.assert_not_called()

    def test_report_command(self, mock_error):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "manifest.json")
            with open(path, "w", encoding="utf-8") as stream:
                stream.write(manifest_for(verdicts={"kernel": "fail"}).to_json())
            status, stdout, _ = self.run_main(["report", path, "--out", tmp])
            self.assertTrue(os.path.exists(os.path.join(tmp, "report.csv")))
        self.assertEqual(status, EXIT_OK)
        self.assertTrue(stdout.startswith("statement,description,experiment,d,alpha,verdict\n"))
        self.assertIn("kernel,", stdout)
