"""
Command line: configuration, experiment runs, manifests and the report.

    stablelab exit-time --config run.ini --seed 7 --out results
    stablelab report results/*/manifest.json

Values are taken, lowest precedence first, from the documented defaults,
the INI document (`[run]` plus one section named after the experiment),
environment variables STABLELAB_<KEY> and explicit flags.
"""
import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from django.core.exceptions import ImproperlyConfigured

from . import __version__, conf
from .exceptions import NumericalError
from .experiments import (
    NOT_RUN,
    STATEMENTS,
    ExperimentConfig,
    ExperimentOutput,
    GridSpec,
    TGridSpec,
    check_geometry,
    experiment_handlers,
    run_handler,
)
from .stable_core import StableParams

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_RUNTIME = 4

ENV_PREFIX = "STABLELAB_"

RUN_DEFAULTS = {
    "d": 1,
    "alpha": 1.0,
    "seed": 0,
    "n": 20000,
    "dt": 0.01,
    "spacing": 0.1,
    "half_width": 10.0,
    "t_min": 1e-3,
    "t_max": 10.0,
    "t_count": 60,
    "t_geometric": True,
    "out_dir": "results",
    "workers": 1,
    "tol": 1e-6,
    "dump_paths": 0,
}

RUN_HELP = {
    "d": "spatial dimension",
    "alpha": "stability index in (0, 2)",
    "seed": "64-bit master seed",
    "n": "paths per Monte Carlo estimate",
    "dt": "time step of stepped simulations",
    "spacing": "lattice spacing of boundary data",
    "half_width": "boundary lattice covers [-half_width, half_width]^d",
    "t_min": "smallest height of the G-function grid",
    "t_max": "largest height of the G-function grid",
    "t_count": "number of heights",
    "t_geometric": "geometric (true) or uniform height grid",
    "out_dir": "artifact directory",
    "workers": "thread pool size",
    "tol": "kernel tolerance and deterministic pass threshold",
    "dump_paths": "paths written to paths.csv by simulate",
}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _parse_value(text: str, default, where: str):
    text = str(text).strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(text)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [item.strip() for item in text.split(",") if item.strip()]
            if default and isinstance(default[0], tuple):
                return tuple(tuple(float(part) for part in item.split(":")) for item in items)
            return tuple(float(item) for item in items)
        return text
    except ValueError:
        raise ImproperlyConfigured(f"{where}: cannot read {text!r} as {type(default).__name__}.")


def _format_default(value, spec: str = "g") -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return ", ".join(":".join(format(v, spec) for v in item) for item in value)
        return ", ".join(format(v, spec) for v in value)
    if isinstance(value, float):
        return format(value, spec)
    return str(value)


def _check_domains(values: dict):
    def fail(key, message):
        raise ImproperlyConfigured(f"[run] {key}={values[key]!r} {message}")

    if not 0 <= values["seed"] < 2**64:
        fail("seed", "is not an unsigned 64-bit integer.")
    if values["n"] < 2:
        fail("n", "must be at least 2.")
    if not values["dt"] > 0:
        fail("dt", "must be positive.")
    if not values["spacing"] > 0:
        fail("spacing", "must be positive.")
    if not values["half_width"] >= values["spacing"]:
        fail("half_width", "must be at least one spacing.")
    if not values["t_min"] > 0:
        fail("t_min", "must be positive.")
    if not values["t_max"] > values["t_min"]:
        fail("t_max", "must exceed t_min.")
    if values["t_count"] < 3:
        fail("t_count", "must be at least 3.")
    if values["workers"] < 1:
        fail("workers", "must be at least 1.")
    if not values["tol"] > 0:
        fail("tol", "must be positive.")
    if values["dump_paths"] < 0:
        fail("dump_paths", "must be nonnegative.")


def validate_config(
    raw: str,
    experiment: Optional[str] = None,
    env: Optional[Mapping[str, str]] = None,
    flags: Optional[Mapping[str, object]] = None,
) -> ExperimentConfig:
    """
    Builds a validated ExperimentConfig from an INI document.

    Args:
        raw (str): The document. May be empty.
        experiment (str, optional): Experiment name; otherwise `experiment`
            in the [run] section.
        env (Mapping, optional): Environment (defaults to os.environ).
        flags (Mapping, optional): Explicit values (already typed); None
            entries are ignored.

    Raises:
        ImproperlyConfigured: Naming the section, key and violated domain.
        GeometryError: If the experiment's boxes leave the half-space.
    """
    env = os.environ if env is None else env
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(raw or "")
    except configparser.Error as exc:
        raise ImproperlyConfigured(f"config document does not parse: {exc}")

    run_section = dict(parser.items("run")) if parser.has_section("run") else {}
    experiment = experiment or run_section.pop("experiment", None)
    run_section.pop("experiment", None)
    if experiment not in experiment_handlers:
        raise ImproperlyConfigured(
            f"[run] experiment={experiment!r} is not registered. Your choices are {sorted(experiment_handlers)}"
        )
    for section in parser.sections():
        if section not in ("run", experiment):
            raise ImproperlyConfigured(f"[{section}] is not a section for experiment '{experiment}'.")

    values = dict(RUN_DEFAULTS)
    sources = {key: "default" for key in RUN_DEFAULTS}
    for key, text in run_section.items():
        if key not in RUN_DEFAULTS:
            raise ImproperlyConfigured(f"[run] {key} is not a run key. Your choices are {sorted(RUN_DEFAULTS)}")
        values[key] = _parse_value(text, RUN_DEFAULTS[key], f"[run] {key}")
        sources[key] = "config"
    for key in RUN_DEFAULTS:
        name = ENV_PREFIX + key.upper()
        if name in env:
            values[key] = _parse_value(env[name], RUN_DEFAULTS[key], name)
            sources[key] = "env"
    for key, value in flags.items():
        if key not in RUN_DEFAULTS:
            raise ImproperlyConfigured(f"--{key.replace('_', '-')} is not a run flag.")
        values[key] = value
        sources[key] = "flag"

    registered = experiment_handlers[experiment]
    sweep = dict(registered.defaults)
    if parser.has_section(experiment):
        for key, text in parser.items(experiment):
            if key not in sweep:
                raise ImproperlyConfigured(
                    f"[{experiment}] {key} is not a sweep key. Your choices are {sorted(sweep)}"
                )
            sweep[key] = _parse_value(text, registered.defaults[key], f"[{experiment}] {key}")
            sources[f"{experiment}.{key}"] = "config"

    params = StableParams(values["d"], values["alpha"])
    _check_domains(values)
    config = ExperimentConfig(
        experiment=experiment,
        params=params,
        seed=int(values["seed"]),
        n=int(values["n"]),
        dt=float(values["dt"]),
        grid=GridSpec(float(values["spacing"]), float(values["half_width"])),
        t_grid=TGridSpec(float(values["t_min"]), float(values["t_max"]), int(values["t_count"]), bool(values["t_geometric"])),
        sweep=sweep,
        out_dir=str(values["out_dir"]),
        workers=int(values["workers"]),
        tol=float(values["tol"]),
        dump_paths=int(values["dump_paths"]),
        sources=sources,
    )
    check_geometry(config)
    return config


def config_echo(config: ExperimentConfig) -> dict:
    """Flat, JSON-ready view of a config (the manifest's `config`)."""
    return {
        "experiment": config.experiment,
        "d": config.params.d,
        "alpha": config.params.alpha,
        "seed": config.seed,
        "n": config.n,
        "dt": config.dt,
        "spacing": config.grid.spacing,
        "half_width": config.grid.half_width,
        "t_min": config.t_grid.t_min,
        "t_max": config.t_grid.t_max,
        "t_count": config.t_grid.count,
        "t_geometric": config.t_grid.geometric,
        "out_dir": config.out_dir,
        "workers": config.workers,
        "tol": config.tol,
        "dump_paths": config.dump_paths,
        "sweep": {key: _jsonable(value) for key, value in config.sweep.items()},
    }


def config_from_echo(echo: Mapping, sources: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Rebuilds the config a manifest was produced from, value origins included."""
    experiment = echo["experiment"]
    defaults = experiment_handlers[experiment].defaults
    sweep = {}
    for key, value in echo.get("sweep", {}).items():
        default = defaults[key]
        if isinstance(default, tuple):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        sweep[key] = value
    lines = ["[run]"]
    for key in RUN_DEFAULTS:
        lines.append(f"{key} = {_format_default(echo[key], '.17g')}")
    lines.append(f"[{experiment}]")
    for key, value in sweep.items():
        lines.append(f"{key} = {_format_default(value, '.17g')}")
    config = validate_config("\n".join(lines), experiment, env={})
    if sources is not None:
        config.sources = dict(sources)
    return config


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def _jsonable(value):
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return value


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def table_to_csv(rows: Sequence[dict]) -> str:
    """
    Comma-separated, header row, LF line endings, doubles with 17
    significant digits.
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    if not rows:
        return ""
    columns = list(rows[0])
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row[column]) for column in columns])
    return buffer.getvalue()


def summary_to_json(summary: dict) -> str:
    return json.dumps(_jsonable(summary), sort_keys=True, indent=2) + "\n"


@dataclass
class RunManifest:
    """
    Attributes:
        config (dict): config_echo of the run.
        sources (dict): Origin of every value (default, config, env, flag).
        version (str): stablelab version.
        wall_time (float): Seconds spent in the handler.
        checksums (dict): File name -> sha256 of its bytes.
        verdicts (dict): Statement key -> pass, fail or recorded.
    """

    config: dict
    sources: Dict[str, str]
    version: str
    wall_time: float
    checksums: Dict[str, str] = field(default_factory=dict)
    verdicts: Dict[str, str] = field(default_factory=dict)

    @property
    def experiment(self) -> str:
        return self.config["experiment"]

    @property
    def cell(self) -> tuple:
        return self.config["d"], self.config["alpha"]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        missing = {"config", "sources", "version", "wall_time"} - set(data)
        if missing:
            raise ImproperlyConfigured(f"manifest lacks {sorted(missing)}.")
        return cls(**data)


def render_artifacts(output: ExperimentOutput) -> Dict[str, str]:
    """File name -> text for every artifact of an experiment output."""
    files = {f"{name}.csv": table_to_csv(rows) for name, rows in output.tables.items()}
    files["summary.json"] = summary_to_json({"summary": output.summary, "verdicts": output.verdicts})
    files.update(output.extra_files)
    return files


def run_experiment(config: ExperimentConfig, write: bool = True) -> RunManifest:
    """
    Runs the experiment and writes its CSV/JSON artifacts plus manifest.json
    under <out_dir>/<experiment>/.
    """
    check_geometry(config)
    conf.update_settings({"WORKERS": config.workers, "KERNEL_ATOL": config.tol})
    started = time.perf_counter()
    output = run_handler(config)
    wall_time = time.perf_counter() - started

    files = render_artifacts(output)
    checksums = {name: hashlib.sha256(text.encode("utf-8")).hexdigest() for name, text in sorted(files.items())}
    manifest = RunManifest(config_echo(config), dict(config.sources), __version__, wall_time, checksums, dict(output.verdicts))
    if write:
        directory = os.path.join(config.out_dir, config.experiment)
        os.makedirs(directory, exist_ok=True)
        for name, text in files.items():
            with open(os.path.join(directory, name), "w", encoding="utf-8", newline="") as stream:
                stream.write(text)
        with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8", newline="") as stream:
            stream.write(manifest.to_json())
        conf.info(f"Wrote {len(files)} artifacts to {directory}")
    return manifest


def emit_report(manifests: Sequence[RunManifest]) -> str:
    """
    One CSV row per statement and (d, alpha) cell: statement, description,
    experiment, d, alpha, verdict. Statements whose experiment has no
    manifest for a cell are marked "not run".

    Raises:
        ImproperlyConfigured: If the manifests come from different versions
            or disagree on the configuration of one experiment in one cell.
    """
    if not manifests:
        raise ImproperlyConfigured("report needs at least one manifest.")
    versions = {m.version for m in manifests}
    if len(versions) > 1:
        raise ImproperlyConfigured(f"incompatible manifests: versions {sorted(versions)} differ.")
    by_key: Dict[tuple, RunManifest] = {}
    for manifest in manifests:
        key = (manifest.cell, manifest.experiment)
        previous = by_key.get(key)
        if previous is not None and previous.config != manifest.config:
            raise ImproperlyConfigured(
                f"incompatible manifests: two {manifest.experiment} runs for d={manifest.cell[0]}, "
                f"alpha={manifest.cell[1]:g} with different parameters."
            )
        by_key[key] = manifest

    rows = []
    for cell in sorted({m.cell for m in manifests}):
        for key, description, experiment in STATEMENTS:
            manifest = by_key.get((cell, experiment))
            verdict = NOT_RUN if manifest is None else manifest.verdicts.get(key, NOT_RUN)
            rows.append(
                {
                    "statement": key,
                    "description": description,
                    "experiment": experiment,
                    "d": cell[0],
                    "alpha": cell[1],
                    "verdict": verdict,
                }
            )
    return table_to_csv(rows)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _epilog() -> str:
    lines = ["run keys ([run] section, STABLELAB_<KEY> environment variables):"]
    for key, default in RUN_DEFAULTS.items():
        lines.append(f"  {key:<12} {_format_default(default):<10} {RUN_HELP[key]}")
    lines.append("")
    lines.append("sweep keys ([<experiment>] section):")
    for name, experiment in experiment_handlers.items():
        lines.append(f"  [{name}]")
        for key, default in experiment.defaults.items():
            lines.append(f"    {key} = {_format_default(default)}")
    lines.append("")
    lines.append("exit status: 0 success, 2 invalid configuration, 3 numerical tolerance, 4 runtime failure")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI document with [run] and [<experiment>] sections")
    common.add_argument("--seed", type=int, help="64-bit master seed (default 0)")
    common.add_argument("--out", dest="out_dir", help="artifact directory (default results)")
    common.add_argument("--workers", type=int, help="thread pool size (default 1)")
    common.add_argument("--tol", type=float, help="kernel tolerance (default 1e-6)")
    common.add_argument("--d", type=int, help="spatial dimension (default 1)")
    common.add_argument("--alpha", type=float, help="stability index (default 1)")
    common.add_argument("--n", type=int, help="paths per estimate (default 20000)")
    common.add_argument("--dt", type=float, help="time step (default 0.01)")
    common.add_argument("--dump-paths", dest="dump_paths", type=int, help="paths dumped by simulate (default 0)")
    common.add_argument("--verbose", action="store_true", help="echo progress to stdout")

    parser = argparse.ArgumentParser(
        prog="stablelab",
        description="Numerical laboratory for the stable-times-Brownian product process.",
        epilog=_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"stablelab {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, experiment in experiment_handlers.items():
        commands.add_parser(name, parents=[common], help=experiment.help)
    report = commands.add_parser("report", help="summary table over manifests")
    report.add_argument("manifests", nargs="+", help="manifest.json files")
    report.add_argument("--out", dest="out_dir", help="also write report.csv here")
    return parser


FLAG_KEYS = ("seed", "out_dir", "workers", "tol", "d", "alpha", "n", "dt", "dump_paths")


def _run_report(args) -> int:
    manifests = []
    for path in args.manifests:
        with open(path, encoding="utf-8") as stream:
            manifests.append(RunManifest.from_json(stream.read()))
    document = emit_report(manifests)
    sys.stdout.write(document)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "report.csv"), "w", encoding="utf-8", newline="") as stream:
            stream.write(document)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "verbose", False):
        conf.echo_info = True
        logging.basicConfig(level=logging.INFO)
    try:
        if args.command == "report":
            return _run_report(args)
        raw = ""
        if args.config:
            with open(args.config, encoding="utf-8") as stream:
                raw = stream.read()
        flags = {key: getattr(args, key) for key in FLAG_KEYS}
        config = validate_config(raw, args.command, flags=flags)
        manifest = run_experiment(config)
    except ImproperlyConfigured as exc:
        conf.error(f"Invalid configuration: {exc}")
        sys.stderr.write(f"stablelab: {exc}\n")
        return EXIT_VALIDATION
    except NumericalError as exc:
        conf.error(f"Numerical tolerance not met: {exc}")
        sys.stderr.write(f"stablelab: {exc}\n")
        return EXIT_NUMERIC
    except Exception as exc:
        conf.error(f"Run failed: {exc!r}")
        sys.stderr.write(f"stablelab: {exc!r}\n")
        return EXIT_RUNTIME
    for key, verdict in sorted(manifest.verdicts.items()):
        sys.stdout.write(f"{key}: {verdict}\n")
    return EXIT_OK
