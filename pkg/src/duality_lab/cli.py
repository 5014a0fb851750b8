"""Command-line entry point.

Two subcommands: `run` executes one scenario config and writes its
report files, `list` prints the scenario registry. The process exit code
classifies the outcome so automation can react: 0 all checks passed,
1 at least one check failed, 2 the config was malformed (nothing is
written), 3 the computation diverged numerically (nothing is written).
"""

import argparse
import hashlib
import json
import os
import sys
import time

from .errors import ConfigError, NumericalError, ValidationError
from .reporting import RunReport, write_outputs
from .scenarios import list_scenarios, parse_config, run_scenario

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - pre-3.11 interpreters
    import tomli as tomllib

EXIT_PASS = 0
EXIT_CHECK_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load_config_bytes(path):
    try:
        with open(path, "rb") as handle:
            return handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc


def _parse_config_bytes(blob, path):
    if path.endswith(".json"):
        try:
            return json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        return tomllib.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc


def _resolve_threads(option):
    if option is not None:
        value = option
    else:
        text = os.environ.get("DUALITY_LAB_THREADS")
        if text is None:
            return 1
        try:
            value = int(text)
        except ValueError:
            raise ConfigError(
                f"DUALITY_LAB_THREADS must be an integer, got {text!r}"
            )
    if value < 1:
        raise ConfigError("thread count must be at least 1")
    return value


def run(config_path, out_dir, seed=None, threads=None):
    """Execute one scenario file; returns the process exit code.

    Nothing is written to out_dir unless the scenario executed to
    completion, so a failed parse or a diverged run leaves no partial
    artifacts behind.
    """
    try:
        n_threads = _resolve_threads(threads)
        blob = _load_config_bytes(config_path)
        data = _parse_config_bytes(blob, config_path)
        cfg = parse_config(data, seed_override=seed)
        started = time.perf_counter()
        rows, tables = run_scenario(cfg, threads=n_threads)
        wall_clock = time.perf_counter() - started
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    report = RunReport(
        scenario=cfg.scenario,
        digest=hashlib.sha256(blob).hexdigest(),
        seed=cfg.seed,
        rows=tuple(rows),
        wall_clock_s=wall_clock,
        artifacts=tuple(
            [name for name, _, _ in tables] + ["summary.txt", "report.json"]
        ),
    )
    write_outputs(out_dir, report, tables)
    for row in report.rows:
        status = "PASS" if row.verdict else "FAIL"
        print(f"[{status}] {row.name}")
    print(f"overall: {'PASS' if report.verdict else 'FAIL'} ({out_dir})")
    return EXIT_PASS if report.verdict else EXIT_CHECK_FAIL


def _print_listing():
    rows = list_scenarios()
    name_w = max(len(name) for name, _, _ in rows)
    for name, description, required in rows:
        print(f"{name:<{name_w}}  {description}")
        print(f"{'':<{name_w}}  requires: {required}")
    return EXIT_PASS


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="duality-lab",
        description="Run estimation/control duality check scenarios.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    runner = sub.add_parser("run", help="execute one scenario config")
    runner.add_argument("--config", required=True, help="TOML or JSON file")
    runner.add_argument("--out", required=True, help="output directory")
    runner.add_argument(
        "--seed", type=int, default=None,
        help="override the seed pinned in the config",
    )
    runner.add_argument(
        "--threads", type=int, default=None,
        help="Monte-Carlo worker threads (default: DUALITY_LAB_THREADS or 1)",
    )
    sub.add_parser("list", help="list registered scenarios")
    return parser


def console_main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.command == "list":
        return _print_listing()
    return run(args.config, args.out, seed=args.seed, threads=args.threads)


if __name__ == "__main__":
    sys.exit(console_main())
