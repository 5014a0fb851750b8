"""Run reports: per-check rows, JSON/CSV/summary emission.

Output files are written deterministically: floats are rendered with
repr (the shortest string that round-trips a 64-bit value), keys are
sorted, and nothing about the execution environment except the
wall-clock field enters report.json. Identical (config, seed) runs must
produce byte-identical CSVs and summaries at any thread count.
"""

import json
import os
from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class CheckRow:
    """One verdict row: what was checked, against what, and how closely."""

    name: str
    expected: object  # float for numeric checks, bool/str for agreements
    got: object
    tolerance: float  # numeric slack actually applied (0.0 for exact)
    verdict: bool


@dataclass(frozen=True)
class RunReport:
    """Everything one scenario execution produced."""

    scenario: str
    digest: str
    seed: int
    rows: tuple
    wall_clock_s: float
    artifacts: tuple  # file names written next to report.json

    def __post_init__(self):
        if not all(isinstance(row, CheckRow) for row in self.rows):
            raise ValidationError("rows must be CheckRow instances")

    @property
    def verdict(self):
        return all(row.verdict for row in self.rows)


def _scalar(value):
    """JSON-ready scalar with native-float repr semantics."""
    if isinstance(value, bool) or isinstance(value, (int, str)):
        return value
    return float(value)


def render(value):
    """Shortest round-trip text for a table cell."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, str)):
        return str(value)
    return repr(float(value))


def report_payload(report):
    rows = [
        {
            "name": row.name,
            "expected": _scalar(row.expected),
            "got": _scalar(row.got),
            "tolerance": float(row.tolerance),
            "verdict": bool(row.verdict),
        }
        for row in report.rows
    ]
    return {
        "scenario": report.scenario,
        "digest": report.digest,
        "seed": int(report.seed),
        "rows": rows,
        "verdict": report.verdict,
        "wall_clock_s": float(report.wall_clock_s),
        "artifacts": list(report.artifacts),
    }


def write_csv(path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(render(cell) for cell in row))
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def write_summary(path, report):
    lines = [f"scenario: {report.scenario}", f"seed: {report.seed}", ""]
    for row in report.rows:
        status = "PASS" if row.verdict else "FAIL"
        lines.append(
            f"[{status}] {row.name}: expected={render(row.expected)} "
            f"got={render(row.got)} tolerance={render(row.tolerance)}"
        )
    lines.append("")
    lines.append(f"overall: {'PASS' if report.verdict else 'FAIL'}")
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def write_outputs(out_dir, report, tables):
    """Write every table CSV, the summary, and report.json into out_dir.

    tables: list of (file name, column names, row iterable). The report's
    artifacts field must already list exactly these files plus the
    summary; the caller assembles it so report.json references every
    emitted file.
    """
    os.makedirs(out_dir, exist_ok=True)
    for name, columns, rows in tables:
        write_csv(os.path.join(out_dir, name), columns, rows)
    write_summary(os.path.join(out_dir, "summary.txt"), report)
    payload = report_payload(report)
    with open(os.path.join(out_dir, "report.json"), "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
