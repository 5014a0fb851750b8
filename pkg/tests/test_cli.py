import json
import os
import subprocess
import sys

import pytest

from duality_lab.cli import console_main
from duality_lab.errors import ValidationError
from duality_lab.reporting import CheckRow, RunReport, render
from duality_lab.scenarios import list_scenarios

FAST_CONFIG = """
scenario = "static-gaussian"
seed = 34
n_instances = 5
tolerance = 1e-10
"""

# Valid structure, hopeless tolerance: every run must fail its check.
FAILING_CONFIG = FAST_CONFIG.replace("1e-10", "0.0")

DIVERGING_CONFIG = """
scenario = "lg-duality"
seed = 1

probes = [[1.0]]

[model]
a_mat = [[3000.0]]
h_mat = [[1.0]]
sigma = [[1.0]]
r_cov = [[1.0]]
m0 = [0.0]
sigma0 = [[1.0]]

[grid]
t1 = 1.0
n_steps = 1000

[fine_grid]
n_steps = 2000

[mc]
n_paths = 100

[[controls]]
name = "zero"
kind = "zero"
"""


def write_config(tmp_path, text, name="scenario.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run_cli(config, out):
    return console_main(["run", "--config", config, "--out", str(out)])


class TestRender:
    def test_float_round_trip(self):
        for value in (0.1, 1.0 / 3.0, 2.0 ** -52, -1.5e300):
            assert float(render(value)) == value

    def test_bool_and_int(self):
        assert render(True) == "true"
        assert render(False) == "false"
        assert render(7) == "7"


class TestRunReport:
    def test_verdict_is_conjunction(self):
        good = CheckRow("a", 0.0, 0.0, 0.0, True)
        bad = CheckRow("b", 0.0, 1.0, 0.0, False)
        assert RunReport("s", "d", 1, (good,), 0.0, ()).verdict
        assert not RunReport("s", "d", 1, (good, bad), 0.0, ()).verdict

    def test_rows_must_be_check_rows(self):
        with pytest.raises(ValidationError):
            RunReport("s", "d", 1, ("not a row",), 0.0, ())


class TestExitCodes:
    def test_pass_run_exits_zero(self, tmp_path):
        config = write_config(tmp_path, FAST_CONFIG)
        out = tmp_path / "out"
        assert run_cli(config, out) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["verdict"] is True

    def test_check_failure_exits_one_but_writes(self, tmp_path):
        config = write_config(tmp_path, FAILING_CONFIG)
        out = tmp_path / "out"
        assert run_cli(config, out) == 1
        report = json.loads((out / "report.json").read_text())
        assert report["verdict"] is False
        summary = (out / "summary.txt").read_text()
        assert "overall: FAIL" in summary

    def test_missing_seed_exits_two_without_outputs(self, tmp_path):
        config = write_config(
            tmp_path, FAST_CONFIG.replace("seed = 34\n", "")
        )
        out = tmp_path / "out"
        assert run_cli(config, out) == 2
        assert not out.exists()

    def test_unknown_scenario_exits_two(self, tmp_path):
        config = write_config(
            tmp_path, FAST_CONFIG.replace("static-gaussian", "nope")
        )
        assert run_cli(config, tmp_path / "out") == 2

    def test_toml_syntax_error_exits_two(self, tmp_path):
        config = write_config(tmp_path, "scenario = [unclosed")
        assert run_cli(config, tmp_path / "out") == 2

    def test_missing_file_exits_two(self, tmp_path):
        assert run_cli(str(tmp_path / "absent.toml"), tmp_path / "out") == 2

    def test_bad_model_shape_exits_two_without_outputs(self, tmp_path):
        bad = DIVERGING_CONFIG.replace(
            "h_mat = [[1.0]]\nsigma", "h_mat = [[1.0], [2.0]]\nsigma", 1
        )
        config = write_config(tmp_path, bad)
        out = tmp_path / "out"
        assert run_cli(config, out) == 2
        assert not out.exists()

    def test_divergence_exits_three_without_outputs(self, tmp_path):
        config = write_config(tmp_path, DIVERGING_CONFIG)
        out = tmp_path / "out"
        assert run_cli(config, out) == 3
        assert not out.exists()


class TestConfigHandling:
    def test_json_config_accepted(self, tmp_path):
        data = {
            "scenario": "static-gaussian",
            "seed": 34,
            "n_instances": 5,
            "tolerance": 1e-10,
        }
        config = tmp_path / "scenario.json"
        config.write_text(json.dumps(data))
        out = tmp_path / "out"
        assert run_cli(str(config), out) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["seed"] == 34

    def test_seed_flag_overrides_config(self, tmp_path):
        config = write_config(tmp_path, FAST_CONFIG)
        out = tmp_path / "out"
        code = console_main(
            ["run", "--config", config, "--out", str(out), "--seed", "99"]
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["seed"] == 99

    def test_artifacts_list_matches_directory(self, tmp_path):
        config = write_config(tmp_path, FAST_CONFIG)
        out = tmp_path / "out"
        run_cli(config, out)
        report = json.loads((out / "report.json").read_text())
        assert sorted(report["artifacts"]) == sorted(os.listdir(out))

    def test_digest_tracks_file_bytes(self, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        run_cli(write_config(tmp_path, FAST_CONFIG, "one.toml"), out_a)
        run_cli(
            write_config(tmp_path, FAST_CONFIG + "\n# note\n", "two.toml"),
            out_b,
        )
        digest_a = json.loads((out_a / "report.json").read_text())["digest"]
        digest_b = json.loads((out_b / "report.json").read_text())["digest"]
        assert digest_a != digest_b


class TestThreads:
    def test_env_fallback_used(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DUALITY_LAB_THREADS", "2")
        config = write_config(tmp_path, FAST_CONFIG)
        assert run_cli(config, tmp_path / "out") == 0

    def test_env_invalid_exits_two(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DUALITY_LAB_THREADS", "many")
        config = write_config(tmp_path, FAST_CONFIG)
        out = tmp_path / "out"
        assert run_cli(config, out) == 2
        assert not out.exists()

    def test_flag_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DUALITY_LAB_THREADS", "many")
        config = write_config(tmp_path, FAST_CONFIG)
        code = console_main(
            ["run", "--config", config, "--out",
             str(tmp_path / "out"), "--threads", "1"]
        )
        assert code == 0


class TestListing:
    def test_nine_alphabetized_rows(self):
        rows = list_scenarios()
        names = [name for name, _, _ in rows]
        assert len(names) == 9
        assert names == sorted(names)

    def test_list_command_stable(self, capsys):
        assert console_main(["list"]) == 0
        first = capsys.readouterr().out
        assert console_main(["list"]) == 0
        assert capsys.readouterr().out == first
        for name, _, _ in list_scenarios():
            assert name in first

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "duality_lab.cli", "list"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "static-gaussian" in proc.stdout
