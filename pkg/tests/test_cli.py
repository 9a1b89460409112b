import json
import os

import numpy as np
import pytest

from grainforge import cli


def run_cli(args):
    return cli.main(args)


class TestParser:
    def test_missing_config_usage_error(self, tmp_path, capsys):
        with pytest.raises(FileNotFoundError):
            run_cli(["run", str(tmp_path / "missing.toml"),
                     "--out", str(tmp_path / "o")])

    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit):
            run_cli([])

    def test_unknown_bench_rejected(self):
        with pytest.raises(SystemExit):
            run_cli(["bench", "nope"])


EMPTY_SCENARIO = """
[domain]
size = [1.0, 1.0, 1.0]
[solver]
step = 1e-4
[output]
fps = 10.0
[scenario]
name = "empty"
duration = 0.1
[[materials]]
name = "m"
E = 1e7
nu = 0.3
CoR = 0.5
mu = 0.3
Crr = 0.0
"""


class TestRun:
    def test_empty_scenario_success(self, tmp_path):
        cfg = tmp_path / "empty.toml"
        cfg.write_text(EMPTY_SCENARIO)
        out = tmp_path / "out"
        assert run_cli(["run", str(cfg), "--out", str(out), "--sync"]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["watchdog"] == "ok"
        assert (out / "frame_0001.csv").exists()

    def test_rerun_byte_identical(self, tmp_path):
        cfg = tmp_path / "empty.toml"
        cfg.write_text(EMPTY_SCENARIO.replace('"empty"', '"rerun"'))
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            run_cli(["run", str(cfg), "--out", str(out), "--sync", "--seed", "3"])
            outs.append((out / "frame_0001.csv").read_bytes())
        assert outs[0] == outs[1]


@pytest.mark.slow
class TestBenchSmoke:
    def test_incline_single_cell(self, tmp_path):
        out = tmp_path / "o"
        assert run_cli(["bench", "incline", "--mu", "0.25",
                        "--cr-grid", "0.2", "--alpha-grid", "25",
                        "--out", str(out)]) == 0
        text = (out / "incline_modes.csv").read_text()
        assert "sliding_rolling" in text

    def test_stacking_endpoints(self, tmp_path):
        out = tmp_path / "o"
        assert run_cli(["bench", "stacking", "--cr-grid", "0.3",
                        "--gap-grid", "0.02", "--max-mass", "0.1",
                        "--out", str(out)]) == 0
        text = (out / "stacking_critical_mass.csv").read_text()
        assert "cr,gap,critical_mass" in text

    def test_breakage_bond_count_small(self, tmp_path):
        out = tmp_path / "o"
        assert run_cli(["bench", "breakage", "--gamma-int", "1.1", "--full",
                        "--out", str(out)]) == 0
        stats = json.loads((out / "bond_stats.json").read_text())
        assert stats["count"] > 0
