import csv
import json
import re
import subprocess
import sys

import numpy as np
import pytest

from voltdiag.case_io import load_case, scale_load
from voltdiag.cli_report import (
    HIST_BIN,
    UsageError,
    compensation_histogram,
    emit_plot_data,
    main,
    parse_range,
    read_result_json,
    result_from_dict,
    result_to_dict,
)
from voltdiag.diagnosis import solve_vreg
from voltdiag.network_model import build_model
from conftest import TWO_BUS


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summary(text):
    return dict(re.findall(r"(\w+)=(\S+)", text.strip().splitlines()[-1]))


@pytest.fixture(scope="module")
def stressed(tmp_path_factory):
    out = tmp_path_factory.mktemp("solve15")
    code = main(["solve", "--case", "case30", "--mode", "vreg", "--load-factor", "1.5", "--out-dir", str(out)])
    return code, out


class TestSolve:
    def test_exit_and_files(self, stressed, capsys):
        code, out = stressed
        assert code == 0
        for name in ("result.json", "buses.csv", "voltages.csv", "compensation_hist.csv", "graph.csv", "nodes.csv"):
            assert (out / name).exists()

    def test_result_fields(self, stressed):
        _, out = stressed
        res = read_result_json(out / "result.json")
        assert res.status == "converged" and res.violations_after == []
        assert len(res.violations_before) >= 1

    def test_json_round_trip_exact(self, stressed):
        _, out = stressed
        data = json.loads((out / "result.json").read_text())
        res = result_from_dict(data)
        assert result_to_dict(res) == data
        assert json.dumps(result_to_dict(res)) == (out / "result.json").read_text()

    def test_bus_csv(self, stressed):
        _, out = stressed
        res = read_result_json(out / "result.json")
        table = rows(out / "buses.csv")
        assert list(table[0]) == ["bus", "v_mag", "v_ang_deg", "n_mag", "n_real", "n_imag", "violated_before"]
        assert len(table) == len(res.bus_ids)
        for r, v, n in zip(table, res.v, res.n):
            assert float(r["v_mag"]) == pytest.approx(abs(v), rel=1e-11)
            assert float(r["n_mag"]) == pytest.approx(abs(n), rel=1e-11, abs=1e-300)
        flagged = {int(r["bus"]) for r in table if r["violated_before"] == "1"}
        assert flagged == {b for b, _ in res.violations_before}

    def test_twelve_significant_digits(self, stressed):
        _, out = stressed
        for r in rows(out / "buses.csv"):
            for key in ("v_mag", "n_real"):
                digits = re.sub(r"e.*$", "", r[key]).replace("-", "").replace(".", "").lstrip("0")
                assert len(digits) <= 12

    def test_summary_matches_voltage_file(self, tmp_path, capsys):
        code = main(["solve", "--case", "case30", "--load-factor", "1.6", "--out-dir", str(tmp_path)])
        line = summary(capsys.readouterr().out)
        assert code == 0 and line["status"] == "converged"
        before = after = 0
        res = read_result_json(tmp_path / "result.json")
        listed = {int(b) for b, _ in res.violations_before}
        model = build_model(scale_load(load_case("case30"), 1.6))
        free = {int(model.bus_ids[k]) for k in model.bounded_bus}
        for r in rows(tmp_path / "voltages.csv"):
            if int(r["bus"]) not in free:
                continue
            lo, hi = float(r["v_min"]), float(r["v_max"])
            vb, vr = float(r["v_baseline"]), float(r["v_result"])
            before += not (lo - 1e-6 <= vb <= hi + 1e-6)
            after += not (lo - 1e-6 <= vr <= hi + 1e-6)
        assert int(line["violations_before"]) == before == len(listed)
        assert int(line["violations_after"]) == after == 0
        assert int(line["support"]) == len(res.support)

    def test_powerflow_blackout(self, tmp_path, capsys):
        code = main(["solve", "--case", "case30", "--mode", "powerflow", "--load-factor", "4.3", "--out-dir", str(tmp_path)])
        assert code == 2
        assert summary(capsys.readouterr().out)["status"] == "diverged"

    def test_missing_file(self, tmp_path, capsys):
        assert main(["solve", "--case", str(tmp_path / "nope.m"), "--out-dir", str(tmp_path)]) == 1

    def test_bad_flag_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["solve", "--case", "case30", "--mode", "fastest"])
        assert err.value.code == 1

    def test_json_case_and_overrides(self, tmp_path, capsys):
        src = tmp_path / "two.m"
        src.write_text(TWO_BUS)
        code = main(
            ["solve", "--case", str(src), "--mode", "vreg", "--vmin", "0.97", "--vmax", "1.03", "--load-factor", "3",
             "--placement", "pq_only", "--reactive-only", "--out-dir", str(tmp_path)]
        )
        assert code == 0
        res = read_result_json(tmp_path / "result.json")
        assert np.all(res.v_min == 0.97) and np.all(res.v_max == 1.03)
        assert abs(res.v[1]) >= 0.97 - 1e-6
        assert np.max(np.abs(res.n_real)) < 1e-4

    def test_max_iters_forces_non_convergence(self, tmp_path, capsys):
        code = main(["solve", "--case", "case30", "--mode", "sparse", "--load-factor", "4.3", "--max-iters", "2",
                     "--out-dir", str(tmp_path)])
        assert code == 2


class TestSweep:
    def test_range_parsing(self):
        assert parse_range("1.4:1.6:0.05") == [1.4, 1.45, 1.5, 1.55, 1.6]
        assert parse_range("1.0:1.0:0.1") == [1.0]
        for bad in ("1:2:0", "1:2:-0.1", "2:1:0.1", "1:2", "a:b:c"):
            with pytest.raises(UsageError):
                parse_range(bad)

    def test_case30_sweep(self, tmp_path, capsys):
        code = main(["sweep", "--case", "case30", "--mode", "vreg", "--load-factors", "1.4:1.6:0.05",
                     "--jobs", "2", "--out-dir", str(tmp_path)])
        assert code == 0
        table = rows(tmp_path / "sweep.csv")
        assert [float(r["load_factor"]) for r in table] == [1.4, 1.45, 1.5, 1.55, 1.6]
        assert all(r["status"] == "converged" and r["violations_after"] == "0" for r in table)
        assert list(table[0]) == [
            "load_factor", "mode", "status", "support_size", "violations_before",
            "violations_after", "inner_iterations", "subproblems", "wall_seconds",
        ]

    def test_parallel_matches_serial(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ["sweep", "--case", "case30", "--mode", "sparse", "--load-factors", "4.2:4.4:0.1"]
        assert main(args + ["--out-dir", str(a)]) == 0
        assert main(args + ["--jobs", "3", "--out-dir", str(b)]) == 0
        drop = lambda t: [{k: v for k, v in r.items() if k != "wall_seconds"} for r in t]
        assert drop(rows(a / "sweep.csv")) == drop(rows(b / "sweep.csv"))

    def test_single_row(self, tmp_path, capsys):
        assert main(["sweep", "--case", "case30", "--mode", "dense", "--load-factors", "1.0:1.0:0.1", "--out-dir", str(tmp_path)]) == 0
        assert len(rows(tmp_path / "sweep.csv")) == 1

    def test_zero_step(self, tmp_path, capsys):
        assert main(["sweep", "--case", "case30", "--load-factors", "1:2:0", "--out-dir", str(tmp_path)]) == 1
        assert "step" in capsys.readouterr().err


class TestPlotData:
    def test_empty_support(self, tmp_path, case30_model):
        res = solve_vreg(case30_model)
        emit_plot_data(res, tmp_path, case30_model.case)
        assert rows(tmp_path / "compensation_hist.csv") == []
        assert len(rows(tmp_path / "voltages.csv")) == 30
        assert len(rows(tmp_path / "graph.csv")) == len(case30_model.case.branches)
        nodes = rows(tmp_path / "nodes.csv")
        assert len(nodes) == 30 and all(r["x"] == "" and r["y"] == "" for r in nodes)

    def test_histogram_counts_support(self):
        model = build_model(scale_load(load_case("case30"), 4.3))
        res = solve_vreg(model)
        hist = compensation_histogram(res)
        assert sum(c for _, _, c in hist) == len(res.support)
        for lo, hi, _ in hist:
            assert hi - lo == pytest.approx(HIST_BIN)
        index = {int(b): k for k, b in enumerate(res.bus_ids)}
        top = max(abs(res.n[index[b]]) for b in res.support)
        assert hist[-1][0] <= top < hist[-1][1]


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "voltdiag", "solve", "--case", "case30", "--mode", "dense", "--out-dir", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "status=converged" in proc.stdout
