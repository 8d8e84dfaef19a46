import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from exactlump.cli import main, parse_grid
from exactlump.problemfile import load, problem_hash
from exactlump.systems import BUILTINS


def emit(tmp_path, name):
    path = tmp_path / f"{name}.toml"
    assert main(["examples", name, "--out", str(path)]) == 0
    return path


def run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], np.array(rows[1:], dtype=float)


# --------------------------------------------------------------------------
# examples


def test_examples_list(capsys):
    code, out, _ = run(capsys, ["examples", "--list"])
    assert code == 0
    assert out.split() == list(BUILTINS)


def test_examples_emit_round_trips(tmp_path, capsys):
    code, out, _ = run(capsys, ["examples", "logistic3"])
    assert code == 0 and out.startswith('name = "logistic3"')
    path = tmp_path / "l.toml"
    path.write_text(out)
    assert problem_hash(load(path)) == problem_hash(load(emit(tmp_path, "logistic3")))


def test_examples_unknown_name(capsys):
    code, _, err = run(capsys, ["examples", "nope"])
    assert code == 1 and "unknown built-in" in err
    code, _, err = run(capsys, ["examples"])
    assert code == 1


# --------------------------------------------------------------------------
# check


def test_check_lumpable_exit_zero(tmp_path, capsys):
    code, out, _ = run(capsys, ["check", str(emit(tmp_path, "logistic3")), "--samples", "50"])
    assert code == 0
    doc = json.loads(out)
    assert doc["verdict"] == "lumpable"
    assert doc["schema"] == 1 and doc["tool"] == "exactlump"
    assert doc["samples"] == 50 and doc["seed"] == 0
    assert doc["problem"] == {"name": "logistic3", "n": 3, "m": 1}
    assert doc["witnesses"] == {}
    assert doc["flow_commutation"]["status"] == "pass"


def test_check_hopf_from_emitted_file(tmp_path, capsys):
    code, out, _ = run(capsys, ["check", str(emit(tmp_path, "hopf")), "--samples", "40", "--no-flow"])
    assert code == 0
    assert json.loads(out)["flow_commutation"] is None


def test_check_not_lumpable_exit_two_with_witnesses(tmp_path, capsys):
    code, out, _ = run(capsys, ["check", str(emit(tmp_path, "linear_shear"))])
    assert code == 2
    doc = json.loads(out)
    assert doc["verdict"] == "not-lumpable"
    assert set(doc["witnesses"]) == {
        "kernel_inclusion",
        "rank_condition",
        "wedge_condition",
        "fiber_constancy",
        "flow_commutation",
    }
    assert doc["witnesses"]["kernel_inclusion"]["witness"] is not None
    kernel = doc["points"][0]["kernel_inclusion"]
    assert kernel["residual"] == pytest.approx(0.5) and kernel["raw_residual"] == pytest.approx(1.0)


def test_check_inconclusive_exit_three(tmp_path, capsys):
    path = emit(tmp_path, "linear_shear")
    text = path.read_text().replace('"(1.0 * x2)"', '"(3e-08 * x2)"')
    path.write_text(text)
    code, out, _ = run(capsys, ["check", str(path), "--samples", "20"])
    assert code == 3 and json.loads(out)["verdict"] == "inconclusive"


def test_check_overrides_and_out_file(tmp_path, capsys):
    path = emit(tmp_path, "linear_identity")
    report = tmp_path / "r.json"
    code, out, _ = run(capsys, ["check", str(path), "--samples", "7", "--seed", "3", "--tol", "1e-6", "--out", str(report)])
    assert code == 0 and out.strip() == "verdict: lumpable"
    doc = json.loads(report.read_text())
    assert doc["samples"] == 7 and doc["seed"] == 3
    assert doc["tolerances"]["rank_tol"] == 1e-6 and doc["tolerances"]["residual_tol"] == 1e-6
    assert len(doc["points"]) == 7


def test_check_is_deterministic(tmp_path, capsys):
    path = str(emit(tmp_path, "geodesic_sphere"))
    first = run(capsys, ["check", path, "--samples", "30"])
    second = run(capsys, ["check", path, "--samples", "30"])
    assert first == second


def test_check_report_is_strict_json(tmp_path, capsys):
    _, out, _ = run(capsys, ["check", str(emit(tmp_path, "linear_shear")), "--no-flow"])
    json.loads(out, parse_constant=lambda c: pytest.fail(f"non-standard constant {c}"))


def test_missing_file_exit_one(tmp_path, capsys):
    code, out, err = run(capsys, ["check", str(tmp_path / "missing.toml")])
    assert code == 1 and out == "" and "error:" in err


def test_bad_file_reports_position(tmp_path, capsys):
    path = emit(tmp_path, "logistic3")
    path.write_text(path.read_text().replace('"(x1 * (1.0', '"(x1 ** (1.0', 1))
    code, out, err = run(capsys, ["check", str(path)])
    assert code == 1 and out == ""
    assert f"{path}:16:" in err


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["check"])
    assert info.value.code == 1


# --------------------------------------------------------------------------
# reduce


def test_parse_grid():
    np.testing.assert_array_equal(parse_grid("0:0.5:1", 1)[:, 0], [0.0, 0.5, 1.0])
    assert parse_grid("0:1:2, 0:1:1", 2).shape == (6, 2)
    assert len(parse_grid("0:0.1:2", 1)) == 21
    for bad in ("0:0:1", "1:0.1:0", "a:b:c", "0:1"):
        with pytest.raises(Exception):
            parse_grid(bad, 1)
    with pytest.raises(Exception):
        parse_grid("0:1:2", 2)


def test_reduce_logistic_grid(tmp_path, capsys):
    code, out, err = run(capsys, ["reduce", str(emit(tmp_path, "logistic3")), "--grid", "0:0.1:2"])
    assert code == 0
    header, table = read_csv(out)
    assert header == ["y1", "v1"]
    assert len(table) == 21
    np.testing.assert_allclose(table[:, 1], table[:, 0] * (1 - table[:, 0]), atol=1e-8)
    assert "21 rows, 0 fiber-solve failures" in err


def test_reduce_points_file_and_failures(tmp_path, capsys):
    points = tmp_path / "ys.csv"
    points.write_text("y1,y2,y3\n0,0,1\n0.6,0,0.8\n0,0,3\n")
    out_csv = tmp_path / "v.csv"
    code, _, err = run(capsys, ["reduce", str(emit(tmp_path, "hopf")), "--points", str(points), "--out", str(out_csv)])
    assert code == 0
    header, table = read_csv(out_csv.read_text())
    assert header == ["y1", "y2", "y3", "v1", "v2", "v3"]
    c = np.array([1.0, 0.0, 0.0])
    np.testing.assert_allclose(table[:2, 3:], 2 * np.cross(c, table[:2, :3]), atol=1e-8)
    assert np.isnan(table[2, 3:]).all()
    assert "1 fiber-solve failures" in err


def test_reduce_refuses_non_lumpable(tmp_path, capsys):
    path = str(emit(tmp_path, "linear_shear"))
    code, out, err = run(capsys, ["reduce", path, "--grid", "0:0.5:1"])
    assert code == 1 and out == "" and "--force" in err
    code, out, _ = run(capsys, ["reduce", path, "--grid", "0:0.5:1", "--force"])
    assert code == 0 and len(out.splitlines()) == 4


def test_reduce_bad_points_file(tmp_path, capsys):
    points = tmp_path / "ys.csv"
    points.write_text("0.1\nabc\n")
    code, _, err = run(capsys, ["reduce", str(emit(tmp_path, "linear_identity")), "--points", str(points)])
    assert code == 1 and "non-numeric" in err


# --------------------------------------------------------------------------
# flow-compare


def test_flow_compare_logistic(tmp_path, capsys):
    code, out, err = run(capsys, ["flow-compare", str(emit(tmp_path, "logistic3")), "--dt", "0.25"])
    assert code == 0
    header, table = read_csv(out)
    assert header == ["t", "error"]
    np.testing.assert_allclose(table[:, 0], [0, 0.25, 0.5, 0.75, 1.0])
    assert table[:, 1].max() < 1e-6
    assert err.startswith("max error")


def test_flow_compare_shear_shows_divergence(tmp_path, capsys):
    out_csv = tmp_path / "e.csv"
    code, out, _ = run(capsys, ["flow-compare", str(emit(tmp_path, "linear_shear")), "--out", str(out_csv)])
    assert code == 0 and out.startswith("max error")
    _, table = read_csv(out_csv.read_text())
    assert table[-1, 0] == 0.5 and table[-1, 1] > 0.1


def test_flow_compare_needs_initial_state(tmp_path, capsys):
    path = emit(tmp_path, "logistic3")
    code, _, err = run(capsys, ["flow-compare", str(path), "--x0", "1,2"])
    assert code == 1 and "--x0 needs 3" in err
    code, _, _ = run(capsys, ["flow-compare", str(path), "--dt", "-1"])
    assert code == 1


def test_module_entry_point(tmp_path):
    path = emit(tmp_path, "linear_shear")
    proc = subprocess.run(
        [sys.executable, "-m", "exactlump", "check", str(path), "--no-flow", "--samples", "5"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2
    assert json.loads(proc.stdout)["verdict"] == "not-lumpable"
