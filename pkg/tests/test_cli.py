import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ffo import ParametricQp, random_qp
from ffo.cli import BENCH_COLUMNS, COMPARE_KEYS, RunConfig, main
from ffo.trainer import TRACE_COLUMNS


def _compare(tmp_path, *args):
    out = tmp_path / "cmp.json"
    code = main(["compare", *args, "-o", str(out)])
    return code, json.loads(out.read_text(encoding="utf-8"))


def test_compare_wall(tmp_path):
    code, doc = _compare(tmp_path, "--preset", "wall", "--a", "100", "--x", "0.9", "--delta", "1e-4")
    assert code == 0
    for key in ("grad_ffo", "grad_exact", "grad_proj", "grad_fd"):
        assert abs(doc[key][0] - 100.0) <= 1e-3
    assert doc["passed"] and doc["certified"]


def test_compare_circle_symmetry(tmp_path):
    code, doc = _compare(tmp_path, "--preset", "circle", "--x", "0.0")
    assert code == 0
    for key in ("grad_ffo", "grad_exact", "grad_proj", "grad_fd"):
        assert abs(doc[key][0]) <= 1e-6


def test_compare_random_qp(tmp_path):
    code, doc = _compare(tmp_path, "--preset", "random-qp", "--seed", "7", "--d", "8", "--m", "4")
    assert code == 0
    assert max(doc["errors"].values()) <= 20 * doc["delta"]


def test_compare_schema_is_stable(tmp_path):
    _, doc = _compare(tmp_path, "--preset", "wall", "--x", "0.5")
    assert set(COMPARE_KEYS) <= set(doc)
    assert sorted(doc["errors"]) == ["exact-fd", "exact-proj", "ffo-exact", "ffo-fd",
                                     "ffo-proj", "proj-fd"]
    text = (tmp_path / "cmp.json").read_text(encoding="utf-8")
    assert list(json.loads(text)) == sorted(doc)
    assert text.startswith("{\n  ")


def test_compare_degenerate_exit_codes(tmp_path):
    code, doc = _compare(tmp_path, "--preset", "wall", "--x", "1.0")
    assert code == 1
    assert doc["grad_exact"] is None and doc["notes"]
    assert main(["compare", "--preset", "wall", "--x", "1.0", "--strict",
                 "-o", str(tmp_path / "s.json")]) == 3


def test_compare_solver_failure(tmp_path):
    path = tmp_path / "bad.json"
    definition = ParametricQp(Q=[[1.0]], P=[[0.0]], q0=[0.0], G_ineq=[[1.0], [-1.0]],
                        h0=[-1.0, -1.0], H_x=[[0.0], [0.0]])
    doc = definition.to_dict()
    doc["x"] = [0.0]
    path.write_text(json.dumps(doc))
    assert main(["compare", "--problem", str(path), "-o", str(tmp_path / "o.json")]) == 2


def test_compare_loads_problem_file(tmp_path):
    pb = random_qp(seed=3, d=4, m=2, p=1, dim_x=2)
    data = pb.qp_at(np.zeros(2))
    rng = np.random.default_rng(0)
    definition = ParametricQp(Q=data.Q, P=rng.standard_normal((4, 2)), q0=data.q,
                        G_ineq=data.G, h0=data.h + 1.0, H_x=np.zeros((2, 2)),
                        A_eq=data.A, b0=data.b, B_x=np.zeros((1, 2)))
    path = tmp_path / "qp.json"
    path.write_text(definition.to_json())
    code, doc = _compare(tmp_path, "--problem", str(path), "--x", "0.1,0.2")
    assert code == 0
    assert doc["x"] == [0.1, 0.2]


def test_train_writes_trace(tmp_path):
    out = tmp_path / "trace.csv"
    code = main(["train", "dfl", "--steps", "5", "--oracle", "ffo", "--seed", "0", "-o", str(out)])
    rows = list(csv.DictReader(out.open(newline="")))
    assert code == 0
    assert len(rows) == 5
    assert tuple(rows[0]) == TRACE_COLUMNS
    assert all(r["oracle"] == "ffo" for r in rows)


def test_train_zero_lr_exits_one(tmp_path):
    assert main(["train", "dfl", "--steps", "1", "--lr", "0", "-o", str(tmp_path / "t.csv")]) == 1


def test_bench_rows(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--sizes", "10,20", "-o", str(out)]) == 0
    rows = list(csv.DictReader(out.open(newline="")))
    assert tuple(rows[0]) == BENCH_COLUMNS
    assert [r["size"] for r in rows] == ["10", "20"]
    assert all(float(r[k]) > 0 for r in rows for k in BENCH_COLUMNS[1:])


def test_preset_info(tmp_path):
    out = tmp_path / "info.json"
    assert main(["preset-info", "--preset", "random-qp", "--seed", "1", "--d", "5",
                 "-o", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["dim_y"] == 5 and doc["solution"]["certified"]


def test_sizes_must_increase():
    with pytest.raises(ValueError):
        RunConfig(subcommand="bench", sizes=(50, 10))
    with pytest.raises(SystemExit):
        main(["bench", "--sizes", "10,10"])


def test_unwritable_output():
    with pytest.raises(ValueError):
        RunConfig(subcommand="bench", output="/nonexistent-dir/out.csv")


def test_module_entry_point_deterministic():
    cmd = [sys.executable, "-m", "ffo", "compare", "--preset", "random-qp", "--seed", "2"]
    a = json.loads(subprocess.run(cmd, capture_output=True, text=True, check=True).stdout)
    b = json.loads(subprocess.run(cmd, capture_output=True, text=True, check=True).stdout)
    a.pop("timings"), b.pop("timings")
    assert a == b
