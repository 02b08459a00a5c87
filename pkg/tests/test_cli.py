import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from varorder.cli import main, parse_grid

PROBLEMS = Path(__file__).resolve().parent.parent / "problems"
CONSTANT = str(PROBLEMS / "constant.json")
TWO = str(PROBLEMS / "two_piece.json")
VARIABLE = str(PROBLEMS / "variable_medium.json")


def read_csv(path):
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    return header, rows


@pytest.fixture(scope="module")
def two_piece_laplace(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "flux.csv"
    assert main(["forward", TWO, "--p-grid", "1e-6:1e-3:log40", "-o", str(out)]) == 0
    return out


class TestGrid:
    def test_log(self):
        assert parse_grid("1e-6:1e-2:log5") == pytest.approx(np.logspace(-6, -2, 5))

    def test_linear(self):
        assert parse_grid("0:1:lin3") == pytest.approx([0.0, 0.5, 1.0])

    @pytest.mark.parametrize("bad", ["1:2", "1:2:log1", "0:1:log4", "a:b:lin3", "1:2:cubic3"])
    def test_malformed(self, bad):
        with pytest.raises(ValueError):
            parse_grid(bad)


class TestForward:
    def test_laplace_rows(self, tmp_path):
        out = tmp_path / "f.csv"
        assert main(["forward", CONSTANT, "--mode", "laplace", "--p-grid", "1e-6:1e-2:log32", "-o", str(out)]) == 0
        header, rows = read_csv(out)
        assert header == ["p", "flux_left", "flux_right"]
        assert rows.shape == (32, 3)
        manifest = json.loads(Path(str(out) + ".manifest.json").read_text())
        assert manifest["command"] == "forward"
        assert len(manifest["inputs"][CONSTANT]) == 64

    def test_trace_columns(self, two_piece_laplace):
        header, rows = read_csv(two_piece_laplace)
        assert header == ["p", "flux_left", "flux_right", "h_1"]
        assert rows.shape == (40, 4)

    def test_time_rows(self, tmp_path):
        out = tmp_path / "t.csv"
        args = ["forward", CONSTANT, "--mode", "time", "--t-grid", "0.1:100:log25", "--grid", "64", "-o", str(out)]
        assert main(args) == 0
        header, rows = read_csv(out)
        assert header == ["t", "flux_left", "flux_right"]
        assert rows.shape == (25, 3)

    def test_seventeen_digits(self, tmp_path):
        out = tmp_path / "f.csv"
        main(["forward", CONSTANT, "--p-grid", "1e-3:1e-2:log2", "-o", str(out)])
        first = Path(out).read_text().splitlines()[1].split(",")
        assert float(first[1]) == float(f"{float(first[1]):.17g}")

    def test_missing_file(self, tmp_path):
        assert main(["forward", str(tmp_path / "nope.json")]) == 2

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert main(["forward", VARIABLE, "--p-grid", "1e-5:1e-1:log9", "-o", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_dump_pairs(self, tmp_path):
        assert main(["forward", TWO, "--grid", "32", "--p-grid", "1e-3:1e-2:log2", "--dump-pairs", str(tmp_path)]) == 0
        assert sorted(p.name for p in tmp_path.glob("pair_*.csv")) == ["pair_0.csv", "pair_1.csv"]

    def test_no_partial_file_on_failure(self, tmp_path):
        out = tmp_path / "f.csv"
        assert main(["forward", CONSTANT, "--p-grid", "bad", "-o", str(out)]) == 2
        assert list(tmp_path.iterdir()) == []


class TestAsymptotics:
    def test_constant(self, tmp_path):
        out = tmp_path / "a.json"
        assert main(["asymptotics", CONSTANT, "-o", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["C0"] == pytest.approx(-1.0, abs=1e-8)
        assert rep["terms"][0]["alpha"] == 0.5
        assert rep["terms"][0]["C"] == pytest.approx(-1 / 3, rel=1e-6)
        assert rep["sign_violations"] == []

    def test_verify_slope(self, tmp_path):
        out = tmp_path / "a.json"
        assert main(["asymptotics", CONSTANT, "--verify", "-o", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["verification"]["slope"] >= 0.95 and rep["verification"]["pass"]

    def test_invalid_order(self, tmp_path):
        bad = json.loads(Path(TWO).read_text())
        bad["order"]["values"] = [0.4, 0.9]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(bad))
        assert main(["asymptotics", str(path)]) == 2


class TestTransform:
    def test_polynomial(self, tmp_path):
        t = np.logspace(-3, 4, 600)
        src = tmp_path / "t.csv"
        src.write_text("t,flux\n" + "\n".join(f"{a:.17g},{a * a:.17g}" for a in t) + "\n")
        out = tmp_path / "p.csv"
        assert main(["transform", str(src), "--p-grid", "1e-2:1:log5", "--degree", "2", "-o", str(out)]) == 0
        _, rows = read_csv(out)
        assert np.allclose(rows[:, 1], 2 / rows[:, 0] ** 3, rtol=1e-6)

    def test_needs_time_csv(self, two_piece_laplace):
        assert main(["transform", str(two_piece_laplace)]) == 2


class TestInvert:
    def test_breakpoint(self, tmp_path, two_piece_laplace):
        out = tmp_path / "inv.json"
        args = ["invert", str(two_piece_laplace), "--medium", TWO, "--monotone", "inc", "-o", str(out)]
        assert main(args) == 0
        rec = json.loads(out.read_text())["recovered"]
        assert rec["breakpoints"][1] == pytest.approx(0.5, abs=1e-2)
        assert rec["values"] == pytest.approx([0.5, 0.7], abs=1e-2)

    def test_range_only(self, tmp_path, two_piece_laplace):
        out = tmp_path / "inv.json"
        assert main(["invert", str(two_piece_laplace), "--medium", "none", "-o", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["mode"] == "range"
        assert rep["range"] == pytest.approx([0.5, 0.7], abs=1e-2)

    def test_refuses_non_monotone(self, two_piece_laplace):
        assert main(["invert", str(two_piece_laplace), "--medium", TWO, "--monotone", "none"]) == 2

    def test_malformed_csv(self, tmp_path):
        src = tmp_path / "bad.csv"
        src.write_text("p,flux\n1e-3,abc\n")
        assert main(["invert", str(src), "--medium", "none"]) == 2

    def test_fit_failure(self, tmp_path):
        src = tmp_path / "short.csv"
        p = np.logspace(-4, -3, 12)
        src.write_text("p,flux\n" + "\n".join(f"{a:.17g},{-2 / a**3:.17g}" for a in p) + "\n")
        assert main(["invert", str(src), "--medium", "none"]) == 4


class TestVerify:
    def test_all_pass(self, capsys):
        assert main(["verify", VARIABLE, "--grid", "128"]) == 0
        out = capsys.readouterr().out
        assert "fail" not in out and "pass" in out

    def test_vacuous(self, capsys):
        assert main(["verify", CONSTANT]) == 0
        assert "vacuous" in capsys.readouterr().out

    def test_corrupted_medium(self, tmp_path):
        bad = json.loads(Path(TWO).read_text())
        bad["medium"]["sigma"] = {"mesh": [0.0, 1.0], "poly_coeffs": [[0.2, -1.0]]}
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(bad))
        assert main(["verify", str(path)]) == 2

    def test_report_file(self, tmp_path):
        out = tmp_path / "v.json"
        assert main(["verify", TWO, "--grid", "64", "-o", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["pass"] and all(r["status"] in ("pass", "vacuous") for r in rep["invariants"])


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "varorder.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("forward", "asymptotics", "transform", "invert", "verify"):
        assert sub in res.stdout
