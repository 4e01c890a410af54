import hashlib
import json
import subprocess
import sys

import pytest

from asht import cli
from asht.errors import InvariantViolation


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def data_rows(path):
    return [l for l in path.read_text().splitlines() if not l.startswith("#")]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestSolve:
    def test_text(self, capsys):
        code, out, _ = run(capsys, "solve", "two_by_two")
        assert code == 0
        assert "D = 0.510826" in out and "every pair separable pass; positive discrimination mass pass" in out
        assert "1/D = 1.9576" in out

    def test_json(self, capsys, tmp_path):
        code, out, _ = run(capsys, "solve", "three_location_search", "--json", "--out", str(tmp_path / "s.json"))
        data = json.loads(out)
        assert code == 0 and data["beta"] == pytest.approx(0.5)
        assert data["conditions"]["positive_discrimination_mass"] is True
        assert data["A_ij"]["0,1"] == [0, 1]
        assert json.loads((tmp_path / "s.json").read_text()) == data
        assert "started_at" not in out

    def test_beta_zero_warns(self, capsys):
        code, out, _ = run(capsys, "solve", "beta_zero")
        assert code == 0 and "positive discrimination mass FAIL" in out and "epsilon_uniform" in out

    def test_model_from_path(self, capsys):
        path = cli.bundled_models()["two_by_two"]
        assert run(capsys, "solve", str(path))[0] == 0

    def test_errors(self, capsys):
        code, _, err = run(capsys, "solve", "no_such_model")
        assert code == 2 and "UsageError" in err
        code, _, err = run(capsys, "solve", "indistinguishable")
        assert code == 2 and "IndistinguishablePair" in err


class TestSimulate:
    def test_outputs_and_manifest(self, capsys, tmp_path):
        out = tmp_path / "t.csv"
        code, text, _ = run(capsys, "simulate", "two_by_two", "--L", "100", "--trials", "300", "--eta", "0.3",
                            "--switch-cost", "2", "--seed", "9", "--out", str(out), "--workers", "1")
        assert code == 0 and "300 trials under H1" in text
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# config_hash: ") and "# base_seed: 9" in lines
        assert len(data_rows(out)) == 301
        summary = json.loads((tmp_path / "t.summary.json").read_text())
        assert summary["manifest"]["base_seed"] == 9 and summary["cell"]["trials"] == 300
        manifest = json.loads((tmp_path / "t.manifest.json").read_text())
        assert manifest["started_at"] and manifest["finished_at"]
        assert "started_at" not in out.read_text()

    def test_repeat_runs_are_byte_identical(self, capsys, tmp_path):
        digests = set()
        for workers in ("1", "2"):
            out = tmp_path / f"r{workers}.csv"
            run(capsys, "simulate", "two_by_two", "--trials", "200", "--L", "50", "--seed", "3", "--out", str(out), "--workers", workers)
            digests.add((digest(out), digest(out.with_suffix(".summary.json"))))
        assert len(digests) == 1

    def test_eta_one_matches_procedure_a(self, capsys, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        common = ["--trials", "200", "--L", "100", "--seed", "1", "--switch-cost", "1", "--workers", "1"]
        run(capsys, "simulate", "three_location_search", "--policy", "sluggish_a", "--eta", "1", "--out", str(a), *common)
        run(capsys, "simulate", "three_location_search", "--policy", "procedure_a", "--out", str(b), *common)
        assert data_rows(a) == data_rows(b)

    def test_seed_precedence(self, capsys, tmp_path, monkeypatch):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 5, "trials": 50, "L": 20}))
        monkeypatch.setenv("ASHT_SEED", "7")

        def seed_of(*extra):
            out = tmp_path / "s.csv"
            run(capsys, "simulate", "two_by_two", "--out", str(out), "--workers", "1", *extra)
            return json.loads(out.with_suffix(".summary.json").read_text())["manifest"]["base_seed"]

        assert seed_of("--trials", "50") == 7
        assert seed_of("--config", str(cfg)) == 5
        assert seed_of("--config", str(cfg), "--seed", "11") == 11

    def test_usage_errors(self, capsys, tmp_path):
        out = str(tmp_path / "x.csv")
        assert run(capsys, "simulate", "two_by_two", "--trials", "0", "--out", out)[0] == 2
        code, _, err = run(capsys, "simulate", "two_by_two", "--policy", "greedy", "--out", out)
        assert code == 2 and "unknown policy" in err
        code, _, err = run(capsys, "simulate", "two_by_two", "--eta", "0", "--out", out)
        assert code == 2 and "ParameterOutOfRange" in err
        with pytest.raises(SystemExit) as exc:
            cli.main(["simulate", "two_by_two"])
        assert exc.value.code == 2

    def test_cost_file(self, capsys, tmp_path):
        costs = tmp_path / "g.json"
        costs.write_text(json.dumps({"g": [[0, 3], [1, 0]]}))
        out = tmp_path / "c.csv"
        assert run(capsys, "simulate", "two_by_two", "--costs", str(costs), "--trials", "20", "--out", str(out))[0] == 0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"g": [[1, 3], [1, 0]]}))
        assert run(capsys, "simulate", "two_by_two", "--costs", str(bad), "--trials", "20", "--out", str(out))[0] == 2

    def test_invariant_violation_exit_code(self, capsys, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise InvariantViolation("broken")

        monkeypatch.setattr(cli, "run_trials", boom)
        code, _, err = run(capsys, "simulate", "two_by_two", "--trials", "5", "--out", str(tmp_path / "v.csv"))
        assert code == 3 and "InvariantViolation" in err


class TestSweep:
    def test_outputs(self, capsys, tmp_path):
        code, out, _ = run(capsys, "sweep", "two_by_two", "--L-grid", "1e2,1e3,1e4", "--eta-grid", "1,0.3",
                           "--trials", "200", "--switch-cost", "2", "--out-dir", str(tmp_path), "--workers", "1")
        assert code == 0 and "tau slope" in out
        assert (tmp_path / "cells_eta1.csv").exists() and (tmp_path / "cells_eta0.3.csv").exists()
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert len(summary["slopes"]) == 4
        row = summary["slopes"][1]
        assert row["reference_cost_ceiling"] == pytest.approx(3.0 * row["reference_1_over_D"])
        rows = data_rows(tmp_path / "cells_eta1.csv")
        assert rows[0].startswith("eta,hypothesis,L") and len(rows) == 7

    def test_empty_grids(self, capsys, tmp_path):
        code, _, err = run(capsys, "sweep", "two_by_two", "--L-grid", "", "--out-dir", str(tmp_path))
        assert code == 2 and "empty" in err
        assert run(capsys, "sweep", "two_by_two", "--eta-grid", "", "--out-dir", str(tmp_path))[0] == 2
        assert run(capsys, "sweep", "two_by_two", "--L-grid", "1e2,abc", "--out-dir", str(tmp_path))[0] == 2


class TestDiagnose:
    def test_json(self, capsys):
        code, out, _ = run(capsys, "diagnose", "two_by_two", "--eta", "0.5", "--trials", "5000", "--horizon", "100", "--json", "--workers", "1")
        data = json.loads(out)
        assert code == 0 and data["analytic_gamma"] > 0
        assert data["margin_tail"]["slope"] < 0

    def test_text(self, capsys):
        code, out, _ = run(capsys, "diagnose", "two_by_two", "--trials", "3000", "--horizon", "80", "--workers", "1")
        assert code == 0 and "analytic decay rate" in out

    def test_bad_horizon(self, capsys):
        assert run(capsys, "diagnose", "two_by_two", "--horizon", "0")[0] == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "asht.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("asht ")
