import hashlib
import json
import shutil
import subprocess
import sys

import pytest

from resolvent_sc import cli
from resolvent_sc.cli import RunConfig, UsageError

ISING = {"schema_version": 1, "model": {"kind": "ising", "ising": {"n_sites": 6}}, "ansatz": {"param_solvers": []}}
ENSEMBLE = {
    "schema_version": 1,
    "model": {"kind": "ensemble", "seed": 4, "ensemble": {"dim": 100}},
    "solver": {"grid_points": 512},
    "ansatz": {"classes": ["lorentz", "gauss", "lg", "effective"], "param_solvers": ["lorentz"]},
}


def write_config(path, data):
    path.write_text(json.dumps(data))
    return path


def listed_files(root):
    return {p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file()} - {"manifest.json"}


def manifest(root):
    return json.loads((root / "manifest.json").read_text())


@pytest.fixture(scope="module")
def report_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("report")
    cfg = write_config(root / "run.json", ENSEMBLE)
    out = root / "out"
    with pytest.warns(Warning):  # LG to effective peak matching is inexact for wide Lorentzians
        code = cli.main(["report", "--config", str(cfg), "--out", str(out)])
    return code, out


class TestConfig:
    def test_round_trip(self):
        c = RunConfig.from_dict(ENSEMBLE)
        assert RunConfig.from_json(c.to_json()).to_json() == c.to_json()
        assert RunConfig.from_json(c.to_json()).hash() == c.hash()

    def test_defaults_filled(self):
        c = RunConfig.from_dict({"schema_version": 1, "model": {"kind": "ising"}})
        assert c["solver"]["grid_points"] == cli.DEFAULTS["solver"]["grid_points"]

    def test_unknown_key_rejected_with_path(self):
        with pytest.raises(UsageError, match="model/ising"):
            RunConfig.from_dict({"schema_version": 1, "model": {"kind": "ising", "ising": {"spins": 4}}})

    def test_bad_value_reports_path(self):
        with pytest.raises(UsageError, match="solver/damping"):
            RunConfig.from_dict({"schema_version": 1, "model": {"kind": "ising"}, "solver": {"damping": 2.0}})

    def test_wrong_schema_version(self):
        with pytest.raises(UsageError, match="schema_version"):
            RunConfig.from_dict({"schema_version": 99, "model": {"kind": "ising"}})

    def test_invalid_json(self):
        with pytest.raises(UsageError, match="not valid JSON"):
            RunConfig.from_json("{model: ising")

    def test_with_seed(self):
        c = RunConfig.from_dict(ENSEMBLE).with_seed(9)
        assert c["model"]["seed"] == 9 and c.hash() != RunConfig.from_dict(ENSEMBLE).hash()


class TestExitCodes:
    def test_schema_error_exit_1(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", {"schema_version": 1, "model": {"kind": "potts"}})
        assert cli.main(["build", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE
        assert "model/kind" in capsys.readouterr().err

    def test_missing_config_exit_1(self, tmp_path):
        assert cli.main(["build", "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE

    def test_bad_flag_exit_1(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["build", "--frobnicate"])
        assert exc.value.code == cli.EXIT_USAGE

    def test_index_out_of_range_exit_1(self, tmp_path):
        data = dict(ISING, oracle={"indices": [64]})
        cfg = write_config(tmp_path / "c.json", data)
        assert cli.main(["build", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE

    def test_lock_exit_1(self, tmp_path):
        out = tmp_path / "o"
        out.mkdir()
        (out / cli.LOCKFILE).write_text("12345")
        cfg = write_config(tmp_path / "c.json", ISING)
        assert cli.main(["build", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_USAGE

    def test_foreign_files_exit_1(self, tmp_path):
        out = tmp_path / "o"
        out.mkdir()
        (out / "notes.txt").write_text("mine")
        cfg = write_config(tmp_path / "c.json", ISING)
        assert cli.main(["build", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_USAGE
        assert (out / "notes.txt").read_text() == "mine"

    def test_degenerate_parameter_solver_exit_2(self, tmp_path):
        # a weak transverse field leaves isolated Ising levels: every Lorentzian width collapses
        data = {
            "schema_version": 1,
            "model": {"kind": "ising", "ising": {"n_sites": 6, "g_x": 0.4}},
            "solver": {"grid_points": 256, "max_iter": 50},
            "ansatz": {"param_solvers": ["lorentz", "gauss"]},
        }
        cfg = write_config(tmp_path / "c.json", data)
        out = tmp_path / "o"
        assert cli.main(["solve", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_CONVERGENCE
        solvers = json.loads((out / "meanfield.json").read_text())["param_solvers"]
        assert "DegenerateDistributionError" in solvers["lorentz"]["error"]
        assert solvers["gauss"]["converged"] is False
        m = manifest(out)
        assert m["status"] == "unconverged" and "ansatz:lorentz" in m["convergence"]["unconverged"]


def test_stage_failure_partial_manifest(tmp_path, monkeypatch):
    def boom(st, out):
        raise RuntimeError("solver exploded")

    monkeypatch.setitem(cli.STAGES, "solve", boom)
    cfg = write_config(tmp_path / "c.json", ISING)
    out = tmp_path / "o"
    assert cli.main(["solve", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_INTERNAL
    m = manifest(out)
    assert m["status"] == "failed"
    assert m["failures"] == [{"stage": "solve", "error": "RuntimeError: solver exploded"}]
    assert "build" in m["timings"] and set(m["files"]) == listed_files(out)
    assert not (out / cli.LOCKFILE).exists()


class TestBuild:
    def test_ising_oracle_outputs(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", ISING)
        out = tmp_path / "o"
        assert cli.main(["build", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_OK
        header = (out / "overlaps.csv").read_text().splitlines()[0]
        assert header == "index,n,lambda,p"
        assert len((out / "spectrum.csv").read_text().splitlines()) == 64 + 1

    def test_oracle_disabled(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", dict(ISING, oracle={"enabled": False}))
        out = tmp_path / "o"
        assert cli.main(["build", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_OK
        assert not (out / "spectrum.csv").exists() and (out / "system.json").exists()

    def test_csv_only_format(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", dict(ISING, outputs={"formats": ["csv"]}))
        out = tmp_path / "o"
        cli.main(["build", "--config", str(cfg), "--out", str(out)])
        assert not (out / "pag.json").exists() and (out / "config.json").exists()

    def test_rerun_identical_hashes(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", ISING)
        a, b = tmp_path / "a", tmp_path / "b"
        cli.main(["build", "--config", str(cfg), "--out", str(a)])
        cli.main(["build", "--config", str(cfg), "--out", str(b)])
        first = manifest(a)["files"]
        assert first == manifest(b)["files"]
        # rerunning into the same directory replaces the previous run cleanly
        assert cli.main(["build", "--config", str(cfg), "--out", str(a)]) == cli.EXIT_OK
        assert manifest(a)["files"] == first

    def test_seed_override(self, tmp_path):
        data = {"schema_version": 1, "model": {"kind": "ensemble", "seed": 1, "ensemble": {"dim": 40}}}
        cfg = write_config(tmp_path / "c.json", data)
        cli.main(["build", "--config", str(cfg), "--out", str(tmp_path / "a")])
        cli.main(["build", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "2"])
        ma, mb = manifest(tmp_path / "a"), manifest(tmp_path / "b")
        assert ma["seeds"] == {"model": 1, "source": "config"}
        assert mb["seeds"] == {"model": 2, "source": "cli"}
        assert ma["files"]["bare.csv"] != mb["files"]["bare.csv"]
        assert json.loads((tmp_path / "b" / "config.json").read_text())["model"]["seed"] == 2

    def test_threads_flag(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", ISING)
        assert cli.main(["build", "--config", str(cfg), "--out", str(tmp_path / "o"), "--threads", "1"]) == cli.EXIT_OK
        assert manifest(tmp_path / "o")["threads"] == 1


class TestReport:
    def test_exit_ok(self, report_run):
        code, _ = report_run
        assert code == cli.EXIT_OK

    def test_fit_report_ranks_all_classes(self, report_run):
        _, out = report_run
        report = json.loads((out / "fit_report.json").read_text())
        assert len(report) == 3
        for entry in report.values():
            l1 = [r["l1"] for r in entry["ranking"]]
            assert l1 == sorted(l1)
            assert {r["class"] for r in entry["ranking"]} == {"lorentz", "gauss", "lg", "effective"}
            assert entry["skew"]["skew_direction"] in (-1, 0, 1)

    def test_figures_rendered(self, report_run):
        _, out = report_run
        pngs = sorted(p.name for p in (out / "figures").glob("*.png"))
        assert pngs == ["distribution_25.png", "distribution_50.png", "distribution_75.png", "meanfield.png"]
        assert all((out / "figures" / n).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for n in pngs)

    def test_plot_data_columns(self, report_run):
        _, out = report_run
        assert (out / "meanfield.csv").read_text().splitlines()[0] == "shell,lambda,density,im_g,re_g"
        assert (out / "compare.csv").read_text().splitlines()[0].startswith("index,lambda,oracle_density")

    def test_manifest_complete(self, report_run):
        _, out = report_run
        m = manifest(out)
        assert set(m["files"]) == listed_files(out)
        for rel, digest in m["files"].items():
            assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest
        assert set(m["timings"]) == {"build", "solve", "fit", "compare", "report"}
        assert m["status"] == "ok"

    def test_report_rerun_identical(self, report_run, tmp_path):
        _, out = report_run
        cfg = write_config(tmp_path / "run.json", ENSEMBLE)
        with pytest.warns(Warning):
            cli.main(["report", "--config", str(cfg), "--out", str(tmp_path / "again")])
        assert manifest(tmp_path / "again")["files"] == manifest(out)["files"]


def test_selfcheck_subset(tmp_path, capsys):
    assert cli.main(["selfcheck", "--only", "1", "9", "--out", str(tmp_path / "sc")]) == cli.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert [ln[:6] for ln in lines] == ["[PASS]", "[PASS]"]
    results = json.loads((tmp_path / "sc" / "selfcheck.json").read_text())
    assert [r["number"] for r in results] == [1, 9]


@pytest.mark.skipif(shutil.which("resolvent-sc") is None, reason="console script not installed")
def test_console_script(tmp_path):
    cfg = write_config(tmp_path / "c.json", ISING)
    proc = subprocess.run(["resolvent-sc", "build", "--config", str(cfg), "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "files written" in proc.stdout


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "resolvent_sc.cli", "build", "--bogus"], capture_output=True, text=True)
    assert proc.returncode == cli.EXIT_USAGE
