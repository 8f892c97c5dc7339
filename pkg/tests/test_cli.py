import json
import subprocess
import sys

import pytest

from ktie.cli import main

COARSE = ["--set", "grid.dx=0.25", "--set", "grid.n_v=8", "--set", "grid.dt=0.125", "--quiet"]
TIMING = {"wall_clock", "output_dir", "seconds"}


def strip_timing(obj):
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def test_success_and_outputs(tmp_path):
    assert main(["forward", *COARSE, "--out", str(tmp_path)]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"trace.csv", "trace.bin", "picard.csv", "closed_form.csv", "config.ini",
            "summary.txt", "manifest.json"} <= names
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["subcommand"] == "forward" and m["seed"] == 0
    assert all(s["status"] == "ok" for s in m["stages"])


def test_invalid_config_exit_code(tmp_path, capsys):
    assert main(["forward", "--set", "grid.n_v=15", "--out", str(tmp_path)]) == 2
    assert "n_v" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[grid]\nwhat = 1\n")
    assert main(["forward", "--config", str(bad)]) == 2
    assert main(["forward", "--set", "nodot=1"]) == 2


def test_solver_failure_exit_code(tmp_path):
    args = ["forward", *COARSE, "--set", "coefficients.mu=isotropic(value=0.5)",
            "--set", "solver.max_iter=1", "--out", str(tmp_path)]
    assert main(args) == 3


def test_failed_check_exit_code(tmp_path):
    # without the one-way kernel the negative control cannot violate the inequality
    args = ["carleman-check", *COARSE, "--set", "carleman.negative_strength=0", "--out", str(tmp_path)]
    assert main(args) == 4
    assert "check_failed" in (tmp_path / "manifest.json").read_text()


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("KTIE_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["forward", *COARSE]) == 0
    assert (tmp_path / "env" / "manifest.json").is_file()
    # --out wins over the environment
    assert main(["forward", *COARSE, "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "manifest.json").is_file()


@pytest.mark.parametrize("sub", ["forward", "stability"])
def test_repeat_runs_are_byte_identical(tmp_path, sub):
    extra = ["--set", "inversion.ensemble=4", "--set", "inversion.n_b=3"] if sub == "stability" else []
    for name in ("a", "b"):
        assert main([sub, *COARSE, *extra, "--seed", "7", "--out", str(tmp_path / name)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    for name in files:
        if name == "manifest.json":
            ma, mb = (strip_timing(json.loads((d / name).read_text())) for d in (a, b))
            assert ma == mb
        else:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_seed_changes_stability_draws(tmp_path):
    extra = [*COARSE, "--set", "inversion.ensemble=4", "--set", "inversion.n_b=3"]
    main(["stability", *extra, "--seed", "1", "--out", str(tmp_path / "a")])
    main(["stability", *extra, "--seed", "2", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "stability.csv").read_bytes() != (tmp_path / "b" / "stability.csv").read_bytes()


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "ktie.cli", "forward", *COARSE, "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
