"""Small deterministic runs whose numeric outputs are frozen in tests/golden/."""

import csv
import json
from importlib import resources
from pathlib import Path

from ktie.cli import main

COARSE = ["--set", "grid.dx=0.125", "--set", "grid.n_v=8", "--set", "grid.dt=0.0625"]
GOLDEN = Path(__file__).parent / "golden" / "goldens.json"
FROZEN_TOLERANCE = {"rtol": 1e-8, "atol": 1e-13}


def packaged(name):
    return str(resources.files("ktie").joinpath("configs", name))


# name -> (argv without --out, {file: [columns]})
CASES = {
    "forward_scattering": (["forward", "--config", packaged("forward_scattering.ini"), *COARSE],
                           {"trace.csv": ["value"], "picard.csv": ["increment", "ratio"]}),
    "linearize": (["linearize", *COARSE], {"consistency.csv": ["relative_l2_gap"]}),
    "carleman": (["carleman-check", *COARSE, "--set", "weight.s_grid=10, 20, 40"],
                 {"carleman_euclidean_true.csv": ["lhs", "rhs"],
                  "carleman_euclidean_manufactured.csv": ["lhs", "rhs"]}),
    "invert_sigma": (["invert", *COARSE, "--set", "inversion.n_b=4"],
                     {"coefficients.csv": ["true", "recovered"]}),
    "stability": (["stability", *COARSE, "--set", "inversion.n_b=4", "--set", "inversion.ensemble=10"],
                  {"stability.csv": ["ratio"]}),
}


def run_case(name, out_dir) -> dict:
    argv, wanted = CASES[name]
    code = main([*argv, "--quiet", "--seed", "11", "--out", str(out_dir)])
    result = {"exit_code": code}
    for fname, cols in wanted.items():
        with open(Path(out_dir) / fname, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for c in cols:
            result[f"{fname}:{c}"] = [float(r[c]) for r in rows]
    return result


if __name__ == "__main__":
    import tempfile

    frozen = {}
    with tempfile.TemporaryDirectory() as tmp:
        for name in CASES:
            frozen[name] = run_case(name, Path(tmp) / name)
    GOLDEN.parent.mkdir(exist_ok=True)
    GOLDEN.write_text(json.dumps(frozen, indent=1, sort_keys=True) + "\n")
