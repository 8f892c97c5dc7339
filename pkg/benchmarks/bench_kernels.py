"""Time the compiled kernels against the numpy fallback.

Each backend runs in its own interpreter (the backend is chosen at import),
and the solutions are checked to agree before timings are reported.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from ktie import _kernels
from ktie.coefficients import make_coefficients
from ktie.geometry import CONFORMAL, ConformalFactor, make_domain
from ktie.grid import PhaseGrid
from ktie.transport import Characteristics, TransportOperator

repeat = int(sys.argv[1])
out = {"backend": _kernels.BACKEND, "times": {}, "checksums": {}}

def best(fn):
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter(); val = fn(); ts.append(time.perf_counter() - t0)
    return min(ts), val

g = PhaseGrid(make_domain(), 0.05, 16, 1 / 32, 4.0)
c = make_coefficients(g, lambda x, y, th: 0.6 + 0.2 * x + 0 * th, mu=0.2)
f0 = lambda x, y, th: np.exp(-4 * (x * x + y * y)) * (1 + 0.3 * np.cos(th))
for method in ("ray", "sweep"):
    op = TransportOperator(c, method=method)
    t, (f, rep) = best(lambda: op.solve(f0=f0, tol=1e-10))
    out["times"][f"linear solve ({method}, {rep.iterations} Picard iterations)"] = t
    out["checksums"][method] = float(np.abs(f.values).sum())

def geodesics():
    dom = make_domain(CONFORMAL, 1.0, ConformalFactor("gaussian", 0.1, 1.0))
    return Characteristics(PhaseGrid(dom, 0.1, 16, 0.05, 5.0)).tau_minus
t, tau = best(geodesics)
out["times"]["conformal exit times (dx 0.1, 16 directions)"] = t
out["checksums"]["geodesics"] = float(tau.sum())
print(json.dumps(out))
"""


def run_backend(pure: bool, repeat: int) -> dict:
    env = dict(os.environ)
    env.pop("KTIE_PURE_PYTHON", None)
    if pure:
        env["KTIE_PURE_PYTHON"] = "1"
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    fast = run_backend(False, args.repeat)
    slow = run_backend(True, args.repeat)
    if fast["backend"] != "cython":
        print("compiled core not available; build with `pip install -e . --no-build-isolation`")
    for key in fast["checksums"]:
        a, b = fast["checksums"][key], slow["checksums"][key]
        if abs(a - b) > 1e-9 * max(abs(a), 1.0):
            raise SystemExit(f"backends disagree on {key}: {a!r} vs {b!r}")
    width = max(map(len, fast["times"]))
    print(f"{'case':<{width}}  {fast['backend']:>9}  {slow['backend']:>9}  speedup")
    for key, t_fast in fast["times"].items():
        t_slow = slow["times"][key]
        print(f"{key:<{width}}  {t_fast:8.3f}s  {t_slow:8.3f}s  {t_slow / t_fast:6.1f}x")


if __name__ == "__main__":
    main()
