"""Command line entry point: ``ktie <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 invalid configuration, 3 solver failure,
4 a built-in check did not hold.
"""

from __future__ import annotations

import argparse
import sys
from importlib import resources

from .config import parse_config, parse_text
from .errors import ConfigError, KtieError, NonConvergenceError
from .experiments import EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER, SUBCOMMANDS, run

DEFAULT_CONFIGS = {
    "forward": "forward.ini",
    "linearize": "linearize.ini",
    "carleman-check": "carleman_euclidean.ini",
    "invert": "invert_sigma.ini",
    "stability": "stability_euclidean.ini",
}


def packaged_config(name: str) -> str:
    return resources.files("ktie").joinpath("configs", name).read_text()


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError([f"--set expects section.key=value, got {item!r}"])
        key, value = item.split("=", 1)
        sec, name = key.split(".", 1)
        out[f"{sec.strip()}__{name.strip()}"] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ktie", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help=f"INI file (default: packaged {DEFAULT_CONFIGS[name]})")
        p.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
        p.add_argument("--out", default=None, help="output directory (else $KTIE_OUTPUT_DIR, else [output] dir)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        p.add_argument("--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg = parse_config(args.config)
        else:
            cfg = parse_text(packaged_config(DEFAULT_CONFIGS[args.command]))
        overrides = parse_overrides(args.set)
        if overrides:
            cfg = cfg.with_overrides(**overrides)
    except ConfigError as exc:
        print(f"ktie: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run(args.command, cfg, args.out, args.seed)
    except ConfigError as exc:
        print(f"ktie: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        print(f"ktie: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except KtieError as exc:
        print(f"ktie: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if not args.quiet:
        for st in manifest.stages:
            line = f"{st.name}: {st.status}"
            print(line + (f": {st.detail}" if st.detail else ""))
        print(f"outputs in {manifest.output_dir}")
    code = manifest.exit_code
    if code == EXIT_CHECK:
        print("ktie: a check did not hold (see summary.txt)", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
