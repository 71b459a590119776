"""Command line: ``msgd run <config.json> [--seed N] [--out DIR]`` and ``msgd list``.

Exit status is 0 when every enforced check passes, 1 when one fails (the
failing metrics are printed) and 2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from msgd import __version__
from msgd.experiments import EXPERIMENTS, ConfigError
from msgd.formats import write_csv, write_json
from msgd.rng import ALGORITHM

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
_RESERVED = ("experiment", "seed", "output_dir")


def load_config(path, seed=None, out=None) -> dict:
    try:
        config = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        config["seed"] = seed
    if out is not None:
        config["output_dir"] = str(out)
    if config.get("experiment") not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {sorted(EXPERIMENTS)}, got {config.get('experiment')!r}")
    s = config.get("seed")
    if not isinstance(s, int) or isinstance(s, bool) or not 0 <= s < 2**64:
        raise ConfigError(f"seed is mandatory and must be an integer in [0, 2**64), got {s!r}")
    if "output_dir" not in config:
        raise ConfigError("output_dir missing: set it in the config or pass --out")
    return config


def run_experiment(config: dict) -> tuple[int, list[str]]:
    """Run, write artifacts and return ``(exit status, failing metric descriptions)``."""
    func, _, _ = EXPERIMENTS[config["experiment"]]
    params = {k: v for k, v in config.items() if k not in _RESERVED}
    out = Path(config["output_dir"])
    start = time.perf_counter()
    result = func(params, config["seed"])
    wall = time.perf_counter() - start

    write_csv(out / "results.csv", result.results.columns, result.results.rows)
    for name, table in sorted(result.tables.items()):
        write_csv(out / name, table.columns, table.rows)
    failures = [c.describe() for c in result.checks if c.enforced and not c.passed]
    write_json(
        out / "metadata.json",
        {
            "experiment": config["experiment"],
            "seed": config["seed"],
            "generator": ALGORITHM,
            "version": __version__,
            "config": config,
            "wall_time_s": round(wall, 3),
            "passed": not failures,
            "checks": [vars(c) for c in result.checks],
            "info": result.info,
        },
    )
    return (EXIT_OK if not failures else EXIT_FAIL), failures


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msgd", description="Multiplicative SGD experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("config", help="path to the JSON config")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--out", help="override the output directory")
    sub.add_parser("list", help="print the available experiments")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list":
        for name, (_, defaults, summary) in EXPERIMENTS.items():
            print(f"{name:12s} {summary}")
            print(f"{'':12s} parameters: {', '.join(defaults)}")
        return EXIT_OK
    try:
        config = load_config(args.config, args.seed, args.out)
        status, failures = run_experiment(config)
    except (ConfigError, ValueError, TypeError, KeyError) as e:
        # parameter validation deeper down raises ValueError/TypeError; report as a config problem
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = config["output_dir"]
    if failures:
        for f in failures:
            print(f"FAILED {f}", file=sys.stderr)
    print(f"wrote {out}/results.csv and {out}/metadata.json")
    return status


if __name__ == "__main__":
    sys.exit(main())
