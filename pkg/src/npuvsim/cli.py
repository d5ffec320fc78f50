"""Command line entry point: ``npuvsim run|compare|sweep|validate``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import experiments as ex
from .errors import ConfigError, NpuVsimError

_LEVELS = {"trace": logging.DEBUG, "debug": logging.DEBUG, "info": logging.INFO,
           "warning": logging.WARNING, "error": logging.ERROR}


def _setup_logging():
    level = _LEVELS.get(os.environ.get("NPUVSIM_LOG", "warning").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _values(text: str) -> list:
    out = []
    for v in (s.strip() for s in text.split(",")):
        if v:
            out.append(int(v) if v.lstrip("-").isdigit() else v)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npuvsim", description="Virtualized NPU simulator")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out=True):
        sp.add_argument("--scenario", required=True, help="scenario JSON file or bundled scenario name")
        if out:
            sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the scenario seed")

    r = sub.add_parser("run", help="run one scenario")
    common(r)
    r.add_argument("--mode", choices=ex.MODES, help="force every vNPU into this mode")

    c = sub.add_parser("compare", help="run a scenario under several modes")
    common(c)
    c.add_argument("--mode", action="append", required=True, choices=ex.MODES,
                   help="mode to compare (repeat; the first is the reference)")

    s = sub.add_parser("sweep", help="vary one parameter")
    common(s)
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True, help="comma separated values")

    v = sub.add_parser("validate", help="schema check only")
    common(v, out=False)
    return p


def _resolve(name: str) -> str:
    if Path(name).exists():
        return name
    bundled = ex.bundled_scenarios()
    if name in bundled:
        return str(bundled[name])
    raise ConfigError(f"no scenario file or bundled scenario named {name!r}")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        path = _resolve(args.scenario)
        if args.verb == "validate":
            sc = ex.Scenario.load(path)
            sc.config()
            print(f"{path}: ok")
            return 0
        if args.verb == "run":
            m = ex.run_scenario(path, args.out, seed=args.seed, mode=args.mode)
            if args.out is None:
                sys.stdout.write(m.to_json())
            else:
                print(f"wrote {Path(args.out) / 'metrics.json'} and metrics.csv")
            return 0
        sc = ex.Scenario.load(path)
        if args.seed is not None:
            sc = sc.replace(seed=args.seed)
        if args.verb == "compare":
            table = ex.compare(args.mode, sc)
            text = json.dumps(table, sort_keys=True, indent=2) + "\n"
            _emit(args.out, "compare.json", text)
            return 0
        rows = ex.sweep(args.param, _values(args.values), sc)
        _emit(args.out, "sweep.csv", ex.rows_to_csv(rows))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NpuVsimError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _emit(out_dir, name: str, text: str):
    if out_dir is None:
        sys.stdout.write(text)
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)
    print(f"wrote {out / name}")


if __name__ == "__main__":
    sys.exit(main())
