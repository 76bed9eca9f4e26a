"""Command-line interface.

Verbs: run, preset, sweep, fit-only, validate.  Exit codes: 0 success,
1 validation failure (including cost-guard refusals), 2 runtime
failure, 3 divergence abort.
"""

from __future__ import annotations

import argparse
import sys

import yaml

from .bath import QuadratureError
from .deom import HierarchyDivergenceError, HierarchySizeError
from .expfit import ConjugateClosureError, PronyRankError
from . import runner
from .runner import ConfigError, ExpensiveRunError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_DIVERGENCE = 3


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError([f"override {pair!r}: expected key.path=value"])
        key, _, raw = pair.partition("=")
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spindeom",
        description=(
            "Two-level-system relaxation in a continuous spin environment: "
            "bath mapping, exponential-sum fitting, hierarchy propagation."
        ),
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute a run from a config file")
    p_run.add_argument("config", help="YAML run configuration")
    p_run.add_argument("--out", help="override the output directory")
    p_run.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dotted-path override, e.g. hierarchy.tier=16")
    p_run.add_argument("--allow-expensive", action="store_true",
                       help="run cost-guarded configurations")

    p_preset = sub.add_parser("preset", help="execute a named preset")
    p_preset.add_argument("name", help="preset name; see --list")
    p_preset.add_argument("--out", help="override the output directory")
    p_preset.add_argument("--override", action="append", metavar="KEY=VALUE")
    p_preset.add_argument("--allow-expensive", action="store_true")
    p_preset.add_argument("--dry-run", action="store_true",
                          help="print the resolved config and exit")

    p_sweep = sub.add_parser("sweep", help="execute the sweep members of a config")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--override", action="append", metavar="KEY=VALUE")
    p_sweep.add_argument("--allow-expensive", action="store_true")
    p_sweep.add_argument("--jobs", type=int, default=1,
                         help="parallel member runs (independent processes)")

    p_fit = sub.add_parser("fit-only", help="fit the bath TCF, skip propagation")
    p_fit.add_argument("config")
    p_fit.add_argument("--out", help="override the output directory")
    p_fit.add_argument("--override", action="append", metavar="KEY=VALUE")

    p_val = sub.add_parser("validate", help="check a config; list every violation")
    p_val.add_argument("config")
    p_val.add_argument("--override", action="append", metavar="KEY=VALUE")

    return parser


def _load(args) -> runner.RunConfig:
    if getattr(args, "name", None) is not None:
        config = runner.preset(args.name)
    else:
        config = runner.load_config(args.config)
    overrides = _parse_overrides(getattr(args, "override", None))
    if overrides:
        config = runner.apply_overrides(config, overrides)
    return config


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _load(args)
        if args.verb in ("run", "preset"):
            if getattr(args, "dry_run", False):
                print(yaml.safe_dump(config.to_dict(), sort_keys=True))
                return EXIT_OK
            result = runner.run(config, allow_expensive=args.allow_expensive,
                                out_dir=args.out)
            print(f"wrote {result.paths['csv']}")
            if result.fit is not None:
                rep = result.fit.report
                print(f"fit: max_abs={rep.max_abs_error:.3e} rms={rep.rms_error:.3e}")
            stats = result.trajectory.stats
            print(
                f"records={result.trajectory.times.size} "
                f"trace_dev={stats['max_trace_dev']:.2e} "
                f"herm_dev={stats['max_herm_dev']:.2e} "
                f"max_keys={stats['max_keys_held']}"
            )
        elif args.verb == "sweep":
            summary = runner.sweep(config, allow_expensive=args.allow_expensive,
                                   jobs=args.jobs)
            print(f"wrote {summary['path']} ({len(summary['members'])} members)")
        elif args.verb == "fit-only":
            info = runner.fit_only(config, out_dir=args.out)
            err = info["errors"]
            print(f"wrote {info['path']}")
            print(f"fit: max_abs={err['max_abs']:.3e} rms={err['rms']:.3e}")
        elif args.verb == "validate":
            problems = config.validate()
            if problems:
                for p in problems:
                    print(f"invalid: {p}", file=sys.stderr)
                return EXIT_VALIDATION
            print("config valid")
        return EXIT_OK
    except (ConfigError, ExpensiveRunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except HierarchyDivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (QuadratureError, PronyRankError, ConjugateClosureError,
            HierarchySizeError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
