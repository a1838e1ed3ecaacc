"""Command-line front end.

    fedex-sim run      [--config FILE] [--out DIR] [key=value ...]
    fedex-sim scenario NAME [--out DIR] [key=value ...]
    fedex-sim compare  --protocols a,b,c [--config FILE] [--out DIR] [...]
    fedex-sim plot     --from DIR [--out FILE]

Exit codes: 0 on success, 1 on configuration problems, 2 on runtime faults.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from ._backend import BACKEND
from .core import ConfigError, NumericFault, ProtocolError
from .harness import (
    comparison_table,
    format_config,
    load_config,
    plot_accuracy,
    run_and_report,
    scenario,
)
from .learning import LearningTask


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; route it through the config-error path
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fedex-sim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", default=None, help="key=value config file")
    run.add_argument("--out", default=None, help="directory for rounds.csv + summary.json")
    run.add_argument("overrides", nargs="*", help="key=value overrides")

    scen = sub.add_parser("scenario", help="run a named preset")
    scen.add_argument("name")
    scen.add_argument("--out", default=None)
    scen.add_argument("overrides", nargs="*")

    cmp_ = sub.add_parser("compare", help="run several protocols on one world")
    cmp_.add_argument("--protocols", required=True, help="comma-separated protocol list")
    cmp_.add_argument("--config", default=None)
    cmp_.add_argument("--out", default=None)
    cmp_.add_argument("--reference", default="fedavg")
    cmp_.add_argument("overrides", nargs="*")

    plot = sub.add_parser("plot", help="accuracy-vs-time SVG from round CSVs")
    plot.add_argument("--from", dest="src", required=True, help="directory of round CSVs")
    plot.add_argument("--out", default=None, help="output SVG path")
    return parser


def _header(cfg) -> str:
    task = LearningTask(
        kind=cfg.task_kind,
        input_dim=cfg.input_dim,
        num_classes=cfg.num_classes,
        hidden_dim=cfg.hidden_dim,
        l2_reg=cfg.l2_reg,
    )
    return (
        f"backend: {BACKEND} | task: {cfg.task_kind} "
        f"({task.param_dim} params, {task.param_dim * 8} bytes per upload)"
    )


def _print_summary(s: dict) -> None:
    if s["reached"]:
        line = (
            f"{s['protocol']}: reached target in {s['NR']} rounds, "
            f"{s['OL_s']:.1f}s virtual ({s['PRT_s']:.2f}s/round)"
        )
    else:
        line = (
            f"{s['protocol']}: target not reached "
            f"(max accuracy {100 * s['max_accuracy']:.1f}%)"
        )
    print(line)


def _cmd_run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.out is not None:
        cfg.output_dir = args.out
    print(_header(cfg))
    print(format_config(cfg))
    summaries = run_and_report([cfg], reference=cfg.protocol, out_dir=cfg.output_dir)
    _print_summary(summaries[0])
    return 0


def _cmd_scenario(args) -> int:
    cfg = scenario(args.name, args.overrides)
    if args.out is not None:
        cfg.output_dir = args.out
    print(_header(cfg))
    print(format_config(cfg))
    summaries = run_and_report([cfg], reference=cfg.protocol, out_dir=cfg.output_dir)
    _print_summary(summaries[0])
    return 0


def _cmd_compare(args) -> int:
    base = load_config(args.config, args.overrides)
    if args.out is not None:
        base.output_dir = args.out
    protocols = [p.strip() for p in args.protocols.split(",") if p.strip()]
    if not protocols:
        raise ConfigError("--protocols needs at least one name")
    configs = [
        replace(
            base,
            protocol=p,
            mix=dict(base.mix),
            profile_overrides={k: dict(v) for k, v in base.profile_overrides.items()},
        ).validate()
        for p in protocols
    ]
    print(_header(base))
    summaries = run_and_report(configs, reference=args.reference, out_dir=base.output_dir)
    print(comparison_table(summaries, args.reference))
    return 0


def _cmd_plot(args) -> int:
    src = Path(args.src)
    if not src.is_dir():
        raise ConfigError(f"--from {src}: not a directory")
    csvs = sorted(p for p in src.glob("*.csv"))
    if not csvs:
        raise ConfigError(f"{src}: no round CSVs found")
    out = Path(args.out) if args.out else src / "accuracy.svg"
    plot_accuracy(csvs, out)
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    try:
        # parse_known_args lets key=value overrides appear after --flags too
        args, extra = _build_parser().parse_known_args(argv)
        if hasattr(args, "overrides"):
            for tok in extra:
                if "=" not in tok or tok.startswith("-"):
                    raise ConfigError(f"unrecognized argument {tok!r}")
                args.overrides.append(tok)
        elif extra:
            raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")
        handler = {
            "run": _cmd_run,
            "scenario": _cmd_scenario,
            "compare": _cmd_compare,
            "plot": _cmd_plot,
        }[args.command]
        return handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (ProtocolError, NumericFault) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
