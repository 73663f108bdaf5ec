"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 config/validation error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .builders import PRESETS, ConfigError, ModelConfig, build_retinanet
from .cost import CostOptions, CostReport, MacsPerFlop, cost_report
from .graph import GraphError
from .tradeoff import (
    SweepFailure,
    TradeoffPoint,
    emit_distribution_chart,
    emit_tradeoff_chart,
    input_scaling_baseline,
    points_from_csv,
    points_to_csv,
    points_to_json,
    reduction_factor,
    sweep,
)
from .transforms import apply_all, param_overhead, transform_from_dict, transforms_from_json

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOError(f"cannot read {path}: {exc.strerror}") from exc


def _write(path: str, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc.strerror}") from exc


def load_config(ref: str) -> ModelConfig:
    """Load a ModelConfig from a JSON file, or by preset name."""
    if ref in PRESETS and not Path(ref).exists():
        return PRESETS[ref]
    try:
        return ModelConfig.from_json(_read(ref)).validate()
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{ref}: invalid JSON ({exc})") from exc


def _print_config(config: ModelConfig, out, label: str = "config") -> None:
    out.write(f"# {label}\n{config.to_json()}")


def _opts(args) -> CostOptions:
    factor = MacsPerFlop.MAC_IS_TWO_FLOPS if args.macs_per_flop == 2 else MacsPerFlop.MAC_IS_ONE_FLOP
    return CostOptions(count_elementwise=args.include_elementwise, macs_per_flop=factor)


def _block_table(report: CostReport, out) -> None:
    out.write(f"{'block':<22}{'GMACs':>12}{'params':>14}{'fraction':>10}\n")
    for tag in report.blocks():
        cost = report.per_block[tag]
        out.write(
            f"{tag.label:<22}{cost.macs / 1e9:>12.3f}{cost.params:>14d}"
            f"{report.block_fractions[tag]:>10.4f}\n"
        )


def cmd_profile(args, out) -> int:
    config = load_config(args.config)
    _print_config(config, out)
    report = cost_report(build_retinanet(config), opts=_opts(args))
    _block_table(report, out)
    out.write(f"GMACs: {report.gmacs:.3f}\n")
    out.write(f"GFLOPs: {report.flops / 1e9:.3f}\n")
    out.write(f"params: {report.totals.params}\n")
    if args.csv:
        _write(args.csv, report.to_csv())
    if args.json:
        _write(args.json, report.to_json())
    return EXIT_OK


def cmd_transform(args, out) -> int:
    config = load_config(args.config)
    _print_config(config, out)
    result = apply_all(config, transforms_from_json(_read(args.apply)))
    _print_config(result, out, "transformed")
    _write(args.out, result.to_json())
    return EXIT_OK


def cmd_sweep(args, out, err) -> int:
    config = load_config(args.config)
    _print_config(config, out)
    suite = json.loads(_read(args.suite)) if args.suite else {}
    chains = [
        (chain["label"], [transform_from_dict(t) for t in chain.get("transforms", [])])
        for chain in suite.get("chains", [])
    ]
    results = sweep(config, chains, _opts(args))
    points: list[TradeoffPoint] = []
    failed = 0
    for r in results:
        if isinstance(r, SweepFailure):
            failed += 1
            err.write(f"sweep: chain {r.label!r} failed: {r.message}\n")
        else:
            points.append(r)
    baseline = points[0]
    sizes = suite.get("input_scaling_sizes", [])
    if sizes:
        points += input_scaling_baseline(config, sizes, _opts(args))
    out.write(f"{'label':<24}{'family':<14}{'GMACs':>10}{'reduction':>11}{'mAP':>7}\n")
    for p in points:
        ann = f"{p.map_annotation.value_percent:.1f}" if p.map_annotation else "-"
        out.write(
            f"{p.label:<24}{p.family.value:<14}{p.gmacs:>10.3f}"
            f"{reduction_factor(p, baseline):>10.3f}x{ann:>7}\n"
        )
    if args.csv:
        _write(args.csv, points_to_csv(points, baseline))
    if args.json:
        _write(args.json, points_to_json(points))
    return EXIT_CONFIG if failed else EXIT_OK


def cmd_compare(args, out) -> int:
    a, b = load_config(args.a), load_config(args.b)
    _print_config(a, out, "a")
    _print_config(b, out, "b")
    ra = cost_report(build_retinanet(a))
    rb = cost_report(build_retinanet(b))
    ga, gb = ra.by_group(), rb.by_group()
    out.write(f"{'block':<8}{'dGMACs':>12}{'dparams':>12}\n")
    for name in ga:
        dm = (gb[name].macs - ga[name].macs) / 1e9
        dp = gb[name].params - ga[name].params
        out.write(f"{name:<8}{dm:>+12.3f}{dp:>+12d}\n")
    out.write(f"total GMACs: {ra.gmacs:.3f} -> {rb.gmacs:.3f}\n")
    out.write(f"reduction factor: {ra.totals.macs / rb.totals.macs:.4f}x\n")
    out.write(f"params: {ra.totals.params} -> {rb.totals.params}\n")
    out.write(f"param_overhead: {param_overhead(a, b):+.6f}\n")
    return EXIT_OK


def cmd_render(args, out) -> int:
    if bool(args.points) == bool(args.report):
        raise UsageError("render: give exactly one of --points or --report")
    if args.points:
        text = emit_tradeoff_chart(points_from_csv(_read(args.points)))
    else:
        text = emit_distribution_chart(CostReport.from_json(_read(args.report)))
    _write(args.out, text)
    out.write(f"wrote {args.out}\n")
    return EXIT_OK


def _cost_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--include-elementwise", action="store_true",
                   help="also count BatchNorm/ReLU/Sigmoid/Add output elements")
    p.add_argument("--macs-per-flop", type=int, choices=(1, 2), default=1,
                   help="FLOPs per multiply-accumulate (default 1)")


def make_parser() -> argparse.ArgumentParser:
    presets = ", ".join(PRESETS)
    parser = _Parser(prog="liteheads", description="RetinaNet head cost analysis.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("profile", help="cost report for one config")
    p.add_argument("--config", required=True, help=f"ModelConfig JSON or preset ({presets})")
    p.add_argument("--csv", help="write per-block CSV here")
    p.add_argument("--json", help="write the full CostReport JSON here")
    _cost_flags(p)

    p = sub.add_parser("transform", help="apply transforms to a config")
    p.add_argument("--config", required=True, help=f"ModelConfig JSON or preset ({presets})")
    p.add_argument("--apply", required=True, help="transform JSON (object or list)")
    p.add_argument("--out", required=True, help="output ModelConfig JSON")

    p = sub.add_parser("sweep", help="trade-off points for a suite of transform chains")
    p.add_argument("--config", required=True, help=f"base ModelConfig JSON or preset ({presets})")
    p.add_argument("--suite", help="suite JSON with chains and input_scaling_sizes")
    p.add_argument("--csv", help="write trade-off points CSV here")
    p.add_argument("--json", help="write trade-off points JSON here")
    _cost_flags(p)

    p = sub.add_parser("compare", help="per-block deltas between two configs")
    p.add_argument("--a", required=True, help="first ModelConfig JSON or preset")
    p.add_argument("--b", required=True, help="second ModelConfig JSON or preset")

    p = sub.add_parser("render", help="SVG chart from points CSV or report JSON")
    p.add_argument("--points", help="trade-off points CSV (GMACs vs mAP chart)")
    p.add_argument("--report", help="CostReport JSON (block distribution chart)")
    p.add_argument("--out", required=True, help="output SVG path")
    return parser


def run(argv: Optional[Sequence[str]] = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = make_parser().parse_args(argv)
        if args.command == "sweep":
            return cmd_sweep(args, out, err)
        handler = {
            "profile": cmd_profile,
            "transform": cmd_transform,
            "compare": cmd_compare,
            "render": cmd_render,
        }[args.command]
        return handler(args, out)
    except UsageError as exc:
        err.write(f"{exc}\n")
        return EXIT_USAGE
    except (ConfigError, GraphError, KeyError, ValueError, TypeError) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except OSError as exc:
        err.write(f"error: {exc}\n")
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
