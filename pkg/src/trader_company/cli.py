"""Command-line entry point: ``backtest``, ``inspect`` and ``synth``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import backtest as bt
from .returns_data import DataError, prices_from_returns, write_price_csv
from .formula import FormulaError, format_trader
from .synthetic import business_dates, generate_synthetic_panel


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcm", description="Trader-Company backtests on price panels.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    back = sub.add_parser("backtest", help="run an offline or online backtest")
    modes = back.add_subparsers(dest="mode", required=True)
    for mode in ("offline", "online"):
        p = modes.add_parser(mode)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--preset", choices=bt.PRESETS, help="ablation preset")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="parallel per-stock workers")
        if mode == "online":
            p.add_argument("--refit", help="refit period: a period count or 'yearly'")

    ins = sub.add_parser("inspect", help="rank Traders in a saved Company state")
    ins.add_argument("--state", required=True)
    ins.add_argument("--top", type=int, default=10)
    ins.add_argument("--window", help="rescore over decision times t1:t2")

    syn = sub.add_parser("synth", help="write a planted-alpha price panel")
    syn.add_argument("--spec", required=True, help="JSON planted-alpha spec")
    syn.add_argument("--out", required=True, help="price CSV to write")
    return parser


def _backtest(args) -> int:
    config = bt.load_config(args.config)
    if args.preset:
        config = bt.apply_ablation_preset(config, args.preset)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    out = args.out or os.environ.get(bt.OUT_DIR_ENV)
    if out:
        overrides["out_dir"] = out
    if args.workers is not None:
        overrides["workers"] = args.workers
    if getattr(args, "refit", None) is not None:
        overrides["refit_period"] = "yearly" if args.refit == "yearly" else int(args.refit)
    if overrides:
        config = replace(config, **overrides)
    run = bt.run_online_backtest if args.mode == "online" else bt.run_offline_backtest
    artifacts = run(config)
    avg = artifacts.report.averages
    print(f"{artifacts.run_dir}")
    print(
        "average: " + " ".join(f"{name}={avg[attr]:.4g}" for name, attr in bt.METRIC_COLUMNS)
    )
    return 0


def _inspect(args) -> int:
    window = bt.parse_window(args.window) if args.window else None
    report = bt.inspect(args.state, args.top, window)
    print(report.text)
    print("# usage census")
    for kind, key, count in report.census_rows:
        print(f"{kind}\t{key}\t{count}")
    return 0


def _synth(args) -> int:
    doc = json.loads(Path(args.spec).read_text())
    spec = bt._synthetic_from_dict(doc)
    panel, truth = generate_synthetic_panel(spec)
    first = business_dates(spec.start_date, 1)[0]
    write_price_csv(prices_from_returns(panel, first_timestamp=first), args.out)
    print(f"wrote {panel.n_stocks}x{panel.n_periods + 1} prices to {args.out}")
    print(f"ground truth for {panel.symbols[spec.target_stock]}: {format_trader(truth, panel.symbols)}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    level = logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    for handler in logging.getLogger().handlers:
        handler.setLevel(level)
    handlers = {"backtest": _backtest, "inspect": _inspect, "synth": _synth}
    try:
        return handlers[args.command](args)
    except (bt.BacktestError, DataError, FormulaError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"tcm: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
