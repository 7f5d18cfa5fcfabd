"""Offline and online backtests, ablation presets, persistence and reports.

Index conventions: the return at column ``tau`` is predicted at decision time
``tau - 1 - lag`` using only columns up to that decision time.  A model used
to predict targets from ``b`` onward is trained only on targets ``<= b - 1 - lag``
so that training never sees data the execution lag would hide.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .company import (
    CompanyConfig,
    CompanyState,
    config_from_dict,
    config_to_dict,
    company_predict_series,
    init_company,
    state_from_dict,
    state_to_dict,
    train_step,
    trader_scores,
    usage_census,
)
from .evaluation import MetricsReport, PredictionTrack, infer_periods_per_year, metrics_report
from .formula import Activation, HyperRanges, Operator, format_trader, parse_trader
from .returns_data import (
    CsvSchema,
    ReturnsPanel,
    compute_log_returns,
    load_price_csv,
    try_parse_timestamps,
)
from .synthetic import PlantedAlphaSpec, generate_synthetic_panel

log = logging.getLogger("trader_company")

PRESETS = ("tc", "tc-linear", "tc-unary", "tc-no-educate", "tc-no-prune", "tc-unimodal", "tc-mse", "market")
OUT_DIR_ENV = "TRADER_COMPANY_OUT"


class BacktestError(RuntimeError):
    pass


# -- configuration --------------------------------------------------------------------


@dataclass(frozen=True)
class DataSource:
    csv: str | None = None
    schema: CsvSchema = field(default_factory=CsvSchema)
    synthetic: PlantedAlphaSpec | None = None

    def __post_init__(self):
        if (self.csv is None) == (self.synthetic is None):
            raise ValueError("data source needs exactly one of 'csv' or 'synthetic'")


@dataclass(frozen=True)
class BacktestConfig:
    data: DataSource
    split: float | str = 0.5
    window: int = 10
    lag: int = 1
    refit_period: int | str | None = None
    company: CompanyConfig = field(default_factory=CompanyConfig)
    rounds: int = 5
    targets: tuple[int | str, ...] | None = None
    periods_per_year: float | None = None
    seed: int = 0
    out_dir: str | None = "runs"
    preset: str = "tc"
    market: bool = False
    top_k: int = 5
    workers: int = 1

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.lag < 0:
            raise ValueError("lag must be >= 0")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if isinstance(self.split, float) and not 0.0 < self.split < 1.0:
            raise ValueError("fractional split must lie in (0, 1)")
        if isinstance(self.refit_period, int) and self.refit_period < 1:
            raise ValueError("refit_period must be >= 1")
        if isinstance(self.refit_period, str) and self.refit_period != "yearly":
            raise ValueError("refit_period must be a period count or 'yearly'")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.company.lag != self.lag:
            object.__setattr__(self, "company", replace(self.company, lag=self.lag))


def apply_ablation_preset(config: BacktestConfig, preset: str) -> BacktestConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    company = config.company
    ranges = company.ranges
    market = False
    if preset == "tc-linear":
        company = replace(company, ranges=replace(ranges, allowed_activations=(Activation.IDENTITY,)))
    elif preset == "tc-unary":
        company = replace(company, ranges=replace(ranges, allowed_ops=(Operator.X,)))
    elif preset == "tc-no-educate":
        company = replace(company, educate_enabled=False)
    elif preset == "tc-no-prune":
        company = replace(company, prune_enabled=False)
    elif preset == "tc-unimodal":
        company = replace(company, gmm_components=1)
    elif preset == "tc-mse":
        company = replace(company, score="negative-mse")
    elif preset == "market":
        market = True
    return replace(config, company=company, preset=preset, market=market)


def _synthetic_from_dict(d: dict[str, Any]) -> PlantedAlphaSpec:
    d = dict(d)
    symbols = [f"S{i}" for i in range(int(d["num_stocks"]))]
    for key in ("ground_truth", "ground_truth_after"):
        if isinstance(d.get(key), str):
            d[key] = parse_trader(d[key], symbols)
    return PlantedAlphaSpec(**d)


def _synthetic_to_dict(spec: PlantedAlphaSpec) -> dict[str, Any]:
    d = asdict(spec)
    symbols = spec.symbols
    d["ground_truth"] = format_trader(spec.ground_truth, symbols, precision=None)
    if spec.ground_truth_after is not None:
        d["ground_truth_after"] = format_trader(spec.ground_truth_after, symbols, precision=None)
    return d


def data_source_from_dict(d: dict[str, Any], base_dir: Path | None = None) -> DataSource:
    if "synthetic" in d:
        return DataSource(synthetic=_synthetic_from_dict(d["synthetic"]))
    path = Path(d["csv"])
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    schema_keys = ("layout", "timestamp_column", "symbol_column", "price_column", "symbols", "missing")
    schema = CsvSchema(**{k: d[k] for k in schema_keys if k in d})
    return DataSource(csv=str(path), schema=schema)


def data_source_to_dict(source: DataSource) -> dict[str, Any]:
    if source.synthetic is not None:
        return {"synthetic": _synthetic_to_dict(source.synthetic)}
    d = {"csv": source.csv, **asdict(source.schema)}
    if d["symbols"] is not None:
        d["symbols"] = list(d["symbols"])
    return d


def config_from_mapping(d: dict[str, Any], base_dir: Path | None = None) -> BacktestConfig:
    """Build a config from a parsed document; standard defaults fill anything omitted."""
    d = dict(d)
    window = int(d.get("window", 10))
    company = dict(d.get("company", {}))
    ranges = dict(company.get("ranges", {}))
    ranges.setdefault("max_delay", window)
    ranges.setdefault("corr_window", window)
    company["ranges"] = ranges
    company["lag"] = int(d.get("lag", 1))
    kwargs: dict[str, Any] = {
        "data": data_source_from_dict(d["data"], base_dir),
        "window": window,
        "lag": company["lag"],
        "company": config_from_dict(company),
    }
    for key in ("split", "refit_period", "rounds", "periods_per_year", "seed", "out_dir", "top_k", "workers"):
        if key in d:
            kwargs[key] = d[key]
    if d.get("targets") is not None:
        kwargs["targets"] = tuple(d["targets"])
    config = BacktestConfig(**kwargs)
    return apply_ablation_preset(config, d.get("preset", "tc"))


def config_to_mapping(config: BacktestConfig) -> dict[str, Any]:
    return {
        "data": data_source_to_dict(config.data),
        "split": config.split,
        "window": config.window,
        "lag": config.lag,
        "refit_period": config.refit_period,
        "company": config_to_dict(config.company),
        "rounds": config.rounds,
        "targets": None if config.targets is None else list(config.targets),
        "periods_per_year": config.periods_per_year,
        "seed": config.seed,
        "out_dir": config.out_dir,
        "preset": config.preset,
        "top_k": config.top_k,
        "workers": config.workers,
    }


def load_config(path: str | Path) -> BacktestConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BacktestError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_mapping(doc, base_dir=path.parent)


def config_hash(config: BacktestConfig) -> str:
    doc = config_to_mapping(config)
    doc.pop("out_dir")
    doc.pop("workers")
    blob = json.dumps(doc, sort_keys=True, ensure_ascii=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- data ------------------------------------------------------------------------------


def load_panel(source: DataSource) -> ReturnsPanel:
    if source.synthetic is not None:
        panel, _ = generate_synthetic_panel(source.synthetic)
        return panel
    return compute_log_returns(load_price_csv(source.csv, source.schema))


def resolve_targets(config: BacktestConfig, panel: ReturnsPanel) -> list[int]:
    if config.targets is None:
        return list(range(panel.n_stocks))
    out = []
    for t in config.targets:
        if isinstance(t, str) and not t.isdigit():
            if t not in panel.symbols:
                raise BacktestError(f"unknown target symbol {t!r}")
            out.append(panel.symbols.index(t))
        else:
            idx = int(t)
            if not 0 <= idx < panel.n_stocks:
                raise BacktestError(f"target index {idx} outside 0..{panel.n_stocks - 1}")
            out.append(idx)
    return sorted(set(out))


def split_index(config: BacktestConfig, panel: ReturnsPanel) -> int:
    """First test column."""
    T = panel.n_periods
    if isinstance(config.split, str):
        parsed = try_parse_timestamps(panel.timestamps)
        if parsed is None:
            raise BacktestError("timestamp split needs ISO-8601 timestamps")
        from .returns_data import parse_timestamp

        cut = parse_timestamp(config.split)
        idx = next((i for i, ts in enumerate(parsed) if ts >= cut), T)
    else:
        idx = int(T * config.split)
    if idx >= T:
        raise BacktestError("split leaves no test periods")
    return idx


def refit_boundaries(config: BacktestConfig, panel: ReturnsPanel, test_start: int) -> list[int]:
    T = panel.n_periods
    if config.refit_period is None:
        return [test_start]
    if config.refit_period == "yearly":
        parsed = try_parse_timestamps(panel.timestamps)
        if parsed is None:
            raise BacktestError("yearly refits need ISO-8601 timestamps")
        bounds = [test_start]
        for tau in range(test_start + 1, T):
            if parsed[tau].year != parsed[tau - 1].year:
                bounds.append(tau)
        return bounds
    return list(range(test_start, T, int(config.refit_period)))


def stock_seed(seed: int, target: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, target]))


# -- runs ---------------------------------------------------------------------------------


@dataclass
class StockRun:
    target: int
    track: PredictionTrack
    state: CompanyState | None
    train_end_decision: int
    log_lines: list[str] = field(default_factory=list)


@dataclass
class RunArtifacts:
    mode: str
    config: BacktestConfig
    symbols: tuple[str, ...]
    timestamps: tuple[str, ...]
    report: MetricsReport
    runs: list[StockRun]
    periods_per_year: float
    log_lines: list[str] = field(default_factory=list)
    run_dir: Path | None = None
    files: list[Path] = field(default_factory=list)


def _history_start(config: BacktestConfig) -> int:
    return config.company.ranges.min_history


def _run_stock(args) -> StockRun:
    with _Collector() as collector:
        run = _train_and_predict(*args)
    run.log_lines = collector.lines
    return run


def _train_and_predict(config, panel, target, test_start, bounds) -> StockRun:
    h = 1 + config.lag
    T = panel.n_periods
    taus = np.arange(test_start, T)
    actual = panel.returns[target, taus]
    if config.market:
        return StockRun(target, PredictionTrack(target, taus, np.ones(len(taus)), actual), None, -1)

    u0 = _history_start(config)
    rng = stock_seed(config.seed, target)
    state = init_company(target, panel.n_stocks, config.company, rng)
    predicted = np.empty(len(taus))
    t2 = -1
    for k, b in enumerate(bounds):
        end = bounds[k + 1] if k + 1 < len(bounds) else T
        t2 = b - 2 * h
        if t2 < u0:
            raise BacktestError(
                f"not enough history before column {b}: training needs decision times {u0}..{t2}"
            )
        for _ in range(config.rounds):
            state = train_step(state, panel, u0, t2, rng)
        if state.scores is None:
            state = replace(state, scores=tuple(trader_scores(state, panel, range(u0, t2 + 1))))
        series = company_predict_series(state, panel)
        seg = slice(b - test_start, end - test_start)
        predicted[seg] = series[taus[seg] - h]
        log.info("stock %d: segment %d trained on decisions %d..%d, predicts %d..%d", target, k, u0, t2, b, end - 1)
    return StockRun(target, PredictionTrack(target, taus, predicted, actual), state, t2)


class _Collector(logging.Handler):
    """Capture package log records so run logs do not depend on scheduling."""

    def __init__(self):
        super().__init__(logging.INFO)
        self.lines: list[str] = []

    def emit(self, record):
        self.lines.append(f"{record.levelname} {record.name}: {record.getMessage()}")

    def __enter__(self):
        self._logger = logging.getLogger("trader_company")
        self._level = self._logger.level
        self._logger.addHandler(self)
        if self._logger.getEffectiveLevel() > logging.INFO:
            self._logger.setLevel(logging.INFO)
        return self

    def __exit__(self, *exc):
        self._logger.removeHandler(self)
        self._logger.setLevel(self._level)


def _run(config: BacktestConfig, mode: str, write: bool, panel: ReturnsPanel | None) -> RunArtifacts:
    artifacts = _run_inner(config, mode, panel)
    if write and config.out_dir is not None:
        write_artifacts(artifacts)
    return artifacts


def _run_inner(config: BacktestConfig, mode: str, panel: ReturnsPanel | None) -> RunArtifacts:
    if panel is None:
        panel = load_panel(config.data)
    targets = resolve_targets(config, panel)
    test_start = split_index(config, panel)
    bounds = refit_boundaries(config, panel, test_start) if mode == "online" else [test_start]
    ppy = config.periods_per_year or infer_periods_per_year(panel.timestamps)

    jobs = [(config, panel, target, test_start, bounds) for target in targets]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            runs = list(pool.map(_run_stock, jobs))
    else:
        runs = [_run_stock(job) for job in jobs]
    runs.sort(key=lambda r: r.target)

    report = metrics_report([r.track for r in runs], ppy, panel.symbols)
    lines = [f"INFO trader_company.backtest: {mode} run over {len(targets)} target(s), test columns {test_start}..{panel.n_periods - 1}"]
    for r in runs:
        lines.extend(r.log_lines)
    return RunArtifacts(mode, config, panel.symbols, panel.timestamps, report, runs, ppy, lines)


def run_offline_backtest(
    config: BacktestConfig, write: bool = True, panel: ReturnsPanel | None = None
) -> RunArtifacts:
    """Train once on the training span, then predict the whole test span frozen.

    ``panel`` replaces the configured data source, which is handy for audits.
    """
    return _run(config, "offline", write, panel)


def run_online_backtest(
    config: BacktestConfig, write: bool = True, panel: ReturnsPanel | None = None
) -> RunArtifacts:
    """Walk forward: retrain on all past observations at every refit boundary."""
    return _run(config, "online", write, panel)


# -- reports -----------------------------------------------------------------------------------


def _num(x: float) -> str:
    return "" if x is None or math.isnan(x) else repr(float(x))


def _json_num(x: float):
    return None if x is None or math.isnan(x) else float(x)


METRIC_COLUMNS = (("ACC", "acc"), ("AR", "ar"), ("SR", "sr"), ("CR", "cr"), ("MDD", "mdd"), ("C", "final_return"))


def run_id(artifacts: RunArtifacts) -> str:
    cfg = artifacts.config
    return f"{artifacts.mode}-{cfg.preset}-{config_hash(cfg)}-seed{cfg.seed}"


def emit_report(artifacts: RunArtifacts, fmt: str, out_dir: Path) -> list[Path]:
    """Write the metrics table (``csv`` or ``json``) plus the curves CSV."""
    out_dir.mkdir(parents=True, exist_ok=True)
    report = artifacts.report
    files = []
    if fmt == "csv":
        path = out_dir / "metrics.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["stock", *(name for name, _ in METRIC_COLUMNS)])
            for m in report.per_stock:
                writer.writerow([m.symbol, *(_num(getattr(m, attr)) for _, attr in METRIC_COLUMNS)])
            writer.writerow(["average", *(_num(report.averages[attr]) for _, attr in METRIC_COLUMNS)])
    elif fmt == "json":
        path = out_dir / "metrics.json"
        doc = {
            "preset": artifacts.config.preset,
            "periods_per_year": artifacts.periods_per_year,
            "stocks": [
                {"stock": m.symbol, "n_periods": m.n_periods,
                 **{name: _json_num(getattr(m, attr)) for name, attr in METRIC_COLUMNS}}
                for m in report.per_stock
            ],
            "average": {name: _json_num(report.averages[attr]) for name, attr in METRIC_COLUMNS},
        }
        path.write_text(json.dumps(doc, indent=2) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    files.append(path)

    curves = out_dir / "curves.csv"
    with open(curves, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stock", "time", "cumulative_return"])
        for target, curve in report.curves.items():
            for tau, c in zip(report.times[target], curve):
                writer.writerow([artifacts.symbols[target], artifacts.timestamps[tau], repr(float(c))])
    files.append(curves)
    return files


def state_document(run: StockRun, artifacts: RunArtifacts) -> dict[str, Any]:
    cfg = artifacts.config
    return {
        "company": state_to_dict(run.state),
        "symbols": list(artifacts.symbols),
        "data": data_source_to_dict(cfg.data),
        "score_window": [_history_start(cfg), run.train_end_decision],
    }


def save_state(doc: dict[str, Any], path: Path) -> None:
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_state(path: str | Path) -> dict[str, Any]:
    try:
        doc = json.loads(Path(path).read_text())
        doc["company"] = state_from_dict(doc["company"])
        doc["symbols"] = tuple(doc["symbols"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise BacktestError(f"cannot read Company state {path}: {exc}") from exc
    if doc["company"].n_stocks != len(doc["symbols"]):
        raise BacktestError(f"cannot read Company state {path}: symbol table does not match")
    return doc


def write_artifacts(artifacts: RunArtifacts) -> Path:
    root = Path(artifacts.config.out_dir)
    run_dir = root / run_id(artifacts)
    run_dir.mkdir(parents=True, exist_ok=True)
    files = [*emit_report(artifacts, "csv", run_dir), *emit_report(artifacts, "json", run_dir)]
    log_path = run_dir / "run.log"
    log_path.write_text("".join(line + "\n" for line in artifacts.log_lines))
    files.append(log_path)
    config_path = run_dir / "config.json"
    config_path.write_text(json.dumps(config_to_mapping(artifacts.config), indent=2, sort_keys=True) + "\n")
    files.append(config_path)

    states_dir = run_dir / "states"
    formula_lines = []
    census_rows = []
    for run in artifacts.runs:
        if run.state is None:
            continue
        states_dir.mkdir(exist_ok=True)
        path = states_dir / f"{artifacts.symbols[run.target]}.json"
        save_state(state_document(run, artifacts), path)
        files.append(path)
        report = inspect_state(run.state, artifacts.symbols, artifacts.config.top_k)
        formula_lines.append(report.text)
        census_rows.extend((artifacts.symbols[run.target], *row) for row in report.census_rows)
    if formula_lines:
        path = run_dir / "formulas.txt"
        path.write_text("\n\n".join(formula_lines) + "\n")
        files.append(path)
        path = run_dir / "census.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["company", "kind", "key", "count"])
            writer.writerows(census_rows)
        files.append(path)
    artifacts.run_dir = run_dir
    artifacts.files = files
    return run_dir


# -- inspection ---------------------------------------------------------------------------------


@dataclass
class InspectReport:
    ranking: list[tuple[int, float]]  # (trader index, score), best first
    text: str
    census_rows: list[tuple[str, str, int]]


def inspect_state(
    state: CompanyState,
    symbols: Sequence[str],
    top_k: int,
    scores: Sequence[float] | None = None,
) -> InspectReport:
    """Rank Traders by score (descending, ties by index) and tabulate usage."""
    if scores is None:
        scores = state.scores
    if scores is None:
        raise BacktestError("state holds no scores; supply an evaluation window")
    order = sorted(range(state.n), key=lambda n: (-scores[n], n))
    ranking = [(n, float(scores[n])) for n in order[: max(top_k, 0)]]
    lines = [f"# Company for {symbols[state.target]}: top {len(ranking)} of {state.n} Traders"]
    for rank, (n, score) in enumerate(ranking, start=1):
        lines.append(f"## rank {rank}: Trader {n}, score {score:.6g}, {state.traders[n].m} term(s)")
        lines.append(format_trader(state.traders[n], symbols))
    census = usage_census(state)
    rows = [("stock", symbols[i], c) for i, c in sorted(census.stocks.items())]
    rows += [("operator", op.value, c) for op, c in sorted(census.operators.items(), key=lambda kv: kv[0].value)]
    rows += [("activation", a.value, c) for a, c in sorted(census.activations.items(), key=lambda kv: kv[0].value)]
    return InspectReport(ranking, "\n".join(lines), rows)


def parse_window(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise BacktestError(f"window must look like t1:t2, got {text!r}") from None


def inspect(state_path: str | Path, top_k: int = 10, window: tuple[int, int] | None = None) -> InspectReport:
    doc = load_state(state_path)
    state: CompanyState = doc["company"]
    scores = None
    if window is not None:
        source = data_source_from_dict(doc["data"])
        panel = load_panel(source)
        scores = trader_scores(state, panel, range(window[0], window[1] + 1))
    return inspect_state(state, doc["symbols"], top_k, scores)
