"""Canonical sign strategy and the ACC / AR / SR / MDD / CR metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import median
from typing import Sequence

import numpy as np

from .returns_data import try_parse_timestamps

DAILY_PERIODS_PER_YEAR = 252
MDD_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class PredictionTrack:
    target: int
    times: np.ndarray
    predicted: np.ndarray
    actual: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64)
        predicted = np.asarray(self.predicted, dtype=float)
        actual = np.asarray(self.actual, dtype=float)
        if not (len(times) == len(predicted) == len(actual)):
            raise ValueError("times, predicted and actual must have equal lengths")
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "predicted", predicted)
        object.__setattr__(self, "actual", actual)

    def __len__(self) -> int:
        return len(self.times)


def canonical_positions(track: PredictionTrack) -> np.ndarray:
    return np.sign(track.predicted)


def strategy_returns(track: PredictionTrack) -> np.ndarray:
    return canonical_positions(track) * track.actual


def cumulative_return_series(track: PredictionTrack) -> np.ndarray:
    return np.cumsum(strategy_returns(track))


def accuracy(track: PredictionTrack) -> float:
    if len(track) == 0:
        raise ValueError("accuracy of an empty track")
    hits = np.sign(track.actual) == np.sign(track.predicted)
    return 100.0 * float(np.count_nonzero(hits)) / len(track)


def annualized_return(final_return: float, periods_per_year: float, n_periods: int) -> float:
    if n_periods <= 0:
        raise ValueError("n_periods must be positive")
    return 100.0 * (periods_per_year / n_periods) * final_return


def sharpe_ratio(track: PredictionTrack) -> float:
    """Per-period mean over population standard deviation; NaN when the
    strategy returns are constant."""
    r = strategy_returns(track)
    if len(r) == 0 or np.ptp(r) == 0:
        return math.nan
    mu = float(np.mean(r))
    sigma = float(np.sqrt(np.mean((r - mu) ** 2)))
    if sigma == 0:
        return math.nan
    return mu / sigma


def max_drawdown(curve: Sequence[float]) -> float:
    """Largest peak-to-trough fall of the curve, measured from an implicit 0 origin."""
    c = np.concatenate([[0.0], np.asarray(curve, dtype=float)])
    return float(np.max(np.maximum.accumulate(c) - c))


def calmar_ratio(ar: float, mdd: float) -> float:
    if mdd < 0:
        raise ValueError("drawdown must be non-negative")
    if mdd < MDD_EPS:
        return math.nan
    return ar / mdd


def infer_periods_per_year(timestamps: Sequence[str]) -> float:
    """252 for daily-spaced data; otherwise the average count of periods per year."""
    parsed = try_parse_timestamps(timestamps)
    if parsed is None or len(parsed) < 2:
        return float(DAILY_PERIODS_PER_YEAR)
    gaps = [(b - a).total_seconds() / 86400.0 for a, b in zip(parsed, parsed[1:])]
    spacing = median(gaps)
    if 0.5 <= spacing <= 4.0:
        return float(DAILY_PERIODS_PER_YEAR)
    years = (parsed[-1] - parsed[0]).total_seconds() / (365.25 * 86400.0)
    if years <= 0:
        return float(DAILY_PERIODS_PER_YEAR)
    return (len(parsed) - 1) / years


@dataclass(frozen=True)
class StockMetrics:
    target: int
    symbol: str
    acc: float
    ar: float
    sr: float
    cr: float
    mdd: float
    final_return: float
    n_periods: int


@dataclass(frozen=True)
class MetricsReport:
    per_stock: tuple[StockMetrics, ...]
    averages: dict[str, float]
    curves: dict[int, np.ndarray] = field(repr=False)
    times: dict[int, np.ndarray] = field(repr=False)


def _mean_defined(values: Sequence[float]) -> float:
    defined = [v for v in values if not math.isnan(v)]
    return math.fsum(defined) / len(defined) if defined else math.nan


def stock_metrics(track: PredictionTrack, periods_per_year: float, symbol: str = "") -> StockMetrics:
    curve = cumulative_return_series(track)
    final = float(curve[-1])
    ar = annualized_return(final, periods_per_year, len(track))
    mdd = max_drawdown(curve)
    return StockMetrics(
        target=track.target,
        symbol=symbol,
        acc=accuracy(track),
        ar=ar,
        sr=sharpe_ratio(track),
        cr=calmar_ratio(ar, mdd),
        mdd=mdd,
        final_return=final,
        n_periods=len(track),
    )


def metrics_report(
    tracks: Sequence[PredictionTrack], periods_per_year: float, symbols: Sequence[str] | None = None
) -> MetricsReport:
    if not tracks:
        raise ValueError("need at least one track")
    ordered = sorted(tracks, key=lambda tr: tr.target)
    per_stock = tuple(
        stock_metrics(tr, periods_per_year, symbols[tr.target] if symbols else str(tr.target))
        for tr in ordered
    )
    averages = {
        name: _mean_defined([getattr(m, name) for m in per_stock])
        for name in ("acc", "ar", "sr", "cr", "mdd", "final_return")
    }
    curves = {tr.target: cumulative_return_series(tr) for tr in ordered}
    times = {tr.target: tr.times for tr in ordered}
    return MetricsReport(per_stock, averages, curves, times)
