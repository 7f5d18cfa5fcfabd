"""Price ingestion, log returns and causal window slicing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

MISSING_POLICIES = ("forward-fill", "drop-row")


class DataError(ValueError):
    """Raised for malformed or inconsistent market data."""


@dataclass(frozen=True, eq=False)
class PricePanel:
    symbols: tuple[str, ...]
    timestamps: tuple[str, ...]
    prices: np.ndarray  # S x (T+1)

    def __post_init__(self):
        prices = np.array(self.prices, dtype=float)
        if prices.ndim != 2 or prices.shape != (len(self.symbols), len(self.timestamps)):
            raise DataError(
                f"price matrix shape {prices.shape} does not match "
                f"{len(self.symbols)} symbols x {len(self.timestamps)} timestamps"
            )
        prices.setflags(write=False)
        object.__setattr__(self, "prices", prices)

    @property
    def n_stocks(self) -> int:
        return len(self.symbols)


@dataclass(frozen=True, eq=False)
class ReturnsPanel:
    """S x T matrix of log returns.

    ``start`` is the absolute column index of column 0, so a window sliced
    out of a longer panel still knows where it sits.
    """

    symbols: tuple[str, ...]
    timestamps: tuple[str, ...]
    returns: np.ndarray
    start: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        returns = np.asarray(self.returns, dtype=float)
        if returns.ndim != 2 or returns.shape != (len(self.symbols), len(self.timestamps)):
            raise DataError(
                f"returns shape {returns.shape} does not match "
                f"{len(self.symbols)} symbols x {len(self.timestamps)} timestamps"
            )
        if not np.all(np.isfinite(returns)):
            raise DataError("returns contain non-finite values")
        if returns.flags.writeable:
            returns = returns.copy()
            returns.setflags(write=False)
        object.__setattr__(self, "returns", returns)
        object.__setattr__(self, "symbols", tuple(self.symbols))
        object.__setattr__(self, "timestamps", tuple(self.timestamps))

    @property
    def n_stocks(self) -> int:
        return self.returns.shape[0]

    @property
    def n_periods(self) -> int:
        return self.returns.shape[1]

    def replace_returns(self, returns: np.ndarray) -> "ReturnsPanel":
        return ReturnsPanel(self.symbols, self.timestamps, returns, self.start)


def compute_log_returns(prices: PricePanel) -> ReturnsPanel:
    p = prices.prices
    bad = np.argwhere(~(p > 0))
    if bad.size:
        i, t = bad[0]
        raise DataError(
            f"non-positive price {p[i, t]!r} for stock {i} ({prices.symbols[i]}) "
            f"at timestamp {prices.timestamps[t]}"
        )
    if p.shape[1] < 2:
        raise DataError("need at least two price observations")
    returns = np.log(p[:, 1:] / p[:, :-1])
    return ReturnsPanel(prices.symbols, prices.timestamps[1:], returns)


def prices_from_returns(panel: ReturnsPanel, initial: float = 100.0, first_timestamp: str = "") -> PricePanel:
    """Inverse of :func:`compute_log_returns` up to the initial price level."""
    S = panel.n_stocks
    levels = np.concatenate([np.zeros((S, 1)), np.cumsum(panel.returns, axis=1)], axis=1)
    prices = initial * np.exp(levels)
    return PricePanel(panel.symbols, (first_timestamp,) + panel.timestamps, prices)


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text)


def try_parse_timestamps(timestamps: Sequence[str]) -> list[datetime] | None:
    try:
        return [parse_timestamp(ts) for ts in timestamps]
    except (ValueError, TypeError):
        return None


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`load_price_csv`.

    ``layout`` is ``wide`` (one price column per symbol) or ``long``
    (``timestamp,symbol,price`` rows).  ``symbols`` restricts and orders the
    symbols to load; ``None`` keeps every symbol in file order.
    """

    layout: str = "wide"
    timestamp_column: str = "timestamp"
    symbol_column: str = "symbol"
    price_column: str = "price"
    symbols: tuple[str, ...] | None = None
    missing: str = "forward-fill"

    def __post_init__(self):
        if self.layout not in ("wide", "long"):
            raise ValueError(f"unknown CSV layout {self.layout!r}")
        if self.missing not in MISSING_POLICIES:
            raise ValueError(f"unknown missing-data policy {self.missing!r}")
        if self.symbols is not None:
            object.__setattr__(self, "symbols", tuple(self.symbols))


def _parse_price(cell: str, line: int, column: str) -> float:
    cell = cell.strip()
    if cell == "":
        return math.nan
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"line {line}: unparseable price {cell!r} in column {column!r}") from None
    if not math.isfinite(value):
        raise DataError(f"line {line}: non-finite price {cell!r} in column {column!r}")
    return value


def _read_wide(reader, schema: CsvSchema):
    header = next(reader, None)
    if header is None:
        raise DataError("line 1: empty CSV file")
    header = [h.strip() for h in header]
    if schema.timestamp_column not in header:
        raise DataError(f"line 1: missing timestamp column {schema.timestamp_column!r}")
    ts_col = header.index(schema.timestamp_column)
    available = [h for i, h in enumerate(header) if i != ts_col]
    symbols = schema.symbols if schema.symbols is not None else tuple(available)
    for sym in symbols:
        if sym not in available:
            raise DataError(f"line 1: unknown symbol {sym!r}")
    cols = [header.index(sym) for sym in symbols]

    rows: dict[str, tuple[int, list[float]]] = {}
    for line, record in enumerate(reader, start=2):
        if not record or all(not c.strip() for c in record):
            continue
        if len(record) != len(header):
            raise DataError(f"line {line}: expected {len(header)} cells, got {len(record)}")
        ts = record[ts_col].strip()
        if ts in rows:
            raise DataError(f"line {line}: duplicate timestamp {ts!r}")
        rows[ts] = (line, [_parse_price(record[c], line, header[c]) for c in cols])
    return symbols, rows


def _read_long(reader, schema: CsvSchema):
    header = next(reader, None)
    if header is None:
        raise DataError("line 1: empty CSV file")
    header = [h.strip() for h in header]
    for name in (schema.timestamp_column, schema.symbol_column, schema.price_column):
        if name not in header:
            raise DataError(f"line 1: missing column {name!r}")
    ts_col = header.index(schema.timestamp_column)
    sym_col = header.index(schema.symbol_column)
    px_col = header.index(schema.price_column)

    cells: dict[str, dict[str, float]] = {}
    first_line: dict[str, int] = {}
    seen_symbols: list[str] = []
    for line, record in enumerate(reader, start=2):
        if not record or all(not c.strip() for c in record):
            continue
        if len(record) != len(header):
            raise DataError(f"line {line}: expected {len(header)} cells, got {len(record)}")
        ts = record[ts_col].strip()
        sym = record[sym_col].strip()
        if schema.symbols is not None and sym not in schema.symbols:
            raise DataError(f"line {line}: unknown symbol {sym!r}")
        if sym not in seen_symbols:
            seen_symbols.append(sym)
        row = cells.setdefault(ts, {})
        first_line.setdefault(ts, line)
        if sym in row:
            raise DataError(f"line {line}: duplicate timestamp {ts!r} for symbol {sym!r}")
        row[sym] = _parse_price(record[px_col], line, schema.price_column)

    symbols = schema.symbols if schema.symbols is not None else tuple(seen_symbols)
    rows = {
        ts: (first_line[ts], [row.get(sym, math.nan) for sym in symbols])
        for ts, row in cells.items()
    }
    return symbols, rows


def load_price_csv(path: str | Path, schema: CsvSchema | None = None) -> PricePanel:
    """Load a wide or long price CSV into an aligned :class:`PricePanel`.

    Timestamps are sorted chronologically.  Gaps are forward-filled or the
    affected rows dropped, per ``schema.missing``; under forward-fill, leading
    rows that cannot be filled are dropped.
    """
    schema = schema or CsvSchema()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if schema.layout == "wide":
            symbols, rows = _read_wide(reader, schema)
        else:
            symbols, rows = _read_long(reader, schema)
    if not symbols:
        raise DataError("no symbols found")

    try:
        keyed = sorted(rows.items(), key=lambda kv: parse_timestamp(kv[0]))
    except ValueError as exc:
        bad = next(ts for ts in rows if _is_bad_timestamp(ts))
        raise DataError(f"line {rows[bad][0]}: unparseable timestamp {bad!r}") from exc

    timestamps = [ts for ts, _ in keyed]
    prices = np.array([vals for _, (_, vals) in keyed], dtype=float).T  # S x n
    if prices.size == 0:
        raise DataError("no price rows found")

    if schema.missing == "drop-row":
        keep = ~np.any(np.isnan(prices), axis=0)
    else:
        for i in range(prices.shape[0]):
            last = math.nan
            for t in range(prices.shape[1]):
                if math.isnan(prices[i, t]):
                    prices[i, t] = last
                else:
                    last = prices[i, t]
        keep = ~np.any(np.isnan(prices), axis=0)
    prices = prices[:, keep]
    timestamps = [ts for ts, k in zip(timestamps, keep) if k]
    if len(timestamps) < 2:
        raise DataError("fewer than two complete price rows after missing-data handling")
    return PricePanel(tuple(symbols), tuple(timestamps), prices)


def _is_bad_timestamp(ts: str) -> bool:
    try:
        parse_timestamp(ts)
    except ValueError:
        return True
    return False


def write_price_csv(prices: PricePanel, path: str | Path) -> None:
    """Write a wide price CSV readable by :func:`load_price_csv`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", *prices.symbols])
        for t, ts in enumerate(prices.timestamps):
            writer.writerow([ts, *(repr(float(v)) for v in prices.prices[:, t])])


def slice_window(panel: ReturnsPanel, t: int, w: int, l: int) -> ReturnsPanel:
    """Columns ``t-l-w`` through ``t-l`` inclusive: the history usable for
    a prediction made at ``t`` under window ``w`` and execution lag ``l``."""
    lo = t - l - w
    hi = t - l
    if lo < 0:
        raise DataError(f"insufficient history for t={t}: earliest valid t is {w + l}")
    if hi >= panel.n_periods:
        raise DataError(f"t={t} with lag {l} is beyond the panel ({panel.n_periods} periods)")
    view = panel.returns[:, lo : hi + 1]
    return ReturnsPanel(panel.symbols, panel.timestamps[lo : hi + 1], view, panel.start + lo)
