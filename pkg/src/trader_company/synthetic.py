"""Synthetic return panels with a planted Trader formula."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formula import FeatureBank, TraderParams, eval_trader, HyperRanges, trader_history
from .returns_data import ReturnsPanel


@dataclass(frozen=True)
class PlantedAlphaSpec:
    """Recipe for a panel whose target stock follows ``ground_truth``.

    Background returns are i.i.d. ``N(0, background_scale**2)``.  For every
    ``t`` with enough history the target's next return is replaced by
    ``signal_scale * f(t) / rms(f) + N(0, noise_scale**2)``, where ``f`` is
    the ground-truth Trader evaluated on the panel at ``t`` and ``rms(f)`` its
    root-mean-square over the background panel.  Dividing by a positive
    constant keeps the sign of ``f`` and makes ``signal_scale`` the signal's
    typical size whatever the formula.

    With ``switch_at`` set, targets at index ``>= switch_at`` follow
    ``ground_truth_after`` instead.
    """

    num_stocks: int
    num_periods: int
    target_stock: int
    ground_truth: TraderParams
    signal_scale: float
    noise_scale: float
    seed: int
    background_scale: float = 1.0
    corr_window: int = 10
    switch_at: int | None = None
    ground_truth_after: TraderParams | None = None
    start_date: str = "2000-01-03"

    def __post_init__(self):
        if self.num_stocks < 1 or self.num_periods < 2:
            raise ValueError("need at least one stock and two periods")
        if not 0 <= self.target_stock < self.num_stocks:
            raise ValueError("target_stock outside the panel")
        if not self.signal_scale > 0:
            raise ValueError("signal_scale must be > 0")
        if self.noise_scale < 0 or self.background_scale < 0:
            raise ValueError("noise and background scales must be >= 0")
        formulas = [self.ground_truth]
        if self.switch_at is not None:
            if self.ground_truth_after is None:
                raise ValueError("switch_at needs ground_truth_after")
            formulas.append(self.ground_truth_after)
        for theta in formulas:
            for t in theta.terms:
                if t.p >= self.num_stocks or t.q >= self.num_stocks:
                    raise ValueError("ground truth references a stock outside the panel")
            if trader_history(theta, self.corr_window) + 1 >= self.num_periods:
                raise ValueError("ground-truth delays exceed the number of periods")

    @property
    def symbols(self) -> tuple[str, ...]:
        return tuple(f"S{i}" for i in range(self.num_stocks))


def business_dates(start: str, count: int) -> tuple[str, ...]:
    days = np.busday_offset(np.datetime64(start, "D"), np.arange(count), roll="forward")
    return tuple(str(d) for d in days)


def _rms(series: np.ndarray) -> float:
    valid = series[np.isfinite(series)]
    if valid.size == 0:
        return 1.0
    value = float(np.sqrt(np.mean(valid**2)))
    return value if value > 0 else 1.0


def generate_synthetic_panel(spec: PlantedAlphaSpec) -> tuple[ReturnsPanel, TraderParams]:
    rng = np.random.default_rng(spec.seed)
    S, T = spec.num_stocks, spec.num_periods
    r = rng.normal(0.0, 1.0, size=(S, T)) * spec.background_scale
    noise = rng.normal(0.0, 1.0, size=T) * spec.noise_scale

    regimes = [(spec.ground_truth, 0)]
    if spec.switch_at is not None:
        regimes.append((spec.ground_truth_after, spec.switch_at))
    background = FeatureBank(r.copy(), spec.corr_window)
    scales = [_rms(background.trader(theta)) for theta, _ in regimes]

    def formula_for(target_index: int) -> int:
        return 1 if spec.switch_at is not None and target_index >= spec.switch_at else 0

    tgt = spec.target_stock
    self_referential = any(t.p == tgt or t.q == tgt for theta, _ in regimes for t in theta.terms)
    ranges = HyperRanges(corr_window=spec.corr_window)
    if self_referential:
        for t in range(T - 1):
            k = formula_for(t + 1)
            theta = regimes[k][0]
            if t < trader_history(theta, spec.corr_window):
                continue
            signal = eval_trader(theta, r, t, ranges) / scales[k]
            r[tgt, t + 1] = spec.signal_scale * signal + noise[t + 1]
    else:
        for k, (theta, _) in enumerate(regimes):
            series = background.trader(theta) / scales[k]
            need = trader_history(theta, spec.corr_window)
            for t in range(need, T - 1):
                if formula_for(t + 1) == k:
                    r[tgt, t + 1] = spec.signal_scale * series[t] + noise[t + 1]

    timestamps = business_dates(spec.start_date, T + 1)[1:]
    return ReturnsPanel(spec.symbols, timestamps, r), spec.ground_truth
