"""Population management for one target stock.

A Company holds N Traders, combines their predictions through an aggregator
(uniform mean or a linear regression with intercept), re-fits the weights of
its worst Traders by least squares ("educate"), and replaces them with
mixture-sampled newcomers ("prune and generate").

Time ranges are Python ``range`` objects of *decision times* ``u``; the
prediction made at ``u`` targets ``r_target[u + 1 + lag]``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .formula import (
    HyperRanges,
    TraderParams,
    check_range,
    feature_bank,
    sample_uniform_trader,
    trader_from_record,
    trader_history,
    trader_to_record,
)
from .gmm import DEFAULT_COMPONENTS, REG_FLOOR, generate_traders
from .returns_data import ReturnsPanel

log = logging.getLogger(__name__)

AGGREGATIONS = ("mean", "linear")
SCORES = ("cumulative-return", "negative-mse")
SINGULAR_RIDGE = 1e-6


@dataclass(frozen=True)
class CompanyConfig:
    n_traders: int = 100
    q: float = 0.5
    fit_times: int = 2
    aggregation: str = "linear"
    score: str = "cumulative-return"
    educate_enabled: bool = True
    prune_enabled: bool = True
    ranges: HyperRanges = field(default_factory=HyperRanges)
    ridge: float = 0.0
    gmm_components: int = DEFAULT_COMPONENTS
    reg_floor: float = REG_FLOOR
    lag: int = 0

    def __post_init__(self):
        if self.n_traders < 1:
            raise ValueError("n_traders must be >= 1")
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie in (0, 1)")
        if self.fit_times < 1:
            raise ValueError("fit_times must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.score not in SCORES:
            raise ValueError(f"score must be one of {SCORES}")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.gmm_components < 1:
            raise ValueError("gmm_components must be >= 1")
        if self.lag < 0:
            raise ValueError("lag must be >= 0")

    @property
    def horizon(self) -> int:
        return 1 + self.lag


@dataclass(frozen=True, eq=False)
class CompanyState:
    target: int
    n_stocks: int
    traders: tuple[TraderParams, ...]
    aggregator_weights: np.ndarray  # [intercept, w_1, ..., w_N]
    config: CompanyConfig
    scores: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "traders", tuple(self.traders))
        weights = np.array(self.aggregator_weights, dtype=float)
        if weights.shape != (len(self.traders) + 1,):
            raise ValueError("aggregator_weights must hold an intercept plus one weight per Trader")
        if not np.all(np.isfinite(weights)):
            raise ValueError("aggregator weights must be finite")
        weights.setflags(write=False)
        object.__setattr__(self, "aggregator_weights", weights)

    @property
    def n(self) -> int:
        return len(self.traders)


def _uniform_aggregator(n: int) -> np.ndarray:
    return np.concatenate([[0.0], np.full(n, 1.0 / n)])


def init_company(target: int, n_stocks: int, config: CompanyConfig, rng: np.random.Generator) -> CompanyState:
    if not 0 <= target < n_stocks:
        raise ValueError(f"target {target} outside 0..{n_stocks - 1}")
    traders = tuple(sample_uniform_trader(config.ranges, n_stocks, rng) for _ in range(config.n_traders))
    return CompanyState(target, n_stocks, traders, _uniform_aggregator(config.n_traders), config)


def trader_outputs(state: CompanyState, panel: ReturnsPanel) -> np.ndarray:
    """(T, N) matrix of every Trader's prediction at every time index."""
    bank = feature_bank(panel, state.config.ranges.corr_window)
    return np.column_stack([bank.trader(theta) for theta in state.traders])


def company_predict_series(state: CompanyState, panel: ReturnsPanel) -> np.ndarray:
    """Aggregated prediction at every decision time (NaN where undefined)."""
    w = state.aggregator_weights
    return w[0] + trader_outputs(state, panel) @ w[1:]


def company_predict(state: CompanyState, panel: ReturnsPanel, t: int) -> float:
    need = max(trader_history(theta, state.config.ranges.corr_window) for theta in state.traders)
    if t < need:
        raise ValueError(f"Company needs t >= {need}, got t={t}")
    w = state.aggregator_weights
    bank = feature_bank(panel, state.config.ranges.corr_window)
    preds = np.array([bank.trader(theta)[t] for theta in state.traders])
    return float(w[0] + preds @ w[1:])


def _targets(state: CompanyState, panel: ReturnsPanel, t_range: range) -> tuple[np.ndarray, np.ndarray]:
    need = max(trader_history(theta, state.config.ranges.corr_window) for theta in state.traders)
    check_range(t_range, need, state.config.horizon, panel.n_periods)
    u = np.asarray(t_range)
    return u, panel.returns[state.target, u + state.config.horizon]


def score_predictions(pred: np.ndarray, actual: np.ndarray, kind: str) -> np.ndarray:
    """Scores of prediction columns ``pred`` (rows = time) against ``actual``."""
    if kind == "cumulative-return":
        return np.sign(pred).T @ actual
    return -np.mean((pred - actual[:, None]) ** 2, axis=0)


def trader_scores(state: CompanyState, panel: ReturnsPanel, t_range: range) -> np.ndarray:
    u, actual = _targets(state, panel, t_range)
    return score_predictions(trader_outputs(state, panel)[u], actual, state.config.score)


def bottom_percentile(scores: np.ndarray, q: float) -> float:
    """Linear-interpolation percentile at fraction ``q``."""
    return float(np.percentile(scores, 100.0 * q, method="linear"))


def least_squares(x: np.ndarray, y: np.ndarray, ridge: float = 0.0, intercept: bool = False) -> np.ndarray:
    """Ridge-regularised least squares; the intercept (first coefficient) is not penalised.

    ``ridge == 0`` on a rank-deficient design falls back to ``SINGULAR_RIDGE``.
    """
    if intercept:
        x = np.column_stack([np.ones(len(x)), x])
    cols = x.shape[1]
    if ridge == 0.0:
        coef, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
        if rank == cols:
            return coef
        log.info("singular least-squares design (rank %d < %d); using ridge=%g", rank, cols, SINGULAR_RIDGE)
        ridge = SINGULAR_RIDGE
    penalty = np.sqrt(ridge) * np.eye(cols)
    if intercept:
        penalty = penalty[1:]
    a = np.vstack([x, penalty])
    b = np.concatenate([y, np.zeros(len(penalty))])
    coef, *_ = np.linalg.lstsq(a, b, rcond=None)
    return coef


def educate(state: CompanyState, panel: ReturnsPanel, t_range: range) -> CompanyState:
    """Refit term weights of every Trader scoring at or below the bottom-Q percentile."""
    u, actual = _targets(state, panel, t_range)
    scores = trader_scores(state, panel, t_range)
    threshold = bottom_percentile(scores, state.config.q)
    bank = feature_bank(panel, state.config.ranges.corr_window)
    traders = list(state.traders)
    for n in np.flatnonzero(scores <= threshold):
        theta = traders[n]
        design = bank.design(theta)[u]
        traders[n] = theta.with_weights(least_squares(design, actual, state.config.ridge))
    return replace(state, traders=tuple(traders), scores=None)


def prune_and_generate(
    state: CompanyState, panel: ReturnsPanel, t_range: range, rng: np.random.Generator
) -> CompanyState:
    cfg = state.config
    traders = list(state.traders)
    weights = np.array(state.aggregator_weights)
    for _ in range(cfg.fit_times):
        current = replace(state, traders=tuple(traders))
        scores = trader_scores(current, panel, t_range)
        threshold = bottom_percentile(scores, cfg.q)
        keep = scores >= threshold
        if keep.all():
            log.info("all %d Traders survive pruning; nothing to generate", len(traders))
            continue
        survivors = [traders[n] for n in np.flatnonzero(keep)]
        fresh = generate_traders(
            survivors, int((~keep).sum()), cfg.gmm_components, cfg.ranges, state.n_stocks, rng,
            reg_floor=cfg.reg_floor,
        )
        for n, theta in zip(np.flatnonzero(~keep), fresh):
            traders[n] = theta
            if cfg.aggregation == "linear":
                weights[n + 1] = 0.0  # newcomers carry no vote until the aggregator is refit
    return replace(state, traders=tuple(traders), aggregator_weights=weights, scores=None)


def fit_aggregator(state: CompanyState, panel: ReturnsPanel, t_range: range) -> CompanyState:
    if state.config.aggregation == "mean":
        return replace(state, aggregator_weights=_uniform_aggregator(state.n))
    u, actual = _targets(state, panel, t_range)
    outputs = trader_outputs(state, panel)[u]
    coef = least_squares(outputs, actual, state.config.ridge, intercept=True)
    return replace(state, aggregator_weights=coef)


def train_step(
    state: CompanyState, panel: ReturnsPanel, t1: int, t2: int, rng: np.random.Generator
) -> CompanyState:
    """Educate, prune-and-generate, refit the aggregator, over decision times ``t1..t2`` inclusive."""
    t_range = range(t1, t2 + 1)
    if state.config.educate_enabled:
        state = educate(state, panel, t_range)
    if state.config.prune_enabled:
        state = prune_and_generate(state, panel, t_range, rng)
    state = fit_aggregator(state, panel, t_range)
    scores = trader_scores(state, panel, t_range)
    return replace(state, scores=tuple(float(s) for s in scores))


@dataclass(frozen=True)
class Census:
    stocks: Counter
    operators: Counter
    activations: Counter


def usage_census(state: CompanyState) -> Census:
    """How often each stock index (P and Q), operator and activation appears."""
    stocks: Counter = Counter()
    ops: Counter = Counter()
    acts: Counter = Counter()
    for theta in state.traders:
        for t in theta.terms:
            stocks[t.p] += 1
            stocks[t.q] += 1
            ops[t.op] += 1
            acts[t.act] += 1
    return Census(stocks, ops, acts)


# -- persistence ------------------------------------------------------------------


def ranges_to_dict(ranges: HyperRanges) -> dict[str, Any]:
    return {
        "max_terms": ranges.max_terms,
        "max_delay": ranges.max_delay,
        "allowed_ops": [o.value for o in ranges.allowed_ops],
        "allowed_activations": [a.value for a in ranges.allowed_activations],
        "weight_init_range": list(ranges.weight_init_range),
        "corr_window": ranges.corr_window,
    }


def ranges_from_dict(d: dict[str, Any]) -> HyperRanges:
    d = dict(d)
    if "weight_init_range" in d:
        d["weight_init_range"] = tuple(d["weight_init_range"])
    for key in ("allowed_ops", "allowed_activations"):
        if key in d:
            d[key] = tuple(d[key])
    return HyperRanges(**d)


def config_to_dict(config: CompanyConfig) -> dict[str, Any]:
    return {
        "n_traders": config.n_traders,
        "q": config.q,
        "fit_times": config.fit_times,
        "aggregation": config.aggregation,
        "score": config.score,
        "educate_enabled": config.educate_enabled,
        "prune_enabled": config.prune_enabled,
        "ranges": ranges_to_dict(config.ranges),
        "ridge": config.ridge,
        "gmm_components": config.gmm_components,
        "reg_floor": config.reg_floor,
        "lag": config.lag,
    }


def config_from_dict(d: dict[str, Any]) -> CompanyConfig:
    d = dict(d)
    if "ranges" in d:
        d["ranges"] = ranges_from_dict(d["ranges"])
    return CompanyConfig(**d)


def state_to_dict(state: CompanyState) -> dict[str, Any]:
    return {
        "target": state.target,
        "n_stocks": state.n_stocks,
        "config": config_to_dict(state.config),
        "traders": [trader_to_record(theta) for theta in state.traders],
        "aggregator_weights": [float(w) for w in state.aggregator_weights],
        "scores": None if state.scores is None else list(state.scores),
    }


def state_from_dict(d: dict[str, Any]) -> CompanyState:
    try:
        return CompanyState(
            target=int(d["target"]),
            n_stocks=int(d["n_stocks"]),
            traders=tuple(trader_from_record(r) for r in d["traders"]),
            aggregator_weights=np.array(d["aggregator_weights"], dtype=float),
            config=config_from_dict(d["config"]),
            scores=None if d.get("scores") is None else tuple(float(s) for s in d["scores"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"corrupt Company state: {exc}") from exc
