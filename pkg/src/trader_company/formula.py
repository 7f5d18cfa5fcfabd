"""Trader formulae: a weighted sum of activated binary operations on lagged returns.

A term is ``w * A(O(r_P[t-D], r_Q[t-F]))`` and a Trader is an ordered list of
terms.  Evaluation comes in two flavours that must agree: scalar
(:func:`eval_term`, :func:`eval_trader`) for a single time index, and
vectorized (:class:`FeatureBank`) over every time index of a panel at once,
which is what training uses.
"""

from __future__ import annotations

import math
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .returns_data import ReturnsPanel

EXP_CLAMP = 50.0
MINUS = "−"


class Operator(str, Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    X = "x"
    Y = "y"
    MAX = "max"
    MIN = "min"
    GT = "gt"
    LT = "lt"
    CORR = "corr"


class Activation(str, Enum):
    IDENTITY = "id"
    TANH = "tanh"
    EXP = "exp"
    SIGN = "sign"
    RELU = "relu"


ALL_OPERATORS = tuple(Operator)
ALL_ACTIVATIONS = tuple(Activation)


class FormulaError(ValueError):
    pass


class InsufficientHistory(FormulaError):
    pass


@dataclass(frozen=True)
class TermParams:
    p: int
    q: int
    d: int
    f: int
    op: Operator
    act: Activation
    w: float

    def __post_init__(self):
        object.__setattr__(self, "op", Operator(self.op))
        object.__setattr__(self, "act", Activation(self.act))
        for name in ("p", "q", "d", "f"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise FormulaError(f"{name} must be a non-negative integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        w = float(self.w)
        if not math.isfinite(w):
            raise FormulaError(f"weight must be finite, got {self.w!r}")
        object.__setattr__(self, "w", w)

    @property
    def structure(self) -> tuple:
        """Everything but the weight."""
        return (self.p, self.q, self.d, self.f, self.op, self.act)

    def with_weight(self, w: float) -> "TermParams":
        return TermParams(self.p, self.q, self.d, self.f, self.op, self.act, w)


@dataclass(frozen=True)
class TraderParams:
    terms: tuple[TermParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise FormulaError("a Trader needs at least one term")

    @property
    def m(self) -> int:
        return len(self.terms)

    @property
    def weights(self) -> np.ndarray:
        return np.array([t.w for t in self.terms])

    def with_weights(self, weights: Sequence[float]) -> "TraderParams":
        if len(weights) != self.m:
            raise FormulaError(f"expected {self.m} weights, got {len(weights)}")
        return TraderParams(tuple(t.with_weight(w) for t, w in zip(self.terms, weights)))


@dataclass(frozen=True)
class HyperRanges:
    max_terms: int = 10
    max_delay: int = 10
    allowed_ops: tuple[Operator, ...] = ALL_OPERATORS
    allowed_activations: tuple[Activation, ...] = ALL_ACTIVATIONS
    weight_init_range: tuple[float, float] = (-1.0, 1.0)
    corr_window: int = 10

    def __post_init__(self):
        object.__setattr__(self, "allowed_ops", tuple(Operator(o) for o in self.allowed_ops))
        object.__setattr__(
            self, "allowed_activations", tuple(Activation(a) for a in self.allowed_activations)
        )
        object.__setattr__(self, "weight_init_range", tuple(float(v) for v in self.weight_init_range))
        if self.max_terms < 1:
            raise ValueError("max_terms must be >= 1")
        if self.max_delay < 0:
            raise ValueError("max_delay must be >= 0")
        if not self.allowed_ops or not self.allowed_activations:
            raise ValueError("operator and activation sets must be non-empty")
        if len(set(self.allowed_ops)) != len(self.allowed_ops):
            raise ValueError("duplicate operators")
        if len(set(self.allowed_activations)) != len(self.allowed_activations):
            raise ValueError("duplicate activations")
        if self.corr_window < 2:
            raise ValueError("corr_window must be >= 2")
        lo, hi = self.weight_init_range
        if not lo <= hi:
            raise ValueError("weight_init_range must be an interval lo <= hi")

    @property
    def min_history(self) -> int:
        """Earliest time index at which any Trader drawn from these ranges is defined."""
        extra = self.corr_window - 1 if Operator.CORR in self.allowed_ops else 0
        return self.max_delay + extra


# -- scalar and array primitives ------------------------------------------------


def _activate(act: Activation, x):
    if act is Activation.IDENTITY:
        return x
    if act is Activation.TANH:
        return np.tanh(x)
    if act is Activation.EXP:
        return np.exp(np.minimum(x, EXP_CLAMP))
    if act is Activation.SIGN:
        return np.sign(x)
    if act is Activation.RELU:
        return np.maximum(x, 0.0)
    raise FormulaError(f"unknown activation {act!r}")


def _binary(op: Operator, x, y):
    if op is Operator.ADD:
        return x + y
    if op is Operator.SUB:
        return x - y
    if op is Operator.MUL:
        return x * y
    if op is Operator.X:
        return x
    if op is Operator.Y:
        return y
    if op is Operator.MAX:
        return np.maximum(x, y)
    if op is Operator.MIN:
        return np.minimum(x, y)
    if op is Operator.GT:
        return np.sign(x - y)
    if op is Operator.LT:
        return np.sign(y - x)
    raise FormulaError(f"operator {op!r} is not pointwise")


def _pearson_rows(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Row-wise Pearson correlation; 0 where either row is constant."""
    xc = xs - xs.mean(axis=-1, keepdims=True)
    yc = ys - ys.mean(axis=-1, keepdims=True)
    num = (xc * yc).sum(axis=-1)
    den = np.sqrt((xc * xc).sum(axis=-1) * (yc * yc).sum(axis=-1))
    flat = (np.ptp(xs, axis=-1) == 0) | (np.ptp(ys, axis=-1) == 0) | (den == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(flat, 0.0, num / np.where(flat, 1.0, den))
    return np.clip(out, -1.0, 1.0)


def eval_activation(code: Activation | str, x: float) -> float:
    return float(_activate(Activation(code), np.float64(x)))


def eval_binary_op(code: Operator | str, x: float, y: float) -> float:
    code = Operator(code)
    if code is Operator.CORR:
        raise FormulaError("Corr is a windowed operator; use eval_term")
    return float(_binary(code, np.float64(x), np.float64(y)))


def term_history(term: TermParams, corr_window: int) -> int:
    """Smallest time index at which ``term`` can be evaluated."""
    need = max(term.d, term.f)
    if term.op is Operator.CORR:
        need += corr_window - 1
    return need


def trader_history(theta: TraderParams, corr_window: int) -> int:
    return max(term_history(t, corr_window) for t in theta.terms)


def _returns_of(panel) -> np.ndarray:
    return panel.returns if isinstance(panel, ReturnsPanel) else np.asarray(panel, dtype=float)


def eval_term(term: TermParams, panel: ReturnsPanel, t: int, corr_window: int) -> float:
    """Unweighted value ``A(O(r_P[t-D], r_Q[t-F]))`` at time index ``t``."""
    r = _returns_of(panel)
    need = term_history(term, corr_window)
    if t < need:
        raise InsufficientHistory(f"term needs t >= {need}, got t={t}")
    if t >= r.shape[1]:
        raise FormulaError(f"t={t} is beyond the panel ({r.shape[1]} periods)")
    if term.op is Operator.CORR:
        xs = r[term.p, t - term.d - corr_window + 1 : t - term.d + 1]
        ys = r[term.q, t - term.f - corr_window + 1 : t - term.f + 1]
        value = _pearson_rows(xs, ys)
    else:
        value = _binary(term.op, r[term.p, t - term.d], r[term.q, t - term.f])
    return float(_activate(term.act, value))


def eval_trader(theta: TraderParams, panel: ReturnsPanel, t: int, ranges: HyperRanges) -> float:
    return float(sum(term.w * eval_term(term, panel, t, ranges.corr_window) for term in theta.terms))


def term_series(term: TermParams, returns: np.ndarray, corr_window: int) -> np.ndarray:
    """Unweighted term value at every time index; NaN where history is short."""
    T = returns.shape[1]
    out = np.full(T, np.nan)
    need = term_history(term, corr_window)
    if need >= T:
        return out
    u = np.arange(need, T)
    x = returns[term.p]
    y = returns[term.q]
    if term.op is Operator.CORR:
        xw = sliding_window_view(x, corr_window)
        yw = sliding_window_view(y, corr_window)
        value = _pearson_rows(xw[u - term.d - corr_window + 1], yw[u - term.f - corr_window + 1])
    else:
        value = _binary(term.op, x[u - term.d], y[u - term.f])
    out[need:] = _activate(term.act, value)
    return out


class FeatureBank:
    """Memoised :func:`term_series` for one returns matrix.

    Keys are term structures, so Traders that share formulae (common after
    generation) share the work.  Bounded LRU so long runs stay in memory.
    """

    def __init__(self, returns: np.ndarray, corr_window: int, max_bytes: float = 64e6):
        self.returns = returns
        self.corr_window = corr_window
        self._maxsize = max(256, int(max_bytes // (8 * max(returns.shape[1], 1))))
        self._series: OrderedDict[tuple, np.ndarray] = OrderedDict()

    def term(self, term: TermParams) -> np.ndarray:
        key = term.structure
        hit = self._series.get(key)
        if hit is not None:
            self._series.move_to_end(key)
            return hit
        series = term_series(term, self.returns, self.corr_window)
        series.setflags(write=False)
        self._series[key] = series
        if len(self._series) > self._maxsize:
            self._series.popitem(last=False)
        return series

    def design(self, theta: TraderParams) -> np.ndarray:
        """T x M matrix of unweighted term series."""
        return np.column_stack([self.term(t) for t in theta.terms])

    def trader(self, theta: TraderParams) -> np.ndarray:
        out = np.zeros(self.returns.shape[1])
        for term in theta.terms:
            out += term.w * self.term(term)
        return out


def feature_bank(panel: ReturnsPanel, corr_window: int) -> FeatureBank:
    key = ("feature_bank", corr_window)
    bank = panel._cache.get(key)
    if bank is None:
        bank = panel._cache[key] = FeatureBank(panel.returns, corr_window)
    return bank


def check_range(t_range: range, need: int, horizon: int, n_periods: int) -> None:
    """Validate decision times ``t_range`` whose targets sit ``horizon`` steps ahead."""
    if len(t_range) == 0:
        raise FormulaError("empty time range")
    lo, hi = min(t_range), max(t_range)
    if lo < need:
        raise InsufficientHistory(f"time range starts at {lo}, needs >= {need}")
    if hi + horizon >= n_periods:
        raise FormulaError(
            f"time range ends at {hi}; its target {hi + horizon} is beyond the panel ({n_periods} periods)"
        )


def trader_cumulative_return(
    theta: TraderParams,
    panel: ReturnsPanel,
    target: int,
    t_range: range,
    ranges: HyperRanges,
    lag: int = 0,
) -> float:
    """Sum of ``sign(prediction at u) * r_target[u + 1 + lag]`` over ``u`` in ``t_range``."""
    horizon = 1 + lag
    check_range(t_range, trader_history(theta, ranges.corr_window), horizon, panel.n_periods)
    u = np.asarray(t_range)
    pred = feature_bank(panel, ranges.corr_window).trader(theta)[u]
    actual = panel.returns[target, u + horizon]
    return float(np.sum(np.sign(pred) * actual))


# -- sampling -----------------------------------------------------------------


def sample_uniform_trader(ranges: HyperRanges, n_stocks: int, rng: np.random.Generator) -> TraderParams:
    m = int(rng.integers(1, ranges.max_terms + 1))
    p = rng.integers(0, n_stocks, size=m)
    q = rng.integers(0, n_stocks, size=m)
    d = rng.integers(0, ranges.max_delay + 1, size=m)
    f = rng.integers(0, ranges.max_delay + 1, size=m)
    o = rng.integers(0, len(ranges.allowed_ops), size=m)
    a = rng.integers(0, len(ranges.allowed_activations), size=m)
    lo, hi = ranges.weight_init_range
    w = rng.uniform(lo, hi, size=m)
    return TraderParams(
        tuple(
            TermParams(
                int(p[j]), int(q[j]), int(d[j]), int(f[j]),
                ranges.allowed_ops[o[j]], ranges.allowed_activations[a[j]], float(w[j]),
            )
            for j in range(m)
        )
    )


def validate_trader(theta: TraderParams, ranges: HyperRanges, n_stocks: int) -> None:
    if not 1 <= theta.m <= ranges.max_terms:
        raise FormulaError(f"Trader has {theta.m} terms, allowed 1..{ranges.max_terms}")
    for j, t in enumerate(theta.terms):
        if not (0 <= t.p < n_stocks and 0 <= t.q < n_stocks):
            raise FormulaError(f"term {j}: stock index out of range")
        if not (t.d <= ranges.max_delay and t.f <= ranges.max_delay):
            raise FormulaError(f"term {j}: delay exceeds {ranges.max_delay}")
        if t.op not in ranges.allowed_ops:
            raise FormulaError(f"term {j}: operator {t.op.value} not allowed")
        if t.act not in ranges.allowed_activations:
            raise FormulaError(f"term {j}: activation {t.act.value} not allowed")


# -- records ---------------------------------------------------------------------


def trader_to_record(theta: TraderParams) -> list[dict]:
    return [
        {"P": t.p, "Q": t.q, "D": t.d, "F": t.f, "O": t.op.value, "A": t.act.value, "w": t.w}
        for t in theta.terms
    ]


def trader_from_record(record: Iterable[dict]) -> TraderParams:
    return TraderParams(
        tuple(
            TermParams(r["P"], r["Q"], r["D"], r["F"], Operator(r["O"]), Activation(r["A"]), r["w"])
            for r in record
        )
    )


# -- text form -------------------------------------------------------------------

_INFIX = {Operator.ADD: "+", Operator.SUB: MINUS, Operator.MUL: "×", Operator.GT: ">", Operator.LT: "<"}
_FUNC = {Operator.MAX: "max", Operator.MIN: "min", Operator.CORR: "corr"}
_PROJ_FULL = {Operator.X: "proj_x", Operator.Y: "proj_y"}
_ACT_NAME = {Activation.TANH: "tanh", Activation.EXP: "exp", Activation.SIGN: "sign", Activation.RELU: "ReLU"}


def _operand(symbols: Sequence[str], idx: int, delay: int) -> str:
    sym = symbols[idx]
    return f"{sym}_t" if delay == 0 else f"{sym}_{{t{MINUS}{delay}}}"


def _format_weight(w: float, precision: int | None) -> str:
    if precision is None:
        text = repr(abs(w))
        sign = "-" if math.copysign(1.0, w) < 0 else "+"
    else:
        text = f"{w:+.{precision}f}"
        sign, text = text[0], text[1:]
    return (MINUS if sign == "-" else "+") + text


def format_term(term: TermParams, symbols: Sequence[str], precision: int | None = 2) -> str:
    x = _operand(symbols, term.p, term.d)
    y = _operand(symbols, term.q, term.f)
    if term.op in _INFIX:
        inner, bare = f"{x} {_INFIX[term.op]} {y}", True
    elif term.op in _FUNC:
        inner, bare = f"{_FUNC[term.op]}({x}, {y})", False
    elif precision is None:
        inner, bare = f"{_PROJ_FULL[term.op]}({x}, {y})", False
    else:
        inner, bare = (x if term.op is Operator.X else y), False
    if term.act is Activation.IDENTITY:
        body = f"({inner})" if bare else inner
    else:
        body = f"{_ACT_NAME[term.act]}({inner})"
    return f"{_format_weight(term.w, precision)}·{body}"


def format_trader(theta: TraderParams, symbols: Sequence[str], precision: int | None = 2) -> str:
    """One line per term.

    ``precision=None`` selects the lossless form accepted by
    :func:`parse_trader`: weights printed with ``repr`` and projections spelled
    out with both operands.  The default display form rounds weights and
    elides the unused operand of a projection.
    """
    for t in theta.terms:
        if not (0 <= t.p < len(symbols) and 0 <= t.q < len(symbols)):
            raise FormulaError("stock index outside the symbol table")
    return "\n".join(format_term(t, symbols, precision) for t in theta.terms)


class FormulaSyntaxError(FormulaError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


_OPERAND_RE = re.compile(r"(?P<sym>[^\s(),·]+?)_(?:t(?![\w{])|\{\s*t\s*(?:[−-]\s*(?P<lag>\d+)\s*)?\})")
_NAME_RE = re.compile(r"[A-Za-z_]+(?=\()")
_INFIX_BY_TOKEN = {"+": Operator.ADD, MINUS: Operator.SUB, "-": Operator.SUB, "×": Operator.MUL,
                   "*": Operator.MUL, ">": Operator.GT, "<": Operator.LT}
_FUNC_BY_NAME = {"max": Operator.MAX, "min": Operator.MIN, "corr": Operator.CORR,
                 "proj_x": Operator.X, "proj_y": Operator.Y}
_ACT_BY_NAME = {"tanh": Activation.TANH, "exp": Activation.EXP, "sign": Activation.SIGN, "relu": Activation.RELU}


class _TermParser:
    def __init__(self, text: str, line: int, col0: int, symbols: Sequence[str]):
        self.text = text
        self.pos = 0
        self.line = line
        self.col0 = col0
        self.index = {s: i for i, s in enumerate(symbols)}

    def fail(self, message: str):
        raise FormulaSyntaxError(message, self.line, self.col0 + self.pos + 1)

    def skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def expect(self, ch: str):
        self.skip()
        if not self.text.startswith(ch, self.pos):
            self.fail(f"expected {ch!r}")
        self.pos += len(ch)

    def operand(self) -> tuple[int, int]:
        self.skip()
        m = _OPERAND_RE.match(self.text, self.pos)
        if not m:
            self.fail("expected an operand like SYM_t or SYM_{t-3}")
        sym = m.group("sym")
        if sym not in self.index:
            self.fail(f"unknown symbol {sym!r}")
        self.pos = m.end()
        return self.index[sym], int(m.group("lag") or 0)

    def name(self) -> str | None:
        self.skip()
        m = _NAME_RE.match(self.text, self.pos)
        if not m:
            return None
        return m.group(0)

    def inner(self, allow_bare_infix: bool):
        """Returns (op, (p, d), (q, f))."""
        self.skip()
        name = self.name()
        if name is not None and name.lower() in _FUNC_BY_NAME:
            self.pos += len(name)
            self.expect("(")
            x = self.operand()
            self.expect(",")
            y = self.operand()
            self.expect(")")
            return _FUNC_BY_NAME[name.lower()], x, y
        if self.text.startswith("(", self.pos):
            self.pos += 1
            result = self.infix_or_operand()
            self.expect(")")
            return result
        if allow_bare_infix:
            return self.infix_or_operand()
        x = self.operand()
        return Operator.X, x, x

    def infix_or_operand(self):
        x = self.operand()
        self.skip()
        ch = self.text[self.pos : self.pos + 1]
        if ch in _INFIX_BY_TOKEN:
            self.pos += 1
            y = self.operand()
            return _INFIX_BY_TOKEN[ch], x, y
        return Operator.X, x, x

    def body(self):
        self.skip()
        name = self.name()
        if name is not None and name.lower() in _ACT_BY_NAME:
            self.pos += len(name)
            self.expect("(")
            result = self.inner(allow_bare_infix=True)
            self.expect(")")
            act = _ACT_BY_NAME[name.lower()]
        else:
            result = self.inner(allow_bare_infix=False)
            act = Activation.IDENTITY
        self.skip()
        if self.pos != len(self.text):
            self.fail("unexpected trailing text")
        return act, result


def parse_trader(text: str, symbols: Sequence[str]) -> TraderParams:
    """Parse the output of :func:`format_trader` back into a Trader."""
    terms = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        col0 = len(raw) - len(raw.lstrip())
        if line.startswith("="):
            stripped = line[1:].lstrip()
            col0 += len(line) - len(stripped)
            line = stripped
        dot = min((i for i in (line.find("·"), line.find("*")) if i >= 0), default=-1)
        if dot < 0:
            raise FormulaSyntaxError("expected '<weight>·<expression>'", lineno, col0 + 1)
        weight_text = line[:dot].strip().replace(MINUS, "-").replace(" ", "")
        try:
            w = float(weight_text)
        except ValueError:
            raise FormulaSyntaxError(f"bad weight {line[:dot]!r}", lineno, col0 + 1) from None
        parser = _TermParser(line[dot + 1 :], lineno, col0 + dot + 1, symbols)
        act, (op, (p, d), (q, f)) = parser.body()
        terms.append(TermParams(p, q, d, f, op, act, w))
    if not terms:
        raise FormulaSyntaxError("no terms found", 1, 1)
    return TraderParams(tuple(terms))
