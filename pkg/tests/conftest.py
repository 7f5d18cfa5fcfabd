import numpy as np
import pytest
from hypothesis import strategies as st

from trader_company.formula import ALL_ACTIVATIONS, ALL_OPERATORS, TermParams, TraderParams
from trader_company.returns_data import ReturnsPanel


def make_panel(n_stocks=4, n_periods=120, seed=0, scale=0.01):
    rng = np.random.default_rng(seed)
    returns = rng.normal(0.0, scale, size=(n_stocks, n_periods))
    symbols = tuple(f"S{i}" for i in range(n_stocks))
    return ReturnsPanel(symbols, tuple(str(t) for t in range(n_periods)), returns)


@pytest.fixture
def panel():
    return make_panel()


finite_weights = st.floats(allow_nan=False, allow_infinity=False, width=64)


@st.composite
def terms(draw, n_stocks=6, max_delay=10, weights=finite_weights):
    return TermParams(
        draw(st.integers(0, n_stocks - 1)),
        draw(st.integers(0, n_stocks - 1)),
        draw(st.integers(0, max_delay)),
        draw(st.integers(0, max_delay)),
        draw(st.sampled_from(ALL_OPERATORS)),
        draw(st.sampled_from(ALL_ACTIVATIONS)),
        draw(weights),
    )


@st.composite
def traders(draw, n_stocks=6, max_delay=10, max_terms=10, weights=finite_weights):
    return TraderParams(
        tuple(draw(st.lists(terms(n_stocks, max_delay, weights), min_size=1, max_size=max_terms)))
    )
