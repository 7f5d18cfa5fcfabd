import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trader_company.returns_data import (
    CsvSchema,
    DataError,
    PricePanel,
    ReturnsPanel,
    compute_log_returns,
    load_price_csv,
    prices_from_returns,
    slice_window,
    write_price_csv,
)


def test_log_returns_of_doubling_price():
    prices = PricePanel(("A",), ("d0", "d1", "d2"), [[1.0, 2.0, 4.0]])
    r = compute_log_returns(prices)
    assert r.timestamps == ("d1", "d2")
    np.testing.assert_allclose(r.returns, [[math.log(2), math.log(2)]], rtol=0, atol=1e-15)


def test_flat_price_gives_zero_returns():
    r = compute_log_returns(PricePanel(("A", "B"), ("a", "b", "c"), [[5, 5, 5], [1, 2, 1]]))
    assert np.all(r.returns[0] == 0.0)


def test_non_positive_price_names_stock_and_time():
    with pytest.raises(DataError, match=r"stock 1 \(B\) at timestamp b"):
        compute_log_returns(PricePanel(("A", "B"), ("a", "b"), [[1, 1], [1, 0]]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.2, 0.2), min_size=1, max_size=30))
def test_prices_from_returns_inverts(values):
    panel = ReturnsPanel(("A",), tuple(str(i) for i in range(len(values))), np.array([values]))
    back = compute_log_returns(prices_from_returns(panel, first_timestamp="start"))
    np.testing.assert_allclose(back.returns, panel.returns, atol=1e-12)


def test_panel_is_read_only_copy():
    raw = np.zeros((1, 3))
    panel = ReturnsPanel(("A",), ("a", "b", "c"), raw)
    raw[0, 0] = 1.0
    assert panel.returns[0, 0] == 0.0
    with pytest.raises(ValueError):
        panel.returns[0, 0] = 2.0


def _write(tmp_path, text, name="p.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_wide_csv_sorted_and_forward_filled(tmp_path):
    path = _write(tmp_path, "timestamp,A,B\n2020-01-03,3,30\n2020-01-01,1,\n2020-01-02,2,20\n2020-01-06,,40\n")
    prices = load_price_csv(path)
    assert prices.timestamps == ("2020-01-02", "2020-01-03", "2020-01-06")
    np.testing.assert_array_equal(prices.prices, [[2, 3, 3], [20, 30, 40]])


def test_drop_row_policy(tmp_path):
    path = _write(tmp_path, "timestamp,A,B\n2020-01-01,1,10\n2020-01-02,,20\n2020-01-03,3,30\n")
    prices = load_price_csv(path, CsvSchema(missing="drop-row"))
    assert prices.timestamps == ("2020-01-01", "2020-01-03")


def test_long_layout_matches_wide(tmp_path):
    wide = _write(tmp_path, "timestamp,A,B\n2020-01-01,1,10\n2020-01-02,2,20\n", "w.csv")
    long = _write(
        tmp_path,
        "timestamp,symbol,price\n2020-01-02,B,20\n2020-01-01,A,1\n2020-01-01,B,10\n2020-01-02,A,2\n",
        "l.csv",
    )
    a = load_price_csv(wide)
    b = load_price_csv(long, CsvSchema(layout="long", symbols=("A", "B")))
    assert a.symbols == b.symbols and a.timestamps == b.timestamps
    np.testing.assert_array_equal(a.prices, b.prices)


@pytest.mark.parametrize(
    "text, schema, message",
    [
        ("timestamp,A\n2020-01-01,1\n2020-01-01,2\n", CsvSchema(), "line 3: duplicate timestamp"),
        ("timestamp,A\n2020-01-01,1\n2020-01-02,abc\n", CsvSchema(), "line 3: unparseable price"),
        ("timestamp,A\n2020-01-01,1\n", CsvSchema(symbols=("Z",)), "unknown symbol 'Z'"),
        ("timestamp,A\n2020-01-01,1\nnot-a-date,2\n", CsvSchema(), "line 3: unparseable timestamp"),
        ("", CsvSchema(), "empty CSV"),
    ],
)
def test_csv_errors_carry_locations(tmp_path, text, schema, message):
    with pytest.raises(DataError, match=message):
        load_price_csv(_write(tmp_path, text), schema)


def test_write_then_load_is_exact(tmp_path):
    rng = np.random.default_rng(1)
    prices = PricePanel(("A", "B"), ("2021-01-04", "2021-01-05", "2021-01-06"), rng.uniform(1, 100, (2, 3)))
    path = tmp_path / "out.csv"
    write_price_csv(prices, path)
    back = load_price_csv(path)
    np.testing.assert_array_equal(back.prices, prices.prices)


def test_slice_window_bounds(panel):
    view = slice_window(panel, t=20, w=10, l=1)
    assert view.n_periods == 11
    assert view.start == 9
    np.testing.assert_array_equal(view.returns, panel.returns[:, 9:20])
    with pytest.raises(DataError, match="earliest valid t is 11"):
        slice_window(panel, t=10, w=10, l=1)
