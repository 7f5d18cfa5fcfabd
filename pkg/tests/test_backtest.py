import json
import math
from dataclasses import replace

import numpy as np
import pytest

from trader_company import backtest as bt
from trader_company.cli import main
from trader_company.company import CompanyConfig, CompanyState, company_predict_series, state_to_dict
from trader_company.formula import Activation, HyperRanges, Operator, TermParams, TraderParams, parse_trader
from trader_company.synthetic import PlantedAlphaSpec

SYMBOLS = tuple(f"S{i}" for i in range(4))


def small_config(tmp_path, **kw):
    synthetic = PlantedAlphaSpec(
        num_stocks=4, num_periods=300, target_stock=0,
        ground_truth=parse_trader("+1·tanh(S2_t − S3_{t−1})", SYMBOLS),
        signal_scale=0.01, noise_scale=0.002, seed=5, background_scale=0.01,
    )
    company = CompanyConfig(n_traders=12, ranges=HyperRanges(max_terms=3, max_delay=4, corr_window=4))
    base = dict(data=bt.DataSource(synthetic=synthetic), company=company, rounds=2, targets=(0, 1),
                out_dir=str(tmp_path), seed=3, window=4)
    base.update(kw)
    return bt.BacktestConfig(**base)


def read_files(run_dir, names=("metrics.csv", "metrics.json", "curves.csv")):
    return {n: (run_dir / n).read_bytes() for n in names}


def test_presets_restrict_the_search_space(tmp_path):
    cfg = small_config(tmp_path)
    assert bt.apply_ablation_preset(cfg, "tc") == cfg
    assert bt.apply_ablation_preset(cfg, "tc-linear").company.ranges.allowed_activations == (Activation.IDENTITY,)
    assert bt.apply_ablation_preset(cfg, "tc-unary").company.ranges.allowed_ops == (Operator.X,)
    assert not bt.apply_ablation_preset(cfg, "tc-no-educate").company.educate_enabled
    assert not bt.apply_ablation_preset(cfg, "tc-no-prune").company.prune_enabled
    assert bt.apply_ablation_preset(cfg, "tc-unimodal").company.gmm_components == 1
    assert bt.apply_ablation_preset(cfg, "tc-mse").company.score == "negative-mse"
    assert bt.apply_ablation_preset(cfg, "market").market
    with pytest.raises(ValueError, match="unknown preset"):
        bt.apply_ablation_preset(cfg, "tc-fast")


def test_mapping_defaults_follow_window():
    cfg = bt.config_from_mapping({"data": {"csv": "x.csv"}, "window": 7})
    assert cfg.company.ranges.max_delay == 7
    assert cfg.company.ranges.corr_window == 7
    assert cfg.lag == 1 and cfg.company.lag == 1
    assert cfg.company.n_traders == 100 and cfg.company.q == 0.5


def test_config_mapping_round_trip(tmp_path):
    cfg = small_config(tmp_path, refit_period=50)
    assert bt.config_from_mapping(json.loads(json.dumps(bt.config_to_mapping(cfg)))) == cfg


def test_offline_report_layout(tmp_path):
    art = bt.run_offline_backtest(small_config(tmp_path, targets=(0,)))
    rows = (art.run_dir / "metrics.csv").read_text().splitlines()
    assert rows[0] == "stock,ACC,AR,SR,CR,MDD,C"
    assert [r.split(",")[0] for r in rows[1:]] == ["S0", "average"]
    doc = json.loads((art.run_dir / "metrics.json").read_text())
    csv_row = rows[1].split(",")
    for i, (name, _) in enumerate(bt.METRIC_COLUMNS, start=1):
        value = doc["stocks"][0][name]
        assert (csv_row[i] == "" and value is None) or float(csv_row[i]) == value
    curves = (art.run_dir / "curves.csv").read_text().splitlines()
    assert curves[0] == "stock,time,cumulative_return"
    assert len(curves) - 1 == 1 * (300 - 150)
    for name in ("run.log", "config.json", "formulas.txt", "census.csv", "states/S0.json"):
        assert (art.run_dir / name).exists()


def test_market_baseline_sums_test_returns(tmp_path):
    cfg = bt.apply_ablation_preset(small_config(tmp_path), "market")
    art = bt.run_offline_backtest(cfg, write=False)
    panel = bt.load_panel(cfg.data)
    for m in art.report.per_stock:
        assert m.final_return == pytest.approx(panel.returns[m.target, 150:].sum(), abs=1e-12)


def test_runs_are_byte_identical(tmp_path):
    a = bt.run_offline_backtest(small_config(tmp_path / "a"))
    b = bt.run_offline_backtest(small_config(tmp_path / "b"))
    names = ("metrics.csv", "metrics.json", "curves.csv", "run.log", "formulas.txt", "census.csv", "states/S1.json")
    assert read_files(a.run_dir, names) == read_files(b.run_dir, names)
    assert a.run_dir.name == b.run_dir.name


def test_parallel_workers_match_serial(tmp_path):
    a = bt.run_offline_backtest(small_config(tmp_path / "a"))
    b = bt.run_offline_backtest(small_config(tmp_path / "b", workers=2))
    assert read_files(a.run_dir, ("metrics.csv", "run.log")) == read_files(b.run_dir, ("metrics.csv", "run.log"))


def test_seed_changes_run(tmp_path):
    a = bt.run_offline_backtest(small_config(tmp_path, seed=1), write=False)
    b = bt.run_offline_backtest(small_config(tmp_path, seed=2), write=False)
    assert not np.array_equal(a.runs[0].track.predicted, b.runs[0].track.predicted)


def test_single_segment_online_equals_offline(tmp_path):
    off = bt.run_offline_backtest(small_config(tmp_path))
    on = bt.run_online_backtest(small_config(tmp_path, refit_period=10_000))
    assert read_files(off.run_dir) == read_files(on.run_dir)


def _audit(cfg, mode):
    run = bt.run_online_backtest if mode == "online" else bt.run_offline_backtest
    panel = bt.load_panel(cfg.data)
    base = run(cfg, write=False, panel=panel)
    h = 1 + cfg.lag
    rng = np.random.default_rng(0)
    for tau in (150, 151, 190, 230, 299):
        altered = panel.returns.copy()
        altered[:, tau - h + 1 :] = rng.normal(0, 0.05, size=altered[:, tau - h + 1 :].shape)
        other = run(cfg, write=False, panel=panel.replace_returns(altered))
        for r0, r1 in zip(base.runs, other.runs):
            i = tau - 150
            np.testing.assert_array_equal(r0.track.predicted[: i + 1], r1.track.predicted[: i + 1])


def test_offline_predictions_ignore_future(tmp_path):
    _audit(small_config(tmp_path), "offline")


def test_online_predictions_ignore_future(tmp_path):
    _audit(small_config(tmp_path, refit_period=40, targets=(0,)), "online")


def test_online_segments_retrain(tmp_path):
    art = bt.run_online_backtest(small_config(tmp_path, refit_period=50, targets=(0,)), write=False)
    assert sum("segment" in line for line in art.log_lines) == 3


def test_yearly_boundaries_follow_calendar(tmp_path):
    cfg = small_config(tmp_path, refit_period="yearly")
    panel = bt.load_panel(cfg.data)
    bounds = bt.refit_boundaries(cfg, panel, 150)
    assert bounds[0] == 150
    for b in bounds[1:]:
        assert panel.timestamps[b][:4] != panel.timestamps[b - 1][:4]


def test_timestamp_split(tmp_path):
    cfg = small_config(tmp_path)
    panel = bt.load_panel(cfg.data)
    cut = panel.timestamps[200]
    assert bt.split_index(replace(cfg, split=cut), panel) == 200


def test_insufficient_history_is_reported(tmp_path):
    with pytest.raises(bt.BacktestError, match="not enough history"):
        bt.run_offline_backtest(small_config(tmp_path, split=0.02), write=False)


def test_unknown_target_symbol(tmp_path):
    with pytest.raises(bt.BacktestError, match="unknown target"):
        bt.run_offline_backtest(small_config(tmp_path, targets=("ZZZ",)), write=False)


def _comparison_state(tmp_path):
    theta = TraderParams((TermParams(1, 0, 0, 3, Operator.GT, Activation.IDENTITY, -2.28),))
    other = TraderParams((TermParams(0, 0, 1, 1, Operator.X, Activation.TANH, 0.5),))
    state = CompanyState(1, 2, (other, theta, other), np.zeros(4), CompanyConfig(n_traders=3), (1.0, 3.0, 1.0))
    path = tmp_path / "state.json"
    doc = {"company": state_to_dict(state), "symbols": ["AHT", "SHP"], "data": {"csv": "none.csv"}}
    path.write_text(json.dumps(doc))
    return path


def test_inspect_prints_top_formula(tmp_path):
    report = bt.inspect(_comparison_state(tmp_path), top_k=1)
    assert report.text.splitlines()[-1] == "−2.28·(SHP_t > AHT_{t−3})"


def test_inspect_orders_by_score_then_index(tmp_path):
    report = bt.inspect(_comparison_state(tmp_path), top_k=3)
    assert [n for n, _ in report.ranking] == [1, 0, 2]
    ops = sum(c for kind, _, c in report.census_rows if kind == "operator")
    assert ops == 3


def test_inspect_rescoring_window(tmp_path):
    art = bt.run_offline_backtest(small_config(tmp_path, targets=(0,)))
    state_path = art.run_dir / "states" / "S0.json"
    stored = bt.inspect(state_path, top_k=12)
    t1, t2 = json.loads(state_path.read_text())["score_window"]
    assert (t1, t2) == (7, 146)
    rescored = bt.inspect(state_path, top_k=12, window=bt.parse_window(f"{t1}:{t2}"))
    assert stored.ranking == rescored.ranking


def test_corrupt_state_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"company": {"target": 0}, "symbols": []}')
    with pytest.raises(bt.BacktestError, match="cannot read Company state"):
        bt.inspect(path)


# -- command line ---------------------------------------------------------------------------


def _write_cli_inputs(tmp_path):
    spec = {"num_stocks": 4, "num_periods": 300, "target_stock": 0,
            "ground_truth": "+1·tanh(S2_t − S3_{t−1})", "signal_scale": 0.01,
            "noise_scale": 0.002, "seed": 5, "background_scale": 0.01}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    config = {"data": {"synthetic": spec}, "window": 4, "rounds": 1, "targets": ["S0"],
              "company": {"n_traders": 10}}
    (tmp_path / "run.json").write_text(json.dumps(config))


def test_cli_synth_then_backtest_from_csv(tmp_path, capsys):
    _write_cli_inputs(tmp_path)
    assert main(["synth", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "p.csv")]) == 0
    assert "ground truth for S0" in capsys.readouterr().out
    cfg = {"data": {"csv": "p.csv"}, "window": 4, "rounds": 1, "targets": ["S0"], "company": {"n_traders": 10}}
    (tmp_path / "csv.json").write_text(json.dumps(cfg))
    out = tmp_path / "runs"
    assert main(["backtest", "offline", "--config", str(tmp_path / "csv.json"), "--out", str(out)]) == 0
    assert len(list(out.glob("*/metrics.csv"))) == 1


def test_cli_csv_and_synthetic_sources_agree(tmp_path):
    _write_cli_inputs(tmp_path)
    main(["synth", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "p.csv")])
    synth = bt.load_panel(bt.load_config(tmp_path / "run.json").data)
    loaded = bt.load_panel(bt.DataSource(csv=str(tmp_path / "p.csv")))
    np.testing.assert_allclose(loaded.returns, synth.returns, atol=1e-12)
    assert loaded.timestamps == synth.timestamps


def test_cli_env_overrides_output(tmp_path, monkeypatch, capsys):
    _write_cli_inputs(tmp_path)
    monkeypatch.setenv(bt.OUT_DIR_ENV, str(tmp_path / "env"))
    assert main(["backtest", "online", "--config", str(tmp_path / "run.json"), "--preset", "tc-linear",
                 "--seed", "4", "--refit", "75"]) == 0
    run_dirs = list((tmp_path / "env").iterdir())
    assert len(run_dirs) == 1 and run_dirs[0].name.startswith("online-tc-linear-")
    assert run_dirs[0].name.endswith("-seed4")


def test_cli_inspect(tmp_path, capsys):
    assert main(["inspect", "--state", str(_comparison_state(tmp_path)), "--top", "2"]) == 0
    out = capsys.readouterr().out
    assert "−2.28·(SHP_t > AHT_{t−3})" in out
    assert "# usage census" in out


@pytest.mark.parametrize(
    "argv",
    [
        ["backtest", "offline", "--config", "missing.json"],
        ["inspect", "--state", "missing.json"],
        ["inspect", "--state", "missing.json", "--window", "5"],
    ],
)
def test_cli_errors_are_one_line(tmp_path, capsys, argv):
    assert main(argv) != 0
    err = capsys.readouterr().err.strip()
    assert err.startswith("tcm: error:") and "\n" not in err


def test_cli_bad_config_value(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"data": {"csv": "x.csv"}, "lag": -1}))
    assert main(["backtest", "offline", "--config", str(tmp_path / "c.json")]) != 0
    assert "lag" in capsys.readouterr().err


def test_online_adapts_to_regime_change():
    symbols = [f"S{i}" for i in range(5)]
    before = parse_trader("+1·tanh(S3_t − S1_{t−2})", symbols)
    after = parse_trader("+1·tanh(S2_{t−1} − S4_t)", symbols)
    wins = 0
    for seed in range(20):
        spec = PlantedAlphaSpec(5, 1000, 0, before, 0.01, 0.005, seed, switch_at=500, ground_truth_after=after)
        cfg = bt.BacktestConfig(data=bt.DataSource(synthetic=spec), lag=0, targets=(0,), rounds=3,
                                company=CompanyConfig(n_traders=50), out_dir=None, seed=seed, refit_period=125)
        panel = bt.load_panel(cfg.data)
        off = bt.run_offline_backtest(cfg, write=False, panel=panel).runs[0].track
        on = bt.run_online_backtest(cfg, write=False, panel=panel).runs[0].track
        late = slice(len(off) // 2, None)
        hits = lambda tr: np.mean(np.sign(tr.predicted[late]) == np.sign(tr.actual[late]))
        wins += hits(on) > hits(off)
    assert wins >= 16
