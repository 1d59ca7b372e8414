import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from cfl import ConfigError
from cfl.data import (
    MinMaxScaler,
    RawPanel,
    build_domain_panels,
    compute_labels,
    load_panel_csv,
    minmax_scale,
    partition,
    partition_days,
    select_universe,
    standardize_labels,
    write_panel_csv,
)
from cfl.panel import DomainPanel
from cfl.scm import ScmConfig, simulate_market


def _panel(opens, caps=None, feats=None):
    days = pd.bdate_range("2020-01-01", periods=len(opens)).strftime("%Y-%m-%d")
    rows = []
    for d, row in zip(days, opens):
        for j, o in enumerate(row):
            rows.append({"date": d, "stock_id": f"S{j}", "open": o,
                         "market_cap": (caps[j] if caps else 1.0 + j), "f_0": float(j)})
    return RawPanel(pd.DataFrame(rows))


def test_label_formula_and_boundary():
    raw = _panel([[10.0, 10.0], [10.5, 10.0], [11.0, 10.0], [12.0, 10.0]])
    lab = compute_labels(raw).df
    assert len(lab) == 4  # days 0 and 1 labeled, last two dropped
    first = lab[(lab.stock_id == "S0")].iloc[0]
    assert first.label == pytest.approx((11.0 - 10.5) / 10.5, rel=1e-15)
    assert lab[(lab.stock_id == "S1")].label.eq(0).all()
    assert set(compute_labels(raw).rejected.reason) == {"no_forward_window"}


def test_nonpositive_open_rejected_with_reason():
    raw = _panel([[10.0, 10.0], [10.0, -1.0], [11.0, 10.0], [12.0, 10.0]])
    out = compute_labels(raw)
    assert "nonpositive_open" in set(out.rejected.reason)


def test_labels_recompute_from_forward_opens():
    df = simulate_market(ScmConfig(K=2, K_tilde=1, seed=3), n_stocks=8, n_days=20)
    lab = compute_labels(RawPanel(df)).df
    opens = df.assign(date=pd.to_datetime(df.date)).pivot(index="date", columns="stock_id", values="open")
    days = list(opens.index)
    for row in lab.sample(30, random_state=0).itertuples():
        i = days.index(row.date)
        o1, o2 = opens.iloc[i + 1][row.stock_id], opens.iloc[i + 2][row.stock_id]
        assert abs(row.label - (o2 - o1) / o1) <= 1e-15 * max(1.0, abs(row.label))


def test_standardize_labels_examples():
    assert np.array_equal(standardize_labels([1.0, 3.0], [0, 0]), [-1.0, 1.0])
    with pytest.raises(ConfigError, match="domain 7"):
        standardize_labels([0.0, 0.0, 0.0], [7, 7, 7])


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=40), st.integers(1, 3))
def test_standardize_labels_moments(vals, n_groups):
    y = np.asarray(vals)
    g = np.arange(len(y)) % n_groups
    for k in range(n_groups):
        if np.ptp(y[g == k]) < 1e-6 or (g == k).sum() < 2:
            return
    out = standardize_labels(y, g)
    for k in range(n_groups):
        assert abs(out[g == k].mean()) < 1e-12
        assert abs(out[g == k].var() - 1) < 1e-12


def test_select_universe():
    raw = _panel([[1.0, 1.0, 1.0]], caps=[5.0, 3.0, 9.0])
    kept = select_universe(raw, 2).df
    assert sorted(kept.market_cap) == [5.0, 9.0]
    with pytest.warns(UserWarning):
        assert len(select_universe(raw, 10)) == 3


def test_select_universe_excludes_missing_features():
    raw = _panel([[1.0, 1.0, 1.0]], caps=[5.0, 3.0, 9.0])
    raw.df.loc[raw.df.stock_id == "S2", "f_0"] = np.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        kept = select_universe(raw, 2).df
    assert "S2" not in set(kept.stock_id)


def test_partition_default_counts():
    days = np.arange(400)
    part = partition_days(days, 5, 300, 50)
    assert len(part.role("source")) == 60 and len(part.role("validation")) == 10
    ids = [d.domain_id for d in part.domains]
    assert ids[-1] == -1 and ids == sorted(ids)
    covered = np.concatenate([d.days for d in part.domains])
    assert np.array_equal(covered, days[-350:])  # tiles the window, no gaps or overlaps


def test_partition_too_short():
    with pytest.raises(ConfigError):
        partition(np.arange(7), 5, 2)


def test_minmax_examples():
    sc = MinMaxScaler().fit(np.array([[2.0], [4.0]]))
    assert sc.transform(np.array([[3.0], [5.0]])).ravel().tolist() == [0.5, 1.5]
    with pytest.warns(UserWarning):
        sc = MinMaxScaler().fit(np.array([[1.0, 2.0], [1.0, 3.0]]))
    assert np.all(sc.transform(np.array([[7.0, 2.5]]))[:, 0] == 0)
    assert MinMaxScaler.from_dict(sc.to_dict()).transform(np.array([[1.0, 3.0]])).tolist() == [[0.0, 1.0]]


def test_minmax_scale_fits_on_sources_only():
    src = DomainPanel(-2, np.array([[0.0], [10.0]]), np.array([-1.0, 1.0]))
    oos = DomainPanel(0, np.array([[20.0], [5.0]]), np.array([-1.0, 1.0]), role="oos")
    scaled, _ = minmax_scale([src, oos])
    assert scaled[1].inputs.ravel().tolist() == [2.0, 0.5]


def test_csv_round_trip_bit_exact(tmp_path):
    df = simulate_market(ScmConfig(K=2, K_tilde=1, seed=5), n_stocks=5, n_days=6)
    raw = RawPanel(df)
    write_panel_csv(raw, tmp_path / "p.csv")
    back = load_panel_csv(tmp_path / "p.csv")
    for c in ["open", "market_cap", "f_0", "f_1", "f_2"]:
        assert np.array_equal(back.df[c].to_numpy(), raw.df[c].to_numpy())


def test_load_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_panel_csv("/nonexistent/p.csv")


def test_rawpanel_rejects_duplicates_and_bad_prices():
    df = pd.DataFrame({"date": ["2020-01-01"] * 2, "stock_id": ["A", "A"], "open": [1.0, 1.0], "market_cap": [1.0, 1.0]})
    with pytest.raises(ConfigError):
        RawPanel(df)
    df = pd.DataFrame({"date": ["2020-01-01"], "stock_id": ["A"], "open": [1.0], "market_cap": [1.0], "close": [0.0]})
    with pytest.raises(ConfigError):
        RawPanel(df)


def test_build_domain_panels_standardizes_per_domain():
    df = simulate_market(ScmConfig(K=2, K_tilde=1, seed=6), n_stocks=12, n_days=24)
    lab = compute_labels(RawPanel(df))
    part = partition(lab.days, 5, 3, 1)
    panels = build_domain_panels(lab, part)
    assert [p.role for p in panels] == ["source"] * 3 + ["validation"]
    for p in panels:
        p.check_standardized(1e-12)
