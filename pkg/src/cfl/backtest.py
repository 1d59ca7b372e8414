"""Daily rank-weighted portfolios with rolling retraining."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from ._common import ConfigError, NumericalError
from .data import RawPanel, build_domain_panels, minmax_scale, partition_days

log = logging.getLogger(__name__)

TRADING_DAYS = 252


@dataclass(frozen=True)
class BacktestConfig:
    update_frequency_days: int = 120
    window_days: int = 350
    train_days: int = 300
    val_days: int = 50
    days_per_domain: int = 5
    hedge: str = "one_over_n"
    cost_bps: float = 0.0
    label_purge_days: int = 2

    def __post_init__(self):
        if self.train_days + self.val_days != self.window_days:
            raise ConfigError("train_days + val_days must equal window_days")
        if min(self.update_frequency_days, self.train_days, self.val_days, self.days_per_domain) <= 0:
            raise ConfigError("day counts must be positive")
        if self.hedge not in ("none", "one_over_n"):
            raise ConfigError(f"unknown hedge {self.hedge!r}")
        if self.cost_bps < 0 or self.label_purge_days < 0:
            raise ConfigError("cost_bps and label_purge_days must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BacktestConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown BacktestConfig keys: {sorted(unknown)}")
        return cls(**d)


def rank_weights(signals) -> np.ndarray:
    """``rank / sum(rank)`` with ascending average ranks; positive and summing to one."""
    s = np.asarray(signals, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ConfigError("signals must be a non-empty vector")
    r = rankdata(s, method="average")
    return r / r.sum()


def daily_return(weights, returns, hedge: str = "one_over_n", cost_bps: float = 0.0, turnover: float = 0.0) -> float:
    """Long leg ``sum w r``, minus the equal-weight pool when hedged, minus ``cost_bps`` per unit turnover."""
    if isinstance(weights, pd.Series) or isinstance(returns, pd.Series):
        if not (isinstance(weights, pd.Series) and isinstance(returns, pd.Series)):
            raise ConfigError("pass both weights and returns as Series to align by stock")
        diff = weights.index.symmetric_difference(returns.index)
        if len(diff):
            raise ConfigError(f"weights and returns cover different stocks: {sorted(map(str, diff))}")
        returns = returns.reindex(weights.index)
    w = np.asarray(weights, dtype=np.float64)
    r = np.asarray(returns, dtype=np.float64)
    if w.shape != r.shape:
        raise ConfigError(f"weights {w.shape} and returns {r.shape} are misaligned")
    if hedge == "one_over_n":
        # excess weights first: uniform rank weights equal 1/N bit for bit, so the self-hedge is exactly 0
        out = float((w - 1.0 / len(w)) @ r)
    elif hedge == "none":
        out = float(w @ r)
    else:
        raise ConfigError(f"unknown hedge {hedge!r}")
    return out - cost_bps * 1e-4 * turnover


def cagr(start: float, end: float, n_days: int) -> float:
    if not start > 0 or not end > 0:
        raise NumericalError(f"capital must stay positive (start={start}, end={end})")
    if n_days < 1:
        raise ConfigError("n_days must be >= 1")
    return float((end / start) ** (TRADING_DAYS / n_days) - 1.0)


def sharpe(returns) -> float:
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        raise ConfigError("need at least 2 daily returns")
    sd = r.std()
    if not sd > 0:
        raise NumericalError("daily returns have zero dispersion; Sharpe ratio undefined")
    return float(np.sqrt(TRADING_DAYS) * r.mean() / sd)


def equity_curve(returns, start: float = 1.0) -> np.ndarray:
    """Capital before day 0 and after each day: ``e[d+1] = e[d] (1 + r[d])``."""
    return start * np.concatenate([[1.0], np.cumprod(1.0 + np.asarray(returns, dtype=np.float64))])


@dataclass
class BacktestReport:
    dates: list
    returns: np.ndarray
    periods: list = field(default_factory=list)  # one dict per model update
    failed: str | None = None

    @property
    def equity(self) -> np.ndarray:
        return equity_curve(self.returns)

    @property
    def cagr(self) -> float:
        eq = self.equity
        return cagr(eq[0], eq[-1], len(self.returns))

    @property
    def sharpe(self) -> float:
        return sharpe(self.returns)

    def summary(self) -> dict:
        out = {"n_days": len(self.returns), "n_updates": len(self.periods), "failed": self.failed}
        for name in ("cagr", "sharpe"):
            try:
                out[name] = getattr(self, name)
            except (NumericalError, ConfigError) as exc:
                out[name] = None
                out[f"{name}_error"] = str(exc)
        out["periods"] = self.periods
        return out

    def curve_rows(self):
        eq = self.equity
        for d, r, e in zip(self.dates, self.returns, eq[1:]):
            yield d, float(r), float(e)


Trainer = Callable[[list, list], Callable[[np.ndarray], np.ndarray]]


def rolling_backtest(labeled: RawPanel, start_date, end_date=None, cfg: BacktestConfig = BacktestConfig(),
                     trainer: Trainer | None = None, n_days: int | None = None) -> BacktestReport:
    """Walk forward from ``start_date``, retraining every ``update_frequency_days``.

    At each update the most recent ``window_days`` days whose labels are
    already known (the last ``label_purge_days`` days before the update are
    skipped: their forward opens lie in the future) are cut into domains,
    min-max scaled on the sources and handed to ``trainer(train_panels,
    val_panels)``, which returns a predictor. The predictor then ranks each
    day's cross-section until the next update. ``labeled`` must carry the
    ``label`` column; returns are those labels.
    """
    if trainer is None:
        raise ConfigError("rolling_backtest needs a trainer")
    df = labeled.df
    feats = labeled.feature_columns
    days = np.unique(df["date"].to_numpy())
    start = np.datetime64(pd.Timestamp(start_date))
    first = int(np.searchsorted(days, start))
    last = len(days) if end_date is None else int(np.searchsorted(days, np.datetime64(pd.Timestamp(end_date)), "right"))
    if n_days is not None:
        last = min(last, first + n_days)
    if first >= last:
        raise ConfigError("empty backtest period")
    need = cfg.window_days + cfg.label_purge_days
    if first < need:
        raise ConfigError(f"backtest start leaves {first} days of history; {need} are needed for the first window")

    by_day = {d: g for d, g in df.groupby("date", sort=True)}
    dates, rets, periods = [], [], []
    prev_w = None
    failed = None
    for upd in range(first, last, cfg.update_frequency_days):
        hist = days[: upd - cfg.label_purge_days]
        part = partition_days(hist, cfg.days_per_domain, cfg.train_days, cfg.val_days)
        window = labeled.__class__.__new__(labeled.__class__)
        window.df = df[df["date"].isin(hist[-cfg.window_days :])]
        window.rejected = labeled.rejected
        try:
            panels = build_domain_panels(window, part)
            panels, scaler = minmax_scale(panels)
            predictor = trainer([p for p in panels if p.role == "source"], [p for p in panels if p.role == "validation"])
        except (ConfigError, NumericalError) as exc:
            failed = f"training for update at {str(days[upd])[:10]} failed: {exc}"
            log.error(failed)
            break
        stop = min(upd + cfg.update_frequency_days, last)
        p_rets = []
        for d in days[upd:stop]:
            g = by_day[d]
            X = scaler.transform(g[feats].to_numpy())
            s = np.asarray(predictor(X), dtype=np.float64)
            w = pd.Series(rank_weights(s), index=g["stock_id"].to_numpy())
            r = pd.Series(g["label"].to_numpy(), index=w.index)
            turnover = float(w.sum()) if prev_w is None else float(w.sub(prev_w, fill_value=0.0).abs().sum())
            rt = daily_return(w, r, cfg.hedge, cfg.cost_bps, turnover if cfg.cost_bps else 0.0)
            prev_w = w
            dates.append(str(d)[:10])
            rets.append(rt)
            p_rets.append(rt)
        pr = np.array(p_rets)
        try:
            p_sr = sharpe(pr)
        except (ConfigError, NumericalError):
            p_sr = None
        periods.append({
            "update_date": str(days[upd])[:10], "n_days": len(pr), "mean_return": float(pr.mean()),
            "total_return": float(np.prod(1 + pr) - 1), "sharpe": p_sr,
        })
    return BacktestReport(dates, np.array(rets), periods, failed)


def discovery_trainer(cfg) -> Trainer:
    """Trainer handle fitting the causal-discovery model with ``DiscoveryConfig`` ``cfg``."""
    from .discovery import train

    def fit(train_panels, val_panels):
        state = train(train_panels + val_panels, cfg)
        return state.predict

    return fit


def baseline_trainer(cfg) -> Trainer:
    """Trainer handle for the pooled-MSE baseline."""
    from .discovery import train_baseline

    def fit(train_panels, val_panels):
        return train_baseline(train_panels + val_panels, cfg).predict

    return fit
