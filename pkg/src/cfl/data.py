"""Real-panel ingestion: forward-open labels, universe selection, domain partitioning, scaling.

Input CSV schema (wide format, one row per day and stock)::

    date,stock_id,open,market_cap,f_0,...,f_{D-1}[,high,low,close,volume]
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from ._common import ConfigError, fmt
from .panel import DomainPanel

log = logging.getLogger(__name__)

OPTIONAL_PRICE_COLUMNS = ("high", "low", "close", "volume")


class RawPanel:
    """Validated wide-format panel; ``df`` is sorted by (date, stock_id)."""

    def __init__(self, df: pd.DataFrame):
        missing = {"date", "stock_id", "open", "market_cap"} - set(df.columns)
        if missing:
            raise ConfigError(f"panel is missing required columns {sorted(missing)}")
        df = df.copy()
        df["date"] = pd.to_datetime(df["date"], format="ISO8601")
        df["stock_id"] = df["stock_id"].astype(str)
        if df.duplicated(["date", "stock_id"]).any():
            raise ConfigError("duplicate (date, stock_id) rows")
        for col in OPTIONAL_PRICE_COLUMNS:
            if col in df and (df[col].dropna() <= 0).any():
                raise ConfigError(f"column {col!r} has non-positive values")
        self.df = df.sort_values(["date", "stock_id"], kind="mergesort").reset_index(drop=True)
        self.rejected = pd.DataFrame(columns=["date", "stock_id", "reason"])

    @property
    def feature_columns(self) -> list[str]:
        cols = [c for c in self.df.columns if c.startswith("f_")]
        return sorted(cols, key=lambda c: int(c[2:]))

    @property
    def days(self) -> np.ndarray:
        return np.unique(self.df["date"].to_numpy())

    def __len__(self):
        return len(self.df)


def load_panel_csv(path) -> RawPanel:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"panel file not found: {path}")
    df = pd.read_csv(path, comment="#", float_precision="round_trip")
    return RawPanel(df)


def write_panel_csv(panel: RawPanel, path) -> None:
    """Canonical text: ISO dates and shortest round-trip float repr."""
    df = panel.df.copy()
    df["date"] = df["date"].dt.strftime("%Y-%m-%d")
    cols = list(df.columns)
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in df.itertuples(index=False):
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else fmt(v)
    return str(v)


def compute_labels(raw: RawPanel) -> RawPanel:
    """Attach ``label = (open[d+2] - open[d+1]) / open[d+1]`` on the trading calendar.

    Rows without both forward opens are dropped (the last two days always
    are). Rows whose forward opens are non-positive are dropped and logged in
    ``rejected`` with a reason code.
    """
    df = raw.df
    days = raw.days
    pos = {d: i for i, d in enumerate(days)}
    opens = df.pivot(index="date", columns="stock_id", values="open").reindex(days)
    o1 = opens.shift(-1)
    o2 = opens.shift(-2)
    idx = pd.MultiIndex.from_frame(df[["date", "stock_id"]])
    open1 = o1.stack(future_stack=True).reindex(idx).to_numpy()
    open2 = o2.stack(future_stack=True).reindex(idx).to_numpy()
    own = df["open"].to_numpy()

    day_pos = df["date"].map(pos).to_numpy()
    reasons = np.full(len(df), "", dtype=object)
    reasons[day_pos >= len(days) - 2] = "no_forward_window"
    missing = (np.isnan(open1) | np.isnan(open2)) & (reasons == "")
    reasons[missing] = "missing_forward_open"
    bad = ((open1 <= 0) | (open2 <= 0) | (own <= 0)) & (reasons == "")
    reasons[bad] = "nonpositive_open"

    keep = reasons == ""
    out = RawPanel.__new__(RawPanel)
    labeled = df.loc[keep].copy()
    labeled["label"] = (open2[keep] - open1[keep]) / open1[keep]
    out.df = labeled.reset_index(drop=True)
    rej = df.loc[~keep, ["date", "stock_id"]].copy()
    rej["reason"] = reasons[~keep]
    out.rejected = rej.reset_index(drop=True)
    if (rej["reason"] == "nonpositive_open").any():
        log.warning("%d rows rejected for non-positive opens", int((rej["reason"] == "nonpositive_open").sum()))
    return out


def standardize_labels(labels, groups) -> np.ndarray:
    """Per-group zero mean, unit (population) variance."""
    labels = np.asarray(labels, dtype=np.float64)
    groups = np.asarray(groups)
    out = np.empty_like(labels)
    for g in pd.unique(groups):
        m = groups == g
        y = labels[m]
        sd = y.std()
        if y.size < 2 or not sd > 0:
            raise ConfigError(f"domain {g}: labels are constant, cannot standardize")
        out[m] = (y - y.mean()) / sd
    return out


def select_universe(raw: RawPanel, top_n: int) -> RawPanel:
    """Per day keep the ``top_n`` largest stocks by market cap with no missing values."""
    if top_n <= 0:
        raise ConfigError("top_n must be positive")
    df = raw.df
    need = ["open", "market_cap", *raw.feature_columns]
    if "label" in df:
        need.append("label")
    eligible = df.dropna(subset=need)
    short = eligible.groupby("date").size()
    short = short[short < top_n]
    if len(short):
        warnings.warn(f"{len(short)} day(s) have fewer than top_n={top_n} eligible stocks; keeping all eligible")
    ranked = eligible.sort_values(["date", "market_cap", "stock_id"], ascending=[True, False, True], kind="mergesort")
    kept = ranked.groupby("date", sort=False).head(top_n)
    out = RawPanel.__new__(RawPanel)
    out.df = kept.sort_values(["date", "stock_id"], kind="mergesort").reset_index(drop=True)
    out.rejected = raw.rejected
    return out


@dataclass
class DomainSpec:
    domain_id: int
    days: np.ndarray
    role: str

    @property
    def interval(self):
        """``(start, end]``: the day before the first day is exclusive."""
        return self.days[0], self.days[-1]


@dataclass
class DomainPartition:
    domains: list[DomainSpec] = field(default_factory=list)

    def role(self, role: str) -> list[DomainSpec]:
        return [d for d in self.domains if d.role == role]

    def day_to_domain(self) -> dict:
        return {day: d.domain_id for d in self.domains for day in d.days}

    def __len__(self):
        return len(self.domains)


def partition(days, days_per_domain: int, n_train_domains: int, n_val_domains: int = 0) -> DomainPartition:
    """Cut the newest ``(n_train + n_val) * days_per_domain`` days into consecutive blocks.

    The newest block sits next to the OOS period and gets id -1; older blocks
    count down. The oldest ``n_train_domains`` blocks are sources, the rest
    validation.
    """
    days = np.asarray(days)
    if days_per_domain <= 0 or n_train_domains <= 0 or n_val_domains < 0:
        raise ConfigError("days_per_domain and n_train_domains must be positive")
    if np.any(days[1:] <= days[:-1]):
        raise ConfigError("days must be strictly increasing")
    n_blocks = n_train_domains + n_val_domains
    need = n_blocks * days_per_domain
    if len(days) < need:
        raise ConfigError(
            f"window has {len(days)} days but {n_blocks} domains x {days_per_domain} days = {need} requested"
        )
    window = days[len(days) - need :]
    specs = []
    for b in range(n_blocks):
        block = window[b * days_per_domain : (b + 1) * days_per_domain]
        role = "source" if b < n_train_domains else "validation"
        specs.append(DomainSpec(b - n_blocks, block, role))
    return DomainPartition(specs)


def partition_days(days, days_per_domain: int, train_days: int, val_days: int) -> DomainPartition:
    """Partition by day counts, e.g. 300 train + 50 validation days at 5 days/domain."""
    if train_days % days_per_domain or val_days % days_per_domain:
        raise ConfigError("train_days and val_days must be multiples of days_per_domain")
    return partition(days, days_per_domain, train_days // days_per_domain, val_days // days_per_domain)


class MinMaxScaler:
    """Feature-wise affine map sending the fitted range to [0, 1].

    Constant features map to 0 everywhere. Values outside the fitted range
    are not clipped.
    """

    def __init__(self, lo=None, hi=None):
        self.lo = None if lo is None else np.asarray(lo, dtype=np.float64)
        self.hi = None if hi is None else np.asarray(hi, dtype=np.float64)

    def fit(self, X) -> "MinMaxScaler":
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] == 0:
            raise ConfigError("cannot fit a scaler on an empty source set")
        self.lo = X.min(axis=0)
        self.hi = X.max(axis=0)
        flat = np.flatnonzero(self.hi == self.lo)
        if flat.size:
            warnings.warn(f"features {flat.tolist()} are constant on the source set; mapped to 0")
        return self

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        rng = self.hi - self.lo
        safe = np.where(rng > 0, rng, 1.0)
        out = (X - self.lo) / safe
        out[:, rng == 0] = 0.0
        return out

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d) -> "MinMaxScaler":
        return cls(d["lo"], d["hi"])


def minmax_scale(panels: list[DomainPanel]) -> tuple[list[DomainPanel], MinMaxScaler]:
    """Fit on the source panels, apply the same map to every panel."""
    src = [p.inputs for p in panels if p.role == "source"]
    if not src:
        raise ConfigError("no source domains to fit the scaler on")
    scaler = MinMaxScaler().fit(np.vstack(src))
    scaled = [DomainPanel(p.domain_id, scaler.transform(p.inputs), p.labels, p.role, dict(p.meta)) for p in panels]
    return scaled, scaler


def build_domain_panels(labeled: RawPanel, part: DomainPartition, standardize: bool = True) -> list[DomainPanel]:
    """One DomainPanel per partition block; labels standardized within each block."""
    df = labeled.df
    feats = labeled.feature_columns
    panels = []
    for spec in part.domains:
        rows = df[df["date"].isin(spec.days)]
        if rows.empty:
            raise ConfigError(f"domain {spec.domain_id} has no labeled rows")
        y = rows["label"].to_numpy()
        if standardize:
            y = standardize_labels(y, np.full(len(y), spec.domain_id))
        panels.append(
            DomainPanel(
                spec.domain_id, rows[feats].to_numpy(), y, spec.role,
                meta={"standardized": standardize, "days": [str(d)[:10] for d in spec.days]},
            )
        )
    return panels
