"""Synthetic multi-domain markets drawn from a linear factor SCM with known truth.

Each domain ``t`` draws independent factor exposures ``Z_t`` with per-domain
scales ``Sigma_t``, causal coefficients ``F_t``, and idiosyncratic noise, then

    R_t   = Z_t F_t + eps_t                      (standardized per domain)
    X^a_t = a_t R_t + noise                      (non-causal, a_t redrawn per domain)
    X_t   = [Z_t, X^a_t]  (optionally times a fixed invertible mixing matrix)

Sample moments are fixed exactly rather than left to chance: factor draws are
whitened per domain and the noise is projected orthogonal to the factors, so
the standardized coefficients and the transformed truth ``(Z~, F~, eps~)`` are
known in closed form.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from ._common import ConfigError, NumericalError, read_csv, read_json, stream, write_csv, write_json
from .panel import DomainPanel

log = logging.getLogger(__name__)

# coefficient wander on the unstable factors relative to factor_drift
VOLATILE_DRIFT_MULTIPLIER = 10.0


@dataclass(frozen=True)
class ScmConfig:
    K: int = 4
    K_tilde: int = 2
    T: int = 10
    n_per_domain: int = 2000
    factor_drift: float = 0.02
    spurious_strength: float = 1.0
    noise_scale: float = 0.5
    mixing_depth: int = 0
    seed: int = 0
    # extra domains appended after the T sources
    n_val: int = 0
    n_oos: int = 1
    n_spurious: int = 2
    sigma_range: tuple[float, float] = (0.5, 2.0)
    coef_range: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        for name in ("K", "K_tilde", "T", "n_per_domain", "n_spurious"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"ScmConfig.{name} must be positive, got {getattr(self, name)}")
        if self.K_tilde > self.K:
            raise ConfigError(f"K_tilde={self.K_tilde} exceeds K={self.K}")
        for name in ("factor_drift", "spurious_strength", "noise_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"ScmConfig.{name} must be >= 0")
        if self.n_val < 0 or self.n_oos < 0:
            raise ConfigError("n_val and n_oos must be >= 0")
        if self.mixing_depth not in (0, 1):
            raise ConfigError(f"mixing_depth must be 0 or 1, got {self.mixing_depth}")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad sigma_range {self.sigma_range}")
        lo, hi = self.coef_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad coef_range {self.coef_range}")
        object.__setattr__(self, "sigma_range", tuple(map(float, self.sigma_range)))
        object.__setattr__(self, "coef_range", tuple(map(float, self.coef_range)))

    @property
    def n_domains(self) -> int:
        return self.T + self.n_val + self.n_oos

    @property
    def input_dim(self) -> int:
        return self.K + self.n_spurious

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScmConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ScmConfig keys: {sorted(unknown)}")
        return cls(**d)


class GammaMatrix:
    """A K~ x K selection matrix with disjoint row supports and unit row norms."""

    def __init__(self, entries, tol: float = 1e-12):
        g = np.atleast_2d(np.asarray(entries, dtype=np.float64))
        if g.ndim != 2 or g.size == 0:
            raise ConfigError("gamma must be a non-empty 2-D matrix")
        support = g != 0
        if np.any(support.sum(axis=0) > 1):
            cols = np.flatnonzero(support.sum(axis=0) > 1).tolist()
            raise ConfigError(f"gamma rows overlap on factor columns {cols}")
        norms = (g**2).sum(axis=1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ConfigError(f"gamma rows must have unit l2 norm, got squared norms {norms.tolist()}")
        self.entries = g

    @classmethod
    def leading(cls, K_tilde: int, K: int) -> "GammaMatrix":
        """Select the first K~ factors one-to-one."""
        return cls(np.eye(K_tilde, K))

    @property
    def shape(self):
        return self.entries.shape

    def __repr__(self):
        return f"GammaMatrix({self.entries.tolist()})"


@dataclass
class DomainTruth:
    domain_id: int
    sigma: np.ndarray  # diagonal of Sigma_t
    F: np.ndarray  # coefficients of the standardized label on raw Z
    F_tilde: np.ndarray
    Z_tilde: np.ndarray
    residuals: np.ndarray
    spurious_coupling: np.ndarray


@dataclass
class ScmGroundTruth:
    gamma: GammaMatrix
    domains: list[DomainTruth]
    mixing: np.ndarray | None = None
    regenerated: list[int] = field(default_factory=list)

    def F_tilde(self, ids=None) -> np.ndarray:
        return np.array([d.F_tilde for d in self._select(ids)])

    def residuals(self, ids=None) -> list[np.ndarray]:
        return [d.residuals for d in self._select(ids)]

    def by_id(self, domain_id: int) -> DomainTruth:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise KeyError(domain_id)

    def _select(self, ids):
        if ids is None:
            return self.domains
        return [self.by_id(i) for i in ids]


class _DegenerateDraw(Exception):
    pass


def gamma_standardize(gamma: GammaMatrix, Z: np.ndarray, sigma: np.ndarray, F: np.ndarray, R: np.ndarray):
    """Project a domain onto its stable subportion.

    With ``G = gamma Sigma^-1`` returns ``Z~ = Z G^T`` (rows are samples),
    ``F~ = (G G^T)^-1 G F`` and ``eps~ = R - Z~ F~``.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ConfigError("Sigma_t must have positive diagonal")
    G = gamma.entries / sigma[None, :]
    GG = G @ G.T
    cond = np.linalg.cond(GG)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(f"gamma Sigma^-1 Gram matrix is singular (condition number {cond:.3g})")
    Z_tilde = np.asarray(Z, dtype=np.float64) @ G.T
    F_tilde = np.linalg.solve(GG, G @ np.asarray(F, dtype=np.float64))
    resid = np.asarray(R, dtype=np.float64) - Z_tilde @ F_tilde
    return Z_tilde, F_tilde, resid


# -- generation ---------------------------------------------------------------


def _whitened_factors(rng, n: int, K: int) -> np.ndarray:
    """n x K draw with exact zero column means and identity second moments."""
    G = rng.standard_normal((n, K))
    G -= G.mean(axis=0)
    C = G.T @ G / n
    w, V = np.linalg.eigh(C)
    if w.min() <= 1e-10 * max(w.max(), 1e-300):
        raise _DegenerateDraw
    return G @ (V * w**-0.5) @ V.T


def _orthogonal_noise(rng, n: int, basis: np.ndarray, scale: float) -> np.ndarray:
    e = rng.standard_normal(n)
    e -= e.mean()
    e -= basis @ (basis.T @ e) / n
    if scale == 0:
        return np.zeros(n)
    return e * (scale / np.sqrt(np.mean(e**2)))


def _mixing_matrix(cfg: ScmConfig) -> np.ndarray | None:
    if cfg.mixing_depth == 0:
        return None
    rng = stream(cfg.seed, 0, 1)
    D = cfg.input_dim
    Q, _ = np.linalg.qr(rng.standard_normal((D, D)))
    return Q * rng.uniform(0.5, 1.5, size=D)[None, :]


def _base_coefficients(cfg: ScmConfig) -> np.ndarray:
    rng = stream(cfg.seed, 0, 0)
    c = np.zeros(cfg.K)
    mag = rng.uniform(*cfg.coef_range, size=cfg.K_tilde)
    sign = np.where(rng.random(cfg.K_tilde) < 0.5, -1.0, 1.0)
    c[: cfg.K_tilde] = sign * mag
    return c


def _wander(cfg: ScmConfig, rng) -> np.ndarray:
    scale = np.full(cfg.K, cfg.factor_drift)
    scale[cfg.K_tilde :] *= VOLATILE_DRIFT_MULTIPLIER
    return scale * rng.standard_normal(cfg.K)


def _draw_domain(cfg: ScmConfig, index: int, domain_id: int, role: str, c: np.ndarray, gamma, mixing, n=None):
    """Sample one domain given its standardized-unit coefficients ``c``."""
    n = cfg.n_per_domain if n is None else n
    attempt = 0
    while True:
        rng = stream(cfg.seed, 1, index, attempt)
        sigma = rng.uniform(*cfg.sigma_range, size=cfg.K)
        try:
            Zs = _whitened_factors(rng, n, cfg.K)
            break
        except _DegenerateDraw:
            attempt += 1
            log.warning("domain %d: degenerate factor draw, regenerating (attempt %d)", domain_id, attempt)
            if attempt > 20:
                raise NumericalError(f"domain {domain_id}: factor draw degenerate after 20 attempts (n={n})")
    eps = _orthogonal_noise(rng, n, Zs, cfg.noise_scale)
    sd = np.sqrt(c @ c + cfg.noise_scale**2)
    if sd == 0:
        raise ConfigError("all coefficients and the noise are zero: labels cannot be standardized")
    R = (Zs @ c + eps) / sd
    R = (R - R.mean()) / R.std()
    Z = Zs * sigma[None, :]
    F = c / (sigma * sd)

    a = cfg.spurious_strength * rng.standard_normal(cfg.n_spurious)
    Xa = R[:, None] * a[None, :] + rng.standard_normal((n, cfg.n_spurious))
    X = np.hstack([Z, Xa])
    if mixing is not None:
        X = X @ mixing

    Z_tilde, F_tilde, resid = gamma_standardize(gamma, Z, sigma, F, R)
    panel = DomainPanel(domain_id, X, R, role=role, meta={"standardized": True})
    truth = DomainTruth(domain_id, sigma, F, F_tilde, Z_tilde, resid, a)
    return panel, truth, attempt


def _roles(cfg: ScmConfig) -> list[str]:
    return ["source"] * cfg.T + ["validation"] * cfg.n_val + ["oos"] * cfg.n_oos


def _generate(cfg: ScmConfig, coefs: np.ndarray, roles: list[str]):
    gamma = GammaMatrix.leading(cfg.K_tilde, cfg.K)
    mixing = _mixing_matrix(cfg)
    N = len(roles)
    ids = list(range(-(N - 1), 1))
    panels, truths, regen = [], [], []
    for i, (did, role) in enumerate(zip(ids, roles)):
        p, t, attempts = _draw_domain(cfg, i, did, role, coefs[i], gamma, mixing)
        panels.append(p)
        truths.append(t)
        if attempts:
            regen.append(did)
    return panels, ScmGroundTruth(gamma, truths, mixing, regen)


def sample_factor_scm(cfg: ScmConfig):
    """Draw ``cfg.T`` source domains (+ validation and OOS domains) and their truth.

    Domains are ordered oldest first; ids run from ``-(N-1)`` to 0.
    """
    base = _base_coefficients(cfg)
    coefs = np.array([base + _wander(cfg, stream(cfg.seed, 2, i)) for i in range(cfg.n_domains)])
    return _generate(cfg, coefs, _roles(cfg))


def sample_drift_ladder(cfg: ScmConfig, n_domains: int, step_scale: float, n_oos: int = 1):
    """Domains whose coefficients random-walk away from the newest ones.

    Walking backwards from the OOS block, each older domain adds an
    independent Gaussian step of size ``step_scale`` to every factor, so
    coefficient wander grows with the distance from the OOS domain. The last
    ``n_oos`` domains share the newest coefficients (plus ``factor_drift``
    wander) and carry role ``oos``.
    """
    if n_domains <= n_oos:
        raise ConfigError("need more domains than OOS domains")
    base = _base_coefficients(cfg)
    n_src = n_domains - n_oos
    steps = step_scale * np.array([stream(cfg.seed, 3, i).standard_normal(cfg.K) for i in range(n_src)])
    # older sources accumulate more steps; index 0 is the oldest
    offsets = np.cumsum(steps[::-1], axis=0)[::-1]
    coefs = np.vstack([offsets, np.zeros((n_oos, cfg.K))]) + base
    coefs = coefs + np.array([_wander(cfg, stream(cfg.seed, 2, i)) for i in range(n_domains)])
    roles = ["source"] * n_src + ["oos"] * n_oos
    return _generate(cfg, coefs, roles)


def sample_toy_scm(sigma_schedule, n: int, seed: int = 0) -> list[DomainPanel]:
    """The two-variable toy SCM: ``Y = Z + E``, ``X^a = Y + d``, ``X = (Z, X^a)``.

    All three noises are Normal(0, sigma_t^2). Inputs column 0 is ``Z`` and
    column 1 is ``X^a``; labels are the raw ``Y`` (not standardized).
    """
    sig = np.asarray(list(sigma_schedule), dtype=np.float64)
    if sig.size == 0:
        raise ConfigError("sigma_schedule is empty")
    if np.any(~(sig > 0)):
        raise ConfigError(f"sigma_t must be positive, got {sig.tolist()}")
    panels = []
    T = len(sig)
    for i, s in enumerate(sig):
        rng = stream(seed, 4, i)
        Z, E, d = s * rng.standard_normal((3, n))
        Y = Z + E
        Xa = Y + d
        panels.append(
            DomainPanel(i - T + 1, np.column_stack([Z, Xa]), Y, meta={"standardized": False, "sigma": float(s)})
        )
    return panels


# -- generalizability and deviation -------------------------------------------


def geometric_median(points, tol: float = 1e-9, max_iter: int = 10_000) -> np.ndarray:
    """Point minimizing the mean Euclidean distance to ``points`` (rows).

    Data points are first tested against the exact optimality condition
    ``||sum_{i != k} u_i|| <= m_k`` (unit vectors ``u_i`` towards the other
    points, ``m_k`` the multiplicity of point ``k``); otherwise Weiszfeld
    iterations with the Vardi-Zhang modification run until the mean unit
    vector has norm below ``tol``.
    """
    P = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if P.shape[0] == 1 and np.ndim(points) == 1:
        P = P.T
    m = P.shape[0]
    if m == 0:
        raise ConfigError("geometric median of an empty set")

    for k in range(m):
        d = P - P[k]
        nrm = np.linalg.norm(d, axis=1)
        away = nrm > 0
        pull = (d[away] / nrm[away, None]).sum(axis=0)
        if np.linalg.norm(pull) <= m - away.sum():
            return P[k].copy()

    y = P.mean(axis=0)
    step = np.inf
    for _ in range(max_iter):
        d = P - y
        nrm = np.linalg.norm(d, axis=1)
        away = nrm > 0
        inv = 1.0 / nrm[away]
        pull = (d[away] * inv[:, None]).sum(axis=0)
        r = np.linalg.norm(pull)
        if r / m <= tol:
            return y
        target = (inv @ P[away]) / inv.sum()
        eta = m - away.sum()
        if eta > 0:
            if r <= eta:
                return y
            target = (1 - eta / r) * target + (eta / r) * y
        step = np.linalg.norm(target - y)
        y = target
        if step <= 1e-15 * (1 + np.linalg.norm(y)):
            return y
    raise NumericalError(f"Weiszfeld did not converge in {max_iter} iterations (last step {step:.3g})")


@dataclass
class GeneralizabilityReport:
    nu_star: np.ndarray
    delta_f: float
    delta_eps: float
    oos_coef_gap: float
    oos_resid: float
    holds: bool


def measure_generalizability(F_sources, resid_sources, F_oos, resid_oos, atol: float = 1e-12):
    """Source dispersion ``(delta_f, delta_eps)`` and whether the OOS domain stays inside it.

    ``delta_f`` is the mean distance of the source coefficients to their
    geometric median ``nu*``; ``delta_eps`` the mean over sources of
    ``E|eps~|``. ``holds`` checks ``||nu* - F~_0|| <= delta_f`` and
    ``E_0|eps~| <= delta_eps`` with an absolute slack ``atol``.
    """
    F = np.atleast_2d(np.asarray(F_sources, dtype=np.float64))
    if F.shape[0] == 1 and np.ndim(F_sources) == 1:
        F = F.T
    if len(resid_sources) != F.shape[0]:
        raise ConfigError("one residual vector per source domain is required")
    nu = geometric_median(F)
    delta_f = float(np.linalg.norm(F - nu, axis=1).mean())
    delta_eps = float(np.mean([np.mean(np.abs(e)) for e in resid_sources]))
    gap = float(np.linalg.norm(nu - np.atleast_1d(np.asarray(F_oos, dtype=np.float64))))
    oos_resid = float(np.mean(np.abs(resid_oos)))
    holds = gap <= delta_f + atol and oos_resid <= delta_eps + atol
    return GeneralizabilityReport(nu, delta_f, delta_eps, gap, oos_resid, bool(holds))


def generalizability_from_truth(truth: ScmGroundTruth, source_ids, oos_id: int) -> GeneralizabilityReport:
    return measure_generalizability(
        truth.F_tilde(source_ids), truth.residuals(source_ids), truth.by_id(oos_id).F_tilde,
        truth.by_id(oos_id).residuals,
    )


def coefficient_deviation(vectors) -> float:
    """``min_nu mean_t ||v_t - nu||^2``; the minimizer is the arithmetic mean."""
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim == 1:
        V = V[:, None]
    if V.ndim != 2 or V.shape[0] == 0:
        raise ConfigError("need a non-empty list of equal-length vectors")
    return float(((V - V.mean(axis=0)) ** 2).sum(axis=1).mean())


# -- synthetic market panel for backtests -------------------------------------


def simulate_market(
    cfg: ScmConfig,
    n_stocks: int,
    n_days: int,
    days_per_regime: int = 5,
    daily_vol: float = 0.02,
) -> pd.DataFrame:
    """A wide-format panel whose forward open-to-open returns follow the SCM.

    Regimes (blocks of ``days_per_regime`` days) share coefficients, factor
    scales and spurious couplings; every day is an independent cross-section
    of ``n_stocks`` samples. Opens are chained so that the forward return
    ``(open[d+2] - open[d+1]) / open[d+1]`` equals ``daily_vol`` times the
    day-``d`` SCM label plus a common market move. Output columns follow the
    CSV input schema.
    """
    if n_days < 3:
        raise ConfigError("need at least 3 days")
    base = _base_coefficients(cfg)
    mixing = _mixing_matrix(cfg)
    rng = stream(cfg.seed, 5, 0)
    shares = np.exp(rng.normal(3.0, 1.0, size=n_stocks))
    opens = np.empty((n_days, n_stocks))
    opens[0] = rng.uniform(5, 50, size=n_stocks)
    opens[1] = opens[0] * (1 + daily_vol * rng.standard_normal(n_stocks))

    feats = []
    for d in range(n_days):
        regime = d // days_per_regime
        c = base + _wander(cfg, stream(cfg.seed, 2, regime))
        X, R = _draw_regime_day(cfg, regime, d, c, mixing, n_stocks)
        feats.append(X)
        if d + 2 < n_days:
            market = 0.5 * daily_vol * stream(cfg.seed, 6, d).standard_normal()
            opens[d + 2] = opens[d + 1] * (1 + daily_vol * R + market)
    dates = pd.bdate_range("2010-01-04", periods=n_days).strftime("%Y-%m-%d").to_numpy()
    X = np.vstack(feats)
    cols = {
        "date": np.repeat(dates, n_stocks),
        "stock_id": np.tile([f"S{j:04d}" for j in range(n_stocks)], n_days),
        "open": opens.ravel(),
        "market_cap": (opens * shares[None, :]).ravel(),
    }
    for j in range(X.shape[1]):
        cols[f"f_{j}"] = X[:, j]
    return pd.DataFrame(cols)


def _draw_regime_day(cfg, regime, day, c, mixing, n):
    # factor scales and spurious coupling come from the regime, samples from the day
    rng_regime = stream(cfg.seed, 7, regime)
    sigma = rng_regime.uniform(*cfg.sigma_range, size=cfg.K)
    a = cfg.spurious_strength * rng_regime.standard_normal(cfg.n_spurious)
    rng = stream(cfg.seed, 8, day)
    Zs = _whitened_factors(rng, n, cfg.K)
    eps = _orthogonal_noise(rng, n, Zs, cfg.noise_scale)
    R = Zs @ c + eps
    R = (R - R.mean()) / R.std()
    Xa = R[:, None] * a[None, :] + rng.standard_normal((n, cfg.n_spurious))
    X = np.hstack([Zs * sigma[None, :], Xa])
    if mixing is not None:
        X = X @ mixing
    return X, R


# -- persistence --------------------------------------------------------------


def write_simulation(out_dir, cfg: ScmConfig, panels: list[DomainPanel], truth: ScmGroundTruth) -> dict:
    """One CSV per domain (``x_0..x_{D-1}, r``) plus ``scm_manifest.json``."""
    out = Path(out_dir)
    files = []
    for p in panels:
        name = f"domain_{p.domain_id:+05d}.csv"
        header = [f"x_{j}" for j in range(p.dim)] + ["r"]
        write_csv(out / name, header, (list(map(float, x)) + [float(r)] for x, r in zip(p.inputs, p.labels)))
        files.append({"file": name, "domain_id": p.domain_id, "role": p.role})
    src = [p.domain_id for p in panels if p.role == "source"]
    oos = [p.domain_id for p in panels if p.role == "oos"]
    manifest = {
        "schema_version": 1,
        "config": cfg.to_dict(),
        "gamma": truth.gamma.entries,
        "domains": files,
        "F_tilde": {str(d.domain_id): d.F_tilde for d in truth.domains},
        "mean_abs_residual": {str(d.domain_id): float(np.mean(np.abs(d.residuals))) for d in truth.domains},
        "regenerated": truth.regenerated,
    }
    if src and oos:
        rep = generalizability_from_truth(truth, src, oos[-1])
        manifest.update(delta_f=rep.delta_f, delta_eps=rep.delta_eps, nu_star=rep.nu_star, generalizable=rep.holds)
    write_json(out / "scm_manifest.json", manifest)
    return manifest


def read_simulation(run_dir) -> tuple[list[DomainPanel], dict]:
    run = Path(run_dir)
    manifest = read_json(run / "scm_manifest.json")
    panels = []
    for entry in manifest["domains"]:
        header, rows = read_csv(run / entry["file"])
        arr = np.array(rows, dtype=np.float64)
        panels.append(DomainPanel(entry["domain_id"], arr[:, :-1], arr[:, -1], role=entry["role"]))
    return panels, manifest
