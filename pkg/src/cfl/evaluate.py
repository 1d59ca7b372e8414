"""Error-bound terms and diagnostics.

Everything here takes signals ``g(x)`` and labels ``r`` per domain and
returns plain numbers or small report objects:

* ``domain_error`` and ``theorem1_report``: source error, batch-averaged
  Wasserstein term, the ideal-joint-error estimate and the resulting bound.
* ``prop1_rhs`` / ``prop2_rhs``: the ground-truth bounds available on
  synthetic data.
* ``estimate_lambda_star``, ``tail_probabilities`` and ``run_nonstat_probe``:
  the ideal joint error ``J_T`` and ``P(J_T > tau)`` across horizons ``T``.
* ``relative_deviation``: ``(L_pred - L_res) / L_res`` on held-out domains.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._common import ConfigError, NumericalError, parallel_map, stream
from .discovery import _Optimizer, domain_coefficients, standardize_features
from .model import MLPExtractor
from .ot import wasserstein_term
from .panel import DomainPanel

log = logging.getLogger(__name__)

LOSS_KINDS = ("squared", "absolute")


def _loss(pred, r, loss_kind: str) -> np.ndarray:
    if loss_kind == "squared":
        return (pred - r) ** 2
    if loss_kind == "absolute":
        return np.abs(pred - r)
    raise ConfigError(f"unknown loss_kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def _signals(g, panel: DomainPanel) -> np.ndarray:
    s = g(panel.inputs) if callable(g) else np.asarray(g, dtype=np.float64)
    if s.shape != (panel.n,):
        raise ConfigError(f"domain {panel.domain_id}: {s.shape} signals for {panel.n} samples")
    return s


def domain_error(g, panel: DomainPanel, loss_kind: str = "squared") -> float:
    """Mean loss of ``g`` on one domain; ``g`` is a callable on inputs or a signal array."""
    if panel.n == 0:
        raise ConfigError(f"domain {panel.domain_id} is empty")
    return float(np.mean(_loss(_signals(g, panel), panel.labels, loss_kind)))


# -- OOS error bound -----------------------------------------------------------


@dataclass
class BoundReport:
    source_error_mean: float
    wasserstein_term: float
    lambda_star_estimate: float
    oos_error: float
    loss_kind: str
    batches: int = 0
    batch_size: int = 0

    @property
    def rhs_total(self) -> float:
        return self.source_error_mean + self.wasserstein_term + 2.0 * self.lambda_star_estimate

    @property
    def holds(self) -> bool:
        return bool(self.oos_error <= self.rhs_total)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(rhs_total=self.rhs_total, holds=self.holds)
        return d


def theorem1_report(g, sources: list[DomainPanel], oos: DomainPanel, lambda_star_estimate: float,
                    loss_kind: str = "absolute", batches: int = 10, batch_size: int = 200, seed: int = 0,
                    threads: int | None = None) -> BoundReport:
    """Assemble ``mean source error + W1 term + 2 lambda*`` against the OOS error of ``g``.

    The W1 term compares each source's ``(g(x), r)`` cloud with the OOS
    cloud. The inequality is guaranteed for losses that are 1-Lipschitz in
    ``(g, r)`` under the l1 norm (``absolute``); ``squared`` is reported for
    comparison only.
    """
    if not sources:
        raise ConfigError("no source domains")
    src_sig = {p.domain_id: _signals(g, p) for p in sources}
    oos_sig = _signals(g, oos)
    err_src = float(np.mean([np.mean(_loss(src_sig[p.domain_id], p.labels, loss_kind)) for p in sources]))
    err_oos = float(np.mean(_loss(oos_sig, oos.labels, loss_kind)))
    w = wasserstein_term(
        {p.domain_id: np.column_stack([src_sig[p.domain_id], p.labels]) for p in sources},
        {oos.domain_id: np.column_stack([oos_sig, oos.labels])},
        batches=batches, batch_size=batch_size, seed=seed, threads=threads,
    )
    return BoundReport(err_src, w.term, float(lambda_star_estimate), err_oos, loss_kind, batches, batch_size)


# -- ground-truth bounds --------------------------------------------------------


def prop1_rhs(delta_eps: float, delta_f: float, K_tilde: int) -> float:
    """``2 delta_eps + 2 sqrt(K~) delta_f``."""
    if delta_eps < 0 or delta_f < 0:
        raise ConfigError("deltas must be non-negative")
    return 2.0 * delta_eps + 2.0 * np.sqrt(K_tilde) * delta_f


def check_prop1(term: float, delta_eps: float, delta_f: float, K_tilde: int, allowance: float = 0.05):
    """``(passes, slack)``: passes when ``term <= (1 + allowance) * rhs``; slack is ``rhs - term``."""
    rhs = prop1_rhs(delta_eps, delta_f, K_tilde)
    return bool(term <= (1.0 + allowance) * rhs), float(rhs - term)


def effective_deltas(report) -> tuple[float, float]:
    """Smallest ``(delta_f, delta_eps)`` for which the generalizability implication holds.

    Takes a :class:`~cfl.scm.GeneralizabilityReport`: each delta is the larger
    of the source dispersion and the OOS-side value.
    """
    return max(report.delta_f, report.oos_coef_gap), max(report.delta_eps, report.oos_resid)


def prop2_rhs(features: dict, truth, nu, source_ids, oos_id: int) -> float:
    """``||nu|| delta_z + delta_eps + sqrt(K~) delta_f`` for one candidate ``(phi, nu)``.

    ``features`` maps domain id -> ``phi(X)`` (n x K~) on that domain; the
    candidate transformation is the one stored in ``truth``. Each delta is the
    source mean plus the OOS value.
    """
    if truth is None:
        raise ConfigError("prop2_rhs needs synthetic ground truth")
    nu = np.atleast_1d(np.asarray(nu, dtype=np.float64))
    ids = list(source_ids)
    if not ids:
        raise ConfigError("no source domains")

    def parts(did):
        d = truth.by_id(did)
        if did not in features:
            raise ConfigError(f"no features for domain {did}")
        H = np.asarray(features[did], dtype=np.float64).reshape(len(d.residuals), -1)
        if H.shape[1] != len(nu) or d.Z_tilde.shape[1] != len(nu):
            raise ConfigError("features, nu and the ground-truth subportion must share K~")
        dz = np.mean(np.linalg.norm(H - d.Z_tilde, axis=1))
        de = np.mean(np.abs(d.residuals))
        df = np.linalg.norm(d.F_tilde - nu)
        return np.array([dz, de, df])

    src = np.mean([parts(i) for i in ids], axis=0)
    tot = src + parts(oos_id)
    return float(np.linalg.norm(nu) * tot[0] + tot[1] + np.sqrt(len(nu)) * tot[2])


# -- ideal joint error ----------------------------------------------------------


@dataclass
class LambdaStarEstimate:
    value: float
    oos_error: float
    source_error_mean: float
    loss_kind: str
    protocol: dict = field(default_factory=dict)


def _std_inputs(X):
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X - mu) / sd


def _split_rows(rng, n: int, frac: float):
    k = int(round(frac * n))
    if k < 1 or k >= n:
        raise ConfigError(f"cannot hold out {frac:.0%} of {n} rows")
    perm = rng.permutation(n)
    return np.sort(perm[k:]), np.sort(perm[:k])


def estimate_lambda_star(sources: list[DomainPanel], oos: DomainPanel, model: str = "linear",
                         loss_kind: str = "absolute", holdout: float = 0.25, seed: int = 0,
                         ridge: float = 1e-8, hidden: int = 8, epochs: int = 200,
                         learning_rate: float = 0.01) -> LambdaStarEstimate:
    """Surrogate for ``min_g err_oos(g) + mean_i err_src_i(g)``.

    Inputs are standardized within each domain. A model is fit on the
    training rows by weighted least squares, where every OOS row carries
    weight ``1 / n_oos`` and every row of source ``i`` carries
    ``1 / (T n_i)`` so the objective is exactly the joint error. The value is
    that joint error, measured with ``loss_kind`` on held-out rows
    (``holdout`` of every domain). ``model`` is ``linear`` (closed form) or
    ``mlp`` (one tanh layer, Adam).
    """
    if not sources:
        raise ConfigError("estimate_lambda_star needs source domains")
    if model not in ("linear", "mlp"):
        raise ConfigError(f"unknown model {model!r}")
    _loss(np.zeros(1), np.zeros(1), loss_kind)
    T = len(sources)
    doms = [*sources, oos]
    fit_X, fit_y, fit_w, held = [], [], [], []
    for k, p in enumerate(doms):
        tr, te = _split_rows(stream(seed, 40, k), p.n, holdout)
        Xs = _std_inputs(p.inputs)
        w = 1.0 / len(tr) if k == T else 1.0 / (T * len(tr))
        fit_X.append(Xs[tr])
        fit_y.append(p.labels[tr])
        fit_w.append(np.full(len(tr), w))
        held.append((Xs[te], p.labels[te]))
    X = np.vstack(fit_X)
    y = np.concatenate(fit_y)
    w = np.concatenate(fit_w)

    if model == "linear":
        A = X.T @ (w[:, None] * X)
        A[np.diag_indices_from(A)] += ridge
        beta = np.linalg.solve(A, X.T @ (w * y))
        predict = lambda Z: Z @ beta  # noqa: E731
    else:
        ext = MLPExtractor(X.shape[1], hidden, 1, seed=seed)
        opt = _Optimizer("adam", learning_rate)
        for _ in range(epochs):
            H, cache = ext.forward(X)
            dH = (2.0 * w * (H[:, 0] - y))[:, None]
            g = ext.backward(cache, dH)[0]
            if not np.all(np.isfinite(g)):
                raise NumericalError("lambda* model training diverged")
            ext.params[:] = opt.step(ext.params, g)
        predict = lambda Z: ext(Z)[:, 0]  # noqa: E731

    errs = [float(np.mean(_loss(predict(Xh), yh, loss_kind))) for Xh, yh in held]
    err_oos = errs[-1]
    err_src = float(np.mean(errs[:-1]))
    return LambdaStarEstimate(
        err_oos + err_src, err_oos, err_src, loss_kind,
        {"model": model, "holdout": holdout, "seed": seed, "weighting": "oos 1/n_oos, source 1/(T n_i)",
         "input_standardization": "per domain"},
    )


# -- tail probabilities -----------------------------------------------------


@dataclass
class TailTable:
    T_values: list
    taus: np.ndarray
    prob: np.ndarray  # len(T) x len(tau)
    argmin_T: list  # per tau, the smallest T attaining the minimum
    suffix_min: np.ndarray  # [i, j] = min over T' >= T_i of prob[T', tau_j]

    def rows(self):
        for i, T in enumerate(self.T_values):
            for j, tau in enumerate(self.taus):
                yield T, float(tau), float(self.prob[i, j]), float(self.suffix_min[i, j])


def tau_grid(samples: dict, n: int = 20) -> np.ndarray:
    pooled = np.concatenate([np.asarray(v, dtype=np.float64) for v in samples.values()])
    lo, hi = np.quantile(pooled, [0.1, 0.9])
    return np.linspace(lo, hi, n)


def tail_probabilities(samples: dict, taus=None, n_tau: int = 20) -> TailTable:
    """``P(J_T > tau)`` per horizon from ``samples``: T -> array of ``J_T`` estimates."""
    if not samples:
        raise ConfigError("no J_T samples")
    Ts = sorted(samples)
    for T in Ts:
        if len(samples[T]) < 2:
            raise ConfigError(f"need at least 2 samples for T={T}")
    taus = tau_grid(samples, n_tau) if taus is None else np.asarray(taus, dtype=np.float64)
    prob = np.array([[np.mean(np.asarray(samples[T]) > tau) for tau in taus] for T in Ts])
    argmin = [Ts[int(np.argmin(prob[:, j]))] for j in range(len(taus))]
    suffix = np.minimum.accumulate(prob[::-1], axis=0)[::-1]
    return TailTable(Ts, taus, prob, argmin, suffix)


# -- relative deviation -------------------------------------------------------


@dataclass
class RelativeDeviation:
    value: float
    l_pred: float
    l_res: float
    nu: np.ndarray


def relative_deviation(features: list, labels: list, ridge_eps: float = 1e-6) -> RelativeDeviation:
    """``(L_pred - L_res) / L_res`` on held-out domains with frozen features.

    ``features[t]`` are the (unstandardized) features of domain ``t``.
    ``L_res`` uses each domain's own analytic fit; ``L_pred`` one shared
    coefficient fit jointly on all domains.
    """
    if not features:
        raise ConfigError("relative_deviation needs at least one domain")
    S = [standardize_features(H)[0] for H in features]
    R = [np.asarray(r, dtype=np.float64) for r in labels]
    M = np.mean([s.T @ s / len(s) for s in S], axis=0)
    b = np.mean([s.T @ r / len(s) for s, r in zip(S, R)], axis=0)
    M = M + ridge_eps * np.eye(M.shape[0])
    nu = np.linalg.solve(M, b)

    def mse(s, r, v):
        return float(np.mean((r - s @ v) ** 2))

    l_pred = float(np.mean([mse(s, r, nu) for s, r in zip(S, R)]))
    l_res = float(np.mean([mse(s, r, domain_coefficients(s, r, ridge_eps)) for s, r in zip(S, R)]))
    if not l_res > 0:
        raise NumericalError("per-domain residual level is zero; relative deviation undefined")
    return RelativeDeviation((l_pred - l_res) / l_res, l_pred, l_res, nu)


def relative_deviation_state(state, panels: list[DomainPanel], ridge_eps: float = 1e-6) -> RelativeDeviation:
    return relative_deviation([state.extractor(p.inputs) for p in panels], [p.labels for p in panels], ridge_eps)


# -- nonstationarity probe ---------------------------------------------------


@dataclass(frozen=True)
class NonstatProbeConfig:
    candidate_T: tuple = (20, 40, 60, 80, 100, 120, 140, 160)
    oos_domains: int = 1
    n_oos_samples: int = 16
    n_per_domain: int = 400
    step_scale: float = 0.05
    holdout: float = 0.25
    tau_grid: int = 20
    loss_kind: str = "absolute"
    model: str = "linear"
    K: int = 4
    K_tilde: int = 2
    noise_scale: float = 0.5
    factor_drift: float = 0.0
    spurious_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        Ts = list(self.candidate_T)
        if not Ts or any(t <= 0 for t in Ts) or any(b <= a for a, b in zip(Ts, Ts[1:])):
            raise ConfigError("candidate_T must be positive and strictly increasing")
        if self.oos_domains < 1 or self.n_oos_samples < 2 or self.tau_grid < 1 or self.n_per_domain < 8:
            raise ConfigError("counts must be positive (n_oos_samples >= 2, n_per_domain >= 8)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["candidate_T"] = list(self.candidate_T)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NonstatProbeConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown NonstatProbeConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "candidate_T" in d:
            d["candidate_T"] = tuple(d["candidate_T"])
        return cls(**d)


@dataclass
class NonstatResult:
    samples: dict  # T -> list of J_T estimates, one per t0 draw
    table: TailTable
    config: NonstatProbeConfig


def _probe_cell(cfg: NonstatProbeConfig, draw: int) -> dict:
    from .scm import ScmConfig, sample_drift_ladder

    Tmax = max(cfg.candidate_T)
    scm = ScmConfig(
        K=cfg.K, K_tilde=cfg.K_tilde, T=Tmax, n_per_domain=cfg.n_per_domain, factor_drift=cfg.factor_drift,
        spurious_strength=cfg.spurious_strength, noise_scale=cfg.noise_scale, seed=int(stream(cfg.seed, 50, draw).integers(2**31)),
        n_val=0, n_oos=cfg.oos_domains,
    )
    panels, _ = sample_drift_ladder(scm, Tmax + cfg.oos_domains, cfg.step_scale, n_oos=cfg.oos_domains)
    src = [p for p in panels if p.role == "source"]
    oos_parts = [p for p in panels if p.role == "oos"]
    oos = DomainPanel(0, np.vstack([p.inputs for p in oos_parts]), np.concatenate([p.labels for p in oos_parts]), "oos")
    out = {}
    for T in cfg.candidate_T:
        est = estimate_lambda_star(src[-T:], oos, model=cfg.model, loss_kind=cfg.loss_kind,
                                   holdout=cfg.holdout, seed=cfg.seed)
        out[T] = est.value
    return out


def run_nonstat_probe(cfg: NonstatProbeConfig, threads: int | None = None) -> NonstatResult:
    """Monte-Carlo ``J_T`` over ``n_oos_samples`` independent drift ladders and every candidate T."""
    cells = parallel_map(lambda d: _probe_cell(cfg, d), list(range(cfg.n_oos_samples)), threads)
    samples = {T: [c[T] for c in cells] for T in cfg.candidate_T}
    return NonstatResult(samples, tail_probabilities(samples, n_tau=cfg.tau_grid), cfg)
