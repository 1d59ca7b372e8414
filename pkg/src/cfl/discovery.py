"""Invariant causal-feature discovery.

Training minimizes, over the extractor ``phi`` and the logits ``l``,

    L'_res + lambda1 * L_inv + lambda2 * L_alig

on batches of ``T_b`` domains x ``N_b`` samples, where per domain the features
are standardized, ``nu_t = (E[phi phi^T] + ridge I)^-1 E[phi R]`` is the
analytic fit, and

    L'_res  = -mean_t ||nu_t||^2
    L_inv   =  mean_t ||nu_t - nu(l)||^2,     nu(l) = sqrt(xi' softmax(l))
    L_alig  =  mean_t tr((E[phi phi^T] + ridge I)^-1)

The residual level ``xi'`` is held fixed inside each step and tracked by an
exponential moving average of the batch mean of ``||nu_t||^2``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._common import ConfigError, NumericalError, stream
from .model import CoefficientHead, LinearExtractor, MLPExtractor, coefficients_from_logits, coefficients_vjp
from .panel import DomainPanel, by_role

log = logging.getLogger(__name__)

GRAM_COND_WARN = 1e8


class DegenerateFeatureError(NumericalError):
    pass


class DivergenceError(NumericalError):
    """Training produced a non-finite loss; ``state`` holds the last finite state."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


@dataclass(frozen=True)
class DiscoveryConfig:
    K_tilde: int = 2
    lambda1: float = 5.0
    lambda2: float = 1.0
    learning_rate: float = 2e-4
    T_b: int = 3
    N_b: int = 1000
    alpha: float = 0.9
    max_epochs: int = 200
    patience: int = 5
    ridge_eps: float = 1e-6
    seed: int = 0
    optimizer: str = "sgd"
    architecture: str = "linear"
    hidden: int = 16

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.T_b < 1 or self.N_b < 1 or self.K_tilde < 1:
            raise ConfigError("T_b, N_b and K_tilde must be >= 1")
        if self.learning_rate <= 0 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("learning_rate, max_epochs and patience must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.architecture not in ("linear", "mlp"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscoveryConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown DiscoveryConfig keys: {sorted(unknown)}")
        return cls(**d)


# -- per-domain building blocks ----------------------------------------------


def standardize_features(H):
    """Column-wise zero mean and unit population variance.

    Returns ``(S, (mean, std))``; the record is what the backward pass needs.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim == 1:
        H = H[:, None]
    if H.shape[0] < 2:
        raise DegenerateFeatureError("need at least 2 samples to standardize")
    mu = H.mean(axis=0)
    C = H - mu
    sd = np.sqrt(np.mean(C**2, axis=0))
    flat = np.flatnonzero(~(sd > 1e-12 * (1.0 + np.abs(mu))))
    if flat.size:
        raise DegenerateFeatureError(f"feature column(s) {flat.tolist()} are constant")
    return C / sd, (mu, sd)


def standardize_backward(S, record, dS):
    _, sd = record
    return (dS - dS.mean(axis=0) - S * np.mean(dS * S, axis=0)) / sd


def _gram(S, R, ridge):
    n = S.shape[0]
    M = S.T @ S / n
    b = S.T @ R / n
    A = M + ridge * np.eye(M.shape[0])
    if not np.all(np.isfinite(A)):
        raise NumericalError("feature second-moment matrix is not finite")
    return A, b


def domain_coefficients(S, R, ridge_eps: float = 1e-6) -> np.ndarray:
    """``(E[phi phi^T] + ridge I)^-1 E[phi R]`` on standardized features."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim == 1:
        S = S[:, None]
    A, b = _gram(S, np.asarray(R, dtype=np.float64), ridge_eps)
    return np.linalg.solve(A, b)


def loss_res_prime(coefs) -> float:
    C = np.atleast_2d(np.asarray(coefs, dtype=np.float64))
    return float(-np.mean(np.sum(C**2, axis=1)))


def loss_inv(coefs, l, xi_prime: float) -> float:
    C = np.atleast_2d(np.asarray(coefs, dtype=np.float64))
    nu = coefficients_from_logits(l, xi_prime)
    return float(np.mean(np.sum((C - nu) ** 2, axis=1)))


def loss_alig(features, ridge_eps: float = 1e-6) -> float:
    """Mean over domains of ``tr((E[phi phi^T] + ridge I)^-1)``; ``features`` are standardized per domain."""
    vals = []
    for S in features:
        S = np.asarray(S, dtype=np.float64)
        if S.ndim == 1:
            S = S[:, None]
        A = S.T @ S / S.shape[0] + ridge_eps * np.eye(S.shape[1])
        vals.append(_trace_inv(A))
    return float(np.mean(vals))


def trace_inverse(corr) -> float:
    return _trace_inv(np.asarray(corr, dtype=np.float64))


def _trace_inv(A) -> float:
    c = np.linalg.cond(A)
    if c > GRAM_COND_WARN:
        warnings.warn(f"feature correlation matrix is near-singular (condition number {c:.3g})")
    return float(np.trace(np.linalg.inv(A)))


def update_xi_prime(xi_prime: float, batch_estimate: float, alpha: float) -> float:
    """Momentum update ``alpha * xi' + (1 - alpha) * batch_estimate``."""
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    return alpha * xi_prime + (1.0 - alpha) * batch_estimate


# -- objective with gradients ---------------------------------------------------


@dataclass
class ObjectiveValue:
    total: float
    res: float
    inv: float
    alig: float
    coefs: np.ndarray
    grad_theta: np.ndarray
    grad_logits: np.ndarray


def discovery_objective(extractor, logits, xi_prime, batch, lambda1, lambda2, ridge_eps=1e-6) -> ObjectiveValue:
    """Value and analytic gradient of ``L'_res + lambda1 L_inv + lambda2 L_alig``.

    ``batch`` is a sequence of ``(X, R)`` pairs, one per domain. ``xi_prime``
    is treated as a constant.
    """
    T = len(batch)
    nu_l = coefficients_from_logits(logits, xi_prime)
    K = len(nu_l)
    fwd = []
    coefs = np.empty((T, K))
    traces = np.empty(T)
    for t, (X, R) in enumerate(batch):
        H, cache = extractor.forward(X)
        S, rec = standardize_features(H)
        A, b = _gram(S, R, ridge_eps)
        Ainv = np.linalg.inv(A)
        nu = Ainv @ b
        coefs[t] = nu
        traces[t] = np.trace(Ainv)
        fwd.append((cache, S, rec, Ainv, nu, np.asarray(R, dtype=np.float64)))

    res = -np.mean(np.sum(coefs**2, axis=1))
    inv = np.mean(np.sum((coefs - nu_l) ** 2, axis=1))
    alig = traces.mean()
    total = res + lambda1 * inv + lambda2 * alig

    grad_theta = np.zeros_like(extractor.params)
    for t, (cache, S, rec, Ainv, nu, R) in enumerate(fwd):
        n = S.shape[0]
        g_nu = (-2.0 * nu + 2.0 * lambda1 * (nu - nu_l)) / T
        u = Ainv @ g_nu
        dA = -np.outer(u, nu) - (lambda2 / T) * (Ainv @ Ainv)
        dS = S @ (dA + dA.T) / n + np.outer(R, u) / n
        dH = standardize_backward(S, rec, dS)
        grad_theta += extractor.backward(cache, dH)[0]

    g_nul = -2.0 * lambda1 * (coefs - nu_l).sum(axis=0) / T
    grad_logits = coefficients_vjp(logits, xi_prime, g_nul)
    return ObjectiveValue(float(total), float(res), float(inv), float(alig), coefs, grad_theta, grad_logits)


# -- training ---------------------------------------------------------------


@dataclass
class DiscoveryState:
    extractor: object
    head: CoefficientHead
    epoch: int = 0
    best_val_mse: float = np.inf
    coef_cache: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    xi_trajectory: list = field(default_factory=list)
    stopped_early: bool = False

    def predict(self, X, standardize: bool = True) -> np.ndarray:
        return predict(self, X, standardize)

    def features(self, X, standardize: bool = True) -> np.ndarray:
        H = self.extractor(np.asarray(X, dtype=np.float64))
        return standardize_features(H)[0] if standardize else H

    def copy(self) -> "DiscoveryState":
        return DiscoveryState(
            self.extractor.copy(), self.head.copy(), self.epoch, self.best_val_mse,
            dict(self.coef_cache), list(self.history), list(self.xi_trajectory), self.stopped_early,
        )


def predict(state, X, standardize: bool = True) -> np.ndarray:
    """Signals ``g(x) = phi(x)^T nu(l)``; features are standardized over the rows of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != state.extractor.D:
        raise ConfigError(f"expected inputs with {state.extractor.D} columns, got shape {X.shape}")
    return state.features(X, standardize) @ state.head.nu


def make_extractor(cfg: DiscoveryConfig, D: int, K_tilde: int | None = None):
    K = cfg.K_tilde if K_tilde is None else K_tilde
    if cfg.architecture == "linear":
        return LinearExtractor(D, K, seed=cfg.seed)
    return MLPExtractor(D, cfg.hidden, K, seed=cfg.seed)


class _Optimizer:
    def __init__(self, kind: str, lr: float):
        self.kind, self.lr = kind, lr
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.kind == "sgd":
            return params - self.lr * grad
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        b1, b2 = 0.9, 0.999
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad**2
        mh = self.m / (1 - b1**self.t)
        vh = self.v / (1 - b2**self.t)
        return params - self.lr * mh / (np.sqrt(vh) + 1e-8)


def _sample_rows(rng, n: int, k: int) -> np.ndarray:
    if n >= k:
        return rng.choice(n, size=k, replace=False)
    return rng.choice(n, size=k, replace=True)


def validation_mse(state, panels: list[DomainPanel]) -> float:
    """Mean over domains of ``E[(R - phi(X)^T nu(l))^2]`` with full-domain standardization."""
    return float(np.mean([np.mean((p.labels - predict(state, p.inputs)) ** 2) for p in panels]))


def train(panels: list[DomainPanel], cfg: DiscoveryConfig, extractor=None) -> DiscoveryState:
    """Fit ``phi`` and ``l`` on the source panels, early-stopping on the validation panels."""
    src = by_role(panels, "source")
    val = by_role(panels, "validation")
    if not src:
        raise ConfigError("no source domains")
    if not val:
        raise ConfigError("no validation domains for early stopping")
    if cfg.T_b > len(src):
        raise ConfigError(f"T_b={cfg.T_b} exceeds the {len(src)} source domains")
    D = src[0].dim
    ext = make_extractor(cfg, D) if extractor is None else extractor
    state = DiscoveryState(ext, CoefficientHead(cfg.K_tilde))
    opt = _Optimizer(cfg.optimizer, cfg.learning_rate)
    best = None
    stale = 0
    n_p = ext.params.size

    for epoch in range(1, cfg.max_epochs + 1):
        rng = stream(cfg.seed, 20, epoch)
        order = rng.permutation(len(src))
        parts = []
        for start in range(0, len(order), cfg.T_b):
            idx = order[start : start + cfg.T_b]
            batch = []
            for i in idx:
                p = src[i]
                rows = _sample_rows(rng, p.n, cfg.N_b)
                batch.append((p.inputs[rows], p.labels[rows]))
            if state.head.xi_prime is None:
                probe = _batch_coefs(ext, batch, cfg.ridge_eps)
                state.head.xi_prime = float(np.clip(np.mean(np.sum(probe**2, axis=1)), 1e-12, 1.0))
            obj = discovery_objective(ext, state.head.logits, state.head.xi_prime, batch,
                                      cfg.lambda1, cfg.lambda2, cfg.ridge_eps)
            if not np.isfinite(obj.total) or not np.all(np.isfinite(obj.grad_theta)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", best if best is not None else state.copy())
            flat = np.concatenate([ext.params, state.head.logits])
            flat = opt.step(flat, np.concatenate([obj.grad_theta, obj.grad_logits]))
            ext.params[:] = flat[:n_p]
            state.head.logits = flat[n_p:]
            for i, c in zip(idx, obj.coefs):
                state.coef_cache[src[i].domain_id] = c
            xi_hat = float(np.mean(np.sum(obj.coefs**2, axis=1)))
            state.head.xi_prime = float(np.clip(update_xi_prime(state.head.xi_prime, xi_hat, cfg.alpha), 1e-12, 1.0))
            state.xi_trajectory.append(state.head.xi_prime)
            parts.append((obj.total, obj.res, obj.inv, obj.alig))

        state.epoch = epoch
        vm = validation_mse(state, val)
        if not np.isfinite(vm):
            raise DivergenceError(f"non-finite validation MSE at epoch {epoch}", best)
        mean_parts = np.mean(parts, axis=0)
        state.history.append({
            "epoch": epoch, "loss": mean_parts[0], "res": mean_parts[1], "inv": mean_parts[2],
            "alig": mean_parts[3], "val_mse": vm, "xi_prime": state.head.xi_prime,
        })
        if vm < state.best_val_mse:
            state.best_val_mse = vm
            best = state.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best val MSE %.6g)", epoch, state.best_val_mse)
                best.history = list(state.history)
                best.xi_trajectory = list(state.xi_trajectory)
                best.stopped_early = True
                return best
    best.history = list(state.history)
    best.xi_trajectory = list(state.xi_trajectory)
    return best


def _batch_coefs(ext, batch, ridge):
    return np.array([domain_coefficients(standardize_features(ext(X))[0], R, ridge) for X, R in batch])


def refit_coefficients(state, panels: list[DomainPanel], ridge_eps: float = 1e-6) -> dict:
    """Per-domain analytic coefficients with the extractor frozen."""
    return {p.domain_id: domain_coefficients(state.features(p.inputs), p.labels, ridge_eps) for p in panels}


# -- pooled-MSE baseline ----------------------------------------------------


@dataclass
class BaselineState:
    extractor: object
    epoch: int = 0
    best_val_mse: float = np.inf
    history: list = field(default_factory=list)

    def predict(self, X, standardize: bool = False) -> np.ndarray:
        return self.extractor(np.asarray(X, dtype=np.float64))[:, 0]

    def copy(self) -> "BaselineState":
        return BaselineState(self.extractor.copy(), self.epoch, self.best_val_mse, list(self.history))


def train_baseline(panels: list[DomainPanel], cfg: DiscoveryConfig) -> BaselineState:
    """Direct MSE regression of labels on inputs with all source samples pooled and shuffled.

    Uses the same architecture, optimizer, batch volume (``T_b * N_b``) and
    early stopping as :func:`train`, with one output and no domain structure.
    """
    src = by_role(panels, "source")
    val = by_role(panels, "validation")
    if not src or not val:
        raise ConfigError("baseline needs source and validation domains")
    X = np.vstack([p.inputs for p in src])
    y = np.concatenate([p.labels for p in src])
    ext = make_extractor(cfg, X.shape[1], K_tilde=1)
    state = BaselineState(ext)
    opt = _Optimizer(cfg.optimizer, cfg.learning_rate)
    bs = cfg.T_b * cfg.N_b
    best, stale = state.copy(), 0
    for epoch in range(1, cfg.max_epochs + 1):
        rng = stream(cfg.seed, 21, epoch)
        order = rng.permutation(len(y))
        for start in range(0, len(order), bs):
            rows = order[start : start + bs]
            H, cache = ext.forward(X[rows])
            err = H[:, 0] - y[rows]
            dH = (2.0 / len(rows)) * err[:, None]
            g = ext.backward(cache, dH)[0]
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite baseline gradient at epoch {epoch}", best)
            ext.params[:] = opt.step(ext.params, g)
        vm = float(np.mean([np.mean((p.labels - state.predict(p.inputs)) ** 2) for p in val]))
        state.epoch = epoch
        state.history.append({"epoch": epoch, "val_mse": vm})
        if vm < state.best_val_mse:
            state.best_val_mse = vm
            best, stale = state.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    best.history = list(state.history)
    return best
