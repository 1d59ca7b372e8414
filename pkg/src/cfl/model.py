"""Feature extractors phi: R^D -> R^K~ with hand-written backward passes, and the coefficient head."""

from __future__ import annotations

from pathlib import Path
from typing import Callable

import numpy as np

from ._common import ConfigError, NumericalError, read_json, stream, write_json


def _glorot(rng, fan_out: int, fan_in: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


class LinearExtractor:
    """``phi(x) = W x`` without bias; ``W`` is K~ x D."""

    arch = "linear"

    def __init__(self, D: int, K_tilde: int, seed: int = 0, params=None):
        if D < 1 or K_tilde < 1:
            raise ConfigError("D and K_tilde must be >= 1")
        self.D, self.K_tilde = D, K_tilde
        if params is None:
            params = _glorot(stream(seed, 10), K_tilde, D).ravel()
        self.params = np.array(params, dtype=np.float64)
        if self.params.shape != (K_tilde * D,):
            raise ConfigError(f"expected {K_tilde * D} parameters, got {self.params.shape}")

    @property
    def W(self) -> np.ndarray:
        return self.params.reshape(self.K_tilde, self.D)

    def forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.D:
            raise ConfigError(f"expected inputs with {self.D} columns, got shape {X.shape}")
        return X @ self.W.T, X

    def backward(self, cache, dH):
        X = cache
        return (dH.T @ X).ravel(), dH @ self.W

    def __call__(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def copy(self) -> "LinearExtractor":
        return LinearExtractor(self.D, self.K_tilde, params=self.params.copy())

    def spec(self) -> dict:
        return {"arch": self.arch, "D": self.D, "K_tilde": self.K_tilde}


class MLPExtractor:
    """One tanh hidden layer, linear bias-free output: ``W2 tanh(W1 x + b1)``."""

    arch = "mlp"

    def __init__(self, D: int, hidden: int, K_tilde: int, seed: int = 0, params=None):
        if D < 1 or K_tilde < 1 or hidden < 1:
            raise ConfigError("D, hidden and K_tilde must be >= 1")
        self.D, self.hidden, self.K_tilde = D, hidden, K_tilde
        self._sizes = (hidden * D, hidden, K_tilde * hidden)
        if params is None:
            rng = stream(seed, 11)
            params = np.concatenate([_glorot(rng, hidden, D).ravel(), np.zeros(hidden),
                                     _glorot(rng, K_tilde, hidden).ravel()])
        self.params = np.array(params, dtype=np.float64)
        if self.params.shape != (sum(self._sizes),):
            raise ConfigError(f"expected {sum(self._sizes)} parameters, got {self.params.shape}")

    def _unpack(self, flat):
        a, b, _ = self._sizes
        W1 = flat[:a].reshape(self.hidden, self.D)
        b1 = flat[a : a + b]
        W2 = flat[a + b :].reshape(self.K_tilde, self.hidden)
        return W1, b1, W2

    def forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.D:
            raise ConfigError(f"expected inputs with {self.D} columns, got shape {X.shape}")
        W1, b1, W2 = self._unpack(self.params)
        A = np.tanh(X @ W1.T + b1)
        return A @ W2.T, (X, A)

    def backward(self, cache, dH):
        X, A = cache
        W1, _, W2 = self._unpack(self.params)
        dW2 = dH.T @ A
        dZ = (dH @ W2) * (1.0 - A**2)
        dW1 = dZ.T @ X
        db1 = dZ.sum(axis=0)
        return np.concatenate([dW1.ravel(), db1, dW2.ravel()]), dZ @ W1

    def __call__(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def copy(self) -> "MLPExtractor":
        return MLPExtractor(self.D, self.hidden, self.K_tilde, params=self.params.copy())

    def spec(self) -> dict:
        return {"arch": self.arch, "D": self.D, "hidden": self.hidden, "K_tilde": self.K_tilde}


def linear_extractor(D: int, K_tilde: int, seed: int = 0) -> LinearExtractor:
    return LinearExtractor(D, K_tilde, seed)


def mlp_extractor(D: int, hidden: int, K_tilde: int, seed: int = 0) -> MLPExtractor:
    return MLPExtractor(D, hidden, K_tilde, seed)


def extractor_from_spec(spec: dict, params=None):
    if spec["arch"] == "linear":
        return LinearExtractor(spec["D"], spec["K_tilde"], params=params)
    if spec["arch"] == "mlp":
        return MLPExtractor(spec["D"], spec["hidden"], spec["K_tilde"], params=params)
    raise ConfigError(f"unknown architecture {spec['arch']!r}")


# -- coefficient head ---------------------------------------------------------


def softmax(l) -> np.ndarray:
    l = np.asarray(l, dtype=np.float64)
    e = np.exp(l - l.max())
    return e / e.sum()


def coefficients_from_logits(l, xi_prime: float) -> np.ndarray:
    """``nu(l) = sqrt(xi' softmax(l))``; its squared norm is ``xi'`` by construction."""
    if not xi_prime > 0:
        raise ConfigError(f"xi_prime must be positive, got {xi_prime}")
    return np.sqrt(xi_prime * softmax(l))


def coefficients_vjp(l, xi_prime: float, g_nu) -> np.ndarray:
    """Pull a gradient w.r.t. ``nu(l)`` back to the logits."""
    p = softmax(l)
    nu = np.sqrt(xi_prime * p)
    # d nu_k / d p_k = xi' / (2 nu_k); softmax Jacobian is diag(p) - p p^T
    with np.errstate(divide="ignore", invalid="ignore"):
        gp = np.where(nu > 0, g_nu * xi_prime / (2.0 * nu), 0.0)
    return p * (gp - p @ gp)


class CoefficientHead:
    def __init__(self, K_tilde: int, xi_prime: float | None = None, logits=None):
        self.logits = np.zeros(K_tilde) if logits is None else np.array(logits, dtype=np.float64)
        self.xi_prime = xi_prime

    @property
    def nu(self) -> np.ndarray:
        if self.xi_prime is None:
            raise ConfigError("xi_prime has not been initialized")
        return coefficients_from_logits(self.logits, self.xi_prime)

    def copy(self) -> "CoefficientHead":
        return CoefficientHead(len(self.logits), self.xi_prime, self.logits.copy())


# -- gradient checking --------------------------------------------------------


def check_gradient(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0, h: float = 1e-5) -> float:
    """Max over coordinates of ``|g_a - g_fd| / max(1, |g_a|, |g_fd|)`` with central differences."""
    x0 = np.array(x0, dtype=np.float64)
    if x0.size == 0:
        return 0.0
    f0, g = fun(x0.copy())
    if not np.isfinite(f0):
        raise NumericalError("loss is not finite at the check point")
    worst = 0.0
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        fp, _ = fun(xp)
        fm, _ = fun(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"loss is not finite near coordinate {i}")
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(g[i] - fd) / max(1.0, abs(g[i]), abs(fd)))
    return worst


def grad_check(extractor, loss_fn, batch, h: float = 1e-5) -> float:
    """Finite-difference check of ``loss_fn(extractor, batch) -> (loss, d loss / d params)``."""
    saved = extractor.params.copy()

    def fun(theta):
        extractor.params[:] = theta
        return loss_fn(extractor, batch)

    try:
        return check_gradient(fun, saved, h)
    finally:
        extractor.params[:] = saved


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, extractor, head: CoefficientHead, scaler: dict | None = None, extra: dict | None = None):
    write_json(
        path,
        {
            "schema_version": 1,
            "architecture": extractor.spec(),
            "theta": extractor.params,
            "logits": head.logits,
            "xi_prime": head.xi_prime,
            "K_tilde": extractor.K_tilde,
            "scaler": scaler,
            **(extra or {}),
        },
    )


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    ck = read_json(path)
    ext = extractor_from_spec(ck["architecture"], ck["theta"])
    head = CoefficientHead(ck["K_tilde"], ck["xi_prime"], ck["logits"])
    return ext, head, ck
