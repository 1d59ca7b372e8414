"""The per-domain sample container shared by every module."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ._common import ConfigError

ROLES = ("source", "validation", "oos")


@dataclass
class DomainPanel:
    """Samples of one domain ``t``: inputs ``x`` (n x D) and labels ``r`` (n,).

    ``domain_id`` is the integer time index of the domain; sources carry
    negative ids, the out-of-sample domain id 0. Labels are standardized
    within the domain unless ``meta["standardized"]`` is False.
    """

    domain_id: int
    inputs: np.ndarray
    labels: np.ndarray
    role: str = "source"
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ConfigError(f"domain {self.domain_id}: inputs must be 2-D, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ConfigError(
                f"domain {self.domain_id}: {self.inputs.shape[0]} input rows but labels shape {self.labels.shape}"
            )
        if self.role not in ROLES:
            raise ConfigError(f"domain {self.domain_id}: unknown role {self.role!r}")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.labels))):
            raise ConfigError(f"domain {self.domain_id}: non-finite entries")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def check_standardized(self, tol: float = 1e-10) -> None:
        m = self.labels.mean()
        v = self.labels.var()
        if abs(m) > tol or abs(v - 1.0) > tol:
            raise ConfigError(f"domain {self.domain_id}: labels not standardized (mean={m:.3g}, var={v:.6g})")


def by_role(panels: list[DomainPanel], role: str) -> list[DomainPanel]:
    return [p for p in panels if p.role == role]
