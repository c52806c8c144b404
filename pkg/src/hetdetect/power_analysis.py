"""Closed-form local-alternative diagnostics.

Under the sparse local alternative a fraction ``K**-beta`` of blocks is
shifted by ``mu = sqrt(2 c log K / n)`` along one dimension.  The helpers
here evaluate the signal-to-noise approximations for the Wald and extreme
contrast tests, classify which test is consistent, and scan the split
fraction that minimizes the two-term error bound of the ECT.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import log_ndtr

from .errors import DomainError

CONSISTENT = "consistent"
INCONSISTENT = "inconsistent"
BOUNDARY = "boundary"


def _open_unit(name: str, value: float) -> float:
    value = float(value)
    if not (0.0 < value < 1.0):
        raise DomainError(f"{name} must lie in (0, 1), got {value!r}")
    return value


@dataclass(frozen=True)
class LocalAlternative:
    K: int
    n: int
    beta: float
    c: float
    sigma: float = 1.0
    gamma: float = 2.0 / 3.0

    def __post_init__(self) -> None:
        if int(self.K) < 2:
            raise DomainError(f"K must be at least 2, got {self.K!r}")
        if int(self.n) < 1:
            raise DomainError(f"n must be positive, got {self.n!r}")
        _open_unit("beta", self.beta)
        _open_unit("gamma", self.gamma)
        if not self.c > 0:
            raise DomainError(f"c must be positive, got {self.c!r}")
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma!r}")

    @property
    def epsilon(self) -> float:
        """Fraction of shifted blocks, K**-beta."""
        return float(self.K) ** (-self.beta)

    @property
    def mu(self) -> float:
        """Shift size sqrt(2 c log K / n)."""
        return math.sqrt(2.0 * self.c * math.log(self.K) / self.n)


@dataclass(frozen=True)
class RegimeVerdict:
    wald: str
    ect: str
    combined: str

    def to_dict(self) -> dict:
        return {"wald": self.wald, "ect": self.ect, "combined": self.combined}


class SnrValue(NamedTuple):
    value: float
    valid: bool


def detection_boundary(beta: float) -> float:
    """rho(beta) = (1 - sqrt(1 - beta))**2."""
    beta = _open_unit("beta", beta)
    return (1.0 - math.sqrt(1.0 - beta)) ** 2


def snr_wald(alt: LocalAlternative) -> float:
    return (math.sqrt(2.0) * alt.c / alt.sigma**2
            * float(alt.K) ** (0.5 - alt.beta) * math.log(alt.K))


def ect_threshold(beta: float, sigma: float, gamma: float) -> float:
    """Smallest c for which the ECT approximation applies."""
    return sigma**2 * detection_boundary(beta) / (1.0 - gamma)


def snr_ect(alt: LocalAlternative) -> SnrValue:
    """ECT signal-to-noise ratio; ``valid`` is False below the detection threshold."""
    value = math.sqrt(2.0 * alt.gamma * alt.c * math.log(alt.K)) / alt.sigma
    valid = alt.c > ect_threshold(alt.beta, alt.sigma, alt.gamma)
    return SnrValue(value, valid)


def classify_regime(alt: LocalAlternative, sigma_minus: float, sigma_plus: float) -> RegimeVerdict:
    """Asymptotic consistency of each test family.

    ``sigma_minus``/``sigma_plus`` bound the per-block standard deviations.
    When ``c`` falls between the two ECT thresholds the theory is silent and
    the verdict is ``boundary``.
    """
    if not (0 < sigma_minus <= sigma_plus):
        raise DomainError("need 0 < sigma_minus <= sigma_plus")
    wald = CONSISTENT if alt.beta <= 0.5 else INCONSISTENT

    lo = ect_threshold(alt.beta, sigma_minus, alt.gamma)
    hi = ect_threshold(alt.beta, sigma_plus, alt.gamma)
    if alt.c > hi:
        ect = CONSISTENT
    elif alt.c < lo:
        ect = INCONSISTENT
    else:
        ect = BOUNDARY

    if CONSISTENT in (wald, ect):
        combined = CONSISTENT
    elif alt.c < lo and alt.beta > 0.5:
        combined = INCONSISTENT
    else:
        combined = BOUNDARY
    return RegimeVerdict(wald, ect, combined)


def gamma_grid(step: float = 0.01) -> np.ndarray:
    m = int(round(1.0 / step))
    return np.arange(1, m) / m


def gamma_error_bound(gamma, n: float, mu: float, K: float, eps: float = 0.0):
    """Natural log of the two-term ECT error bound at split fraction ``gamma``.

    The first term is the chance that a shifted block fails to stand out in
    the selection split; the second that the contrast is not significant in
    the testing split.
    """
    g = np.asarray(gamma, dtype=float)
    a = log_ndtr(-np.sqrt(n * (1.0 - g)) * mu - math.sqrt(2.0 * (1.0 + eps) * math.log(K)))
    b = log_ndtr(-np.sqrt(n * g / 2.0) * mu)
    out = np.logaddexp(a, b)
    return float(out) if out.ndim == 0 else out


def gamma_recommendation(n: float, mu: float, K: float, eps: float = 0.0, step: float = 0.01) -> float:
    """Grid argmin of the ECT error bound over gamma in (0, 1)."""
    if not n >= 1:
        raise DomainError(f"n must be at least 1, got {n!r}")
    if not mu > 0:
        raise DomainError(f"mu must be positive, got {mu!r}")
    if not K >= 2:
        raise DomainError(f"K must be at least 2, got {K!r}")
    grid = gamma_grid(step)
    values = gamma_error_bound(grid, n, mu, K, eps)
    return float(grid[int(np.argmin(values))])
