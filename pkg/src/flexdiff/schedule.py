"""Variance-preserving cosine noise schedule.

The marginal of the forward process is q(z_t | r) = N(alpha(t) r, sigma(t)^2 I)
with

    alpha(t) = cos(pi t / 2),   sigma(t) = sin(pi t / 2),   t in [0, 1],

so alpha^2 + sigma^2 = 1 for every t. Derived coefficients:

    log-SNR      lambda(t) = log(alpha^2 / sigma^2) = -2 log tan(pi t / 2)
    SDE drift    f(t)  = d log alpha / dt = -(pi/2) tan(pi t / 2)
    SDE noise    g2(t) = 2 sigma^2 (sigma'/sigma - alpha'/alpha) = pi tan(pi t / 2)

lambda, f and g2 diverge at t = 0 and t = 1, so they are only defined on the
clamped interval [t_min, t_max]. alpha and sigma themselves are fine on all
of [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ScheduleDomainError

__all__ = ["CosineSchedule"]


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine noise schedule with endpoint clamps.

    t_min / t_max guard the singularities of the log-SNR and drift
    coefficients at t = 0 and t = 1; every sampler and trainer in this
    package evaluates the predictor only inside [t_min, t_max].
    """

    kind: str = "cosine"
    t_min: float = 1e-3
    t_max: float = 1.0 - 1e-3

    def __post_init__(self):
        if self.kind != "cosine":
            raise ConfigError(f"unsupported schedule kind {self.kind!r}")
        if not (0.0 < self.t_min < 0.5):
            raise ConfigError(f"t_min must lie in (0, 0.5), got {self.t_min}")
        if not (0.5 < self.t_max < 1.0):
            raise ConfigError(f"t_max must lie in (0.5, 1), got {self.t_max}")

    # -- coefficient family ------------------------------------------------

    def alpha_sigma(self, t):
        """Return (alpha(t), sigma(t)) for t in [0, 1]. Accepts scalars or arrays."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ScheduleDomainError(f"t must lie in [0, 1], got {t}")
        half_pi_t = 0.5 * math.pi * t
        alpha = np.cos(half_pi_t)
        sigma = np.sin(half_pi_t)
        if t.ndim == 0:
            return float(alpha), float(sigma)
        return alpha, sigma

    def log_snr(self, t):
        """lambda(t) = -2 log tan(pi t / 2), defined on [t_min, t_max]."""
        t = self._check_clamped(t)
        out = -2.0 * np.log(np.tan(0.5 * math.pi * t))
        return float(out) if t.ndim == 0 else out

    def drift_coeffs(self, t):
        """Return (f(t), g2(t)) of the equivalent VP-SDE on [t_min, t_max]."""
        t = self._check_clamped(t)
        tan = np.tan(0.5 * math.pi * t)
        f = -0.5 * math.pi * tan
        g2 = math.pi * tan
        if t.ndim == 0:
            return float(f), float(g2)
        return f, g2

    def t_from_log_snr(self, lam):
        """Inverse of log_snr: t = (2/pi) atan(exp(-lambda/2))."""
        lam = np.asarray(lam, dtype=np.float64)
        t = (2.0 / math.pi) * np.arctan(np.exp(-0.5 * lam))
        return float(t) if lam.ndim == 0 else t

    # -- helpers -----------------------------------------------------------

    def _check_clamped(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < self.t_min) or np.any(t > self.t_max):
            raise ScheduleDomainError(
                f"t must lie in the clamped interval [{self.t_min}, {self.t_max}]"
            )
        return t
