"""Measurement model, likelihoods and unnormalised log-posteriors.

All covariances are diagonal, so log-determinants and quadratic forms are
plain sums over the m components.  Normalising constants of the posterior
are never formed here.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class LikelihoodKind(str, Enum):
    PLUGIN = "plugin"
    MARGINAL = "marginal"
    TRUE = "true"


@dataclass(frozen=True)
class MeasurementModel:
    """Observed data ``y_meas`` with independent Gaussian noise of variances ``sigma_l``."""

    y_meas: np.ndarray
    sigma_l: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y_meas, dtype=float).reshape(-1)
        sig = np.asarray(self.sigma_l, dtype=float).reshape(-1)
        if y.shape != sig.shape:
            raise ValueError("y_meas and sigma_l must have the same length")
        if np.any(sig <= 0.0):
            raise ValueError("sigma_l entries must be positive variances")
        y.setflags(write=False)
        sig.setflags(write=False)
        object.__setattr__(self, "y_meas", y)
        object.__setattr__(self, "sigma_l", sig)

    @property
    def m(self) -> int:
        return self.y_meas.shape[0]


@dataclass(frozen=True)
class PriorBox:
    """Uniform prior on the box ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("PriorBox needs lower < upper componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def d(self) -> int:
        return self.lower.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.width))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def log_volume(self) -> float:
        return float(np.sum(np.log(self.width)))

    def contains(self, P) -> np.ndarray | bool:
        P = np.asarray(P, dtype=float)
        inside = np.all((P >= self.lower) & (P <= self.upper), axis=-1)
        return bool(inside) if P.ndim == 1 else inside

    def log_density(self, P):
        inside = self.contains(P)
        return np.where(inside, -self.log_volume, -np.inf) if np.ndim(inside) else (
            -self.log_volume if inside else -np.inf
        )


def log_plugin_likelihood(mean, meas: MeasurementModel) -> np.ndarray | float:
    """Gaussian log-likelihood with the surrogate mean substituted for the model.

    ``mean`` may be an m-vector or an (n, m) batch.
    """
    r = np.asarray(mean, dtype=float) - meas.y_meas
    out = -0.5 * (meas.m * LOG_2PI + np.sum(np.log(meas.sigma_l)) + np.sum(r * r / meas.sigma_l, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def log_marginal_likelihood(mean, variance, meas: MeasurementModel) -> np.ndarray | float:
    """Log-likelihood with the GP variance added to the measurement noise."""
    r = np.asarray(mean, dtype=float) - meas.y_meas
    cov = meas.sigma_l + np.asarray(variance, dtype=float)
    out = -0.5 * (meas.m * LOG_2PI + np.sum(np.log(cov), axis=-1) + np.sum(r * r / cov, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def log_posterior(p, model, meas: MeasurementModel, prior: PriorBox, likelihood_kind="marginal"):
    """Unnormalised log-posterior at a point or a batch of points.

    ``model`` is a :class:`~tolgp.gp.GpModel` for the plugin/marginal kinds
    and a callable exact forward model (batch in, batch out) for ``"true"``.
    Returns ``-inf`` outside the prior box.
    """
    kind = LikelihoodKind(likelihood_kind)
    P = np.asarray(p, dtype=float)
    single = P.ndim == 1
    P = np.atleast_2d(P)
    lp = np.asarray(prior.log_density(P), dtype=float).reshape(-1)
    out = np.full(P.shape[0], -np.inf)
    ok = np.isfinite(lp)
    if np.any(ok):
        Q = P[ok]
        if kind is LikelihoodKind.TRUE:
            ll = log_plugin_likelihood(np.atleast_2d(model(Q)), meas)
        else:
            mean, var = model.predict(Q)
            ll = log_plugin_likelihood(mean, meas) if kind is LikelihoodKind.PLUGIN else log_marginal_likelihood(mean, var, meas)
        out[ok] = lp[ok] + ll
    return float(out[0]) if single else out
