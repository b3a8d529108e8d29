"""Heteroscedastic Gaussian process regression with per-point tolerances.

The surrogate has independent output components sharing one Gaussian
correlation length.  Output ``k`` has prior covariance
``output_scales[k] * exp(-|p - q|^2 / (2 * length_scale^2))`` and every
training observation carries its own noise standard deviation ``tau_i``
(the simulation tolerance).  ``tau_i = inf`` marks a point that is kept in
the design record but carries no information.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.optimize as sopt
from scipy.spatial.distance import cdist

LENGTH_SCALE_MAX = 0.15
LENGTH_SCALE_MIN = 1e-3
DEFAULT_JITTER = 1e-10


class FactorizationError(np.linalg.LinAlgError):
    """Training covariance was not positive definite even after jitter."""

    def __init__(self, message: str, design: "TrainingDesign | None" = None):
        super().__init__(message)
        self.design = design


class HyperparameterWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class KernelParams:
    length_scale: float
    output_scales: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "output_scales", tuple(float(v) for v in self.output_scales))
        if not (0.0 < self.length_scale <= LENGTH_SCALE_MAX):
            raise ValueError(f"length_scale must lie in (0, {LENGTH_SCALE_MAX}], got {self.length_scale}")
        if not self.output_scales or min(self.output_scales) <= 0.0:
            raise ValueError("output_scales must be a nonempty tuple of positive reals")

    @property
    def m(self) -> int:
        return len(self.output_scales)

    def to_dict(self) -> dict:
        return {"length_scale": self.length_scale, "output_scales": list(self.output_scales)}

    @classmethod
    def from_dict(cls, data: dict) -> "KernelParams":
        return cls(float(data["length_scale"]), tuple(data["output_scales"]))


@dataclass
class TrainingDesign:
    """Evaluation points with their tolerances, observed values and spent work.

    ``values[i]`` is NaN while ``tolerances[i]`` is infinite.
    """

    points: np.ndarray
    tolerances: np.ndarray
    values: np.ndarray
    spent_work: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.tolerances = np.asarray(self.tolerances, dtype=float).reshape(-1)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.spent_work = np.asarray(self.spent_work, dtype=float).reshape(-1)
        s = len(self.tolerances)
        if self.points.shape[0] != s or self.values.shape[0] != s or self.spent_work.shape[0] != s:
            raise ValueError("design lists must share one length")
        if np.any(self.tolerances <= 0.0) or np.any(np.isnan(self.tolerances)):
            raise ValueError("tolerances must be strictly positive (inf allowed)")
        if np.any(self.spent_work < 0.0):
            raise ValueError("spent_work must be nonnegative")
        finite = np.isfinite(self.tolerances)
        if s and np.any(np.isnan(self.values[finite])):
            raise ValueError("every point with finite tolerance needs an observed value")

    @classmethod
    def empty(cls, d: int, m: int) -> "TrainingDesign":
        return cls(np.empty((0, d)), np.empty(0), np.empty((0, m)), np.empty(0))

    @property
    def size(self) -> int:
        return len(self.tolerances)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def active(self) -> np.ndarray:
        return np.isfinite(self.tolerances)

    def copy(self) -> "TrainingDesign":
        return TrainingDesign(self.points.copy(), self.tolerances.copy(), self.values.copy(), self.spent_work.copy())

    def with_point(self, p, tol: float, value, work: float = 0.0) -> "TrainingDesign":
        value = np.full(self.m, np.nan) if value is None else np.asarray(value, dtype=float)
        return TrainingDesign(
            np.vstack([self.points, np.reshape(p, (1, -1))]),
            np.append(self.tolerances, tol),
            np.vstack([self.values, value.reshape(1, -1)]),
            np.append(self.spent_work, work),
        )

    def refines(self, other: "TrainingDesign") -> bool:
        """True when ``self <= other``: same leading points, tolerances no larger."""
        s = other.size
        if self.size < s:
            return False
        return bool(
            np.array_equal(self.points[:s], other.points)
            and np.all(self.tolerances[:s] <= other.tolerances)
        )

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "tolerances": [t if np.isfinite(t) else None for t in self.tolerances.tolist()],
            "values": [None if np.isnan(row).any() else row for row in self.values.tolist()],
            "spent_work": self.spent_work.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict, d: int | None = None, m: int | None = None) -> "TrainingDesign":
        tols = [np.inf if t is None else t for t in data["tolerances"]]
        if not tols:
            return cls.empty(d, m)
        m = m if m is not None else len(next(v for v in data["values"] if v is not None))
        values = [[np.nan] * m if v is None else v for v in data["values"]]
        return cls(data["points"], tols, values, data["spent_work"])


def _as_mean_fn(prior_mean, m: int) -> Callable[[np.ndarray], np.ndarray]:
    if prior_mean is None:
        prior_mean = np.zeros(m)
    if callable(prior_mean):
        return prior_mean
    const = np.broadcast_to(np.asarray(prior_mean, dtype=float), (m,)).copy()

    def mean(P, _c=const):
        return np.broadcast_to(_c, (np.shape(P)[0], m)).copy()

    mean.constant = const
    return mean


def sqexp_corr(X1: np.ndarray, X2: np.ndarray, length_scale: float) -> np.ndarray:
    """Gaussian correlation matrix between two point sets."""
    X1 = np.atleast_2d(X1)
    X2 = np.atleast_2d(X2)
    d2 = cdist(X1, X2, "sqeuclidean")
    return np.exp(-0.5 * d2 / length_scale**2)


def kernel_eval(params: KernelParams, p, q) -> np.ndarray:
    """Diagonal block ``k(p, q)`` as an m-vector."""
    diff = np.asarray(p, dtype=float).reshape(-1) - np.asarray(q, dtype=float).reshape(-1)
    r = np.exp(-0.5 * float(diff @ diff) / params.length_scale**2)
    return np.asarray(params.output_scales) * r


class GpModel:
    """A fitted surrogate.  Immutable after construction.

    Attributes
    ----------
    design : TrainingDesign
        The full design record (including excluded points).
    params : KernelParams
    X : ndarray, shape (s, d)
        Active training points (finite tolerance).
    chol : ndarray, shape (m, s, s)
        Lower Cholesky factors of ``K_k + diag(tau^2) + jitter``.
    alpha : ndarray, shape (m, s)
        ``(K_k + diag(tau^2))^{-1} (y_k - mu0_k)``.
    """

    def __init__(self, design, params, prior_mean, X, tau, chol, alpha, jitter):
        self.design = design
        self.params = params
        self.prior_mean = prior_mean
        self.X = X
        self.tau = tau
        self.chol = chol
        self.alpha = alpha
        self.jitter = jitter
        self._scales = np.asarray(params.output_scales)
        for arr in (self.X, self.tau, self.chol, self.alpha):
            arr.setflags(write=False)

    @property
    def m(self) -> int:
        return self.params.m

    @property
    def d(self) -> int:
        return self.design.d

    @property
    def n_active(self) -> int:
        return self.X.shape[0]

    @property
    def constant_prior_mean(self) -> np.ndarray | None:
        return getattr(self.prior_mean, "constant", None)

    def _solve_cross(self, P):
        """Return correlations R (s, n) and V_k = L_k^{-1} k_k(X, P), shape (m, s, n)."""
        R = sqexp_corr(self.X, P, self.params.length_scale)
        V = np.empty((self.m,) + R.shape)
        for k in range(self.m):
            V[k] = sla.solve_triangular(self.chol[k], self._scales[k] * R, lower=True, check_finite=False)
        return R, V

    def predict(self, P) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and variance at points ``P`` (n, d); both (n, m)."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        mean = np.asarray(self.prior_mean(P), dtype=float).reshape(P.shape[0], self.m)
        var = np.broadcast_to(self._scales, mean.shape).copy()
        if self.n_active == 0:
            return mean, var
        R, V = self._solve_cross(P)
        for k in range(self.m):
            mean[:, k] += self._scales[k] * (R.T @ self.alpha[k])
            var[:, k] -= np.einsum("ij,ij->j", V[k], V[k])
        np.maximum(var, 0.0, out=var)
        return mean, var

    def cross_covariance(self, p, P) -> tuple[np.ndarray, np.ndarray]:
        """Posterior covariance between a single point ``p`` and points ``P``.

        Returns ``(c, var_p)`` with ``c`` of shape (n, m) and ``var_p`` (m,).
        """
        p = np.asarray(p, dtype=float).reshape(1, -1)
        P = np.atleast_2d(np.asarray(P, dtype=float))
        r_pP = sqexp_corr(p, P, self.params.length_scale)[0]
        c = np.outer(r_pP, self._scales)
        var_p = self._scales.copy()
        if self.n_active:
            _, Vp = self._solve_cross(p)
            _, VP = self._solve_cross(P)
            for k in range(self.m):
                c[:, k] -= Vp[k, :, 0] @ VP[k]
                var_p[k] -= Vp[k, :, 0] @ Vp[k, :, 0]
        return c, np.maximum(var_p, 0.0)


def gp_fit(design: TrainingDesign, params: KernelParams, prior_mean=None, jitter: float = DEFAULT_JITTER) -> GpModel:
    """Condition the GP prior on the active part of ``design``.

    Works with the Cholesky factor of ``K + diag(tau^2)`` per output, which is
    the stable equivalent of ``Gamma = (K^-1 + T^-2)^-1``.
    """
    m = params.m
    if design.size and design.m != m:
        raise ValueError(f"design has {design.m} outputs, params has {m}")
    mean_fn = _as_mean_fn(prior_mean, m)
    act = design.active
    X = design.points[act].copy()
    tau = design.tolerances[act].copy()
    Y = design.values[act]
    s = X.shape[0]
    scales = np.asarray(params.output_scales)
    chol = np.empty((m, s, s))
    alpha = np.empty((m, s))
    if s:
        R = sqexp_corr(X, X, params.length_scale)
        resid = Y - np.asarray(mean_fn(X), dtype=float).reshape(s, m)
        for k in range(m):
            A = scales[k] * R
            A[np.diag_indices(s)] += tau**2 + jitter * scales[k]
            try:
                chol[k] = sla.cholesky(A, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise FactorizationError(f"training covariance of output {k} is not positive definite", design) from exc
            alpha[k] = sla.cho_solve((chol[k], True), resid[:, k], check_finite=False)
    return GpModel(design, params, mean_fn, X, tau, chol, alpha, jitter)


def gp_predict(model: GpModel, p) -> tuple[np.ndarray, np.ndarray]:
    mean, var = model.predict(np.asarray(p, dtype=float).reshape(1, -1))
    return mean[0], var[0]


def variance_derivative(model: GpModel, p, p_cand, tau_lin: float) -> np.ndarray:
    """d Gamma(p) / d tau of a hypothetical training point at ``p_cand``.

    The hypothetical point is treated as already present with noise standard
    deviation ``tau_lin``.  Conditioning on it shrinks the variance at ``p`` by
    ``c^2 / (Gamma(p_cand) + tau^2)`` where ``c`` is the current posterior
    covariance between ``p`` and ``p_cand``.
    """
    if tau_lin <= 0:
        raise ValueError("tau_lin must be positive")
    c, var_c = model.cross_covariance(p_cand, np.asarray(p, dtype=float).reshape(1, -1))
    return hypothetical_variance_derivative(c[0], var_c, tau_lin)


def hypothetical_variance_derivative(c, var_cand, tau):
    """Vectorised core of :func:`variance_derivative` (broadcasts over ``c``)."""
    denom = var_cand + tau**2
    if np.any(denom <= 0.0):
        raise FactorizationError("augmented covariance is singular at the candidate point")
    return 2.0 * tau * np.asarray(c) ** 2 / denom**2


class RootPrecisionVariance:
    """Predictive variance at fixed test points as a function of ``1/tau``.

    For root precisions ``r_i = 1/tau_i`` (zero meaning excluded) the variance is
    ``k_pp - a^T (R K R + I)^{-1} a`` with ``a = R k_p`` and ``R = diag(r)``.
    This form stays well defined when some points carry no information, which is
    what the tolerance optimizer needs.
    """

    def __init__(self, points, params: KernelParams, test_points, jitter: float = DEFAULT_JITTER):
        self.params = params
        scales = np.asarray(params.output_scales)
        X = np.atleast_2d(points)
        s = X.shape[0]
        Rxx = sqexp_corr(X, X, params.length_scale)
        Rxp = sqexp_corr(X, test_points, params.length_scale)
        self.K = np.empty((params.m, s, s))
        self.Kp = np.empty((params.m,) + Rxp.shape)
        for k in range(params.m):
            self.K[k] = scales[k] * Rxx + jitter * scales[k] * np.eye(s)
            self.Kp[k] = scales[k] * Rxp
        self.prior_var = scales

    def __call__(self, r, grad: bool = False):
        """Variance (n, m); with ``grad`` also ``g2`` of shape (m, s, n).

        ``dVar/dr_i = -2 r_i g2_i``.  Callers working in other coordinates use
        ``g2`` directly, which stays finite where ``r_i = 0``.
        """
        r = np.asarray(r, dtype=float)
        m, s, n = self.Kp.shape
        var = np.empty((n, m))
        G = np.empty((m, s, n)) if grad else None
        for k in range(m):
            if s == 0:
                var[:, k] = self.prior_var[k]
                continue
            M = r[:, None] * self.K[k] * r[None, :]
            M[np.diag_indices(s)] += 1.0
            cf = sla.cho_factor(M, lower=True, check_finite=False)
            a = r[:, None] * self.Kp[k]
            u = sla.cho_solve(cf, a, check_finite=False)
            var[:, k] = self.prior_var[k] - np.einsum("ij,ij->j", a, u)
            if grad:
                g = self.Kp[k] - self.K[k] @ (r[:, None] * u)
                G[k] = g**2
        np.maximum(var, 0.0, out=var)
        return (var, G) if grad else var


def _neg_log_evidence(theta, X, tau, Y, jitter, need_grad=True):
    """Negative log marginal likelihood over all outputs, parameters in log space."""
    s, m = Y.shape
    ell = np.exp(theta[0])
    scales = np.exp(theta[1:])
    diff2 = cdist(X, X, "sqeuclidean")
    R = np.exp(-0.5 * diff2 / ell**2)
    dR_dlogell = R * diff2 / ell**2
    nll = 0.5 * s * m * np.log(2 * np.pi)
    grad = np.zeros_like(theta)
    for k in range(m):
        A = scales[k] * R
        A[np.diag_indices(s)] += tau**2 + jitter * scales[k]
        try:
            L = sla.cholesky(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return (np.inf, grad) if need_grad else np.inf
        a = sla.cho_solve((L, True), Y[:, k], check_finite=False)
        nll += 0.5 * Y[:, k] @ a + np.sum(np.log(np.diag(L)))
        if need_grad:
            Ainv = sla.cho_solve((L, True), np.eye(s), check_finite=False)
            W = Ainv - np.outer(a, a)
            grad[0] += 0.5 * np.sum(W * (scales[k] * dR_dlogell))
            grad[1 + k] = 0.5 * np.sum(W * (scales[k] * (R + jitter * np.eye(s))))
    return (nll, grad) if need_grad else nll


def log_evidence(design: TrainingDesign, params: KernelParams, prior_mean=None, jitter: float = DEFAULT_JITTER) -> float:
    """Log marginal likelihood of the training data under ``params``."""
    X, tau, Y = _training_arrays(design, params.m, prior_mean)
    theta = np.log(np.r_[params.length_scale, params.output_scales])
    return -float(_neg_log_evidence(theta, X, tau, Y, jitter, need_grad=False))


def _training_arrays(design, m, prior_mean):
    act = design.active
    X = design.points[act]
    Y = design.values[act] - np.asarray(_as_mean_fn(prior_mean, m)(X), dtype=float).reshape(-1, m)
    return X, design.tolerances[act], Y


def optimize_hyperparameters(
    design: TrainingDesign,
    init: KernelParams,
    prior_mean=None,
    length_scale_bounds: tuple[float, float] = (LENGTH_SCALE_MIN, LENGTH_SCALE_MAX),
    restarts: tuple[float, ...] = (0.02, 0.05, 0.1),
    jitter: float = DEFAULT_JITTER,
) -> KernelParams:
    """Maximise the log evidence over length scale and output scales.

    Starts from ``init`` plus a few length-scale restarts and never returns
    parameters with lower evidence than ``init``.  The length scale is boxed
    into ``length_scale_bounds``; output scales are free (log parametrised).
    """
    X, tau, Y = _training_arrays(design, init.m, prior_mean)
    if X.shape[0] == 0:
        raise ValueError("cannot tune hyperparameters on an empty design")
    lo, hi = length_scale_bounds
    hi = min(hi, LENGTH_SCALE_MAX)
    theta0 = np.log(np.r_[init.length_scale, init.output_scales])
    f0 = _neg_log_evidence(theta0, X, tau, Y, jitter, need_grad=False)
    if not np.isfinite(f0):
        warnings.warn("log evidence not finite at initial hyperparameters", HyperparameterWarning)
        return init
    bounds = [(np.log(lo), np.log(hi))] + [(None, None)] * init.m
    data_var = np.maximum(np.var(Y, axis=0) + np.mean(Y**2, axis=0), 1e-12)
    starts = [theta0] + [np.r_[np.log(ell), np.log(data_var)] for ell in restarts if lo <= ell <= hi]
    best_theta, best_f = theta0, f0
    for start in starts:
        start = np.clip(start, [b[0] if b[0] is not None else -np.inf for b in bounds],
                        [b[1] if b[1] is not None else np.inf for b in bounds])
        try:
            res = sopt.minimize(
                _neg_log_evidence, start, args=(X, tau, Y, jitter), jac=True,
                method="L-BFGS-B", bounds=bounds, options={"maxiter": 200},
            )
        except (FloatingPointError, ValueError, np.linalg.LinAlgError):
            continue
        if np.isfinite(res.fun) and res.fun < best_f:
            best_theta, best_f = res.x, float(res.fun)
    if best_theta is theta0:
        return init
    ell = float(np.clip(np.exp(best_theta[0]), lo, hi))
    scales = tuple(np.exp(best_theta[1:]))
    if not all(np.isfinite(scales)) or min(scales) <= 0:
        warnings.warn("hyperparameter optimizer diverged; keeping initial values", HyperparameterWarning)
        return init
    theta = np.log(np.r_[ell, scales])
    f = _neg_log_evidence(theta, X, tau, Y, jitter, need_grad=False)
    if not (np.isfinite(f) and f <= f0):
        return init
    return KernelParams(ell, scales)
