"""Goal-oriented design of experiments.

The training objective is the posterior-averaged local error ``e_D(p)``, an
approximate upper bound on ``log(pi(y^m|p) / pi_D(y^m|p, D))``.  New points
are proposed where spending work reduces that objective fastest, and the
work budget of one step is then split across old and new points by
projected gradient descent in work coordinates ``w = tau**(-l/r)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .bayes import MeasurementModel, PriorBox
from .gp import GpModel, RootPrecisionVariance, TrainingDesign, sqexp_corr
from .models import tolerance_of_work, work_of_tolerance

VAR_FLOOR = 1e-300


class ErrorVariant(str, Enum):
    """Which trace term enters the local error.

    ``PRINTED`` uses ``tr(S^-1 G (I - S^-1))``, ``DERIVED`` uses ``tr(S^-1 G)``
    as obtained from the expected-residual bound.
    """

    PRINTED = "printed"
    DERIVED = "derived"


def local_error(mean, variance, meas: MeasurementModel, variant=ErrorVariant.PRINTED):
    """Local error ``e_D`` at one point (m-vectors) or a batch ((n, m) arrays)."""
    variant = ErrorVariant(variant)
    sig = meas.sigma_l
    g = np.asarray(variance, dtype=float)
    ratio = g / sig
    trace = ratio * (1.0 - 1.0 / sig) if variant is ErrorVariant.PRINTED else ratio
    bias = np.abs(np.asarray(mean, dtype=float) - meas.y_meas) * np.sqrt(np.maximum(g, 0.0)) / sig
    out = 0.5 * np.sum(np.log1p(ratio) - trace + 2.0 * bias, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def local_error_dvar(mean, variance, meas: MeasurementModel, variant=ErrorVariant.PRINTED):
    """Partial derivatives of :func:`local_error` w.r.t. each variance entry."""
    variant = ErrorVariant(variant)
    sig = meas.sigma_l
    g = np.maximum(np.asarray(variance, dtype=float), VAR_FLOOR)
    dtrace = (1.0 - 1.0 / sig) / sig if variant is ErrorVariant.PRINTED else 1.0 / sig
    dbias = np.abs(np.asarray(mean, dtype=float) - meas.y_meas) / (sig * np.sqrt(g))
    return 0.5 * (1.0 / (sig + g) - dtrace + dbias)


def global_error(model: GpModel, meas: MeasurementModel, points, variant=ErrorVariant.PRINTED) -> float:
    """Monte Carlo estimate of the posterior-averaged local error."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        raise ValueError("need at least one integration point")
    mean, var = model.predict(points)
    return float(np.mean(local_error(mean, var, meas, variant)))


def dtau_dwork(tau: float, l_over_r: float) -> float:
    """``d tau / d W`` of ``tau = W**(-r/l)`` evaluated at ``W = W(tau)``."""
    w = work_of_tolerance(tau, l_over_r)
    return -(1.0 / l_over_r) * w ** (-1.0 / l_over_r - 1.0)


class UtilityContext:
    """Caches everything about the integration points that does not depend on the candidate."""

    def __init__(self, model: GpModel, meas: MeasurementModel, integration_points, l_over_r: float,
                 variant=ErrorVariant.PRINTED):
        self.model = model
        self.l_over_r = l_over_r
        self.P = np.atleast_2d(np.asarray(integration_points, dtype=float))
        self.mean, self.var = model.predict(self.P)
        self.meas = meas
        self.variant = ErrorVariant(variant)
        self.scales = np.asarray(model.params.output_scales)
        if model.n_active:
            _, self.VP = model._solve_cross(self.P)

    def __call__(self, p_cand) -> float:
        model = self.model
        p_cand = np.asarray(p_cand, dtype=float).reshape(1, -1)
        r = sqexp_corr(p_cand, self.P, model.params.length_scale)[0]
        c = np.outer(r, self.scales)
        var_c = self.scales.copy()
        if model.n_active:
            _, Vc = model._solve_cross(p_cand)
            for k in range(model.m):
                c[:, k] -= Vc[k, :, 0] @ self.VP[k]
                var_c[k] -= Vc[k, :, 0] @ Vc[k, :, 0]
        var_c = np.maximum(var_c, 0.0)
        tau_lin = float(np.sqrt(np.max(var_c)))
        if tau_lin <= 0.0:
            return 0.0
        denom = var_c + tau_lin**2
        dvar_dtau = 2.0 * tau_lin * c**2 / denom**2
        # e_D is differentiated where the candidate already sits at tau'
        var_aug = np.maximum(self.var - c**2 / denom, 0.0)
        de = local_error_dvar(self.mean, var_aug, self.meas, self.variant)
        return float(np.mean(np.sum(de * dvar_dtau, axis=1)) * dtau_dwork(tau_lin, self.l_over_r))


def utility(model: GpModel, p_cand, integration_points, meas: MeasurementModel, l_over_r: float,
            variant=ErrorVariant.PRINTED) -> float:
    """Estimated rate of change of the global error per unit work spent at ``p_cand``.

    The candidate is linearised at ``tau'`` equal to the current predictive
    standard deviation there (largest over outputs), with the mean frozen.  Negative values mean
    the error decreases; the most negative candidate is the most useful.
    """
    return UtilityContext(model, meas, integration_points, l_over_r, variant)(p_cand)


def compass_search(f, x0, domain: PriorBox, step0: float, step_min: float, max_evals: int = 400):
    """Coordinate pattern search inside the box; returns ``(x, f(x), n_evals)``."""
    x = np.clip(np.asarray(x0, dtype=float), domain.lower, domain.upper)
    fx = f(x)
    evals = 1
    step = step0
    d = x.shape[0]
    while step >= step_min and evals < max_evals:
        best_y, best_f = None, fx
        for j in range(d):
            for sign in (1.0, -1.0):
                y = x.copy()
                y[j] = np.clip(y[j] + sign * step, domain.lower[j], domain.upper[j])
                if y[j] == x[j]:
                    continue
                fy = f(y)
                evals += 1
                if fy < best_f:
                    best_y, best_f = y, fy
        if best_y is None:
            step *= 0.5
        else:
            x, fx = best_y, best_f
    return x, fx, evals


def select_candidates(model: GpModel, meas: MeasurementModel, integration_points, c_j: int,
                      domain: PriorBox, seed, l_over_r: float, variant=ErrorVariant.PRINTED,
                      starts_per_dim: int = 8, objective=None) -> list[np.ndarray]:
    """Multistart compass search for local minimisers of the utility.

    Starts are drawn from the integration points.  Converged points closer
    than ``max(1e-3 diam, length_scale / 2)`` are merged, and the ``c_j``
    best are returned.  ``objective`` replaces the utility (for testing).
    """
    if c_j < 1:
        raise ValueError("c_j must be at least 1")
    P = np.atleast_2d(np.asarray(integration_points, dtype=float))
    f = objective or UtilityContext(model, meas, P, l_over_r, variant)
    rng = np.random.default_rng(seed)
    n_starts = min(starts_per_dim * domain.d, P.shape[0])
    starts = P[rng.choice(P.shape[0], size=n_starts, replace=False)]
    diam = domain.diameter
    results = []
    start_vals = []
    for x0 in starts:
        start_vals.append((f(x0), x0))
        x, fx, _ = compass_search(f, x0, domain, 0.1 * diam, 1e-3 * diam)
        results.append((fx, x))
    results.sort(key=lambda t: t[0])
    radius = max(1e-3 * diam, 0.5 * model.params.length_scale) if model is not None else 1e-3 * diam
    chosen: list[tuple[float, np.ndarray]] = []
    for fx, x in results:
        if fx >= 0.0 and objective is None:
            continue
        if all(np.linalg.norm(x - y) >= radius for _, y in chosen):
            chosen.append((fx, x))
        if len(chosen) == c_j:
            break
    if not chosen:
        fx, x = min(start_vals, key=lambda t: t[0])
        chosen = [(fx, x)]
    return [x for _, x in chosen]


def simplex_project(w, lower, total_increment_cap: float) -> np.ndarray:
    """Euclidean projection onto ``{w >= lower, sum(w - lower) <= cap}``."""
    w = np.asarray(w, dtype=float)
    lower = np.asarray(lower, dtype=float)
    cap = float(total_increment_cap)
    x = w - lower
    y = np.maximum(x, 0.0)
    if y.sum() <= cap:
        return lower + y
    if cap <= 0.0:
        return lower.copy()
    u = np.sort(x)[::-1]
    css = np.cumsum(u) - cap
    idx = np.arange(1, x.size + 1)
    # the first index always qualifies in exact arithmetic; guard roundoff at tiny caps
    pos = np.nonzero(u - css / idx > 0)[0]
    rho = pos[-1] if pos.size else 0
    theta = css[rho] / (rho + 1)
    return lower + np.maximum(x - theta, 0.0)


@dataclass
class ToleranceProblem:
    """One step's allocation problem.

    ``prev_points``/``prev_tolerances`` describe the current design; new
    ``candidate_points`` start with no information (zero work).
    """

    prev_points: np.ndarray
    prev_tolerances: np.ndarray
    candidate_points: np.ndarray
    delta_budget: float
    work_exponent: float

    def __post_init__(self):
        if self.delta_budget < 0:
            raise ValueError("delta_budget must be nonnegative")
        if self.work_exponent <= 0:
            raise ValueError("work_exponent must be positive")


@dataclass
class ToleranceResult:
    tolerances: np.ndarray  # all points: previous first, then candidates; inf = excluded
    work: np.ndarray
    included: np.ndarray  # per candidate
    objective: float
    start_objective: float


class _WorkObjective:
    """Variance-only global error as a function of per-point work (mean frozen)."""

    def __init__(self, points, params, mean, meas, P, l_over_r, variant, jitter):
        self.oracle = RootPrecisionVariance(points, params, P, jitter)
        self.mean = mean
        self.meas = meas
        self.q = l_over_r
        self.variant = variant
        self.n = P.shape[0]

    def value(self, w):
        r = np.power(np.maximum(w, 0.0), 1.0 / self.q)
        var = self.oracle(r)
        return float(np.mean(local_error(self.mean, var, self.meas, self.variant)))

    def value_and_grad(self, w):
        w = np.maximum(w, 0.0)
        r = np.power(w, 1.0 / self.q)
        var, g2 = self.oracle(r, grad=True)
        e = float(np.mean(local_error(self.mean, var, self.meas, self.variant)))
        de = local_error_dvar(self.mean, var, self.meas, self.variant)  # (n, m)
        # dVar/dw_i = -(2/q) g_i^2 w_i^(2/q - 1)
        with np.errstate(divide="ignore"):
            dw_fac = -(2.0 / self.q) * np.power(np.maximum(w, 1e-300), 2.0 / self.q - 1.0)
        grad = np.einsum("pk,kip->i", de, g2) / self.n * dw_fac
        return e, grad


def _projected_descent(obj: _WorkObjective, w0, lower, cap, max_iter, armijo=1e-4, shrink=0.5):
    w = simplex_project(w0, lower, cap)
    f, g = obj.value_and_grad(w)
    f_start = f
    gmax = np.max(np.abs(g))
    alpha = (cap if cap > 0 else 1.0) / gmax if gmax > 0 else 0.0
    for _ in range(max_iter):
        if alpha == 0.0:
            break
        accepted = False
        a = alpha
        for _ in range(40):
            w_new = simplex_project(w - a * g, lower, cap)
            step = w_new - w
            if not np.any(step):
                break
            f_new = obj.value(w_new)
            if f_new <= f + armijo * float(g @ step):
                accepted = True
                break
            a *= shrink
        if not accepted:
            break
        done = abs(f - f_new) <= 1e-12 * max(1.0, abs(f))
        w = w_new
        f, g = obj.value_and_grad(w)
        alpha = a / shrink
        if done:
            break
    return w, f, f_start


def optimize_tolerances(problem: ToleranceProblem, model: GpModel, meas: MeasurementModel,
                        integration_points, seed, variant=ErrorVariant.PRINTED, starts: int = 4,
                        max_iter: int = 50, exclusion: float = 1e-6) -> ToleranceResult:
    """Split ``delta_budget`` of work over existing points and new candidates.

    Minimises the variance-only global error (``model``'s mean frozen at the
    integration points) subject to ``w_i >= w_i_prev`` and
    ``sum(w - w_prev) <= delta_budget``.  Candidates ending with less than
    ``exclusion * delta_budget`` work are excluded (infinite tolerance);
    refinements of existing points below that threshold are dropped.
    """
    q = problem.work_exponent
    prev_tol = np.asarray(problem.prev_tolerances, dtype=float).reshape(-1)
    cands = np.asarray(problem.candidate_points, dtype=float).reshape(-1, model.d)
    prev_pts = np.asarray(problem.prev_points, dtype=float).reshape(-1, model.d)
    s_prev, c = prev_tol.size, cands.shape[0]
    points = np.vstack([prev_pts, cands])
    lower = np.concatenate([work_of_tolerance(prev_tol, q) if s_prev else np.empty(0), np.zeros(c)])
    cap = float(problem.delta_budget)
    P = np.atleast_2d(np.asarray(integration_points, dtype=float))
    mean, _ = model.predict(P)
    obj = _WorkObjective(points, model.params, mean, meas, P, q, variant, model.jitter)
    rng = np.random.default_rng(seed)
    best = None
    start_value = None
    for _ in range(max(starts, 1)):
        w0 = lower + cap * rng.dirichlet(np.ones(lower.size)) if lower.size else lower
        w, f, f0 = _projected_descent(obj, w0, lower, cap, max_iter)
        if best is None or f < best[1]:
            best = (w, f)
            start_value = f0
    w = best[0].copy()
    thresh = exclusion * cap
    inc = w - lower
    w[:s_prev] = np.where(inc[:s_prev] < thresh, lower[:s_prev], w[:s_prev])
    included = (w[s_prev:] >= thresh) & (w[s_prev:] > 0.0)
    w[s_prev:] = np.where(included, w[s_prev:], 0.0)
    tol = tolerance_of_work(w, q)
    # untouched points keep their tolerance bit for bit
    tol[:s_prev] = np.where(w[:s_prev] == lower[:s_prev], prev_tol, tol[:s_prev])
    return ToleranceResult(tol, w, included, obj.value(w), start_value)


def design_record(iteration: int, design: TrainingDesign, work_spent: float, **extra) -> dict:
    rec = {"iteration": int(iteration), **design.to_dict(), "work_spent": float(work_spent)}
    rec.update(extra)
    return rec


def save_design(path, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=1, sort_keys=True))


def load_design(path) -> dict:
    return json.loads(Path(path).read_text())
