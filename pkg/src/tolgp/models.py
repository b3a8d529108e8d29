"""Forward models with tolerance-controlled evaluation and the work model.

A simulation at tolerance ``tau`` is emulated as ``exact(p) + tau * xi`` with
standard normal ``xi``; its cost follows ``W(tau) = tau**(-l/r)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bayes import PriorBox


def work_of_tolerance(tau, l_over_r: float):
    """Work needed to reach tolerance ``tau``; infinite tolerance costs nothing."""
    tau = np.asarray(tau, dtype=float)
    with np.errstate(divide="ignore"):
        w = np.where(np.isinf(tau), 0.0, tau ** (-l_over_r))
    return float(w) if w.ndim == 0 else w


def tolerance_of_work(work, l_over_r: float):
    """Inverse of :func:`work_of_tolerance`; zero work maps to ``inf``."""
    work = np.asarray(work, dtype=float)
    with np.errstate(divide="ignore"):
        tau = np.where(work > 0.0, work ** (-1.0 / l_over_r), np.inf)
    return float(tau) if tau.ndim == 0 else tau


def analytic_1d(p):
    """``[p/2 + p^2/2 * exp(sin(12p - i)/3)]_{i=0,1}``; accepts scalars or (n, 1)."""
    P = np.asarray(p, dtype=float)
    x = P.reshape(-1)
    out = np.stack([0.5 * x + 0.5 * x**2 * np.exp(np.sin(12.0 * x - i) / 3.0) for i in (0, 1)], axis=-1)
    return out[0] if P.ndim <= 1 and P.size == 1 else out


def analytic_2d(p):
    """Three-output model on the square, ``k in {0, 2, 3}``; accepts (2,) or (n, 2)."""
    P = np.asarray(p, dtype=float)
    Q = np.atleast_2d(P)
    p1, p2 = Q[:, 0], Q[:, 1]
    a = (p1 - p2) * np.exp(np.sin(8.0 * p2) / 3.0)
    b = (p1 + p2) * np.exp(np.sin(8.0 * p1) / 3.0)
    out = np.stack([np.sin(10.0 * k) * a + np.cos(10.0 * k) * b for k in (0, 2, 3)], axis=-1)
    return out[0] if P.ndim == 1 else out


@dataclass(frozen=True)
class ForwardModel:
    exact: Callable[[np.ndarray], np.ndarray]
    domain: PriorBox
    m: int
    work_exponent: float
    name: str = "custom"

    def __post_init__(self):
        if self.work_exponent <= 0:
            raise ValueError("work_exponent must be positive")

    @property
    def d(self) -> int:
        return self.domain.d

    def __call__(self, P) -> np.ndarray:
        """Exact evaluation on a batch (n, d) -> (n, m)."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return np.asarray(self.exact(P), dtype=float).reshape(P.shape[0], self.m)

    def check_domain(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float).reshape(-1)
        if p.shape[0] != self.d or not self.domain.contains(p):
            raise ValueError(f"point {p.tolist()} outside the domain of model {self.name!r}")
        return p


def _seed_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def evaluate_noisy(fm: ForwardModel, p, tau: float, seed) -> np.ndarray:
    """One simulated evaluation at tolerance ``tau`` (noise standard deviation)."""
    p = fm.check_domain(p)
    if not tau > 0:
        raise ValueError("tolerance must be positive")
    xi = _seed_rng(seed).standard_normal(fm.m)
    return fm(p[None, :])[0] + tau * xi


def refine_evaluation(fm: ForwardModel, p, tau_old: float, tau_new: float, value_old, seed) -> np.ndarray:
    """Re-evaluate at a tighter tolerance.

    The new value is an independent draw; ``value_old`` is replaced, not
    combined with it.
    """
    if tau_new > tau_old:
        raise ValueError(f"refinement must not loosen the tolerance ({tau_old} -> {tau_new})")
    return evaluate_noisy(fm, p, tau_new, seed)


@dataclass
class LedgerEntry:
    point: tuple[float, ...]
    old_tolerance: float
    new_tolerance: float
    charged_work: float


@dataclass
class WorkLedger:
    """Running account of simulation work, one entry per (re-)evaluation."""

    l_over_r: float
    entries: list[LedgerEntry] = field(default_factory=list)
    total: float = 0.0

    def charge(self, point, old_tolerance: float, new_tolerance: float) -> float:
        if new_tolerance > old_tolerance:
            raise ValueError("cannot charge for a looser tolerance")
        cost = work_of_tolerance(new_tolerance, self.l_over_r) - work_of_tolerance(old_tolerance, self.l_over_r)
        cost = max(cost, 0.0)
        self.entries.append(
            LedgerEntry(tuple(np.asarray(point, dtype=float).reshape(-1).tolist()), float(old_tolerance), float(new_tolerance), cost)
        )
        self.total += cost
        return cost

    def consistent(self, rtol: float = 1e-12) -> bool:
        s = sum(e.charged_work for e in self.entries)
        return abs(s - self.total) <= rtol * max(1.0, abs(s))


MODEL_REGISTRY: dict[str, Callable[[], ForwardModel]] = {}


def register_model(name: str):
    def deco(factory):
        MODEL_REGISTRY[name] = factory
        return factory

    return deco


def get_model(name: str, work_exponent: float | None = None) -> ForwardModel:
    try:
        fm = MODEL_REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown forward model {name!r}; registered: {sorted(MODEL_REGISTRY)}") from None
    if work_exponent is not None and work_exponent != fm.work_exponent:
        fm = ForwardModel(fm.exact, fm.domain, fm.m, work_exponent, fm.name)
    return fm


@register_model("analytic1d")
def _analytic1d() -> ForwardModel:
    # quadratic elements on a 2D mesh: l/r = 1
    return ForwardModel(lambda P: analytic_1d(np.asarray(P)[:, 0].reshape(-1, 1)).reshape(-1, 2),
                        PriorBox([0.0], [1.0]), 2, 1.0, "analytic1d")


@register_model("analytic2d")
def _analytic2d() -> ForwardModel:
    # quadratic elements on a 3D mesh: l/r = 1.5
    return ForwardModel(analytic_2d, PriorBox([-0.5, -0.5], [0.5, 0.5]), 3, 1.5, "analytic2d")
