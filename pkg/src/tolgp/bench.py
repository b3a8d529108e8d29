"""Benchmark harness: baselines, true-posterior KL evaluation and reporting."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .bayes import MeasurementModel, PriorBox, log_posterior
from .driver import (
    ExperimentConfig,
    RunResult,
    Snapshot,
    Strategy,
    fit_surrogate,
    lhs_points,
    probe_set,
    run,
    take_snapshot,
    write_run,
    _evaluate_new,
    _seed,
)
from .gp import GpModel, KernelParams, TrainingDesign, gp_fit
from .models import WorkLedger
from .sampler import SampleChain, SurrogateLogPosterior, update_chain

log = logging.getLogger(__name__)

GRID_NODES = {1: 2000, 2: 200}
SUPPORT_DROP = 30.0
_SEED_LHS = 11


# -------------------------------------------------------------- KL oracle

def midpoint_grid(lower, upper, n: int):
    """Cell-centre tensor grid; returns ``(points, cell_volume, spacing)``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    h = (upper - lower) / n
    axes = [lo + (np.arange(n) + 0.5) * hh for lo, hh in zip(lower, h)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lower.size)
    return mesh, float(np.prod(h)), h


def support_box(logf, domain: PriorBox, n: int, drop: float = SUPPORT_DROP):
    """Bounding box of the cells where ``logf`` is within ``drop`` of its maximum."""
    G, _, h = midpoint_grid(domain.lower, domain.upper, n)
    lf = logf(G)
    top = np.max(lf)
    if not np.isfinite(top):
        raise ValueError("log-density is -inf on the whole grid")
    keep = lf > top - drop
    lo = np.maximum(G[keep].min(axis=0) - h, domain.lower)
    hi = np.minimum(G[keep].max(axis=0) + h, domain.upper)
    return lo, hi


def _log_normaliser(logf, domain, n):
    lo, hi = support_box(logf, domain, n)
    G, vol, _ = midpoint_grid(lo, hi, n)
    return float(logsumexp(logf(G)) + math.log(vol)), (lo, hi)


def kl_grid(log_p, log_q, domain: PriorBox, n: int | None = None) -> float:
    """``KL(p || q)`` for unnormalised log-densities by tensor-grid quadrature.

    A first pass over the whole domain locates each density's support; both
    normalisers and the KL integrand are then evaluated on ``n`` nodes per
    axis restricted to those supports.
    """
    n = n or GRID_NODES.get(domain.d, 100)
    log_zp, (lo, hi) = _log_normaliser(log_p, domain, n)
    log_zq, _ = _log_normaliser(log_q, domain, n)
    G, vol, _ = midpoint_grid(lo, hi, n)
    lp = log_p(G)
    lq = log_q(G)
    w = np.exp(lp - log_zp) * vol
    live = w > 0
    if np.any(~np.isfinite(lq[live])):
        return math.inf
    return float(np.sum(w[live] * (lp[live] - log_zp - lq[live] + log_zq)))


def _rwm_ensemble(logf, domain: PriorBox, rng, n_chains: int, n_burn: int, n_steps: int, n_init: int):
    """Vectorised random-walk chains on ``logf`` started from an importance resample of prior draws."""
    d = domain.d
    U = domain.lower + rng.random((n_init, d)) * domain.width
    lu = logf(U)
    wts = np.exp(lu - logsumexp(lu))
    idx = rng.choice(n_init, size=n_chains, p=wts)
    X = U[idx].copy()
    lx = lu[idx].copy()
    mu = wts @ U
    spread = np.sqrt(np.maximum(wts @ (U - mu) ** 2, (1e-4 * domain.width) ** 2))
    scale = 2.38 / math.sqrt(d) * spread
    keep = []
    acc_window = 0
    for t in range(n_burn + n_steps):
        Y = X + scale * rng.standard_normal((n_chains, d))
        ly = logf(Y)
        acc = np.log(rng.random(n_chains)) < ly - lx
        X[acc] = Y[acc]
        lx[acc] = ly[acc]
        acc_window += int(acc.sum())
        if t < n_burn and (t + 1) % 20 == 0:
            scale = scale * math.exp(2.0 * (acc_window / (20 * n_chains) - 0.25))
            acc_window = 0
        if t >= n_burn:
            keep.append(X.copy())
    return np.concatenate(keep)


def _log_normaliser_ratio(log_p, log_q, domain: PriorBox, centre, cov, rng, n: int) -> float:
    """``log(Z_p / Z_q)`` by importance sampling from a defensive mixture.

    Half of the draws come from ``N(centre, 4 cov)``, half from the uniform
    prior, so the weights stay bounded wherever either density has mass.
    Both normalisers use the same draws and their errors largely cancel.
    """
    d = domain.d
    k = n // 2
    L = np.linalg.cholesky(4.0 * cov + np.diag((1e-6 * domain.width) ** 2))
    G = np.vstack([centre + rng.standard_normal((k, d)) @ L.T,
                   domain.lower + rng.random((n - k, d)) * domain.width])
    z = np.linalg.solve(L, (G - centre).T)
    log_gauss = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * d * math.log(2 * math.pi)
    log_g = np.logaddexp(log_gauss, -domain.log_volume) + math.log(0.5)
    return float(logsumexp(log_p(G) - log_g) - logsumexp(log_q(G) - log_g))


def kl_mcmc(log_p, log_q, domain: PriorBox, seed=0, n_chains: int = 1000, n_burn: int = 500,
            n_steps: int = 2500, n_init: int = 20000, n_importance: int = 1000000) -> float:
    """KL estimate from a random-walk chain ensemble on ``p``.

    With ``l = log p~ - log q~``, ``KL = E_p[l] - log(Z_p / Z_q)``.  The chain
    average supplies ``E_p[l]``; the normaliser ratio comes from importance
    sampling (see ``_log_normaliser_ratio``), which also sees mass of ``q``
    far from the support of ``p``.
    """
    rng = np.random.default_rng(seed)
    S = _rwm_ensemble(log_p, domain, rng, n_chains, n_burn, n_steps, n_init)
    lq = log_q(S)
    if np.any(~np.isfinite(lq)):
        return math.inf
    ell = log_p(S) - lq
    cov = np.atleast_2d(np.cov(S, rowvar=False))
    return float(np.mean(ell) - _log_normaliser_ratio(log_p, log_q, domain, S.mean(axis=0), cov, rng, n_importance))


def kl_divergence(log_p, log_q, domain: PriorBox, method: str = "grid", **kw) -> float:
    if method == "grid":
        return kl_grid(log_p, log_q, domain, **kw)
    if method == "mcmc":
        return kl_mcmc(log_p, log_q, domain, **kw)
    raise ValueError(f"unknown KL method {method!r}")


def true_posterior_kl(snapshot, config: ExperimentConfig, method: str = "grid",
                      meas: MeasurementModel | None = None, **kw) -> float:
    """``KL(true posterior || surrogate posterior)`` for a snapshot or fitted model."""
    fm = config.forward_model
    meas = meas or config.measurement()
    model = snapshot if isinstance(snapshot, GpModel) else snapshot.model(config.prior_mean, config.jitter)
    domain = fm.domain

    def log_true(P):
        return log_posterior(P, fm, meas, domain, "true")

    def log_surr(P):
        return log_posterior(P, model, meas, domain, config.likelihood)

    return kl_divergence(log_true, log_surr, domain, method, **kw)


# ------------------------------------------------------------- baselines

def lhs_budget(config: ExperimentConfig) -> float:
    sch = config.schedule
    total = sum(sch.delta_work(j) for j in range(1, sch.max_iterations + 1))
    return min(config.budget, total)


def lhs_strategy(config: ExperimentConfig, seed: int | None = None, out_dir=None) -> RunResult:
    """Latin-hypercube baseline at the fixed tolerance.

    Checkpoint ``j`` is an independent LHS design using the work of the first
    ``j`` adaptive iterations; the last checkpoint spends the whole point
    budget.  The final surrogate is sampled once.
    """
    seed = config.seed if seed is None else int(seed)
    fm = config.forward_model
    meas = config.measurement()
    sch = config.schedule
    tau = config.fixed_tolerance
    probes = probe_set(config, seed)
    cap = lhs_budget(config)
    history: list[Snapshot] = []
    spent = 0.0
    design = TrainingDesign.empty(fm.d, fm.m)
    params = config.initial_params()
    ledger = WorkLedger(config.work_exponent)
    for j in range(1, sch.max_iterations + 1):
        spent = min(spent + sch.delta_work(j), cap)
        n_pts = int(math.floor(spent / config.work_per_point + 1e-9))
        ledger = WorkLedger(config.work_exponent)
        pts = lhs_points(fm.domain, n_pts, _seed(seed, j, _SEED_LHS))
        design = _evaluate_new(TrainingDesign.empty(fm.d, fm.m), fm, ledger, pts, [tau] * n_pts,
                               _seed(seed, j, _SEED_LHS, 1))
        _, params_j = fit_surrogate(design, config.initial_params(), config)
        params = params_j
        history.append(take_snapshot(j, design, params, ledger, ledger.total, config, probes))
    model, _ = fit_surrogate(design, params, config, tune=False)
    target = SurrogateLogPosterior(model, meas, fm.domain, config.likelihood)
    j_final = max(sch.max_iterations, 1)
    chain = update_chain(SampleChain.empty(fm.d, seed), sch.n_of(j_final), 0, target, fm.domain,
                         _seed(seed, j_final + 1, 1), iteration=j_final + 1, adapt_fraction=config.adapt_fraction)
    result = RunResult(chain, history, ledger, sch.max_iterations, ledger.total, meas, Strategy.LHS, seed)
    if out_dir is not None:
        write_run(Path(out_dir), result)
    return result


def position_only_strategy(config: ExperimentConfig, seed: int | None = None, out_dir=None) -> RunResult:
    """Adaptive point selection with every candidate simulated at the fixed tolerance."""
    return run(config, Strategy.POSITION_ONLY, seed, out_dir)


def run_strategy(config: ExperimentConfig, strategy, seed: int, out_dir=None) -> RunResult:
    strategy = Strategy(strategy)
    if strategy is Strategy.LHS:
        return lhs_strategy(config, seed, out_dir)
    return run(config, strategy, seed, out_dir)


# ---------------------------------------------------------------- demo

def demo_forward(P):
    P = np.atleast_2d(P)
    return (P[:, 0] ** 2 * np.sin(P[:, 0]))[:, None]


def demo_likelihoods(n_grid: int = 2000, zero_variance: bool = False, p_true: float = 0.6,
                     sigma_l: float = 1e-4, train=(0.05, 0.35, 0.95)) -> np.ndarray:
    """Grid densities of the plug-in and marginal posteriors for ``y = p^2 sin p`` on [0, 1].

    A GP with length scale 0.15 is conditioned on near-exact values at
    ``train``; the measurement is noise-free at ``p_true``.  Returns an
    ``(n_grid, 3)`` table of ``p``, plug-in density, marginal density, each
    density normalised by midpoint quadrature.
    """
    domain = PriorBox([0.0], [1.0])
    X = np.asarray(train, dtype=float).reshape(-1, 1)
    design = TrainingDesign(X, np.full(len(X), 1e-3), demo_forward(X), np.zeros(len(X)))
    model = gp_fit(design, KernelParams(0.15, (0.1,)))
    meas = MeasurementModel(demo_forward(np.array([[p_true]]))[0], [sigma_l])
    G, vol, _ = midpoint_grid(domain.lower, domain.upper, n_grid)
    if zero_variance:
        mean, _ = model.predict(G)
        lp_plug = log_posterior_from_moments(mean, np.zeros_like(mean), meas, plugin=True)
        lp_marg = log_posterior_from_moments(mean, np.zeros_like(mean), meas, plugin=False)
    else:
        lp_plug = log_posterior(G, model, meas, domain, "plugin")
        lp_marg = log_posterior(G, model, meas, domain, "marginal")
    dens = [np.exp(lp - logsumexp(lp) - math.log(vol)) for lp in (lp_plug, lp_marg)]
    return np.column_stack([G[:, 0], dens[0], dens[1]])


def log_posterior_from_moments(mean, var, meas, plugin: bool):
    from .bayes import log_marginal_likelihood, log_plugin_likelihood

    return log_plugin_likelihood(mean, meas) if plugin else log_marginal_likelihood(mean, var, meas)


def grid_entropy(density, cell: float) -> float:
    d = np.asarray(density)
    nz = d > 0
    return float(-np.sum(d[nz] * np.log(d[nz])) * cell)


# -------------------------------------------------------------- reporting

@dataclass(frozen=True)
class KlRecord:
    strategy: str
    seed: int
    iteration: int
    work: float
    kl: float


KLCURVE_HEADER = ("strategy", "seed", "iteration", "work", "kl")


def write_klcurve(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(KLCURVE_HEADER)
        for r in records:
            w.writerow([r.strategy, r.seed, r.iteration, repr(float(r.work)), repr(float(r.kl))])


def read_klcurve(path) -> list[KlRecord]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [KlRecord(r["strategy"], int(r["seed"]), int(r["iteration"]), float(r["work"]), float(r["kl"])) for r in rows]


def evaluate_run(result: RunResult, config: ExperimentConfig, kl_method: str = "grid") -> list[KlRecord]:
    return [
        KlRecord(result.strategy.value, result.seed, s.iteration, s.work,
                 true_posterior_kl(s, config, kl_method, meas=result.meas))
        for s in result.history
    ]


def _one(args):
    config, strategy, seed, out_dir, kl_method = args
    try:
        result = run_strategy(config, strategy, seed, out_dir)
        return evaluate_run(result, config, kl_method), None
    except Exception as exc:  # recorded, the remaining runs proceed
        log.exception("run %s seed %s failed", strategy, seed)
        return [], f"{type(exc).__name__}: {exc}"


def summarize(records, strategies, seeds, failures) -> dict:
    summary = {}
    for st in strategies:
        finals, works = {}, {}
        for sd in seeds:
            rs = [r for r in records if r.strategy == st and r.seed == sd]
            if rs:
                last = max(rs, key=lambda r: r.iteration)
                finals[str(sd)] = last.kl
                works[str(sd)] = last.work
        vals = list(finals.values())
        summary[st] = {
            "median_final_kl": float(np.median(vals)) if vals else None,
            "final_kl": finals,
            "final_work": works,
            "failures": {str(k[1]): v for k, v in failures.items() if k[0] == st},
        }
    return summary


def run_benchmark(config: ExperimentConfig, strategies=None, seeds=(0,), out_dir=None,
                  kl_method: str = "grid", jobs: int = 1):
    """Run every (strategy, seed) pair, evaluate KL per snapshot, write reports.

    Returns ``(records, summary)``.  Writes ``klcurve.csv``, ``summary.json``,
    ``chains/`` and ``designs/`` under ``out_dir`` when given.
    """
    strategies = [Strategy(s).value for s in (strategies or list(Strategy))]
    seeds = [int(s) for s in seeds]
    if not strategies or not seeds:
        raise ValueError("need at least one strategy and one seed")
    tasks = [(config, st, sd, out_dir, kl_method) for st in strategies for sd in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_one, tasks))
    else:
        outcomes = [_one(t) for t in tasks]
    records, failures = [], {}
    for (_, st, sd, _, _), (recs, err) in zip(tasks, outcomes):
        records.extend(recs)
        if err:
            failures[(st, sd)] = err
    summary = summarize(records, strategies, seeds, failures)
    if out_dir is not None:
        out = Path(out_dir)
        write_klcurve(out / "klcurve.csv", records)
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return records, summary
