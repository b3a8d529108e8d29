"""Interleaved surrogate training and posterior sampling.

Per outer iteration: retune the GP, slide the sample chain, propose
candidates, allocate the iteration budget over tolerances, simulate, and
charge the work.  After the budget is spent one more batch of samples is
drawn from the final surrogate.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import qmc

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bayes import LikelihoodKind, MeasurementModel, PriorBox
from .doe import (
    ErrorVariant,
    ToleranceProblem,
    design_record,
    optimize_tolerances,
    save_design,
    select_candidates,
)
from .gp import GpModel, KernelParams, TrainingDesign, gp_fit, optimize_hyperparameters
from .models import ForwardModel, WorkLedger, evaluate_noisy, get_model, refine_evaluation, tolerance_of_work, work_of_tolerance
from .sampler import SampleChain, SurrogateLogPosterior, subsample, update_chain

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class Strategy(str, Enum):
    ADAPTIVE_FULL = "adaptive_full"
    POSITION_ONLY = "adaptive_position_only"
    LHS = "lhs"


# ---------------------------------------------------------------- schedules

SCHEDULE_FAMILIES = ("constant", "power", "floor_power", "table")


@dataclass(frozen=True)
class ScheduleRule:
    """Integer-valued function of the iteration index ``j >= 1``.

    Families: ``constant`` (value), ``power`` (round(base + coeff (j/scale)^exponent)),
    ``floor_power`` (base + floor(coeff j^exponent)), ``table`` (values[j-1], last
    repeated).  ``first`` overrides the value at ``j = 1``.
    """

    family: str
    value: float = 0.0
    base: float = 0.0
    coeff: float = 0.0
    scale: float = 1.0
    exponent: float = 1.0
    values: tuple = ()
    first: float | None = None

    def __post_init__(self):
        if self.family not in SCHEDULE_FAMILIES:
            raise ConfigError(f"unknown schedule family {self.family!r}; choose from {SCHEDULE_FAMILIES}")
        if self.family == "table" and not self.values:
            raise ConfigError("table schedule needs values")

    @classmethod
    def from_config(cls, data) -> "ScheduleRule":
        if isinstance(data, (int, float)):
            return cls("constant", value=float(data))
        data = dict(data)
        if "values" in data:
            data["values"] = tuple(data["values"])
        return cls(**data)

    def raw(self, j: int) -> float:
        if j == 1 and self.first is not None:
            return float(self.first)
        if self.family == "constant":
            return self.value
        if self.family == "power":
            return self.base + self.coeff * (j / self.scale) ** self.exponent
        if self.family == "floor_power":
            return self.base + math.floor(self.coeff * j**self.exponent)
        return float(self.values[min(j, len(self.values)) - 1])

    def __call__(self, j: int) -> int:
        # round half up
        return int(math.floor(self.raw(j) + 0.5))


@dataclass(frozen=True)
class Schedule:
    n_of: ScheduleRule
    h_of: ScheduleRule
    c_of: ScheduleRule
    dw_of: ScheduleRule
    max_iterations: int
    total_budget: float

    def validate(self) -> None:
        if self.max_iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        if self.h_of(1) != 0:
            raise ConfigError("h_1 must be 0: the chain is empty in the first iteration")
        for j in range(1, self.max_iterations + 1):
            if self.n_of(j) < 1:
                raise ConfigError(f"n_{j} must be positive")
            if not 0 <= self.h_of(j) < self.n_of(j):
                raise ConfigError(f"need 0 <= h_j < n_j, got h_{j}={self.h_of(j)}, n_{j}={self.n_of(j)}")
            if self.dw_of(j) <= 0:
                raise ConfigError(f"iteration budget at j={j} must be positive")
            if self.c_of(j) < 1:
                raise ConfigError(f"candidate count at j={j} must be at least 1")

    def delta_work(self, j: int) -> float:
        return self.dw_of.raw(j)


# ------------------------------------------------------------------ config

@dataclass
class ExperimentConfig:
    model: str
    work_exponent: float
    sigma_l: np.ndarray
    p_true: np.ndarray
    noise_seed: int
    budget: float
    likelihood: str
    schedule: Schedule
    strategy: Strategy = Strategy.ADAPTIVE_FULL
    seed: int = 0
    # gp
    length_scale: float = 0.1
    length_scale_min: float = 1e-3
    length_scale_max: float = 0.15
    output_scale: float = 1.0
    prior_mean: float = 0.0
    jitter: float = 1e-10
    tune: bool = True
    # mcmc
    adapt_fraction: float = 0.2
    subsample_size: int = 500
    # doe
    candidates: int = 2
    work_per_point: float = 20.0
    initial_points: int = 3
    initial_tolerance: float = 0.2
    error_variant: str = "printed"
    pattern_starts_per_dim: int = 8
    tolerance_starts: int = 4
    max_descent_iterations: int = 50
    # output
    out_dir: str = "out"
    field_grid: int = 0
    probe_points: int = 5
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def forward_model(self) -> ForwardModel:
        return get_model(self.model, self.work_exponent)

    @property
    def fixed_tolerance(self) -> float:
        return tolerance_of_work(self.work_per_point, self.work_exponent)

    def measurement(self) -> MeasurementModel:
        """Synthetic data ``y(p_true) + eta`` with ``eta ~ N(0, Sigma_l)`` from ``noise_seed``."""
        fm = self.forward_model
        rng = np.random.default_rng(self.noise_seed)
        y = fm(self.p_true[None, :])[0] + np.sqrt(self.sigma_l) * rng.standard_normal(fm.m)
        return MeasurementModel(y, self.sigma_l)

    def initial_params(self) -> KernelParams:
        m = self.forward_model.m
        return KernelParams(min(self.length_scale, self.length_scale_max), (self.output_scale,) * m)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        new = copy.copy(self)
        for k, v in kw.items():
            if not hasattr(new, k):
                raise ConfigError(f"unknown config field {k!r}")
            setattr(new, k, v)
        if "strategy" in kw:
            new.strategy = Strategy(kw["strategy"])
        return new

    def validate(self) -> None:
        if self.budget < 0:
            raise ConfigError("budget must be nonnegative")
        fm = self.forward_model
        if self.sigma_l.shape != (fm.m,) or np.any(self.sigma_l <= 0):
            raise ConfigError(f"sigma_l must hold {fm.m} positive variances")
        if self.p_true.shape != (fm.d,) or not fm.domain.contains(self.p_true):
            raise ConfigError("p_true must be a point of the model domain")
        if self.candidates < 1:
            raise ConfigError("candidates must be at least 1")
        try:
            LikelihoodKind(self.likelihood)
            ErrorVariant(self.error_variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.schedule.validate()


_SECTIONS = {
    "problem": {"model", "work_exponent", "sigma_l", "sigma_l_scale", "p_true", "noise_seed", "budget", "likelihood"},
    "gp": {"length_scale", "length_scale_min", "length_scale_max", "output_scale", "prior_mean", "jitter", "tune"},
    "mcmc": {"adapt_fraction", "subsample"},
    "doe": {"strategy", "candidates", "work_per_point", "initial_points", "initial_tolerance", "error_variant",
            "pattern_starts_per_dim", "tolerance_starts", "max_descent_iterations"},
    "schedule": {"iterations", "n", "h", "candidates", "delta_work"},
    "output": {"dir", "field_grid", "probe_points"},
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    for sec, body in raw.items():
        if sec == "seed":
            continue
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        unknown = set(body) - _SECTIONS[sec]
        if unknown:
            raise ConfigError(f"unknown keys in [{sec}]: {sorted(unknown)}")
    prob = raw.get("problem", {})
    gp = raw.get("gp", {})
    mc = raw.get("mcmc", {})
    doe = raw.get("doe", {})
    sch = raw.get("schedule", {})
    out = raw.get("output", {})
    try:
        model = prob["model"]
        fm = get_model(model)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None
    q = float(prob.get("work_exponent", fm.work_exponent))
    sigma_l = float(prob.get("sigma_l_scale", 1.0)) * np.asarray(prob["sigma_l"], dtype=float)
    candidates = int(doe.get("candidates", 2))
    wpp = float(doe.get("work_per_point", 20.0))
    schedule = Schedule(
        n_of=ScheduleRule.from_config(sch.get("n", 200)),
        h_of=ScheduleRule.from_config(sch.get("h", {"family": "constant", "value": 100, "first": 0})),
        c_of=ScheduleRule.from_config(sch.get("candidates", candidates)),
        dw_of=ScheduleRule.from_config(sch.get("delta_work", candidates * wpp)),
        max_iterations=int(sch.get("iterations", 12)),
        total_budget=float(prob["budget"]),
    )
    cfg = ExperimentConfig(
        model=model,
        work_exponent=q,
        sigma_l=sigma_l,
        p_true=np.asarray(prob["p_true"], dtype=float).reshape(-1),
        noise_seed=int(prob.get("noise_seed", 0)),
        budget=float(prob["budget"]),
        likelihood=prob.get("likelihood", "marginal"),
        schedule=schedule,
        strategy=Strategy(doe.get("strategy", "adaptive_full")),
        seed=int(raw.get("seed", 0)),
        length_scale=float(gp.get("length_scale", 0.1)),
        length_scale_min=float(gp.get("length_scale_min", 1e-3)),
        length_scale_max=float(gp.get("length_scale_max", 0.15)),
        output_scale=float(gp.get("output_scale", 1.0)),
        prior_mean=float(gp.get("prior_mean", 0.0)),
        jitter=float(gp.get("jitter", 1e-10)),
        tune=bool(gp.get("tune", True)),
        adapt_fraction=float(mc.get("adapt_fraction", 0.2)),
        subsample_size=int(mc.get("subsample", 500)),
        candidates=candidates,
        work_per_point=wpp,
        initial_points=int(doe.get("initial_points", 3)),
        initial_tolerance=float(doe.get("initial_tolerance", 0.2)),
        error_variant=doe.get("error_variant", "printed"),
        pattern_starts_per_dim=int(doe.get("pattern_starts_per_dim", 8)),
        tolerance_starts=int(doe.get("tolerance_starts", 4)),
        max_descent_iterations=int(doe.get("max_descent_iterations", 50)),
        out_dir=str(out.get("dir", "out")),
        field_grid=int(out.get("field_grid", 0)),
        probe_points=int(out.get("probe_points", 5)),
        raw=raw,
    )
    cfg.validate()
    return cfg


BUILTIN_CONFIGS = ("analytic1d", "analytic2d", "analytic2d_smoke")


def load_config(path_or_name) -> ExperimentConfig:
    """Load a TOML config file, or a packaged config by name (see ``BUILTIN_CONFIGS``)."""
    p = Path(path_or_name)
    if p.suffix != ".toml" and str(path_or_name) in BUILTIN_CONFIGS:
        text = resources.files("tolgp").joinpath("configs", f"{path_or_name}.toml").read_text()
    else:
        text = p.read_text()
    return config_from_dict(tomllib.loads(text))


# ------------------------------------------------------------------- run

@dataclass
class Snapshot:
    iteration: int
    design: TrainingDesign
    params: KernelParams
    work: float  # actual simulation work charged so far
    budget_counter: float  # W_D as accounted by the loop
    probe: dict

    def to_dict(self) -> dict:
        return design_record(
            self.iteration, self.design, self.work,
            params=self.params.to_dict(), budget_counter=self.budget_counter, probe=self.probe,
        )

    @classmethod
    def from_dict(cls, rec: dict, d: int, m: int) -> "Snapshot":
        return cls(rec["iteration"], TrainingDesign.from_dict(rec, d, m), KernelParams.from_dict(rec["params"]),
                   rec["work_spent"], rec.get("budget_counter", rec["work_spent"]), rec.get("probe", {}))

    def model(self, prior_mean=0.0, jitter: float = 1e-10) -> GpModel:
        return gp_fit(self.design, self.params, np.full(self.params.m, prior_mean), jitter)


@dataclass
class RunResult:
    chain: SampleChain
    history: list[Snapshot]
    ledger: WorkLedger
    iterations: int
    budget_counter: float
    meas: MeasurementModel
    strategy: Strategy
    seed: int


def _seed(seed, *tags) -> list[int]:
    head = [int(v) for v in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    return head + [int(t) for t in tags]


_SEED_CHAIN, _SEED_SUB, _SEED_CAND, _SEED_TOL, _SEED_EVAL, _SEED_INIT, _SEED_PROBE = range(1, 8)


def lhs_points(domain: PriorBox, n: int, seed) -> np.ndarray:
    if n <= 0:
        return np.empty((0, domain.d))
    u = qmc.LatinHypercube(d=domain.d, seed=np.random.default_rng(seed)).random(n)
    return qmc.scale(u, domain.lower, domain.upper)


def _evaluate_new(design: TrainingDesign, fm: ForwardModel, ledger: WorkLedger, points, tols, seed) -> TrainingDesign:
    for i, (p, t) in enumerate(zip(points, tols)):
        y = evaluate_noisy(fm, p, t, _seed(seed, i))
        cost = ledger.charge(p, np.inf, t)
        design = design.with_point(p, t, y, cost)
    return design


def initial_design(config: ExperimentConfig, ledger: WorkLedger | None = None, seed: int | None = None) -> TrainingDesign:
    """Latin-hypercube start design at the coarse initial tolerance, charged to ``ledger``."""
    fm = config.forward_model
    seed = config.seed if seed is None else seed
    ledger = ledger if ledger is not None else WorkLedger(config.work_exponent)
    pts = lhs_points(fm.domain, config.initial_points, _seed(seed, 0, _SEED_INIT))
    return _evaluate_new(TrainingDesign.empty(fm.d, fm.m), fm, ledger, pts,
                         [config.initial_tolerance] * len(pts), _seed(seed, 0, _SEED_EVAL))


def fit_surrogate(design: TrainingDesign, params: KernelParams, config: ExperimentConfig, tune: bool = True):
    prior_mean = np.full(params.m, config.prior_mean)
    if tune and config.tune and design.active.any():
        params = optimize_hyperparameters(design, params, prior_mean,
                                          (config.length_scale_min, config.length_scale_max),
                                          jitter=config.jitter)
    return gp_fit(design, params, prior_mean, config.jitter), params


def probe_set(config: ExperimentConfig, seed: int) -> np.ndarray:
    return lhs_points(config.forward_model.domain, config.probe_points, _seed(seed, 0, _SEED_PROBE))


def take_snapshot(j, design, params, ledger, budget_counter, config, probes) -> Snapshot:
    model, _ = fit_surrogate(design, params, config, tune=False)
    mean, var = model.predict(probes)
    probe = {"points": probes.tolist(), "mean": mean.tolist(), "variance": var.tolist()}
    return Snapshot(j, design.copy(), params, float(ledger.total), float(budget_counter), probe)


def apply_allocation(design, fm, ledger, new_tolerances, candidates, seed):
    """Simulate refined existing points and accepted candidates; return the updated design."""
    s_prev = design.size
    design = design.copy()
    for i in range(s_prev):
        t_old, t_new = design.tolerances[i], new_tolerances[i]
        if t_new < t_old:
            p = design.points[i]
            design.values[i] = refine_evaluation(fm, p, t_old, t_new, design.values[i], _seed(seed, i))
            design.spent_work[i] += ledger.charge(p, t_old, t_new)
            design.tolerances[i] = t_new
    for c, (p, t) in enumerate(zip(candidates, new_tolerances[s_prev:])):
        if np.isfinite(t):
            y = evaluate_noisy(fm, p, t, _seed(seed, s_prev + c))
            design = design.with_point(p, t, y, ledger.charge(p, np.inf, t))
    return design


def run(config: ExperimentConfig, strategy=None, seed: int | None = None, out_dir=None,
        on_snapshot=None) -> RunResult:
    """Run the interleaved training/sampling loop for one strategy and seed.

    ``strategy`` is ``adaptive_full`` (tolerance optimisation) or
    ``adaptive_position_only`` (every candidate at the fixed tolerance).
    """
    strategy = Strategy(strategy or config.strategy)
    if strategy is Strategy.LHS:
        raise ConfigError("the LHS baseline is run by tolgp.bench.lhs_strategy")
    seed = config.seed if seed is None else int(seed)
    config.validate()
    fm = config.forward_model
    meas = config.measurement()
    domain = fm.domain
    q = config.work_exponent
    sch = config.schedule
    ledger = WorkLedger(q)
    design = initial_design(config, ledger, seed)
    params = config.initial_params()
    chain = SampleChain.empty(fm.d, seed)
    probes = probe_set(config, seed)
    history = [take_snapshot(0, design, params, ledger, ledger.total, config, probes)]
    if on_snapshot:
        on_snapshot(history[-1])
    budget_counter = ledger.total
    j = 1
    while config.budget > 0 and budget_counter <= config.budget and j <= sch.max_iterations:
        model, params = fit_surrogate(design, params, config)
        target = SurrogateLogPosterior(model, meas, domain, config.likelihood)
        # the printed schedules can ask for more removals than the chain holds
        chain = update_chain(chain, sch.n_of(j), min(sch.h_of(j), len(chain)), target, domain, _seed(seed, j, _SEED_CHAIN),
                             iteration=j, adapt_fraction=config.adapt_fraction)
        P = subsample(chain, config.subsample_size, _seed(seed, j, _SEED_SUB))
        dw = sch.delta_work(j)
        cands = select_candidates(model, meas, P, sch.c_of(j), domain, _seed(seed, j, _SEED_CAND), q,
                                  config.error_variant, config.pattern_starts_per_dim)
        if strategy is Strategy.ADAPTIVE_FULL:
            problem = ToleranceProblem(design.points, design.tolerances, np.array(cands), dw, q)
            res = optimize_tolerances(problem, model, meas, P, _seed(seed, j, _SEED_TOL), config.error_variant,
                                      config.tolerance_starts, config.max_descent_iterations)
            new_tols = res.tolerances
        else:
            new_tols = np.concatenate([design.tolerances, np.full(len(cands), config.fixed_tolerance)])
        design = apply_allocation(design, fm, ledger, new_tols, cands, _seed(seed, j, _SEED_EVAL))
        budget_counter += dw
        log.info("%s seed=%d j=%d points=%d work=%.2f", strategy.value, seed, j, design.size, ledger.total)
        history.append(take_snapshot(j, design, params, ledger, budget_counter, config, probes))
        if on_snapshot:
            on_snapshot(history[-1])
        if out_dir is not None and config.field_grid > 0:
            _dump_field(Path(out_dir), strategy, seed, j, model, chain, design, config)
        j += 1
    iterations = j - 1
    model, params = fit_surrogate(design, params, config)
    target = SurrogateLogPosterior(model, meas, domain, config.likelihood)
    j_final = max(min(j, sch.max_iterations), 1)
    chain = update_chain(chain, sch.n_of(j_final), 0, target, domain, _seed(seed, j, _SEED_CHAIN),
                         iteration=j, adapt_fraction=config.adapt_fraction)
    result = RunResult(chain, history, ledger, iterations, budget_counter, meas, strategy, seed)
    if out_dir is not None:
        write_run(Path(out_dir), result)
    return result


def run_tag(strategy, seed: int) -> str:
    return f"{Strategy(strategy).value}_seed{seed}"


def write_run(out_dir: Path, result: RunResult) -> None:
    tag = run_tag(result.strategy, result.seed)
    result.chain.to_csv(out_dir / "chains" / f"{tag}.csv")
    for snap in result.history:
        save_design(out_dir / "designs" / f"{tag}_iter{snap.iteration:02d}.json", snap.to_dict())


def _dump_field(out_dir: Path, strategy, seed, j, model, chain, design, config) -> None:
    import json

    domain = config.forward_model.domain
    n = config.field_grid
    axes = [np.linspace(lo, hi, n) for lo, hi in zip(domain.lower, domain.upper)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.d)
    _, var = model.predict(mesh)
    rec = {
        "iteration": j,
        "grid_axes": [a.tolist() for a in axes],
        "std": np.sqrt(var).T.tolist(),
        "chain_tail": chain.samples[-min(len(chain), 1000):].tolist(),
        "points": design.points.tolist(),
        "work": design.spent_work.tolist(),
    }
    path = out_dir / "fields" / f"{run_tag(strategy, seed)}_iter{j:02d}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rec))
