"""Random-walk Metropolis sampling and the sliding sample chain.

Each outer iteration removes the oldest ``h_j`` samples and appends ``n_j``
fresh ones drawn from the current surrogate posterior.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _backend
from .bayes import LikelihoodKind, MeasurementModel, PriorBox, log_posterior

ADAPT_BATCH = 10
ADAPT_TARGET = 0.25
ADAPT_GAIN = 2.0
INITIAL_SCALE = 0.05


class SamplerWarning(RuntimeWarning):
    pass


class ChainConfigError(ValueError):
    pass


class SurrogateLogPosterior:
    """Callable unnormalised log-posterior of a fitted GP surrogate.

    Recognised by :func:`mcmc_sample`, which hands it to the compiled kernel
    when that backend is active and the prior mean is constant.
    """

    def __init__(self, model, meas: MeasurementModel, prior: PriorBox, kind="marginal"):
        self.model = model
        self.meas = meas
        self.prior = prior
        self.kind = LikelihoodKind(kind)
        if self.kind is LikelihoodKind.TRUE:
            raise ValueError("surrogate posterior needs the plugin or marginal likelihood")

    def __call__(self, p) -> float:
        return log_posterior(p, self.model, self.meas, self.prior, self.kind)

    def kernel_target(self, kernels):
        mu0 = self.model.constant_prior_mean
        if mu0 is None:
            return None
        model = self.model
        return kernels.make_gp_target(
            model.X, model.params.length_scale, np.asarray(model.params.output_scales),
            model.alpha, model.chol, mu0, self.meas.y_meas, self.meas.sigma_l,
            self.prior.lower, self.prior.upper, int(self.kind is LikelihoodKind.MARGINAL),
            self.prior.log_volume,
        )


@dataclass
class ChainDraw:
    samples: np.ndarray
    acceptance_rate: float
    proposal_scale: np.ndarray


def mcmc_sample(logdensity, n: int, init, domain: PriorBox, seed, scale=None,
                adapt_fraction: float = 0.2) -> ChainDraw:
    """Draw ``n`` states of a random-walk Metropolis chain restricted to ``domain``.

    The proposal scale (per coordinate, default 5% of the box width) is
    multiplied by ``exp(2 (a - 0.25) / sqrt(k))`` after the ``k``-th batch of
    10 steps within the first ``adapt_fraction * n`` steps, ``a`` being the
    batch acceptance rate.  The adaptation steps stay in the returned chain.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    x0 = np.asarray(init, dtype=float).reshape(-1)
    lp0 = float(logdensity(x0))
    if not np.isfinite(lp0):
        raise ValueError(f"log-density is not finite at the initial state {x0.tolist()}")
    scale = INITIAL_SCALE * domain.width if scale is None else np.asarray(scale, dtype=float)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, domain.d))
    logu = np.log(rng.random(n))
    n_adapt = int(adapt_fraction * n)
    kernels = _backend.kernels
    target = logdensity.kernel_target(kernels) if isinstance(logdensity, SurrogateLogPosterior) else None
    if target is not None:
        out, n_acc, sc = kernels.rwm_gp(target, x0, lp0, scale, z, logu, n_adapt,
                                        ADAPT_BATCH, ADAPT_TARGET, ADAPT_GAIN)
    else:
        out, n_acc, sc = _backend._pykernels.rwm(logdensity, x0, lp0, scale, z, logu, n_adapt,
                                                 ADAPT_BATCH, ADAPT_TARGET, ADAPT_GAIN,
                                                 domain.lower, domain.upper)
    if n_acc == 0:
        warnings.warn(f"all {n} proposals were rejected", SamplerWarning)
    return ChainDraw(out, n_acc / n, np.asarray(sc))


@dataclass
class SampleChain:
    """Ordered samples (oldest first) with the iteration that produced each."""

    samples: np.ndarray
    source_iteration: np.ndarray
    rng_seed: int = 0
    proposal_scale: np.ndarray | None = None
    acceptance: list = field(default_factory=list)

    @classmethod
    def empty(cls, d: int, seed: int = 0) -> "SampleChain":
        return cls(np.empty((0, d)), np.empty(0, dtype=int), seed)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration_tag"] + [f"p_{i + 1}" for i in range(self.d)])
            for tag, row in zip(self.source_iteration.tolist(), self.samples.tolist()):
                w.writerow([tag] + [repr(v) for v in row])

    @classmethod
    def from_csv(cls, path, seed: int = 0) -> "SampleChain":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        d = len(rows[0]) - 1
        body = rows[1:]
        tags = np.array([int(r[0]) for r in body], dtype=int)
        samples = np.array([[float(v) for v in r[1:]] for r in body]).reshape(-1, d)
        return cls(samples, tags, seed)


def _rescaled_proposal(chain: SampleChain, domain: PriorBox) -> np.ndarray:
    if chain.proposal_scale is None:
        return INITIAL_SCALE * domain.width
    if len(chain) < 20:
        return chain.proposal_scale
    std = np.std(chain.samples, axis=0)
    if np.any(std <= 0):
        return chain.proposal_scale
    # keep the adapted overall size, take the shape from the retained samples
    shape = std / np.exp(np.mean(np.log(std)))
    size = np.exp(np.mean(np.log(chain.proposal_scale)))
    return size * shape


def update_chain(chain: SampleChain, n_j: int, h_j: int, logdensity, domain: PriorBox, seed,
                 iteration: int = 0, adapt_fraction: float = 0.2) -> SampleChain:
    """Drop the ``h_j`` oldest samples, then append ``n_j`` new ones.

    The new segment starts from the last retained sample, or from the box
    midpoint when nothing is retained.
    """
    if h_j < 0 or n_j < 1:
        raise ChainConfigError("need n_j >= 1 and h_j >= 0")
    if h_j > len(chain):
        raise ChainConfigError(f"cannot remove {h_j} samples from a chain of length {len(chain)}")
    if h_j >= n_j:
        raise ChainConfigError(f"h_j ({h_j}) must be smaller than n_j ({n_j})")
    kept = chain.samples[h_j:]
    tags = chain.source_iteration[h_j:]
    init = kept[-1] if len(kept) else domain.midpoint
    retained = replace(chain, samples=kept, source_iteration=tags)
    draw = mcmc_sample(logdensity, n_j, init, domain, seed,
                       scale=_rescaled_proposal(retained, domain), adapt_fraction=adapt_fraction)
    return SampleChain(
        np.vstack([kept, draw.samples]),
        np.concatenate([tags, np.full(n_j, iteration, dtype=int)]),
        chain.rng_seed,
        draw.proposal_scale,
        chain.acceptance + [draw.acceptance_rate],
    )


def subsample(chain: SampleChain, size: int, seed) -> np.ndarray:
    """Uniform random subset of the chain without replacement (the whole chain if small)."""
    if len(chain) == 0:
        raise ValueError("cannot subsample an empty chain")
    if size < 1:
        raise ValueError("size must be at least 1")
    if size >= len(chain):
        return chain.samples.copy()
    idx = np.random.default_rng(seed).choice(len(chain), size=size, replace=False)
    return chain.samples[np.sort(idx)]
