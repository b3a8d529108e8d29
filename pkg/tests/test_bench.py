import math

import numpy as np
import pytest
from scipy import integrate, stats

from tolgp.bayes import PriorBox
from tolgp.bench import (
    KLCURVE_HEADER,
    demo_likelihoods,
    grid_entropy,
    kl_divergence,
    kl_grid,
    kl_mcmc,
    lhs_budget,
    lhs_strategy,
    read_klcurve,
    run_benchmark,
    support_box,
    true_posterior_kl,
)
from tolgp.driver import run

# 1/2 (ln 2 - 1/2), closed form for N(0, 1) against N(0, 2)
GAUSS_PAIR_KL = 0.5 * (math.log(2.0) - 0.5)
BOX = PriorBox([-12.0], [12.0])


def _normal(var):
    return lambda P: -0.5 * np.asarray(P)[:, 0] ** 2 / var


def test_gaussian_pair_quadrature_oracle():
    p, q = stats.norm(0, 1), stats.norm(0, math.sqrt(2))
    ref, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), -12, 12, epsabs=1e-13)
    assert ref == pytest.approx(GAUSS_PAIR_KL, abs=1e-10)
    assert round(GAUSS_PAIR_KL, 4) == 0.0966


def test_kl_grid_gaussian_pair():
    assert kl_grid(_normal(1.0), _normal(2.0), BOX) == pytest.approx(GAUSS_PAIR_KL, abs=1e-4)
    assert abs(kl_grid(_normal(1.0), _normal(1.0), BOX)) <= 1e-8


def test_kl_grid_converges():
    a = kl_grid(_normal(0.01), _normal(0.03), BOX, n=400)
    b = kl_grid(_normal(0.01), _normal(0.03), BOX, n=800)
    assert abs(a - b) <= 0.01 * abs(b)


def test_kl_grid_2d_product():
    box = PriorBox([-8.0, -8.0], [8.0, 8.0])

    def lp(P):
        return -0.5 * np.sum(P**2, axis=1)

    def lq(P):
        return -0.25 * np.sum(P**2, axis=1)

    assert kl_grid(lp, lq, box) == pytest.approx(2 * GAUSS_PAIR_KL, abs=1e-4)


def test_kl_disjoint_supports_is_infinite():
    box = PriorBox([0.0], [1.0])

    def lp(P):
        return np.where(P[:, 0] < 0.4, 0.0, -np.inf)

    def lq(P):
        return np.where(P[:, 0] > 0.6, 0.0, -np.inf)

    assert kl_grid(lp, lq, box) == math.inf
    assert kl_mcmc(lp, lq, box, n_burn=20, n_steps=20) == math.inf


def test_kl_mcmc_gaussian_pair():
    est = kl_mcmc(_normal(1.0), _normal(2.0), BOX, seed=3)
    assert est == pytest.approx(GAUSS_PAIR_KL, rel=0.05)
    assert kl_divergence(_normal(1.0), _normal(2.0), BOX, "mcmc", seed=3) == est
    with pytest.raises(ValueError):
        kl_divergence(_normal(1.0), _normal(2.0), BOX, "quad")


def test_support_box_brackets_peak():
    lo, hi = support_box(_normal(1e-4), BOX, 2000)
    assert lo[0] < 0.0 < hi[0] and hi[0] - lo[0] < 0.5
    with pytest.raises(ValueError):
        support_box(lambda P: np.full(len(P), -np.inf), BOX, 10)


def test_snapshot_kl_grid_and_mcmc_agree(config1d):
    res = run(config1d.with_overrides(budget=100.0), "adaptive_full", 0)
    snap = res.history[-1]
    g = true_posterior_kl(snap, config1d, "grid")
    m = true_posterior_kl(snap, config1d, "mcmc")
    assert g >= 0
    assert abs(g - m) <= max(0.05 * g, 1e-3)


def test_lhs_point_counts(config1d, config2d):
    assert lhs_budget(config1d) == 480.0 and lhs_budget(config2d) == 3600.0
    res = lhs_strategy(config1d, 0)
    assert res.history[-1].design.size == 24
    np.testing.assert_allclose(res.history[-1].design.tolerances, 0.05, rtol=1e-12)
    assert [s.design.size for s in res.history[:3]] == [2, 4, 6]
    works = [s.work for s in res.history]
    assert works == sorted(works) and works[-1] == pytest.approx(480.0)


def test_lhs_2d_point_count(config2d):
    cfg = config2d.with_overrides(schedule=config2d.schedule)
    res = lhs_strategy(cfg, 0)
    assert res.history[-1].design.size == 36


def test_demo_normalisation_and_entropy():
    table = demo_likelihoods(2000)
    cell = table[1, 0] - table[0, 0]
    for k in (1, 2):
        assert table[:, k].sum() * cell == pytest.approx(1.0, abs=1e-6)
    assert grid_entropy(table[:, 2], cell) > grid_entropy(table[:, 1], cell)
    flat = demo_likelihoods(2000, zero_variance=True)
    np.testing.assert_allclose(flat[:, 1], flat[:, 2], rtol=1e-12)


def test_grid_entropy_uniform():
    assert grid_entropy(np.full(100, 0.5), 0.02) == pytest.approx(math.log(2.0), rel=1e-12)


def test_benchmark_outputs(config1d, tmp_path):
    cfg = config1d.with_overrides(budget=60.0)
    records, summary = run_benchmark(cfg, seeds=(0, 1), out_dir=tmp_path)
    lines = (tmp_path / "klcurve.csv").read_text().splitlines()
    assert lines[0] == ",".join(KLCURVE_HEADER)
    back = read_klcurve(tmp_path / "klcurve.csv")
    assert [(r.strategy, r.seed, r.iteration, r.work, r.kl) for r in back] == \
        [(r.strategy, r.seed, r.iteration, r.work, r.kl) for r in records]
    assert set(summary) == {"adaptive_full", "adaptive_position_only", "lhs"}
    for st in summary:
        rs = [r for r in records if r.strategy == st and r.seed == 0]
        works = [r.work for r in rs]
        assert works == sorted(works)
        assert summary[st]["median_final_kl"] == pytest.approx(np.median(list(summary[st]["final_kl"].values())))
        assert not summary[st]["failures"]
    assert (tmp_path / "summary.json").exists()
    assert (tmp_path / "chains" / "lhs_seed1.csv").exists()
    with pytest.raises(ValueError):
        run_benchmark(cfg, seeds=())
