import json
import math

import numpy as np
import pytest

from tolgp.driver import (
    ConfigError,
    ScheduleRule,
    Snapshot,
    Strategy,
    config_from_dict,
    initial_design,
    load_config,
    run,
)
from tolgp.gp import gp_fit


def test_schedule_1d_values(config1d):
    sch = config1d.schedule
    n = [sch.n_of(j) for j in range(1, 13)]
    h = [sch.h_of(j) for j in range(1, 13)]
    assert n[0] == 213 and n[-1] == 2000
    assert h[0] == 0 and h[1] == 222 and h[-1] == 1000
    for j in range(2, 13):
        assert n[j - 1] == math.floor(200 + 1800 * (j / 12) ** 2 + 0.5)
    assert sch.c_of(5) == 2 and sch.delta_work(5) == 40.0


def test_schedule_2d_values(config2d):
    sch = config2d.schedule
    assert [sch.n_of(j) for j in (1, 2, 12)] == [226, 305, 4001]
    assert [sch.h_of(j) for j in (1, 2, 12)] == [0, 250, 2000]
    assert sch.c_of(1) == 3 and sch.delta_work(1) == 300.0


def test_round_half_up():
    rule = ScheduleRule("power", base=0.0, coeff=2.5, exponent=1.0)
    assert rule(1) == 3 and rule(3) == 8
    assert ScheduleRule("table", values=(1, 2))(7) == 2
    with pytest.raises(ConfigError):
        ScheduleRule("cubic")


def _raw(**over):
    raw = {
        "problem": {"model": "analytic1d", "sigma_l": [1e-4, 1e-4], "p_true": [0.4], "budget": 100.0},
        "schedule": {"iterations": 3, "n": 50, "h": {"family": "constant", "value": 20, "first": 0}},
        "mcmc": {"subsample": 50},
    }
    for sec, body in over.items():
        raw.setdefault(sec, {}).update(body)
    return raw


def test_config_validation_errors():
    config_from_dict(_raw())
    with pytest.raises(ConfigError):
        config_from_dict(_raw(problem={"colour": 1}))
    with pytest.raises(ConfigError):
        config_from_dict({**_raw(), "extras": {}})
    with pytest.raises(ConfigError):
        config_from_dict(_raw(problem={"model": "unknown"}))
    with pytest.raises(ConfigError):
        config_from_dict(_raw(schedule={"candidates": 0}))
    with pytest.raises(ConfigError):
        config_from_dict(_raw(schedule={"h": 60}))
    with pytest.raises(ConfigError):
        config_from_dict(_raw(problem={"p_true": [1.5]}))
    with pytest.raises(ConfigError):
        config_from_dict(_raw(problem={"sigma_l": [1e-4]}))
    with pytest.raises(ConfigError):
        config_from_dict(_raw(doe={"error_variant": "other"}))


def test_load_config_from_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[problem]\nmodel = "analytic1d"\nsigma_l = [1e-4, 1e-4]\np_true = [0.3]\nbudget = 80.0\n')
    cfg = load_config(path)
    assert cfg.budget == 80.0 and cfg.schedule.max_iterations == 12


def test_initial_designs(config1d, config2d):
    d1 = initial_design(config1d)
    assert d1.size == 3
    np.testing.assert_array_equal(d1.tolerances, 0.2)
    assert np.sum(d1.spent_work) == pytest.approx(15.0, rel=1e-12)
    d2 = initial_design(config2d)
    assert d2.size == 5 and np.all(config2d.forward_model.domain.contains(d2.points))


@pytest.fixture(scope="module")
def short_run(config1d):
    cfg = config1d.with_overrides(budget=140.0)
    return cfg, run(cfg, "adaptive_full", 0)


def test_run_iterations_and_budget(short_run):
    cfg, res = short_run
    # 15 initial + 40 per iteration; the loop stops once the counter exceeds W
    assert res.iterations == 4
    assert res.budget_counter == pytest.approx(175.0)
    assert [s.iteration for s in res.history] == list(range(5))
    assert res.ledger.consistent()
    assert res.ledger.total == pytest.approx(np.sum(res.history[-1].design.spent_work), rel=1e-12)
    assert res.ledger.total <= 15.0 + 40.0 * res.iterations + 1e-9


def test_full_run_1d_has_twelve_iterations(config1d):
    res = run(config1d, "adaptive_full", 1)
    assert res.iterations == 12 and len(res.history) == 13
    sch, length = config1d.schedule, 0
    for j in range(1, 13):
        length += sch.n_of(j) - min(sch.h_of(j), length)
    # one final batch is appended after the loop
    assert len(res.chain) == length + sch.n_of(12)


def test_zero_budget_samples_only(config1d):
    res = run(config1d.with_overrides(budget=0.0), "adaptive_full", 0)
    assert res.iterations == 0 and len(res.history) == 1
    assert res.history[0].design.size == 3
    assert len(res.chain) == config1d.schedule.n_of(1)


def test_run_deterministic(config1d):
    cfg = config1d.with_overrides(budget=100.0)
    a, b = run(cfg, "adaptive_full", 3), run(cfg, "adaptive_full", 3)
    np.testing.assert_array_equal(a.chain.samples, b.chain.samples)
    np.testing.assert_array_equal(a.history[-1].design.values, b.history[-1].design.values)
    c = run(cfg, "adaptive_full", 4)
    assert not np.array_equal(a.chain.samples, c.chain.samples)


def test_position_only_adds_fixed_tolerance_points(config1d):
    cfg = config1d.with_overrides(budget=200.0)
    res = run(cfg, "adaptive_position_only", 0)
    for prev, cur in zip(res.history, res.history[1:]):
        new = cur.design.size - prev.design.size
        assert 1 <= new <= cfg.schedule.c_of(cur.iteration)
        np.testing.assert_array_equal(cur.design.tolerances[: prev.design.size], prev.design.tolerances)
        np.testing.assert_allclose(cur.design.tolerances[prev.design.size:], 0.05, rtol=1e-12)


def test_snapshot_round_trip_and_refit(short_run, tmp_path):
    cfg, res = short_run
    snap = res.history[-1]
    run(cfg, "adaptive_full", 0, out_dir=tmp_path)
    rec = json.loads((tmp_path / "designs" / "adaptive_full_seed0_iter04.json").read_text())
    back = Snapshot.from_dict(rec, 1, 2)
    np.testing.assert_array_equal(back.design.points, snap.design.points)
    np.testing.assert_array_equal(back.design.tolerances, snap.design.tolerances)
    P = np.linspace(0, 1, 50)[:, None]
    m0, v0 = snap.model().predict(P)
    m1, v1 = gp_fit(back.design, back.params, jitter=1e-10).predict(P)
    np.testing.assert_allclose(m1, m0, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(v1, v0, rtol=1e-10, atol=1e-14)
    head = (tmp_path / "chains" / "adaptive_full_seed0.csv").read_text().splitlines()[0]
    assert head == "iteration_tag,p_1"


def test_lhs_is_not_a_driver_strategy(config1d):
    with pytest.raises(ConfigError):
        run(config1d, Strategy.LHS, 0)
