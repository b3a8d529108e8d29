import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_design, random_model
from oracles import central_difference, literal_gp
from oracles import variance_derivative_fd as _fd_variance_derivative
from tolgp.gp import (
    FactorizationError,
    HyperparameterWarning,
    KernelParams,
    RootPrecisionVariance,
    TrainingDesign,
    _neg_log_evidence,
    gp_fit,
    gp_predict,
    kernel_eval,
    log_evidence,
    optimize_hyperparameters,
    variance_derivative,
)


# ------------------------------------------------------------------ kernel

def test_kernel_zero_distance_returns_scales():
    params = KernelParams(0.1, (0.3, 2.0))
    np.testing.assert_array_equal(kernel_eval(params, [0.2, 0.4], [0.2, 0.4]), [0.3, 2.0])


def test_kernel_decays_to_zero():
    params = KernelParams(0.1, (1.0, 1.0))
    assert np.all(kernel_eval(params, [0.0], [50.0]) == 0.0)


def test_kernel_one_length_scale_apart():
    params = KernelParams(0.15, (1.0,))
    assert kernel_eval(params, [0.0], [0.15])[0] == pytest.approx(math.exp(-0.5), rel=1e-14)
    assert math.exp(-0.5) == pytest.approx(0.6065306597, abs=1e-10)


@pytest.mark.parametrize("ell", [0.0, -0.1, 0.1500001])
def test_kernel_params_rejects_length_scale(ell):
    with pytest.raises(ValueError):
        KernelParams(ell, (1.0,))


def test_kernel_params_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        KernelParams(0.1, (1.0, 0.0))


# ------------------------------------------------------------------ design

def test_design_round_trip_keeps_inf_and_nan():
    d = TrainingDesign([[0.1], [0.5]], [0.05, np.inf], [[1.0, 2.0], [np.nan, np.nan]], [20.0, 0.0])
    back = TrainingDesign.from_dict(d.to_dict())
    np.testing.assert_array_equal(back.points, d.points)
    np.testing.assert_array_equal(back.tolerances, d.tolerances)
    np.testing.assert_array_equal(back.values[0], d.values[0])
    assert np.all(np.isnan(back.values[1]))


def test_design_validation():
    with pytest.raises(ValueError):
        TrainingDesign([[0.1]], [0.0], [[1.0]], [0.0])
    with pytest.raises(ValueError):
        TrainingDesign([[0.1]], [0.1], [[np.nan]], [0.0])
    with pytest.raises(ValueError):
        TrainingDesign([[0.1], [0.2]], [0.1], [[1.0]], [0.0])


def test_design_refines():
    a = TrainingDesign([[0.1]], [0.1], [[1.0]], [0.0])
    b = a.with_point([0.3], 0.05, [2.0])
    c = TrainingDesign([[0.1], [0.3]], [0.05, 0.05], [[1.0], [2.0]], [0.0, 0.0])
    assert b.refines(a) and c.refines(b) and not a.refines(b)


# -------------------------------------------------------------- prediction

def test_empty_design_returns_prior():
    params = KernelParams(0.1, (0.5, 2.0))
    model = gp_fit(TrainingDesign.empty(2, 2), params, prior_mean=[1.0, -1.0])
    mean, var = model.predict(np.random.default_rng(0).random((4, 2)))
    np.testing.assert_array_equal(mean, np.tile([1.0, -1.0], (4, 1)))
    np.testing.assert_array_equal(var, np.tile([0.5, 2.0], (4, 1)))


def test_near_exact_single_point_interpolates():
    params = KernelParams(0.1, (1.0,))
    model = gp_fit(TrainingDesign([[0.3]], [1e-8], [[0.7]], [0.0]), params)
    mean, var = gp_predict(model, [0.3])
    assert abs(mean[0] - 0.7) < 1e-6
    assert var[0] <= 1e-12 * 1.0 + model.jitter * 1.0


def test_far_prediction_recovers_prior_variance():
    rng = np.random.default_rng(3)
    model = random_model(rng, 5, d=2, m=2)
    _, var = gp_predict(model, [20.0, 20.0])
    np.testing.assert_allclose(var, model.params.output_scales, rtol=1e-6)


def test_excluded_points_carry_no_information():
    rng = np.random.default_rng(4)
    d = random_design(rng, 4, d=1, m=2)
    params = KernelParams(0.1, (1.0, 0.5))
    full = d.with_point([0.55], np.inf, None)
    P = rng.random((10, 1))
    m1, v1 = gp_fit(d, params).predict(P)
    m2, v2 = gp_fit(full, params).predict(P)
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_array_equal(v1, v2)


def _dense_check(design, params, P, mu0=0.0, rtol=1e-8):
    model = gp_fit(design, params, prior_mean=mu0, jitter=0.0)
    mean, var = model.predict(P)
    for k in range(params.m):
        for i, p in enumerate(P):
            lm, lv = literal_gp(design.points, design.tolerances, design.values[:, k], p,
                                params.length_scale, params.output_scales[k], mu0)
            assert mean[i, k] == pytest.approx(lm, rel=rtol, abs=1e-14)
            assert var[i, k] == pytest.approx(lv, rel=rtol)


def test_three_point_design_matches_literal_formula():
    rng = np.random.default_rng(5)
    design = random_design(rng, 3, d=1, m=1)
    _dense_check(design, KernelParams(0.12, (0.8,)), rng.random((5, 1)), mu0=0.3)


def test_first_iteration_design_matches_literal_formula(config1d):
    from tolgp.bench import run_strategy

    cfg = config1d.with_overrides(budget=config1d.schedule.delta_work(1) + 15.0, schedule=config1d.schedule)
    res = run_strategy(cfg, "adaptive_full", 0)
    snap = res.history[1]
    P = np.linspace(0.02, 0.98, 7)[:, None]
    _dense_check(snap.design.copy() if snap.design.active.all() else _active(snap.design), snap.params, P)


def _active(design):
    a = design.active
    return TrainingDesign(design.points[a], design.tolerances[a], design.values[a], design.spent_work[a])


def test_prediction_is_read_only():
    model = random_model(np.random.default_rng(6), 3)
    with pytest.raises(ValueError):
        model.alpha[0, 0] = 1.0


def test_singular_covariance_raises_with_design():
    params = KernelParams(0.1, (1.0,))
    design = TrainingDesign([[0.2], [0.2]], [1e-200, 1e-200], [[0.0], [1.0]], [0.0, 0.0])
    with pytest.raises(FactorizationError) as err:
        gp_fit(design, params, jitter=0.0)
    assert err.value.design is design


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_variance_bounded_by_prior(seed, s):
    rng = np.random.default_rng(seed)
    model = random_model(rng, s, d=2, m=2)
    _, var = model.predict(rng.random((20, 2)))
    assert np.all(var >= 0.0)
    assert np.all(var <= np.asarray(model.params.output_scales) * (1 + 1e-12))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_variance_monotone_in_data(seed, s):
    rng = np.random.default_rng(seed)
    design = random_design(rng, s, d=1, m=1, tau_range=(1e-2, 0.3))
    params = KernelParams(0.1, (1.0,))
    P = rng.random((15, 1))
    _, v0 = gp_fit(design, params).predict(P)
    more = design.with_point(rng.random(1), 0.05, [0.0])
    _, v1 = gp_fit(more, params).predict(P)
    tighter = design.copy()
    tighter.tolerances[0] *= 0.5
    _, v2 = gp_fit(tighter, params).predict(P)
    assert np.all(v1 <= v0 + 1e-12)
    assert np.all(v2 <= v0 + 1e-12)


# ----------------------------------------------------- variance derivative

def test_variance_derivative_far_candidate_is_zero():
    model = random_model(np.random.default_rng(7), 4)
    np.testing.assert_array_equal(variance_derivative(model, [0.5], [40.0], 0.1), 0.0)


def test_variance_derivative_matches_finite_difference():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        model = random_model(rng, int(rng.integers(1, 6)), d=1, m=2, jitter=0.0)
        p, pc = rng.random(1), rng.random(1)
        t = rng.uniform(0.02, 0.5)
        analytic = variance_derivative(model, p, pc, t)
        fd = _fd_variance_derivative(model, p, pc, t)
        worst = max(worst, np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-12)))
    assert worst <= 1e-4


def test_variance_derivative_at_duplicate_point():
    rng = np.random.default_rng(9)
    design = random_design(rng, 4, d=1, m=1, tau_range=(0.05, 0.2))
    params = KernelParams(0.1, (1.0,))
    i = 2
    t_i = design.tolerances[i]
    base = TrainingDesign(np.delete(design.points, i, 0), np.delete(design.tolerances, i),
                          np.delete(design.values, i, 0), np.zeros(3))
    model = gp_fit(base, params)
    p = rng.random(1)

    def var_at(t):
        d = base.with_point(design.points[i], t, design.values[i])
        return gp_fit(d, params).predict(p[None, :])[1][0]

    fd = central_difference(var_at, t_i, 1e-4 * t_i)
    np.testing.assert_allclose(variance_derivative(model, p, design.points[i], t_i), fd, rtol=1e-4)


def test_variance_derivative_rejects_nonpositive_tau():
    model = random_model(np.random.default_rng(10), 2)
    with pytest.raises(ValueError):
        variance_derivative(model, [0.1], [0.2], 0.0)


# ------------------------------------------------------ root precision form

def test_root_precision_matches_fit():
    rng = np.random.default_rng(11)
    design = random_design(rng, 5, d=2, m=2, tau_range=(0.01, 0.3))
    params = KernelParams(0.12, (0.7, 1.3))
    P = rng.random((9, 2))
    oracle = RootPrecisionVariance(design.points, params, P)
    _, v = gp_fit(design, params).predict(P)
    np.testing.assert_allclose(oracle(1.0 / design.tolerances), v, rtol=1e-9, atol=1e-14)
    r = 1.0 / design.tolerances
    r[1] = 0.0
    reduced = TrainingDesign(np.delete(design.points, 1, 0), np.delete(design.tolerances, 1),
                             np.delete(design.values, 1, 0), np.zeros(4))
    _, v_red = gp_fit(reduced, params).predict(P)
    np.testing.assert_allclose(oracle(r), v_red, rtol=1e-9, atol=1e-14)


def test_root_precision_gradient():
    rng = np.random.default_rng(12)
    X = rng.random((4, 1))
    P = rng.random((6, 1))
    oracle = RootPrecisionVariance(X, KernelParams(0.1, (1.0,)), P)
    r = rng.uniform(2.0, 20.0, 4)
    _, g2 = oracle(r, grad=True)
    for i in range(4):
        e = np.zeros(4)
        e[i] = 1e-5 * r[i]
        fd = (oracle(r + e) - oracle(r - e)) / (2 * e[i])
        np.testing.assert_allclose(-2 * r[i] * g2[0, i], fd[:, 0], rtol=1e-5, atol=1e-12)


# --------------------------------------------------------- hyperparameters

def test_evidence_gradient_matches_finite_difference():
    rng = np.random.default_rng(13)
    d = random_design(rng, 6, d=2, m=2, tau_range=(0.01, 0.1))
    theta = np.log([0.1, 0.5, 1.5])
    _, g = _neg_log_evidence(theta, d.points, d.tolerances, d.values, 1e-10)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1e-6
        fd = (_neg_log_evidence(theta + e, d.points, d.tolerances, d.values, 1e-10, False)
              - _neg_log_evidence(theta - e, d.points, d.tolerances, d.values, 1e-10, False)) / 2e-6
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def _gp_sample(rng, n, ell, noise):
    X = rng.random((n, 1))
    K = np.exp(-0.5 * (X - X.T) ** 2 / ell**2) + 1e-10 * np.eye(n)
    y = np.linalg.cholesky(K) @ rng.standard_normal(n) + noise * rng.standard_normal(n)
    return TrainingDesign(X, np.full(n, noise), y[:, None], np.zeros(n))


def test_length_scale_recovered_from_gp_data():
    found = []
    for seed in range(10):
        design = _gp_sample(np.random.default_rng(100 + seed), 40, 0.1, 1e-3)
        found.append(optimize_hyperparameters(design, KernelParams(0.05, (0.5,))).length_scale)
    assert 0.05 <= np.median(found) <= 0.2


def test_length_scale_capped():
    design = _gp_sample(np.random.default_rng(1), 30, 0.6, 1e-3)
    params = optimize_hyperparameters(design, KernelParams(0.1, (1.0,)))
    assert params.length_scale <= 0.15


def test_tuning_never_lowers_evidence():
    rng = np.random.default_rng(14)
    for _ in range(10):
        design = random_design(rng, int(rng.integers(1, 6)), d=1, m=2)
        init = KernelParams(rng.uniform(0.02, 0.15), (1.0, 1.0))
        tuned = optimize_hyperparameters(design, init)
        assert log_evidence(design, tuned) >= log_evidence(design, init) - 1e-9


def test_tuning_on_single_point_keeps_optimum():
    design = TrainingDesign([[0.5]], [0.1], [[0.3]], [0.0])
    init = optimize_hyperparameters(design, KernelParams(0.1, (1.0,)))
    again = optimize_hyperparameters(design, init)
    assert log_evidence(design, again) >= log_evidence(design, init) - 1e-12


def test_tuning_warns_on_nonfinite_evidence():
    design = TrainingDesign([[0.2], [0.2]], [1e-200, 1e-200], [[0.0], [1.0]], [0.0, 0.0])
    init = KernelParams(0.1, (1.0,))
    with pytest.warns(HyperparameterWarning):
        assert optimize_hyperparameters(design, init, jitter=0.0) is init


def test_tuning_rejects_empty_design():
    with pytest.raises(ValueError):
        optimize_hyperparameters(TrainingDesign.empty(1, 1), KernelParams(0.1, (1.0,)))
