import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsdest import estimators as est
from gsdest.casestudy import MUSEC_DATA, TABLE4
from gsdest.design import BinaryTrialData, TwoStageDesign
from gsdest.estimators import (ObservedOutcome, canonical_estimates, cbc_mle,
                               conditional_bias_stage1_stop, conditional_bias_stage2,
                               estimate_all, estimate_outcome, mle_overall, mle_stage1,
                               mle_stage2_increment, mue, observe_binary, stagewise_pvalue,
                               stop_probability, ubc_mle, umvcue, umvue, unconditional_bias)

import oracles

ANY_THETA = st.floats(-1.0, 1.5)


def far_design(musec):
    # interim boundary so high that early stopping never happens in practice
    return TwoStageDesign(40.0, musec.e2, musec.i1, musec.i2)


# --- MLEs ------------------------------------------------------------------

def test_mles_musec(musec_data, musec):
    assert mle_overall(musec_data) == pytest.approx(0.1370, abs=5e-4)
    assert mle_overall(musec_data, musec) == pytest.approx(42 / 143 - 21 / 134, abs=1e-15)
    assert mle_stage1(musec_data) == pytest.approx(0.1436, abs=5e-4)
    assert mle_stage2_increment(musec_data) == pytest.approx(15 / 42 - 9 / 37, abs=1e-15)
    assert mle_stage2_increment(musec_data) == pytest.approx(0.1139, abs=5e-4)


def test_mles_trivial():
    same = BinaryTrialData.from_counts(((10, 40), (10, 40)), ((25, 100), (25, 100)))
    assert mle_overall(same) == 0
    flat = BinaryTrialData.from_counts(((10, 40), (20, 40)), ((10, 60), (20, 70)))
    assert mle_stage2_increment(flat) == 0


def test_increment_needs_new_patients():
    data = BinaryTrialData.from_counts(((10, 40), (20, 40)), ((10, 40), (25, 60)))
    with pytest.raises(est.NoStage2DataError, match="control"):
        mle_stage2_increment(data)


# --- bias functions --------------------------------------------------------

def test_bias_values(musec):
    # frozen from the closed forms evaluated in 40-digit arithmetic
    assert unconditional_bias(0.1328, musec) == pytest.approx(0.004190945480823429, abs=1e-14)
    assert conditional_bias_stage2(0.1909, musec) == pytest.approx(-0.05389425404707279, abs=1e-14)
    assert unconditional_bias(0.1328, musec) == pytest.approx(0.0042, abs=1e-4)
    assert conditional_bias_stage2(0.1909, musec) == pytest.approx(-0.0539, abs=2e-4)


@pytest.mark.parametrize("theta", [-0.3, 0.0, 0.1, 0.1328, 0.14, 0.25, 0.4])
def test_biases_match_quadrature(musec, theta):
    assert unconditional_bias(theta, musec) == pytest.approx(
        oracles.unconditional_bias_oracle(theta, musec), abs=1e-12)
    assert conditional_bias_stage2(theta, musec) == pytest.approx(
        oracles.conditional_bias_stage2_oracle(theta, musec), abs=1e-12)


def test_bias_limits(musec):
    assert unconditional_bias(0.14, far_design(musec)) == pytest.approx(0.0, abs=1e-300)
    assert conditional_bias_stage2(0.14, far_design(musec)) == pytest.approx(0.0, abs=1e-300)
    flat = TwoStageDesign(2.0, 2.0, 100.0, 100.0 * (1 + 1e-12))
    assert unconditional_bias(0.1, flat) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("theta,mean", [(0.10, 0.1874), (0.14, 0.1973), (0.18, 0.2121)])
def test_stage1_stop_conditional_mean(musec, theta, mean):
    assert theta + conditional_bias_stage1_stop(theta, musec) == pytest.approx(mean, abs=2e-4)


def test_stop_probabilities(musec):
    got = stop_probability(np.array([0.10, 0.14, 0.18]), musec)
    np.testing.assert_allclose(got, [0.15189872334692386, 0.37416067070552626, 0.6504800427252706],
                               atol=1e-14)
    assert [round(float(p), 2) for p in got] == [0.15, 0.37, 0.65]


@settings(max_examples=300)
@given(ANY_THETA, st.floats(0.5, 4.0), st.floats(1.0, 600.0), st.floats(1.05, 5.0))
def test_mixing_identity(theta, e1, i1, ratio):
    d = TwoStageDesign(e1, 2.0, i1, i1 * ratio)
    p = stop_probability(theta, d)
    lhs = p * conditional_bias_stage1_stop(theta, d) + (1 - p) * conditional_bias_stage2(theta, d)
    assert lhs == pytest.approx(unconditional_bias(theta, d), abs=1e-10)


@given(ANY_THETA, st.floats(0.5, 4.0), st.floats(1.0, 600.0), st.floats(1.05, 5.0))
def test_bias_signs(theta, e1, i1, ratio):
    d = TwoStageDesign(e1, 2.0, i1, i1 * ratio)
    assert conditional_bias_stage1_stop(theta, d) >= 0
    assert conditional_bias_stage2(theta, d) <= 0
    assert unconditional_bias(theta, d) >= 0


def test_bias_functions_vectorise(musec):
    grid = np.linspace(-0.5, 1.0, 31)
    for f in (unconditional_bias, conditional_bias_stage2, conditional_bias_stage1_stop, stop_probability):
        vec = f(grid, musec)
        assert vec.shape == grid.shape
        assert np.all(np.isfinite(vec))
        assert vec[7] == pytest.approx(float(f(grid[7], musec)), abs=1e-16)


# --- corrected MLEs ----------------------------------------------------------

def test_ubc_cbc_musec(musec):
    th = mle_overall(MUSEC_DATA)
    assert ubc_mle(th, musec) == pytest.approx(0.1328, abs=5e-4)
    assert cbc_mle(th, musec) == pytest.approx(0.1909, abs=5e-4)


def test_fixed_point_residuals(musec):
    x = ubc_mle(0.20, musec)
    assert abs(x - (0.20 - unconditional_bias(x, musec))) <= 1e-10
    y = cbc_mle(0.20, musec)
    assert abs(y - (0.20 - conditional_bias_stage2(y, musec))) <= 1e-10


def test_corrections_vanish_without_early_stopping(musec):
    d = far_design(musec)
    assert ubc_mle(0.137, d) == pytest.approx(0.137, abs=1e-12)
    assert cbc_mle(0.137, d) == pytest.approx(0.137, abs=1e-12)


# --- Rao-Blackwell estimators ----------------------------------------------

def test_umvue_umvcue_musec(musec_outcome):
    assert umvue(musec_outcome) == pytest.approx(0.1278, abs=5e-4)
    assert umvcue(musec_outcome) == pytest.approx(0.1724, abs=5e-4)


def test_rb_match_quadrature_musec(musec_outcome):
    d, th = musec_outcome.design, musec_outcome.theta_hat_overall
    assert umvue(musec_outcome) == pytest.approx(oracles.umvue_oracle(th, d), abs=1e-8)
    assert umvcue(musec_outcome) == pytest.approx(oracles.umvcue_oracle(th, d), abs=1e-8)


def test_umvcue_opposite_sign_misses(musec_outcome):
    # the alternative sign convention lands near zero, far from 0.1724
    d, th = musec_outcome.design, musec_outcome.theta_hat_overall
    s = math.sqrt(1 / d.i1 + 1 / (d.i2 - d.i1))
    w1, w2 = 1 / ((d.i2 - d.i1) * s), d.i1 * s
    arg = w2 * (th - d.e1 / math.sqrt(d.i1))
    flipped = th - w1 * float(est.nx.std_normal_pdf(arg) / est.nx.std_normal_cdf(arg))
    assert abs(flipped) < 0.01
    assert abs(flipped - umvcue(musec_outcome)) > 0.15


def test_rb_limits(musec):
    o = ObservedOutcome.from_z(1.0, 2.5, far_design(musec))
    assert umvue(o) == pytest.approx(o.theta_hat_overall, abs=1e-15)
    assert umvcue(o) == pytest.approx(o.theta_hat_overall, abs=1e-15)


def test_rb_need_stage2(musec):
    o = ObservedOutcome.from_z(3.5, None, musec)
    with pytest.raises(ValueError):
        umvue(o)
    with pytest.raises(ValueError):
        umvcue(o)


def test_rb_random_outcomes_match_quadrature(musec):
    for z1, z2 in oracles.random_stage2_outcomes(musec, 20, seed=11):
        o = ObservedOutcome.from_z(z1, z2, musec)
        th = o.theta_hat_overall
        assert umvue(o) == pytest.approx(oracles.umvue_oracle(th, musec), abs=1e-8)
        assert umvcue(o) == pytest.approx(oracles.umvcue_oracle(th, musec), abs=1e-8)


# --- p-value and MUE ---------------------------------------------------------

def test_pvalue_at_mue(musec_outcome):
    assert stagewise_pvalue(0.1341, musec_outcome) == pytest.approx(0.5, abs=2e-3)
    assert mue(musec_outcome) == pytest.approx(0.1341, abs=5e-4)


def test_pvalue_needs_stage1_term(musec_outcome):
    # the continuation-and-exceed part alone is nowhere near one half
    d = musec_outcome.design
    theta = 0.1341
    stage1 = float(stop_probability(theta, d))
    assert stagewise_pvalue(theta, musec_outcome) - stage1 == pytest.approx(0.166, abs=0.01)


def test_pvalue_limits(musec_outcome):
    assert stagewise_pvalue(-50.0, musec_outcome) == pytest.approx(0.0, abs=1e-15)
    assert stagewise_pvalue(50.0, musec_outcome) == pytest.approx(1.0, abs=1e-15)


def test_pvalue_monotone(musec_outcome):
    grid = np.linspace(-0.2, 0.5, 100)
    p = stagewise_pvalue(grid, musec_outcome)
    assert np.all(np.diff(p) > 0)


def test_pvalue_mc_oracle_at_zero(musec_outcome):
    d = musec_outcome.design
    p_mc, se = oracles.pvalue_mc_oracle(0.0, musec_outcome.z2, d, reps=10 ** 6)
    assert abs(stagewise_pvalue(0.0, musec_outcome) - p_mc) <= 3 * se


def test_mue_residual(musec_outcome):
    m = mue(musec_outcome)
    assert abs(stagewise_pvalue(m, musec_outcome) - 0.5) <= 1e-8


def test_mue_stage1_stop(musec):
    o = ObservedOutcome.from_z(3.1, None, musec)
    assert mue(o) == pytest.approx(3.1 / math.sqrt(musec.i1), abs=1e-15)
    assert stagewise_pvalue(mue(o), o) == pytest.approx(0.5, abs=1e-15)


def test_mue_at_final_boundary(musec):
    o = ObservedOutcome.from_z(1.0, musec.e2, musec)
    m = mue(o)
    assert math.isfinite(m)
    # independent bisection on the same p-value
    lo, hi = -1.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if stagewise_pvalue(mid, o) < 0.5 else (lo, mid)
    assert m == pytest.approx(0.5 * (lo + hi), abs=1e-9)


# --- outcome and dispatch ------------------------------------------------------

def test_estimate_all_musec(musec_data, musec):
    es = estimate_all(musec_data, musec)
    for name, (value, _, _) in TABLE4.items():
        assert getattr(es, name) == pytest.approx(value, abs=5e-4)
    rel = es.relative_differences()
    assert rel["mle_overall"] == 0
    assert {k: v for k, v in rel.items() if k != "mle_overall"} == {
        k: v[2] for k, v in TABLE4.items() if k != "mle_overall"}


def test_musec_orderings(musec_data, musec):
    es = estimate_all(musec_data, musec)
    assert es.mue > es.ubc_mle > es.umvue
    assert es.cbc_mle > es.umvcue


def test_stage1_stop_dispatch(musec):
    data = BinaryTrialData.from_counts(((5, 100), (40, 100)), ((10, 200), (80, 200)))
    o = observe_binary(data, musec)
    assert o.stopped_stage == 1
    es = estimate_all(data, musec)
    for name in est.UNCONDITIONAL:
        assert getattr(es, name) == pytest.approx(0.35, abs=1e-15)
    for name in est.CONDITIONAL:
        assert getattr(es, name) is None
    assert es.relative_differences()["umvcue"] is None


def test_observed_outcome_round_trip(musec_outcome):
    d = musec_outcome.design
    assert musec_outcome.z1 == pytest.approx(2.540, abs=1e-3)
    assert musec_outcome.z2 == pytest.approx(2.718, abs=1e-3)
    assert musec_outcome.z1 == pytest.approx(musec_outcome.theta_hat_stage1 * math.sqrt(d.i1), abs=1e-9)
    assert musec_outcome.z2 == pytest.approx(musec_outcome.theta_hat_overall * math.sqrt(d.i2), abs=1e-9)


@given(st.floats(-4, 2.7), st.floats(-5, 6))
def test_from_z_decomposition(z1, z2):
    d = TwoStageDesign(2.797, 1.977, 312.8, 393.7)
    o = ObservedOutcome.from_z(z1, z2, d)
    lhs = o.theta_hat_overall * d.i2
    rhs = o.theta_hat_stage1 * d.i1 + o.theta_hat_stage2_increment * (d.i2 - d.i1)
    assert lhs == pytest.approx(rhs, abs=1e-6)


def test_outcome_validation(musec):
    with pytest.raises(ValueError):
        ObservedOutcome(2, 0.1, 0.2, 0.0, 3.5, 2.0, musec)
    with pytest.raises(ValueError):
        ObservedOutcome(2, 0.1, 0.1, 0.1, 1.0, None, musec)
    with pytest.raises(ValueError):
        ObservedOutcome.from_z(1.0, None, musec)


# --- equivariance and batch path --------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 2.5), st.floats(-2, 5), st.floats(-0.3, 0.3))
def test_location_shift_equivariance(z1, z2, delta):
    d = TwoStageDesign(2.797, 1.977, 312.8, 393.7)
    r1, r2 = math.sqrt(d.i1), math.sqrt(d.i2)
    shifted = TwoStageDesign(d.e1 + delta * r1, d.e2 + delta * r2, d.i1, d.i2)
    a = estimate_outcome(ObservedOutcome.from_z(z1, z2, d)).values()
    b = estimate_outcome(ObservedOutcome.from_z(z1 + delta * r1, z2 + delta * r2, shifted)).values()
    for name in est.ESTIMATORS:
        assert b[name] - a[name] == pytest.approx(delta, abs=1e-9), name


def test_batch_matches_scalar(musec):
    rng = np.random.default_rng(5)
    z1 = np.concatenate([rng.normal(2.4, 1.0, 40), [musec.e1, 3.5]])
    z2 = rng.normal(2.7, 1.0, z1.size)
    batch = canonical_estimates(z1, z2, musec)
    for j in range(z1.size):
        o = ObservedOutcome.from_z(z1[j], z2[j], musec)
        ref = estimate_outcome(o).values()
        assert batch["stopped_stage"][j] == o.stopped_stage
        for name in est.ESTIMATORS:
            if ref[name] is None:
                assert math.isnan(batch[name][j])
            else:
                assert batch[name][j] == pytest.approx(ref[name], abs=1e-9), name


def test_musec_regression_values(musec_data, musec):
    # full-precision snapshot; guards against silent numerical drift
    expected = {
        "mle_overall": 0.13698987579584593,
        "mle_stage1": 0.14361539246708177,
        "mle_stage2_increment": 0.1138996138996139,
        "mue": 0.13415088513670118,
        "umvue": 0.12784711308983318,
        "ubc_mle": 0.13279896471560854,
        "umvcue": 0.172351857893132,
        "cbc_mle": 0.19086117829528693,
    }
    got = estimate_all(musec_data, musec).values()
    for name, v in expected.items():
        assert got[name] == pytest.approx(v, abs=1e-10), name


def test_batch_result_independent_of_batch_composition(musec):
    rng = np.random.default_rng(1)
    z1 = rng.normal(2.4, 1.0, 600)
    z2 = rng.normal(2.7, 1.2, 600)
    full = canonical_estimates(z1, z2, musec)
    for j in range(0, 600, 13):
        one = canonical_estimates(z1[j:j + 1], z2[j:j + 1], musec)
        for name in est.ESTIMATORS:
            np.testing.assert_array_equal(full[name][j], one[name][0], err_msg=name)
