import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snmgest.cohort import Cohort, SubgroupMask, SubjectHistory, mask_intractable
from snmgest.ctf import BlipSpec, TimeRatioSpec
from snmgest.exceptions import BracketError, ConfigError, DegenerateTestError, SingularFitError
from snmgest.gest import (GEstConfig, GEstimator, PositivityWarning, TreatmentModel, TreatmentModelSpec,
                          closed_form_beta, confidence_set, estimate_ey0, fit_treatment_model, g_estimate,
                          grid_points, positivity_audit, score_statistic, sensitivity_zeta)
from snmgest.simlab import scenario, simulate_cohort

INTERCEPT = TreatmentModelSpec(w_map=("1",))


def two_subjects(y=(5.0, 9.0), gains=(1.0, 3.0)):
    subs = [SubjectHistory.from_bmi([22, 22 + g], u, subject_id=f"s{k}") for k, (g, u) in enumerate(zip(gains, y))]
    return Cohort.from_subjects(subs)


@pytest.fixture(scope="module")
def co_small():
    return simulate_cohort(scenario("co", n=400, horizon=12, seed=11))


@pytest.fixture(scope="module")
def rc_small():
    return simulate_cohort(scenario("rc_cd", n=800, horizon=60, seed=4))


# -- treatment model

def test_intercept_fit_hand_values():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PositivityWarning)
        spec = fit_treatment_model(two_subjects(), INTERCEPT)
    assert spec.alpha == pytest.approx((2.0,), abs=1e-12)
    assert spec.residuals(two_subjects().frame())[:, 0] == pytest.approx([-1.0, 1.0], abs=1e-12)


def test_all_zero_exposure_zero_residuals():
    c = two_subjects(gains=(0.0, 0.0))
    spec = fit_treatment_model(c, INTERCEPT)
    assert np.allclose(spec.residuals(c.frame()), 0.0)


def test_log_shift_finite_at_zero():
    c = two_subjects(gains=(0.0, 2.0))
    spec = fit_treatment_model(c, TreatmentModelSpec(response="log_shift", w_map=("1",)))
    assert np.isfinite(spec.alpha[0])
    assert spec.alpha[0] == pytest.approx(0.5 * (np.log(0.1) + np.log(2.1)))


def test_log_linear_recovers_mean():
    rng = np.random.default_rng(0)
    W = np.column_stack([np.ones(400), rng.integers(0, 2, 400)])
    a = rng.exponential(np.exp(W @ [0.2, -0.5]))
    m = TreatmentModel("log_linear").fit(W, a)
    assert m.coef_ == pytest.approx([0.2, -0.5], abs=0.15)


def test_rank_deficient_names_columns(toy_cohort):
    spec = TreatmentModelSpec(w_map=("1", "cov:L", "2*cov:L"))
    with pytest.raises(SingularFitError, match="2\\*cov:L"):
        fit_treatment_model(toy_cohort, spec)


def test_positivity_audit_warns():
    W = np.ones((10, 1))
    with pytest.warns(PositivityWarning):
        positivity_audit(W, np.ones(10))
    assert positivity_audit(W, np.r_[np.zeros(5), np.ones(5)])["min_p_zero"] == 0.5


# -- score statistic

def test_score_hand_value():
    cfg = GEstConfig(zeta=None, treatment=INTERCEPT, q_star=("1",))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PositivityWarning)
        res = score_statistic(two_subjects(y=(5.0, 7.0)), beta=0.0, config=cfg)
    assert res.theta_score[0] == pytest.approx(2.0)
    assert res.dof == 1 and res.statistic >= 0


def test_score_zero_instrument():
    cfg = GEstConfig(zeta=None, treatment=INTERCEPT, q_star=("0",))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PositivityWarning)
        res = score_statistic(two_subjects(), beta=0.0, config=cfg)
    assert res.theta_score[0] == 0.0 and res.statistic == 0.0 and res.p_value == 1.0


def test_score_empty_inclusion(co_small):
    c, _ = co_small
    cfg = GEstConfig(zeta=1000.0)
    with pytest.raises(DegenerateTestError):
        score_statistic(c, beta=2.0, psi=0.0, config=cfg, ratio=TimeRatioSpec("const"), target="psi")


def test_restriction_monotone(rc_small):
    c, _ = rc_small
    ratio = TimeRatioSpec("const")
    sizes = [score_statistic(c, 2.0, 0.5, GEstConfig(zeta=z), ratio=ratio).n_included for z in (0, 3, 6, 12)]
    assert sizes == sorted(sizes, reverse=True)


# -- estimators

def test_closed_form_toy():
    cfg = GEstConfig(zeta=None, treatment=INTERCEPT)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PositivityWarning)
        assert closed_form_beta(two_subjects(), config=cfg) == pytest.approx([2.0], abs=1e-12)


def test_closed_form_singular_without_exposure():
    c = two_subjects(gains=(0.0, 0.0))
    beta, info = closed_form_beta(c, config=GEstConfig(zeta=None, treatment=INTERCEPT), return_info=True)
    assert info["singular"] and np.isnan(beta).all()


def test_estimate_ey0_toy():
    assert estimate_ey0(two_subjects(), BlipSpec("const"), None, [2.0]) == (3.0, -4.0)
    ey0, diff = estimate_ey0(two_subjects(), BlipSpec("const"), None, [0.0])
    assert ey0 == 7.0 and diff == 0.0


def test_co_recovery_and_closed_form(co_small):
    c, truth = co_small
    res = g_estimate(c, BlipSpec("const"), None, GEstConfig(beta_grid=(-5, 5, 0.1)))
    assert abs(res.beta_hat[0] - 2.0) < 3 * res.beta_se[0]
    assert abs(res.diagnostics["closed_form"]["beta"][0] - res.beta_hat[0]) <= 0.1
    assert res.diff == pytest.approx(res.ey0_hat - res.ey_obs)
    assert abs(res.ey0_hat - truth.ey0) < 3 * res.ey0_se + 0.5
    lo, hi = res.confidence_set["beta[1]"][0]
    assert lo <= res.beta_hat[0] <= hi


def test_score_zero_at_estimate(co_small):
    c, _ = co_small
    cfg = GEstConfig(beta_grid=(-5, 5, 0.1))
    res = g_estimate(c, BlipSpec("const"), None, cfg)
    sc = score_statistic(c, res.beta_hat, config=cfg)
    assert abs(sc.theta_score[0]) < 1e-8 * max(1.0, np.abs(sc.variance).max() ** 0.5)


def test_bracket_error(co_small):
    c, _ = co_small
    with pytest.raises(BracketError) as info:
        g_estimate(c, BlipSpec("const"), None, GEstConfig(beta_grid=(5, 8, 0.5)))
    assert info.value.trace is not None


def test_scale_equivariance(co_small):
    c, _ = co_small
    cfg = GEstConfig(beta_grid=(-20, 20, 0.1))
    b1 = g_estimate(c, BlipSpec("const"), None, cfg).beta_hat[0]
    c3 = c.replace(utility=3.0 * c.utility)
    b3 = g_estimate(c3, BlipSpec("const"), None, cfg).beta_hat[0]
    assert b3 == pytest.approx(3 * b1, rel=1e-8)


def test_masked_rows_never_used(co_small):
    c, _ = co_small
    mask = SubgroupMask.from_rules(["month >= 8"])
    masked = mask_intractable(c, mask)
    cfg = GEstConfig()
    s1 = score_statistic(masked, 1.5, config=cfg)
    # same person-months removed by hand: zero their eligibility
    frame = c.frame()
    flag = np.zeros_like(frame.xi)
    flag[:, 8:] = True
    manual = frame.with_exposure(np.where(flag, 0.0, frame.exposure), frame.xi & ~flag)
    s2 = score_statistic(manual, 1.5, config=cfg)
    assert np.array_equal(s1.theta_score, s2.theta_score)


def test_restricted_estimation(rc_small):
    c, _ = rc_small
    cfg = GEstConfig(zeta=6.0, beta_grid=(-5, 5, 0.1), psi_grid=(-2, 3, 0.05))
    res = g_estimate(c, BlipSpec("const"), TimeRatioSpec("const"), cfg)
    assert res.psi_hat is not None and res.psi_se is not None
    assert abs(res.beta_hat[0] - 2.0) < 4 * res.beta_se[0]
    d = res.to_dict()
    assert set(d) >= {"beta_hat", "psi_hat", "ey0_hat", "diff", "confidence_set", "verdict"}


def test_sensitivity_rows_and_anchor(rc_small):
    c, _ = rc_small
    cfg = GEstConfig(beta_grid=(-5, 5, 0.1), psi_grid=(-2, 3, 0.05))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PositivityWarning)
        tab = sensitivity_zeta(c, BlipSpec("const"), TimeRatioSpec("const"), cfg, (3.0, 6.0, 1000.0), anchor=6.0)
    assert tab["zeta"].tolist() == [3.0, 6.0, 1000.0]
    assert tab["anchor"].tolist() == [False, True, False]
    # no person-month survives zeta 1000: recorded, not raised
    assert "DegenerateTestError" in tab["error"].iloc[2]
    assert tab["error"].iloc[0] == "" and tab["error"].iloc[1] == ""
    assert tab["excluded"].iloc[0] <= tab["excluded"].iloc[1]


def test_sensitivity_zero_zeta_matches_unrestricted(co_small):
    c, _ = co_small
    cfg = GEstConfig(zeta=None, beta_grid=(-5, 5, 0.1), psi_grid=(-1, 1, 0.05))
    ratio = TimeRatioSpec("const")
    base = g_estimate(c, BlipSpec("const"), ratio, cfg)
    tab = sensitivity_zeta(c, BlipSpec("const"), ratio, cfg, (0.0,), anchor=None)
    assert tab["beta[1]"].iloc[0] == pytest.approx(base.beta_hat[0], abs=1e-9)
    assert tab["psi[1]"].iloc[0] == pytest.approx(base.psi_hat[0], abs=1e-9)


def test_sensitivity_needs_values(co_small):
    with pytest.raises(ConfigError):
        sensitivity_zeta(co_small[0], zeta_list=())


def test_confidence_set_contains_estimate(co_small):
    c, _ = co_small
    cfg = GEstConfig(beta_grid=(-5, 5, 0.1))
    cs = confidence_set(c, BlipSpec("const"), None, cfg)
    res = g_estimate(c, BlipSpec("const"), None, cfg)
    assert any(lo <= res.beta_hat[0] <= hi for lo, hi in cs["beta[1]"])


def test_estimator_wrapper(co_small):
    c, _ = co_small
    est = GEstimator(BlipSpec("const"), None, GEstConfig(beta_grid=(-5, 5, 0.1))).fit(c)
    y0 = est.transform(c)
    assert y0.shape == (c.n,)
    assert np.mean(y0) == pytest.approx(est.result_.ey0_hat)


def test_config_validation():
    with pytest.raises(ConfigError):
        GEstConfig(zeta=-1)
    with pytest.raises(ConfigError):
        GEstConfig(zeta=6, chi=3)
    with pytest.raises(ConfigError):
        GEstConfig(variance="hc3")
    assert grid_points((0, 1, 0.1))[-1] == 1.0
    assert len(grid_points((0, 1, 0.1))) == 11


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_two_point_closed_form_property(seed):
    rng = np.random.default_rng(seed)
    g = rng.choice([0.5, 1.0, 2.0, 3.0], size=2, replace=False)
    beta = rng.normal()
    y = 1.0 + beta * g
    cfg = GEstConfig(zeta=None, treatment=INTERCEPT)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PositivityWarning)
        got = closed_form_beta(two_subjects(y=tuple(y), gains=tuple(g)), config=cfg)
    assert got[0] == pytest.approx(beta, abs=1e-9)
