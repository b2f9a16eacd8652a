import numpy as np
import pytest

from snmgest.ctf import BlipSpec, TimeRatioSpec, x_transform_all, y_transform_all
from snmgest.exceptions import ConfigError, SpecError
from snmgest.regimes import Regime
from snmgest.simlab import (GroundTruth, ScenarioSpec, qq_oracle, replay, scenario, simulate_cohort,
                            simulate_paradigm, true_counterfactual_mean, true_survival)


@pytest.fixture(scope="module")
def rc():
    return simulate_cohort(scenario("rc_cd", n=500, horizon=48, seed=9))


def test_same_seed_same_cohort():
    a, ta = simulate_cohort(scenario("co", n=50, horizon=8, seed=1))
    b, tb = simulate_cohort(scenario("co", n=50, horizon=8, seed=1))
    assert np.array_equal(a.bmi, b.bmi)
    assert np.array_equal(a.utility, b.utility)
    assert np.array_equal(ta.y0, tb.y0)
    c, _ = simulate_cohort(scenario("co", n=50, horizon=8, seed=2))
    assert not np.array_equal(a.bmi, c.bmi)


def test_rank_preservation_y(rc):
    c, truth = rc
    f = c.frame()
    y = y_transform_all(BlipSpec("const"), f, truth.spec.beta_true)
    assert np.allclose(y[:, 0], truth.y0, atol=1e-9)


def test_rank_preservation_x(rc):
    c, truth = rc
    f = c.frame()
    x = x_transform_all(TimeRatioSpec("const"), f, truth.spec.psi_true)
    ok = ~f.censored
    assert ok.sum() > 50
    assert np.allclose(x[ok], truth.x_m[ok], atol=1e-9)
    assert np.allclose(x[ok, 0], truth.x0[ok], atol=1e-9)


def test_null_scenario_is_effect_free():
    c, truth = simulate_cohort(scenario("null", n=300, horizon=24, seed=5))
    assert np.array_equal(c.utility, truth.y0)
    ok = ~np.isnan(c.event_time)
    assert np.allclose(c.event_time[ok], truth.x0[ok])


def test_cd_audit(rc):
    _, truth = rc
    assert truth.cd_audit() == 1.0
    _, co = simulate_cohort(scenario("co", n=20, horizon=4))
    assert co.cd_audit() == 1.0


def test_replay_zero_regime_gives_y0(rc):
    _, truth = rc
    r = replay(truth.spec, Regime.zero())
    assert np.allclose(r["y"], truth.y0, atol=1e-9)
    assert not r["a"].any()
    assert true_counterfactual_mean(truth, Regime.zero()) == pytest.approx(truth.ey0, abs=1e-9)


def test_replay_unbounded_regime_gives_observed(rc):
    c, truth = rc
    r = replay(truth.spec, Regime.static(1000.0))
    assert np.allclose(r["y"], c.utility, atol=1e-9)


def test_true_survival_monotone(rc):
    _, truth = rc
    s = true_survival(truth, [6, 12, 24, 48])
    assert np.all(np.diff(s) <= 0)
    assert s[0] <= 1.0


def test_truth_json_round_trip(tmp_path):
    _, truth = simulate_cohort(scenario("rc_cd", n=20, horizon=6, seed=3))
    truth.to_json(tmp_path / "t.json")
    back = GroundTruth.from_json(str(tmp_path / "t.json"))
    assert back.spec == truth.spec
    assert np.array_equal(back.u, truth.u)
    assert np.allclose(back.y0, truth.y0)


def test_spec_checks():
    with pytest.raises(SpecError):
        ScenarioSpec(beta_true=(1.0, 2.0)).check()
    with pytest.raises(SpecError):
        ScenarioSpec(psi_true=(0.5,)).check()
    with pytest.raises(SpecError):
        ScenarioSpec(zero_int=-20.0, zero_l=0.0, zero_u=0.0, zero_v=0.0).check()
    with pytest.raises(ConfigError):
        scenario("nope")
    with pytest.raises(ConfigError):
        ScenarioSpec.from_dict({"n": 5, "bogus": 1})


def test_paradigm_identities():
    c, truth = simulate_paradigm(n=400, seed=1)
    a = c.exposure().a[:, 0]
    assert set(np.unique(a)) <= {0.0, 1.0}
    ok = ~np.isnan(c.event_time)
    assert np.allclose(c.event_time[ok] * np.exp(0.5 * a[ok]), truth.x0[ok])
    assert np.allclose(c.utility - truth.gamma_sum, truth.y0)


def test_qq_exponential_doubling():
    rng = np.random.default_rng(0)
    x = rng.exponential(1.0, 5000)
    x0 = rng.exponential(2.0, 5000)
    qq = qq_oracle({1: x}, {1: x0})
    q = np.quantile(x, np.linspace(0.05, 0.95, 19))
    assert np.all(np.abs(qq(q, 1) / (2 * q) - 1) < 0.1)


def test_qq_paradigm_recovers_time_ratio():
    psi = 0.5
    c, truth = simulate_paradigm(n=5000, psi=psi, seed=3, p_zero_u=0.0)
    a = c.exposure().a[:, 0]
    ok = ~np.isnan(c.event_time) & (a == 1)
    # event times are only seen below 1; compare on the uncensored part of both samples
    x0 = truth.x0[a == 1]
    qq = qq_oracle({1: c.event_time[ok]}, {1: x0[x0 * np.exp(-psi) < 1]})
    q = np.quantile(c.event_time[ok], np.linspace(0.05, 0.95, 19))
    assert np.all(np.abs(qq(q, 1) / (q * np.exp(psi)) - 1) < 0.1)


def test_no_unmeasured_confounding_given_u(rc):
    c, truth = rc
    f = c.frame()
    H = f.horizon
    ym = y_transform_all(BlipSpec("const"), f, truth.spec.beta_true)[:, :H]
    rows = f.xi & ~truth.u
    i, m = np.nonzero(rows)
    key = m * 4 + 2 * f.covariates[i, m, 0] + f.covariates[i, m, 1]
    a, y = f.exposure[i, m], ym[i, m]
    for arr in (a, y):
        means = np.bincount(key.astype(int), weights=arr) / np.bincount(key.astype(int))
        arr -= means[key.astype(int)]
    per = np.bincount(i, weights=a * y, minlength=c.n)
    z = per.sum() / np.sqrt(np.sum(per ** 2))
    assert abs(z) < 3


def test_qq_identity_arm_and_errors():
    rng = np.random.default_rng(1)
    s = rng.exponential(size=800)
    qq = qq_oracle({0: s}, {0: s})
    q = np.quantile(s, [0.2, 0.5, 0.8])
    assert np.allclose(qq(q, 0), q, rtol=0.02)
    with pytest.raises(ConfigError):
        qq(1.0, 1)
    with pytest.raises(ConfigError):
        qq_oracle({0: s}, {1: s})
    with pytest.warns(UserWarning):
        qq_oracle({0: s[:10]}, {0: s[:10]})
