import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snmgest.cohort import Cohort, SubjectHistory
from snmgest.ctf import (BlipSpec, TimeRatioSpec, TransformInput, blip_eval, blip_features, censor_floor,
                         censor_floor_all, omega_all, x_transform, x_transform_all, y_transform,
                         y_transform_all)
from snmgest.exceptions import ConfigError, DataError

import oracle
from conftest import cohorts

LN2 = math.log(2)
# frozen from oracle.x_m with A = (1, 0, 1), X = 2.5, psi = ln 2
X_TOY = [4.0, 3.0, 3.0, 2.5]


def test_blip_const():
    assert blip_eval(BlipSpec("const"), 0, 1.0, beta=2.0) == 2.0


@pytest.mark.parametrize("spec, beta", [
    (BlipSpec("const"), [3.0]),
    (BlipSpec("linear_time"), [1.0, 2.0]),
    (BlipSpec("covariate", ("cov:L",)), [1.0, -2.0]),
    (BlipSpec("x_dependent", ("1", "x")), [1.0, 0.5]),
])
def test_blip_zero_at_zero_exposure(spec, beta):
    assert blip_eval(spec, 3, 0.0, {"L": 1.0}, x=5.0, beta=beta) == 0.0
    assert blip_eval(spec, 3, 2.0, {"L": 1.0}, x=5.0, beta=np.zeros(len(beta))) == 0.0


def test_blip_x_dependent_hand_value():
    spec = BlipSpec("x_dependent", ("1", "x"))
    assert blip_eval(spec, 0, 2.0, x=4.0, beta=[1.0, 0.5]) == 6.0


def test_blip_x_required():
    with pytest.raises(ConfigError):
        blip_eval(BlipSpec("x_dependent", ("1", "x")), 0, 1.0, beta=[1.0, 1.0])


def test_blip_families_and_dims():
    assert BlipSpec("linear_time").beta_dim == 2
    assert BlipSpec("concave").features == ("1", "-a")
    with pytest.raises(ConfigError):
        BlipSpec("const", ("x",))
    with pytest.raises(ConfigError):
        BlipSpec("x_dependent")
    with pytest.raises(ConfigError):
        BlipSpec("nope")
    with pytest.raises(ConfigError):
        TimeRatioSpec("covariate", ("a",))


def test_beta_dimension_checked():
    inp = TransformInput(exposure=[1.0], utility=1.0)
    with pytest.raises(ConfigError):
        y_transform(BlipSpec("linear_time"), inp, 0, [1.0])


def test_y_transform_hand_values():
    inp = TransformInput(exposure=[1.0, 0.0, 1.0], utility=10.0)
    spec = BlipSpec("const")
    assert y_transform(spec, inp, 0, 2.0) == 6.0
    assert y_transform(spec, inp, 2, 2.0) == 8.0
    assert y_transform(spec, inp, 3, 2.0) == 10.0
    assert oracle.y_m(10.0, [1, 0, 1], 2.0, 0) == 6.0


def test_y_transform_zero_exposure_any_beta():
    inp = TransformInput(exposure=[0.0, 0.0], utility=4.0)
    for b in (-3.0, 0.0, 7.5):
        assert y_transform(BlipSpec("const"), inp, 0, b) == 4.0


def test_x_transform_hand_values():
    inp = TransformInput(exposure=[1.0, 0.0, 1.0], event_time=2.5)
    got = [x_transform(TimeRatioSpec("const"), inp, m, LN2) for m in range(4)]
    assert got == pytest.approx(X_TOY, abs=1e-12)
    assert [oracle.x_m(2.5, [1, 0, 1], LN2, m) for m in range(4)] == pytest.approx(X_TOY, abs=1e-12)


def test_x_transform_past_event_branch():
    inp = TransformInput(exposure=[1.0, 1.0, 1.0], event_time=1.5)
    assert x_transform(TimeRatioSpec("const"), inp, 2, 0.7) == 1.5


def test_x_transform_censored_rejected():
    with pytest.raises(DataError):
        x_transform(TimeRatioSpec("const"), TransformInput(exposure=[1.0]), 0, 0.1)


def _frame(exposures, events, utility=None):
    n, H = np.shape(exposures)
    bmi = np.concatenate([np.full((n, 1), 20.0), 20.0 + np.cumsum(exposures, axis=1)], axis=1)
    c = Cohort([f"s{i}" for i in range(n)], bmi, np.ones((n, H + 1), bool), np.zeros((n, H + 1, 0)), (),
               np.zeros(n) if utility is None else utility, events, check=False)
    return c.frame()


def test_censor_floor_null_psi():
    f = _frame([[0, 0, 0], [1, 0, 1]], [np.nan, 2.5])
    k, c = censor_floor(TimeRatioSpec("const"), f, 0, 0.0)
    assert k == 3.0
    assert c.tolist() == [3.0, 2.5]


def test_censor_floor_hand_value():
    f = _frame([[1, 1, 1], [0, 0, 0]], [np.nan, 1.0])
    k, _ = censor_floor(TimeRatioSpec("const"), f, 0, LN2)
    assert k == pytest.approx(6.0)
    assert oracle.horizon_integral([1, 1, 1], LN2, 0) == pytest.approx(6.0)


def test_censor_floor_without_censoring():
    f = _frame([[1, 0], [0, 1]], [1.5, 0.5])
    k, c = censor_floor_all(TimeRatioSpec("const"), f, 0.3)
    assert np.all(np.isinf(k))
    assert np.array_equal(c, x_transform_all(TimeRatioSpec("const"), f, 0.3))


def test_omega_zero_when_psi_or_a_zero(toy_cohort):
    spec = TimeRatioSpec("covariate", ("cov:L",))
    assert not omega_all(spec, toy_cohort, [0.0, 0.0]).any()
    w = omega_all(spec, toy_cohort, [0.4, -0.2])
    assert not w[toy_cohort.exposure().a == 0].any()


# -- properties

@settings(max_examples=60, deadline=None)
@given(cohorts())
def test_null_parameters_are_identities(c):
    f = c.frame()
    y = y_transform_all(BlipSpec("covariate", ("cov:L",)), f, [0.0, 0.0])
    assert np.array_equal(y, np.repeat(f.utility[:, None], f.horizon + 1, axis=1))
    x = x_transform_all(TimeRatioSpec("const"), f, 0.0)
    assert np.array_equal(x, np.repeat(f.event_time[:, None], f.horizon + 1, axis=1), equal_nan=True)


@settings(max_examples=40, deadline=None)
@given(cohorts(), st.floats(-1.5, 1.5))
def test_x_transform_matches_oracle(c, psi):
    f = c.frame()
    xs = x_transform_all(TimeRatioSpec("const"), f, psi)
    for i in np.flatnonzero(~f.censored):
        for m in range(f.horizon + 1):
            ref = oracle.x_m(float(f.event_time[i]), f.exposure[i].tolist(), psi, m)
            assert xs[i, m] == pytest.approx(ref, rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(cohorts(), st.floats(-1.0, 1.0))
def test_one_step_recursion(c, psi):
    f = c.frame()
    xs = x_transform_all(TimeRatioSpec("const"), f, psi)
    e = np.exp(omega_all(TimeRatioSpec("const"), f, psi))
    for m in range(f.horizon):
        nxt = xs[:, m + 1]
        step = m + e[:, m] * np.minimum(nxt - m, 1.0) + np.maximum(nxt - m - 1.0, 0.0)
        expect = np.where(f.event_time <= m, f.event_time, step)
        ok = ~f.censored
        assert np.allclose(xs[ok, m], expect[ok], rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 4.9), st.floats(0.05, 4.9), st.floats(-1.0, 1.0),
       st.lists(st.sampled_from([0.0, 0.5, 1.0]), min_size=5, max_size=5))
def test_x_transform_monotone_in_x(x1, x2, psi, a):
    lo, hi = sorted((x1, x2))
    if hi - lo < 1e-9:
        return
    spec = TimeRatioSpec("const")
    for m in range(5):
        v1 = x_transform(spec, TransformInput(exposure=a, event_time=lo), m, psi)
        v2 = x_transform(spec, TransformInput(exposure=a, event_time=hi), m, psi)
        assert v1 < v2


@settings(max_examples=40, deadline=None)
@given(cohorts(), st.floats(-1.0, 1.0), st.floats(0.0, 4.0))
def test_censor_floor_restriction_subset(c, psi, zeta):
    f = c.frame()
    spec = TimeRatioSpec("const")
    _, cm = censor_floor_all(spec, f, psi)
    xm = x_transform_all(spec, f, psi)
    m = np.arange(f.horizon + 1)[None, :]
    passed = cm > m + zeta
    ok = ~f.censored
    assert np.all(xm[ok][passed[ok]] > (m + zeta).repeat(ok.sum(), axis=0)[passed[ok]])
    assert np.all(cm[ok] <= xm[ok] + 1e-12)


def test_x_dependent_blip_uses_series():
    f = _frame([[1.0, 1.0]], [1.5], utility=np.array([5.0]))
    spec = BlipSpec("x_dependent", ("x_resid",))
    F = blip_features(spec, f, x_series=np.array([[3.0, 3.0]]))
    assert F[0, :, 0].tolist() == [3.0, 2.0]
    with pytest.raises(ConfigError):
        blip_features(spec, f)


def test_y_transform_requires_series_length():
    inp = TransformInput(exposure=[1.0, 1.0], utility=1.0, event_time=1.0)
    with pytest.raises(ConfigError):
        y_transform(BlipSpec("x_dependent", ("x",)), inp, 0, [1.0], x_series=[1.0, 2.0, 3.0, 4.0])
