import numpy as np
import pytest
from hypothesis import strategies as st

from snmgest.cohort import Cohort


def random_cohort(seed, n=6, horizon=5, p_event=0.6, cov=True):
    """Small valid cohort with random BMI walks, events and one binary covariate."""
    rng = np.random.default_rng(seed)
    steps = rng.choice([-0.5, 0.0, 0.25, 0.5, 1.0], size=(n, horizon))
    bmi = np.concatenate([np.full((n, 1), 22.0), 22.0 + np.cumsum(steps, axis=1)], axis=1)
    event = np.where(rng.random(n) < p_event, rng.uniform(0.2, horizon, n), np.nan)
    alive = np.ones((n, horizon + 1), bool)
    names = ("L",) if cov else ()
    covs = rng.integers(0, 2, size=(n, horizon + 1, len(names))).astype(float)
    util = rng.normal(10, 2, n)
    return Cohort([f"s{i}" for i in range(n)], bmi, alive, covs, names, util, event)


@st.composite
def cohorts(draw, max_n=8, max_h=6):
    seed = draw(st.integers(0, 2**31 - 1))
    n = draw(st.integers(1, max_n))
    h = draw(st.integers(1, max_h))
    return random_cohort(seed, n, h)


@pytest.fixture
def toy_cohort():
    return random_cohort(0, n=8, horizon=6)
