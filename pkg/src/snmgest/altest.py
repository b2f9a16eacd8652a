"""IPTW and parametric g-formula estimators.

These are alternatives to g-estimation that model treatment (IPTW) or the
covariate and event processes (g-formula) instead of a structural nested
model.  Both target counterfactual quantities with exposure forced to zero,
optionally relative to a regime, a latent-period lag or an intractable
subgroup mask.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy.special import expit
from sklearn.base import BaseEstimator
from statsmodels.tools.sm_exceptions import PerfectSeparationError, PerfectSeparationWarning

from .cohort import Cohort, SubgroupMask
from .exceptions import ConfigError, UndefinedEstimateError
from .features import FeatureContext, check_covariates, parse_tokens
from .gest import PositivityWarning
from .regimes import Regime, residual_exposure, regime_indicators

POSITIVITY_FLOOR = 0.01


class ExtrapolationWarning(UserWarning):
    """Simulated covariate strata that never occurred in the fitting data."""


def _expand(tokens, cov_names):
    out = []
    for t in tokens:
        if t.endswith("cov:*"):
            out += [t[:-1] + c for c in cov_names]
        elif t.endswith("lag:*"):
            out += [t[:-1] + c for c in cov_names]
        else:
            out.append(t)
    return tuple(out)


def _logit(X, y):
    """Unpenalized logistic regression; returns coefficients."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PerfectSeparationWarning)
        try:
            res = sm.GLM(y, X, family=sm.families.Binomial()).fit()
        except PerfectSeparationError:
            res = sm.GLM(y, X, family=sm.families.Binomial()).fit_regularized(alpha=1e-6, L1_wt=0.0)
    return np.asarray(res.params, dtype=float)


# ---------------------------------------------------------------------------
# treatment views


@dataclass(frozen=True)
class TreatmentView:
    """Exposure, eligibility and covariates as seen by a weighting model.

    With ``chi > 0`` exposure and covariates are read ``chi`` months
    earlier (``A'(t) = A(t - chi)``, ``L'(t) = L(t - chi)``) while the
    event time keeps its original timing.  Months ``t < chi`` carry no
    exposure and baseline covariates only.
    """

    a: np.ndarray
    xi: np.ndarray
    covariates: np.ndarray
    cov_names: tuple
    event_time: np.ndarray
    utility: np.ndarray
    chi: int = 0

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def horizon(self):
        return self.a.shape[1]

    def context(self):
        n, H = self.a.shape
        m = np.broadcast_to(np.arange(H, dtype=float), (n, H))
        covs = {c: self.covariates[:, :H, k] for k, c in enumerate(self.cov_names)}
        lagged = {}
        for k, c in enumerate(self.cov_names):
            lag = np.zeros((n, H))
            lag[:, 1:] = self.covariates[:, : H - 1, k]
            lagged[c] = lag
        prev = np.zeros((n, H))
        prev[:, 1:] = self.a[:, :-1]
        with np.errstate(invalid="ignore"):
            post = (self.event_time[:, None] <= m).astype(float)
        return FeatureContext(m, covs, lagged, None, prev, post)

    def at_risk(self):
        """``X > m`` per person-month; censored subjects are at risk throughout."""
        x = np.where(np.isnan(self.event_time), np.inf, self.event_time)
        return x[:, None] > np.arange(self.horizon)[None, :]


def _shift(arr, chi, fill):
    if chi == 0:
        return arr
    out = np.empty_like(arr)
    out[:, chi:] = arr[:, :-chi] if chi < arr.shape[1] else arr[:, :0]
    out[:, :chi] = fill
    return out


def treatment_view(cohort: Cohort, regime: Optional[Regime] = None, mask: Optional[SubgroupMask] = None,
                   chi: int = 0):
    """Build the exposure view for a regime, an intractable mask and a lag.

    Parameters
    ----------
    regime : Regime, optional
        Exposure is the residual ``A_g`` over the allowed gain.
    mask : SubgroupMask, optional
        Exposure and eligibility are zeroed where ``IN(m) = 1``.
    chi : int
        Latent-period lag in months.
    """
    chi = int(chi)
    if chi < 0:
        raise ConfigError("the lag chi must be nonnegative")
    if regime is None or regime.is_zero:
        ex = cohort.exposure()
        a, xi = ex.a, ex.xi
    else:
        a, xi = residual_exposure(cohort, regime), regime_indicators(cohort, regime)
    if mask is not None:
        flag = mask.in_flag(cohort.covariates, cohort.cov_names, cohort.bmi, cohort.event_time, cohort.horizon)
        a = np.where(flag, 0.0, a)
        xi = xi & ~flag
    H = cohort.horizon
    cov = cohort.covariates[:, :H, :]
    if chi >= H and chi > 0:
        a, xi = np.zeros_like(a), np.zeros_like(xi)
        cov = np.repeat(cov[:, :1, :], H, axis=1)
    elif chi > 0:
        a = _shift(a, chi, 0.0)
        xi = _shift(xi, chi, False)
        base = cov[:, :1, :]
        shifted = np.empty_like(cov)
        shifted[:, chi:] = cov[:, : H - chi]
        shifted[:, :chi] = base
        cov = shifted
    return TreatmentView(np.asarray(a, float), np.asarray(xi, bool), cov, cohort.cov_names,
                         cohort.event_time, cohort.utility, chi)


def mlp_lag_views(cohort: Cohort, chi: int):
    """Latent-period view: exposure and covariates lagged by ``chi`` months.

    The event time is not shifted, so conditioning events such as ``X > m``
    keep their original timing.  ``chi = 0`` returns the unshifted view.
    """
    return treatment_view(cohort, chi=chi)


# ---------------------------------------------------------------------------
# zero-probability model


class ZeroProbModel(BaseEstimator):
    """Pooled logistic model for ``pr(A(m) = 0 | history)`` on eligible months.

    Parameters
    ----------
    features : sequence of str
        Feature tokens evaluated on the view; ``cov:*`` expands to every
        covariate.  Event-state terms (``post``) may be added.
    at_risk_only : bool
        Fit only on months with ``X > m``, as the survival weights require.
    """

    def __init__(self, features=("1", "cov:*"), at_risk_only=False):
        self.features = features
        self.at_risk_only = at_risk_only

    def _design(self, view):
        toks = parse_tokens(_expand(self.features, view.cov_names), view.cov_names)
        check_covariates(toks, view.cov_names)
        return view.context().matrix(toks, (view.n, view.horizon)), tuple(t.text for t in toks)

    def _rows(self, view):
        rows = view.xi.copy()
        if self.at_risk_only:
            rows &= view.at_risk()
        return rows

    def fit(self, data, regime=None, mask=None, chi=0):
        """Fit on a :class:`TreatmentView` or on a cohort (a view is built)."""
        view = data if isinstance(data, TreatmentView) else treatment_view(data, regime, mask, chi)
        W, names = self._design(view)
        rows = self._rows(view)
        if rows.sum() == 0:
            raise UndefinedEstimateError("no eligible person-months to fit the zero-probability model")
        z = (view.a[rows] == 0).astype(float)
        if z.min() == z.max():
            # degenerate treatment process: probability is constant
            self.coef_ = None
            self.constant_ = float(z[0])
        else:
            self.coef_ = _logit(W[rows], z)
            self.constant_ = None
        self.feature_names_ = names
        self.n_rows_ = int(rows.sum())
        return self

    def predict_zero(self, view):
        """Fitted ``pr(A(m) = 0 | .)`` on every person-month of ``view``."""
        if not hasattr(self, "feature_names_"):
            raise ConfigError("zero-probability model is not fitted")
        if self.coef_ is None:
            return np.full(view.a.shape, self.constant_)
        W, _ = self._design(view)
        return expit(W @ self.coef_)


def _probabilities(view, zero_model, fit_at_risk):
    if isinstance(zero_model, np.ndarray):
        p = np.asarray(zero_model, dtype=float)
        if p.shape != view.a.shape:
            raise ConfigError(f"probability array has shape {p.shape}; expected {view.a.shape}")
        return p
    if not view.xi.any():
        # nothing eligible: every weight factor is 1
        return np.ones(view.a.shape)
    model = zero_model if zero_model is not None else ZeroProbModel(at_risk_only=fit_at_risk)
    if not hasattr(model, "feature_names_"):
        model = model.fit(view)
    return model.predict_zero(view)


def _audit(p, xi):
    low = xi & (p < POSITIVITY_FLOOR)
    if low.any():
        warnings.warn(f"{int(low.sum())} eligible person-month(s) have fitted pr(A=0) below "
                      f"{POSITIVITY_FLOOR}", PositivityWarning, stacklevel=3)


def _log_factors(view, p):
    """Per person-month ``-log pr(A=0)`` where eligible, else 0."""
    with np.errstate(divide="ignore"):
        return np.where(view.xi, -np.log(p), 0.0)


@dataclass
class WeightedEstimate:
    """Point estimate with a standard error and the count of contributing subjects."""

    estimate: float
    se: float
    n_consistent: int
    weights: Optional[np.ndarray] = None

    def __float__(self):
        return float(self.estimate)


def _weighted_mean(y, keep, logw, normalized):
    n = y.shape[0]
    if not keep.any():
        raise UndefinedEstimateError("no subject's data are consistent with the intervention")
    w = np.where(keep, np.exp(logw), 0.0)
    if not np.all(np.isfinite(w)):
        raise UndefinedEstimateError("a consistent subject has an infinite weight (fitted pr(A=0) is zero)")
    if normalized:
        est = float(np.sum(w * y) / np.sum(w))
        se = float(np.sqrt(np.sum((w * (y - est)) ** 2)) / np.sum(w))
    else:
        contrib = w * y
        est = float(contrib.mean())
        se = float(contrib.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return WeightedEstimate(est, se, int(keep.sum()), w)


def iptw_mean_y0(cohort: Cohort, regime: Optional[Regime] = None, zero_model=None, normalized=True,
                 mask: Optional[SubgroupMask] = None, chi: int = 0):
    """IPTW estimate of the mean utility with exposure (over ``regime``) set to zero.

    Subjects whose exposure is zero in every month contribute ``Y`` with
    weight ``prod_k pr(A(k) = 0 | .)^(-Xi(k))``.

    Parameters
    ----------
    zero_model : ZeroProbModel or ndarray, optional
        A fitted model, an unfitted one (fitted here) or an (n, H) array of
        known probabilities.
    normalized : bool
        Ratio (Hajek) form when True, plain weighted mean otherwise.

    Returns
    -------
    WeightedEstimate

    Examples
    --------
    >>> from snmgest.cohort import Cohort
    >>> c = Cohort(list("abcd"), [[22, 22], [22, 22], [22, 23], [22, 23]], np.ones((4, 2), bool),
    ...            np.zeros((4, 2, 0)), (), [1, 1, 5, 5], [np.nan] * 4)
    >>> est = iptw_mean_y0(c)
    >>> est.estimate, est.weights.tolist()
    (1.0, [2.0, 2.0, 0.0, 0.0])
    """
    view = treatment_view(cohort, regime, mask, chi)
    p = _probabilities(view, zero_model, False)
    _audit(p, view.xi)
    keep = ~np.any(view.a > 0, axis=1)
    logw = _log_factors(view, p).sum(axis=1)
    return _weighted_mean(view.utility, keep, logw, normalized)


def iptw_survival(cohort: Cohort, regime: Optional[Regime] = None, zero_model=None, u_grid=(12.0,),
                  chi: int = 0, normalized=False):
    """IPTW estimate of ``P(X0 > u)`` on a grid.

    The weight at ``u`` multiplies ``1 / pr(A(m) = 0 | ., X > m)`` over
    eligible months ``m <= floor(u)``.  In ratio form the denominator
    averages each subject's weight over the months at risk up to ``u``.

    Returns
    -------
    pandas.DataFrame
        Columns ``u``, ``S`` and ``mc_se``.
    """
    view = treatment_view(cohort, regime, None, chi)
    p = _probabilities(view, zero_model, True)
    risk = view.at_risk()
    _audit(p, view.xi & risk)
    H = view.horizon
    lf = np.where(risk, _log_factors(view, p), 0.0)
    exposed = (view.a > 0) & risk
    cum_lf = np.cumsum(lf, axis=1)
    cum_exp = np.cumsum(exposed, axis=1)
    x = np.where(np.isnan(view.event_time), np.inf, view.event_time)
    rows = []
    for u in np.atleast_1d(np.asarray(u_grid, dtype=float)):
        k = int(min(np.floor(u), H - 1))
        if u < 0:
            rows.append({"u": float(u), "S": 1.0, "mc_se": 0.0})
            continue
        keep = cum_exp[:, k] == 0
        w = np.where(keep, np.exp(cum_lf[:, k]), 0.0)
        num = w * (x > u)
        if normalized:
            # weights over the months each subject is at risk up to u
            den = np.where(keep, np.exp(cum_lf[:, k]), 0.0)
            s = float(num.sum() / den.sum())
            se = float(np.sqrt(np.sum((num - s * den) ** 2)) / den.sum())
        else:
            s = float(num.mean())
            se = float(num.std(ddof=1) / np.sqrt(len(num)))
        rows.append({"u": float(u), "S": s, "mc_se": se})
    return pd.DataFrame(rows)


def iptw_intercal(cohort: Cohort, mask: SubgroupMask, chi: int, zero_model=None, normalized=True):
    """IPTW estimate of the mean utility when exposure is removed only outside ``IN``.

    Exposure and eligibility are first zeroed in flagged person-months and
    then lagged by the latent period ``chi``; a subject contributes when no
    lagged exposure remains.  The weight multiplies fitted ``pr(A=0)`` over
    all months, before and after the event.

    Raises
    ------
    ConfigError
        When the mask has an event window that is not shorter than ``chi``.
    """
    if mask.event_window is not None and not chi > mask.event_window:
        raise ConfigError(f"the latent period chi={chi} must exceed the mask's event window "
                          f"{mask.event_window}")
    view = treatment_view(cohort, None, mask, chi)
    p = _probabilities(view, zero_model, False)
    _audit(p, view.xi)
    keep = ~np.any(view.a > 0, axis=1)
    logw = _log_factors(view, p).sum(axis=1)
    return _weighted_mean(view.utility, keep, logw, normalized)


# ---------------------------------------------------------------------------
# g-formula


def _outcome_design(tokens, cov_base, cov_mean, sum_a, x, H):
    cols = []
    for t in tokens:
        if t == "1":
            cols.append(np.ones_like(sum_a))
        elif t.startswith("base:"):
            cols.append(cov_base[t[5:]])
        elif t.startswith("mean:"):
            cols.append(cov_mean[t[5:]])
        elif t == "sum_a":
            cols.append(sum_a)
        elif t == "x_min":
            cols.append(np.minimum(np.where(np.isnan(x), H, x), H))
        elif t == "event":
            cols.append((~np.isnan(x) & (x <= H)).astype(float))
        else:
            raise ConfigError(f"unknown outcome feature {t!r}; use 1, base:NAME, mean:NAME, sum_a, x_min, event")
    return np.column_stack(cols)


class HazardModel(BaseEstimator):
    """Discrete-time hazard of the event plus covariate transition models.

    Parameters
    ----------
    hazard_features : sequence of str
        Tokens for the monthly event logit, evaluated at month ``m``.
    transitions : dict, optional
        Time-varying binary covariate name -> tokens for its logit given the
        past (``lag:NAME``, ``prev_any`` and so on).  Undeclared covariates
        are treated as fixed at their baseline value.
    outcome_features : sequence of str
        Linear outcome model for mean-utility targets.  Tokens: ``1``,
        ``base:NAME``, ``mean:NAME``, ``sum_a``, ``x_min``, ``event``.
    unexposed_only : bool
        Fit the hazard only on months with no exposure so far.
    """

    def __init__(self, hazard_features=("1", "m", "cov:*"), transitions=None,
                 outcome_features=("1",), unexposed_only=False):
        self.hazard_features = hazard_features
        self.transitions = transitions
        self.outcome_features = outcome_features
        self.unexposed_only = unexposed_only

    def fit(self, cohort: Cohort, regime: Optional[Regime] = None):
        view = treatment_view(cohort, regime)
        names = view.cov_names
        n, H = view.n, view.horizon
        ctx = view.context()
        x = np.where(np.isnan(view.event_time), np.inf, view.event_time)
        m = np.arange(H)[None, :]
        risk = x[:, None] >= m
        event = risk & (x[:, None] < m + 1)
        rows = risk.copy()
        if self.unexposed_only:
            rows &= np.cumsum(view.a > 0, axis=1) == 0
        htoks = parse_tokens(_expand(self.hazard_features, names), names)
        check_covariates(htoks, names)
        Wh = ctx.matrix(htoks, (n, H))
        self.hazard_tokens_ = htoks
        self.hazard_coef_ = _logit(Wh[rows], event[rows].astype(float))
        self.transition_tokens_, self.transition_coef_ = {}, {}
        trans = dict(self.transitions or {})
        for name, feats in trans.items():
            if name not in names:
                raise ConfigError(f"transition declared for unknown covariate {name!r}")
            k = names.index(name)
            vals = view.covariates[:, :H, k]
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise ConfigError(f"covariate {name!r} must be binary (0/1) for transition modeling")
            toks = parse_tokens(_expand(feats, names), names)
            check_covariates(toks, names)
            for t in toks:
                if any(f[4:] in trans for f in t.factors if f.startswith("cov:")):
                    raise ConfigError(f"transition feature {t.text!r} uses a time-varying covariate at the "
                                      "current month; use lag:NAME")
            Wt = ctx.matrix(toks, (n, H))
            trows = np.zeros((n, H), dtype=bool)
            trows[:, 1:] = x[:, None] > m[:, 1:]
            self.transition_tokens_[name] = toks
            self.transition_coef_[name] = _logit(Wt[trows], vals[trows])
        self.time_varying_ = tuple(trans)
        disc = [names.index(c) for c in names if np.all(np.isin(view.covariates[:, :H, names.index(c)], (0.0, 1.0)))]
        self.seen_strata_ = {tuple(r) for r in view.covariates[:, :H, :][..., disc].reshape(-1, len(disc))} \
            if disc else set()
        self.discrete_idx_ = disc
        self.baseline_ = view.covariates[:, 0, :].copy()
        self.cov_names_ = names
        self.horizon_ = H
        # outcome model on observed data
        cov_base = {c: view.covariates[:, 0, k] for k, c in enumerate(names)}
        cov_mean = {c: view.covariates[:, :H, k].mean(axis=1) for k, c in enumerate(names)}
        Wy = _outcome_design(self.outcome_features, cov_base, cov_mean, view.a.sum(axis=1),
                             view.event_time, H)
        self.outcome_coef_ = np.linalg.lstsq(Wy, view.utility, rcond=None)[0]
        return self

    def _simulate_block(self, seed, size, need_paths):
        rng = np.random.default_rng(seed)
        names, H = self.cov_names_, self.horizon_
        idx = rng.integers(0, self.baseline_.shape[0], size)
        cov = np.repeat(self.baseline_[idx][:, None, :], H, axis=1)
        surv = np.ones((size, H + 1))
        hz = np.zeros((size, H))
        unseen = 0
        zeros = np.zeros(size)
        for m in range(H):
            if m > 0:
                for name in self.time_varying_:
                    k = names.index(name)
                    ctx = FeatureContext(float(m), {c: cov[:, m - 1, j] for j, c in enumerate(names)},
                                         {c: cov[:, m - 1, j] for j, c in enumerate(names)}, None, zeros, zeros)
                    Wt = np.column_stack([np.broadcast_to(ctx.evaluate(t), (size,))
                                          for t in self.transition_tokens_[name]])
                    cov[:, m, k] = rng.random(size) < expit(Wt @ self.transition_coef_[name])
            if self.discrete_idx_:
                strata, counts = np.unique(cov[:, m, self.discrete_idx_], axis=0, return_counts=True)
                unseen += int(sum(c for r, c in zip(strata, counts) if tuple(r) not in self.seen_strata_))
            lag = {c: (cov[:, m - 1, j] if m else zeros) for j, c in enumerate(names)}
            ctx = FeatureContext(float(m), {c: cov[:, m, j] for j, c in enumerate(names)}, lag, None, zeros, zeros)
            Wh = np.column_stack([np.broadcast_to(ctx.evaluate(t), (size,)) for t in self.hazard_tokens_])
            hz[:, m] = expit(Wh @ self.hazard_coef_)
            surv[:, m + 1] = surv[:, m] * (1.0 - hz[:, m])
        return {"surv": surv, "hz": hz, "cov": cov if need_paths else None, "unseen": unseen, "rng": rng}

    def simulate(self, draws, seed=0, threads=1, block=2000, need_paths=False):
        """Monte Carlo covariate paths with exposure forced to zero.

        Blocks use seeds spawned from ``seed`` so results do not depend on
        ``threads``.
        """
        sizes = [block] * (draws // block) + ([draws % block] if draws % block else [])
        seeds = np.random.SeedSequence(seed).spawn(len(sizes))
        jobs = list(zip(seeds, sizes))
        if threads and threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                out = list(pool.map(lambda j: self._simulate_block(j[0], j[1], need_paths), jobs))
        else:
            out = [self._simulate_block(s, k, need_paths) for s, k in jobs]
        unseen = sum(o["unseen"] for o in out)
        if unseen:
            warnings.warn(f"{unseen} simulated covariate stratum/strata were not seen when fitting; "
                          "model predictions are extrapolated", ExtrapolationWarning, stacklevel=2)
        return out


def _surv_at(surv, hz, u, H):
    k = int(np.floor(u))
    if u <= 0:
        return np.ones(surv.shape[0])
    if k >= H:
        return surv[:, H]
    return surv[:, k] * (1.0 - hz[:, k] * (u - k))


def gformula_survival(cohort: Cohort, regime: Optional[Regime] = None, hazard_model: HazardModel = None,
                      u_grid=(12.0,), mc_draws=10000, seed=0, threads=1):
    """Monte Carlo g-formula for ``P(X0 > u)``.

    Covariate paths are drawn from the fitted transitions with exposure
    set to zero; each path contributes its survival probability from the
    fitted discrete-time hazard, uniform within a month.

    Examples
    --------
    Hazards 0.1 and 0.3 in two equally sized baseline strata give
    ``S(2) = 0.5 * 0.9**2 + 0.5 * 0.7**2 = 0.65``.

    Returns
    -------
    pandas.DataFrame
        Columns ``u``, ``S`` and ``mc_se``.
    """
    model = hazard_model if hazard_model is not None else HazardModel()
    if not hasattr(model, "hazard_coef_"):
        model = model.fit(cohort, regime)
    blocks = model.simulate(int(mc_draws), seed, threads)
    H = model.horizon_
    rows = []
    for u in np.atleast_1d(np.asarray(u_grid, dtype=float)):
        s = np.concatenate([_surv_at(b["surv"], b["hz"], u, H) for b in blocks])
        rows.append({"u": float(u), "S": float(s.mean()), "mc_se": float(s.std(ddof=1) / np.sqrt(len(s)))})
    return pd.DataFrame(rows)


def gformula_mean_y0(cohort: Cohort, regime: Optional[Regime] = None, hazard_model: HazardModel = None,
                     mc_draws=10000, seed=0, threads=1):
    """Monte Carlo g-formula for the mean utility with exposure set to zero.

    Event times are drawn from the fitted hazard along each simulated
    covariate path and fed, with ``sum_a = 0``, into the fitted outcome
    model.

    Returns
    -------
    WeightedEstimate
        ``se`` is the Monte Carlo standard error.
    """
    model = hazard_model if hazard_model is not None else HazardModel()
    if not hasattr(model, "hazard_coef_"):
        model = model.fit(cohort, regime)
    blocks = model.simulate(int(mc_draws), seed, threads, need_paths=True)
    H = model.horizon_
    names = model.cov_names_
    vals = []
    for b in blocks:
        rng = b["rng"]
        size = b["hz"].shape[0]
        hit = rng.random((size, H)) < b["hz"]
        first = np.where(hit.any(axis=1), hit.argmax(axis=1), H)
        x = np.where(first < H, first + rng.random(size), np.nan)
        cov = b["cov"]
        cov_base = {c: cov[:, 0, k] for k, c in enumerate(names)}
        cov_mean = {c: cov[:, :, k].mean(axis=1) for k, c in enumerate(names)}
        W = _outcome_design(model.outcome_features, cov_base, cov_mean, np.zeros(size), x, H)
        vals.append(W @ model.outcome_coef_)
    y = np.concatenate(vals)
    return WeightedEstimate(float(y.mean()), float(y.std(ddof=1) / np.sqrt(len(y))), len(y))


def survival_table(u_grid: Sequence[float], s, mc_se):
    """Assemble a ``(u, S, mc_se)`` table."""
    return pd.DataFrame({"u": np.asarray(u_grid, float), "S": np.asarray(s, float),
                         "mc_se": np.asarray(mc_se, float)})
