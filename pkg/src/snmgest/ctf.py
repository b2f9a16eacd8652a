"""Counterfactual transforms.

Blip functions ``gamma_m(a, history, x; beta) = a * beta' R_m`` define the
outcome model, and time-ratio functions ``omega(a, L; psi) = a * psi' G``
define the event-time model.  From them we compute

* ``Y_m(beta) = Y - sum_{j >= m} gamma_j``
* ``X_m(psi) = X`` if ``X <= m``; otherwise
  ``m + sum_{j=m}^{floor(X)-1} exp(omega_j) + (X - floor(X)) exp(omega_floor(X))``
* the censoring floor ``K_m(psi)`` and ``C_m(psi) = min(X_m(psi), K_m(psi))``.

All sums are closed form over the monthly grid.  Array functions work on
an :class:`~snmgest.cohort.AnalysisFrame`; scalar wrappers serve single
subjects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cohort import AnalysisFrame, as_frame
from .exceptions import ConfigError, DataError
from .features import FeatureContext, check_covariates, parse_tokens

BLIP_FAMILIES = ("const", "linear_time", "covariate", "x_dependent", "concave")
RATIO_FAMILIES = ("const", "covariate")


def _as_tuple(features):
    if features is None:
        return None
    if isinstance(features, str):
        return (features,)
    return tuple(features)


@dataclass(frozen=True)
class BlipSpec:
    """Blip family ``gamma_m = a * beta' R_m``.

    Parameters
    ----------
    family : str
        One of ``const``, ``linear_time``, ``covariate``, ``x_dependent`` or
        ``concave``.
    features : tuple of str, optional
        Tokens defining ``R_m`` (see :mod:`snmgest.features`).  Families
        other than ``x_dependent`` have defaults; extra covariate terms for
        ``covariate`` and ``concave`` are appended to the default.
    threshold : float, optional
        Threshold for ``x_le`` / ``x_gt`` tokens.

    Examples
    --------
    >>> BlipSpec("const").beta_dim
    1
    >>> BlipSpec("concave", ("cov:L",)).features
    ('1', '-a', 'cov:L')
    """

    family: str = "const"
    features: Optional[tuple] = None
    threshold: Optional[float] = None
    names: Optional[tuple] = None

    def __post_init__(self):
        if self.family not in BLIP_FAMILIES:
            raise ConfigError(f"unknown blip family {self.family!r}; expected one of {BLIP_FAMILIES}")
        extra = _as_tuple(self.features) or ()
        if self.family == "const":
            feats = ("1",) if not extra else extra
        elif self.family == "linear_time":
            feats = ("1", "m") if not extra else extra
        elif self.family == "covariate":
            feats = extra if extra and extra[0] == "1" else ("1",) + extra
        elif self.family == "concave":
            feats = extra if extra[:2] == ("1", "-a") else ("1", "-a") + extra
        else:
            if not extra:
                raise ConfigError("x_dependent blip requires an explicit feature list")
            feats = extra
        object.__setattr__(self, "features", feats)
        toks = parse_tokens(feats)
        if self.family == "x_dependent" and not any(t.uses_x for t in toks):
            raise ConfigError("x_dependent blip needs at least one event-time feature")
        if self.family != "x_dependent" and any(t.uses_x for t in toks):
            raise ConfigError(f"event-time features are only allowed in the x_dependent family")
        if any(t.uses_x and t.factors and ("x_le" in t.factors or "x_gt" in t.factors) for t in toks) \
                and self.threshold is None:
            raise ConfigError("x_le / x_gt features need a threshold")
        names = _as_tuple(self.names) or tuple(f"beta[{t}]" for t in feats)
        if len(names) != len(feats):
            raise ConfigError("blip coordinate names must match the feature list")
        object.__setattr__(self, "names", names)

    @property
    def beta_dim(self):
        return len(self.features)

    @property
    def uses_x(self):
        return any(t.uses_x for t in parse_tokens(self.features))

    def tokens(self, cov_names=()):
        toks = parse_tokens(self.features, cov_names)
        check_covariates(toks, cov_names)
        return toks

    def check_beta(self, beta):
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        if beta.shape != (self.beta_dim,):
            raise ConfigError(f"beta has dimension {beta.shape[0]}, blip expects {self.beta_dim}")
        return beta


@dataclass(frozen=True)
class TimeRatioSpec:
    """Time-ratio family ``omega = a * psi' G``.

    ``const`` uses ``G = 1``; ``covariate`` uses ``G = (1, L...)`` with the
    covariate tokens given in ``features``.
    """

    family: str = "const"
    features: Optional[tuple] = None
    names: Optional[tuple] = None

    def __post_init__(self):
        if self.family not in RATIO_FAMILIES:
            raise ConfigError(f"unknown ratio family {self.family!r}; expected one of {RATIO_FAMILIES}")
        extra = _as_tuple(self.features) or ()
        if self.family == "const":
            feats = ("1",)
        else:
            feats = extra if extra and extra[0] == "1" else ("1",) + extra
        toks = parse_tokens(feats)
        if any(t.uses_x or t.uses_a for t in toks):
            raise ConfigError("time-ratio features may depend only on measured history")
        object.__setattr__(self, "features", feats)
        names = _as_tuple(self.names) or tuple(f"psi[{t}]" for t in feats)
        object.__setattr__(self, "names", names)

    @property
    def psi_dim(self):
        return len(self.features)

    def tokens(self, cov_names=()):
        toks = parse_tokens(self.features, cov_names)
        check_covariates(toks, cov_names)
        return toks

    def check_psi(self, psi):
        psi = np.atleast_1d(np.asarray(psi, dtype=float))
        if psi.shape != (self.psi_dim,):
            raise ConfigError(f"psi has dimension {psi.shape[0]}, ratio model expects {self.psi_dim}")
        return psi


@dataclass(frozen=True)
class TransformInput:
    """Data of a single subject for the scalar transform wrappers.

    Parameters
    ----------
    exposure : array, shape (H,)
        Either the plain gain or a regime residual.
    utility : float
    event_time : float or None
        ``None`` for censored subjects.
    covariates : array, shape (H + 1, p), optional
    cov_names : tuple of str
    bmi : array, shape (H + 1,), optional
    """

    exposure: np.ndarray
    utility: float = 0.0
    event_time: Optional[float] = None
    covariates: Optional[np.ndarray] = None
    cov_names: tuple = ()
    bmi: Optional[np.ndarray] = None

    @property
    def horizon(self):
        return len(self.exposure)

    def frame(self):
        a = np.asarray(self.exposure, dtype=float)[None, :]
        H = a.shape[1]
        p = len(self.cov_names)
        cov = np.zeros((1, H + 1, p)) if self.covariates is None else \
            np.asarray(self.covariates, dtype=float).reshape(1, H + 1, p)
        bmi = np.zeros((1, H + 1)) if self.bmi is None else np.asarray(self.bmi, float).reshape(1, H + 1)
        x = np.nan if self.event_time is None else float(self.event_time)
        return AnalysisFrame(a, a > 0, cov, tuple(self.cov_names), bmi,
                             np.array([float(self.utility)]), np.array([x]), np.array(["s0"], dtype=object))


# ---------------------------------------------------------------------------
# array transforms


def blip_features(spec: BlipSpec, frame: AnalysisFrame, x_series=None, exposure=None):
    """Per-person-month blip features ``F = a * R`` so that ``gamma = F @ beta``.

    Parameters
    ----------
    x_series : ndarray, shape (n, H) or (n, H + 1), optional
        Event-time argument per month (``X_j(psi)`` or ``C_j(psi)``); needed by
        ``x_dependent`` blips.
    exposure : ndarray, shape (n, H), optional
        Exposure to plug in; defaults to ``frame.exposure``.

    Returns
    -------
    ndarray, shape (n, H, d)
    """
    a = frame.exposure if exposure is None else np.asarray(exposure, dtype=float)
    n, H = a.shape
    if spec.uses_x:
        if x_series is None:
            raise ConfigError(f"blip family {spec.family!r} needs event-time values")
        x_series = np.asarray(x_series, dtype=float)[:, :H]
    ctx = frame.context(x=x_series, a=a, threshold=spec.threshold, exposure=a)
    R = ctx.matrix(spec.tokens(frame.cov_names), (n, H))
    return a[:, :, None] * R


def future_sums(F):
    """Tail sums ``S[:, m] = sum_{j >= m} F[:, j]`` with a zero row at ``m = H``."""
    n, H = F.shape[:2]
    S = np.zeros((n, H + 1) + F.shape[2:])
    S[:, :H] = np.cumsum(F[:, ::-1], axis=1)[:, ::-1]
    return S


def y_transform_all(spec: BlipSpec, frame, beta, x_series=None, exposure=None):
    """``Y_m(beta)`` for every subject and ``m = 0..H``; shape (n, H + 1)."""
    frame = as_frame(frame)
    beta = spec.check_beta(beta)
    S = future_sums(blip_features(spec, frame, x_series, exposure))
    return frame.utility[:, None] - S @ beta


def omega_all(spec: Optional[TimeRatioSpec], frame, psi, exposure=None):
    """``omega_j`` for every person-month; shape (n, H)."""
    frame = as_frame(frame)
    a = frame.exposure if exposure is None else np.asarray(exposure, dtype=float)
    if spec is None:
        return np.zeros_like(a)
    psi = spec.check_psi(psi)
    ctx = frame.context(exposure=a)
    G = ctx.matrix(spec.tokens(frame.cov_names), a.shape)
    return a * (G @ psi)


def _transform_times(x, omega):
    """Vectorised piecewise sum for event times ``x`` (NaN allowed)."""
    n, H = omega.shape
    e = np.exp(omega)
    with np.errstate(invalid="ignore"):
        fl = np.floor(x)
        frac = x - fl
        j = np.arange(H)[None, :]
        c = np.where(j < fl[:, None], e, 0.0) + np.where(j == fl[:, None], frac[:, None] * e, 0.0)
    T = np.zeros((n, H + 1))
    T[:, :H] = np.cumsum(c[:, ::-1], axis=1)[:, ::-1]
    m = np.arange(H + 1)[None, :]
    with np.errstate(invalid="ignore"):
        out = np.where(x[:, None] <= m, x[:, None], m + T)
    out[np.isnan(x)] = np.nan
    return out


def x_transform_all(spec: Optional[TimeRatioSpec], frame, psi, exposure=None):
    """``X_m(psi)`` for ``m = 0..H``; shape (n, H + 1), NaN rows for censored subjects."""
    frame = as_frame(frame)
    x = np.asarray(frame.event_time, dtype=float)
    if spec is None:
        return np.repeat(x[:, None], frame.horizon + 1, axis=1)
    return _transform_times(x, omega_all(spec, frame, psi, exposure))


def horizon_integral(omega):
    """``int_m^{H} exp(omega)`` for ``m = 0..H``; shape (n, H + 1)."""
    n, H = omega.shape
    out = np.zeros((n, H + 1))
    out[:, :H] = np.cumsum(np.exp(omega)[:, ::-1], axis=1)[:, ::-1]
    return out


def censor_floor_all(spec: Optional[TimeRatioSpec], frame, psi, exposure=None):
    """Censoring floor and floored transformed times.

    Returns
    -------
    k : ndarray, shape (H + 1,)
        ``K_m(psi)``; ``+inf`` when nobody is censored.
    c : ndarray, shape (n, H + 1)
        ``C_m(psi) = min(X_m(psi), K_m(psi))``; censored subjects get ``K_m(psi)``.
    """
    frame = as_frame(frame)
    H = frame.horizon
    omega = omega_all(spec, frame, psi if spec is not None else None, exposure) if spec is not None \
        else np.zeros((frame.n, H))
    xm = _transform_times(np.asarray(frame.event_time, float), omega)
    cens = frame.censored
    if not cens.any():
        return np.full(H + 1, np.inf), xm
    m = np.arange(H + 1)
    k = m + horizon_integral(omega[cens]).min(axis=0)
    c = np.where(cens[:, None], k[None, :], np.minimum(xm, k[None, :]))
    return k, c


def event_argument(spec, frame, psi, exposure=None):
    """The event-time argument used by estimators.

    ``X_m(psi)`` when nobody is censored, otherwise ``C_m(psi)``.
    """
    frame = as_frame(frame)
    if frame.censored.any():
        return censor_floor_all(spec, frame, psi, exposure)[1]
    return x_transform_all(spec, frame, psi, exposure)


# ---------------------------------------------------------------------------
# scalar wrappers


def blip_eval(spec: BlipSpec, m, a, history=None, x=None, beta=0.0):
    """Blip value ``gamma_m(a, history, x; beta)``.

    Parameters
    ----------
    history : dict, optional
        Covariate values at month ``m`` keyed by name.  Keys ``lag:NAME``,
        ``bmi`` and ``prev_a`` are honoured when features need them.

    Examples
    --------
    >>> blip_eval(BlipSpec("const"), m=0, a=1.0, beta=2.0)
    2.0
    >>> spec = BlipSpec("x_dependent", ("1", "x"))
    >>> blip_eval(spec, m=0, a=2.0, x=4.0, beta=[1.0, 0.5])
    6.0
    """
    beta = spec.check_beta(beta)
    history = dict(history or {})
    covs = {k: float(v) for k, v in history.items() if ":" not in k and k not in ("bmi", "prev_a")}
    lagged = {k[4:]: float(v) for k, v in history.items() if k.startswith("lag:")}
    if spec.uses_x and x is None:
        raise ConfigError(f"blip family {spec.family!r} requires the event-time argument x")
    ctx = FeatureContext(float(m), covs, lagged, history.get("bmi"), history.get("prev_a"),
                         None, None if x is None else float(x), float(a), spec.threshold)
    R = np.array([ctx.evaluate(t) for t in spec.tokens(tuple(covs))], dtype=float)
    return float(a * (R @ beta))


def _x_series_row(x_series, H):
    xs = np.asarray(x_series, dtype=float).reshape(-1)
    if len(xs) in (H, H + 1):
        return xs[None, :H]
    raise ConfigError(f"x_series must have length {H} (months 0..K), got {len(xs)}")


def y_transform(spec: BlipSpec, inp: TransformInput, m, beta, x_series=None):
    """``Y_m(beta)`` for one subject.

    Examples
    --------
    >>> inp = TransformInput(exposure=[1.0, 0.0, 1.0], utility=10.0)
    >>> y_transform(BlipSpec("const"), inp, 0, 2.0)
    6.0
    """
    frame = inp.frame()
    H = frame.horizon
    if not 0 <= m <= H:
        raise ConfigError(f"m must lie in 0..{H}")
    xs = None if x_series is None else _x_series_row(x_series, H)
    return float(y_transform_all(spec, frame, beta, xs)[0, m])


def x_transform(spec: TimeRatioSpec, inp: TransformInput, m, psi):
    """``X_m(psi)`` for one uncensored subject.

    Examples
    --------
    >>> inp = TransformInput(exposure=[1.0, 0.0, 1.0], event_time=2.5)
    >>> x_transform(TimeRatioSpec("const"), inp, 0, np.log(2))
    4.0
    """
    if inp.event_time is None:
        raise DataError("x_transform needs an observed event time; use censor_floor for censored subjects")
    frame = inp.frame()
    if not 0 <= m <= frame.horizon:
        raise ConfigError(f"m must lie in 0..{frame.horizon}")
    return float(x_transform_all(spec, frame, psi)[0, m])


def censor_floor(spec: TimeRatioSpec, cohort, m, psi, exposure=None):
    """``(K_m(psi), C_m(psi))`` at a single month ``m`` over a cohort."""
    frame = as_frame(cohort)
    if not 0 <= m <= frame.horizon:
        raise ConfigError(f"m must lie in 0..{frame.horizon}")
    k, c = censor_floor_all(spec, frame, psi, exposure)
    return float(k[m]), c[:, m]
