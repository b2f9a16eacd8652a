"""Observed longitudinal cohort data and the exposure quantities derived from it.

A cohort holds monthly BMI histories for ``n`` subjects over months
``0..H`` where ``H = K + 1`` is the analysis horizon.  Exposure months are
``0..K``: the exposure in month ``m`` is the gain of ``BMI(m+1)`` over the
running maximum ``max(BMI(0..m))``.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigError, DataError
from .features import FeatureContext

FIXED_COLUMNS = ("subject_id", "month", "bmi", "alive", "event_time", "utility")


# ---------------------------------------------------------------------------
# record-level types


@dataclass(frozen=True)
class PersonMonthRecord:
    """One row of the person-month file."""

    subject_id: str
    month: int
    bmi: float
    alive: bool = True
    event_time: Optional[float] = None
    covariates: tuple = ()


@dataclass(frozen=True)
class SubjectHistory:
    """All records of one subject, stored as arrays over months ``0..H``."""

    subject_id: str
    bmi: np.ndarray
    alive: np.ndarray
    covariates: np.ndarray
    cov_names: tuple
    utility: float
    event_time: Optional[float]
    censored: bool

    def __post_init__(self):
        if (self.event_time is None) == (not self.censored):
            raise DataError(
                f"subject {self.subject_id}: event_time must be present exactly when not censored"
            )

    @property
    def horizon(self):
        return len(self.bmi) - 1

    @classmethod
    def from_records(cls, records: Sequence[PersonMonthRecord], utility, cov_names=()):
        records = sorted(records, key=lambda r: r.month)
        months = [r.month for r in records]
        if months != list(range(len(records))):
            raise DataError(f"subject {records[0].subject_id}: months must be contiguous from 0")
        bmi = np.array([np.nan if r.bmi is None else float(r.bmi) for r in records])
        alive = np.array([bool(r.alive) for r in records])
        p = len(cov_names)
        cov = np.array([list(r.covariates) for r in records], dtype=float).reshape(len(records), p)
        x = None
        for r in records:
            if r.event_time is not None and not np.isnan(r.event_time):
                x = float(r.event_time)
                break
        return cls(records[0].subject_id, bmi, alive, cov, tuple(cov_names), float(utility),
                   x, x is None)

    @classmethod
    def from_bmi(cls, bmi, utility=0.0, event_time=None, alive=None, covariates=None,
                 cov_names=(), subject_id="s0"):
        """Build a history directly from a BMI series (convenience for small examples)."""
        bmi = np.asarray(bmi, dtype=float)
        alive = np.ones(len(bmi), bool) if alive is None else np.asarray(alive, bool)
        if covariates is None:
            covariates = np.zeros((len(bmi), len(cov_names)))
        covariates = np.asarray(covariates, dtype=float).reshape(len(bmi), len(cov_names))
        return cls(subject_id, bmi, alive, covariates, tuple(cov_names), float(utility),
                   None if event_time is None else float(event_time), event_time is None)


@dataclass(frozen=True)
class DerivedExposure:
    """Exposure quantities over exposure months ``0..K``.

    Attributes
    ----------
    a : ndarray
        Gain over the running maximum, ``[BMI(m+1) - BMI_max(m)]_+``.
    bmi_max : ndarray
        Running maximum ``max(BMI(0..m))``.
    xi : ndarray of bool
        Indicator that ``BMI(m+1) >= BMI_max(m)``.
    a_star : ndarray
        Plain monthly change ``BMI(m+1) - BMI(m)``.
    """

    a: np.ndarray
    bmi_max: np.ndarray
    xi: np.ndarray
    a_star: np.ndarray


def exposure_from_bmi(bmi, alive, cap=None, ids=None):
    """Vectorised exposure derivation.

    Parameters
    ----------
    bmi, alive : ndarray, shape (n, H + 1)
    cap : float or ndarray of shape (n, H), optional
        Allowed gain added to the running maximum before comparison.  With
        ``cap=None`` this is the plain exposure; with a regime's allowed gain
        it yields the residual exposure and regime eligibility indicator.
    ids : sequence, optional
        Subject identifiers used in error messages.

    Returns
    -------
    DerivedExposure
        Arrays of shape (n, H).
    """
    bmi = np.asarray(bmi, dtype=float)
    alive = np.asarray(alive, dtype=bool)
    missing = alive & np.isnan(bmi)
    if missing.any():
        i, t = np.argwhere(missing)[0]
        sid = ids[i] if ids is not None else i
        raise DataError(f"missing BMI in alive month: subject={sid} month={int(t)}")
    H = bmi.shape[1] - 1
    live = np.where(alive, bmi, np.nan)
    bmi_max = np.fmax.accumulate(live[:, :H], axis=1)
    nxt = bmi[:, 1:]
    valid = alive[:, 1:] & alive[:, :H]
    level = bmi_max if cap is None else bmi_max + cap
    with np.errstate(invalid="ignore"):
        xi = valid & (nxt >= level)
        a = np.where(xi, nxt - level, 0.0)
        a_star = np.where(valid, nxt - bmi[:, :H], 0.0)
    bmi_max = np.where(np.isnan(bmi_max), 0.0, bmi_max)
    return DerivedExposure(a=a, bmi_max=bmi_max, xi=xi, a_star=a_star)


def derive_exposure(history: SubjectHistory) -> DerivedExposure:
    """Exposure, running maximum, eligibility indicator and plain change for one subject.

    Examples
    --------
    >>> h = SubjectHistory.from_bmi([22, 23, 22.5, 24])
    >>> derive_exposure(h).a
    array([1., 0., 1.])
    """
    ex = exposure_from_bmi(history.bmi[None, :], history.alive[None, :], ids=[history.subject_id])
    return DerivedExposure(ex.a[0], ex.bmi_max[0], ex.xi[0], ex.a_star[0])


def extract_event_time(horizon, death_time=None, diagnosis_time=None, recorded=False):
    """Event time ``X = min(T, D)`` with censoring beyond the horizon.

    Parameters
    ----------
    horizon : float
        ``K + 1``.
    death_time, diagnosis_time : float, optional
        Missing values mean the event was not observed.
    recorded : bool
        The diagnosis time comes from the subject's records rather than a
        latent onset time; a recorded diagnosis after death is then an error.

    Returns
    -------
    (x, censored) : (float or None, bool)
    """
    if recorded and death_time is not None and diagnosis_time is not None and diagnosis_time > death_time:
        raise DataError(f"diagnosis recorded after death: diagnosis={diagnosis_time} death={death_time}")
    times = [t for t in (death_time, diagnosis_time) if t is not None and not np.isnan(t)]
    if not times:
        return None, True
    x = float(min(times))
    if x > horizon:
        return None, True
    return x, False


# ---------------------------------------------------------------------------
# subgroup masks


_OPS = {
    "<": operator.lt, "<=": operator.le, ">": operator.gt,
    ">=": operator.ge, "==": operator.eq, "!=": operator.ne,
}


@dataclass(frozen=True)
class Predicate:
    """Threshold predicate ``var op value`` evaluated at month ``m``.

    ``var`` is a covariate name, ``month``, ``age`` (``18 + m/12``) or ``bmi``.
    """

    var: str
    op: str
    value: float

    def __post_init__(self):
        if self.op not in _OPS:
            raise ConfigError(f"unknown predicate operator {self.op!r}")

    @classmethod
    def parse(cls, obj):
        if isinstance(obj, Predicate):
            return obj
        if isinstance(obj, str):
            for op in ("<=", ">=", "==", "!=", "<", ">"):
                if op in obj:
                    var, val = obj.split(op, 1)
                    return cls(var.strip(), op, float(val))
            raise ConfigError(f"cannot parse predicate {obj!r}")
        if isinstance(obj, dict):
            try:
                return cls(str(obj["var"]), str(obj["op"]), float(obj["value"]))
            except KeyError as exc:
                raise ConfigError(f"predicate missing field {exc}") from None
        raise ConfigError(f"cannot parse predicate {obj!r}")

    def evaluate(self, values):
        if self.var not in values:
            raise ConfigError(f"predicate references unknown variable {self.var!r}")
        with np.errstate(invalid="ignore"):
            return _OPS[self.op](values[self.var], self.value)

    def to_dict(self):
        return {"var": self.var, "op": self.op, "value": self.value}


def month_values(covariates, cov_names, bmi, H):
    """Variables available to predicates, as (n, H) arrays."""
    n = covariates.shape[0]
    m = np.broadcast_to(np.arange(H, dtype=float), (n, H))
    vals = {"month": m, "age": 18.0 + m / 12.0, "bmi": bmi[:, :H]}
    for k, name in enumerate(cov_names):
        vals[name] = covariates[:, :H, k]
    return vals


@dataclass(frozen=True)
class SubgroupMask:
    """Declarative definition of intractably confounded subgroups.

    Parameters
    ----------
    rules : tuple of tuple of Predicate
        ``IN(m)`` is true when every predicate of at least one rule holds.
    event_window : float, optional
        When set, months with ``X <= m + event_window`` are also flagged.
        This covers subjects already diagnosed and those diagnosed within
        the window.
    """

    rules: tuple = ()
    event_window: Optional[float] = None

    @classmethod
    def from_rules(cls, rules=(), event_window=None):
        parsed = []
        for rule in rules:
            if isinstance(rule, (str, dict, Predicate)):
                rule = [rule]
            parsed.append(tuple(Predicate.parse(p) for p in rule))
        return cls(tuple(parsed), event_window)

    def in_flag(self, covariates, cov_names, bmi, event_time, H):
        vals = month_values(covariates, cov_names, bmi, H)
        n = covariates.shape[0]
        flag = np.zeros((n, H), dtype=bool)
        for rule in self.rules:
            hit = np.ones((n, H), dtype=bool)
            for pred in rule:
                hit &= pred.evaluate(vals)
            flag |= hit
        if self.event_window is not None:
            x = np.asarray(event_time, dtype=float)[:, None]
            with np.errstate(invalid="ignore"):
                flag |= x <= np.arange(H)[None, :] + self.event_window
        return flag


# ---------------------------------------------------------------------------
# cohort


@dataclass(frozen=True)
class Violation:
    subject: str
    month: Optional[int]
    kind: str
    detail: str = ""

    def __str__(self):
        return f"subject={self.subject} month={self.month} kind={self.kind} {self.detail}".strip()


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def kinds(self):
        return sorted({v.kind for v in self.violations})


class Cohort:
    """Immutable person-month cohort.

    Parameters
    ----------
    ids : sequence of str, length n
    bmi : ndarray, shape (n, H + 1)
        BMI just before month ``t``; zero after death.
    alive : ndarray of bool, shape (n, H + 1)
    covariates : ndarray, shape (n, H + 1, p)
    cov_names : sequence of str, length p
    utility : ndarray, shape (n,)
    event_time : ndarray, shape (n,)
        Event time in months; NaN for subjects censored at the horizon.
    check : bool, default True
        Validate on construction and raise :class:`DataError` if unclean.
    """

    def __init__(self, ids, bmi, alive, covariates, cov_names, utility, event_time,
                 check=True, _a=None, _xi=None, _in_flag=None):
        self.ids = np.asarray([str(s) for s in ids], dtype=object)
        self.bmi = np.array(bmi, dtype=float)
        self.alive = np.array(alive, dtype=bool)
        n, T = self.bmi.shape
        cov = np.asarray(covariates, dtype=float)
        if cov.ndim == 2 and cov.size == 0:
            cov = cov.reshape(n, T, 0)
        self.covariates = np.array(cov, dtype=float).reshape(n, T, len(cov_names))
        self.cov_names = tuple(str(c) for c in cov_names)
        self.utility = np.array(utility, dtype=float).reshape(n)
        self.event_time = np.array(event_time, dtype=float).reshape(n)
        self._a = _a
        self._xi = _xi
        self.in_flag = _in_flag
        for arr in (self.bmi, self.alive, self.covariates, self.utility, self.event_time):
            arr.flags.writeable = False
        if self.alive.shape != (n, T):
            raise DataError("alive must have the same shape as bmi")
        if check:
            report = validate(self)
            if not report.ok:
                raise DataError(
                    f"cohort failed validation with {len(report)} violation(s); first: {report.violations[0]}",
                    report.violations,
                )
        self._exposure = None

    # -- basic properties
    @property
    def n(self):
        return self.bmi.shape[0]

    @property
    def horizon(self):
        """``H = K + 1``, the number of exposure months."""
        return self.bmi.shape[1] - 1

    @property
    def censored(self):
        return np.isnan(self.event_time)

    def exposure(self):
        """Derived exposure arrays of shape (n, H), honouring any mask."""
        if self._exposure is None:
            ex = exposure_from_bmi(self.bmi, self.alive, ids=self.ids)
            if self._a is not None:
                ex = DerivedExposure(self._a, ex.bmi_max, self._xi, ex.a_star)
            self._exposure = ex
        return self._exposure

    def subject(self, i):
        x = self.event_time[i]
        return SubjectHistory(self.ids[i], self.bmi[i].copy(), self.alive[i].copy(),
                              self.covariates[i].copy(), self.cov_names, float(self.utility[i]),
                              None if np.isnan(x) else float(x), bool(np.isnan(x)))

    @classmethod
    def from_subjects(cls, subjects: Sequence[SubjectHistory], check=True):
        if not subjects:
            raise DataError("a cohort needs at least one subject")
        names = subjects[0].cov_names
        lengths = {len(s.bmi) for s in subjects}
        if len(lengths) != 1:
            raise DataError("all subjects must share the same horizon")
        return cls(
            [s.subject_id for s in subjects],
            np.stack([s.bmi for s in subjects]),
            np.stack([s.alive for s in subjects]),
            np.stack([s.covariates for s in subjects]),
            names,
            [s.utility for s in subjects],
            [np.nan if s.event_time is None else s.event_time for s in subjects],
            check=check,
        )

    def replace(self, **kwargs):
        """Return a copy with some arrays replaced (masks are dropped unless given)."""
        args = dict(ids=self.ids, bmi=self.bmi, alive=self.alive, covariates=self.covariates,
                    cov_names=self.cov_names, utility=self.utility, event_time=self.event_time,
                    check=False)
        args.update(kwargs)
        return Cohort(**args)

    def subset(self, index):
        index = np.asarray(index)
        a = None if self._a is None else self._a[index]
        xi = None if self._xi is None else self._xi[index]
        flag = None if self.in_flag is None else self.in_flag[index]
        return Cohort(self.ids[index], self.bmi[index], self.alive[index], self.covariates[index],
                      self.cov_names, self.utility[index], self.event_time[index], check=False,
                      _a=a, _xi=xi, _in_flag=flag)

    def frame(self):
        """The analysis frame used by the estimators."""
        ex = self.exposure()
        return AnalysisFrame(
            exposure=ex.a, xi=ex.xi, covariates=self.covariates, cov_names=self.cov_names,
            bmi=self.bmi, utility=self.utility, event_time=self.event_time, ids=self.ids,
        )

    # -- tabular I/O
    def to_frame(self):
        """Long person-month table in the CSV layout."""
        n, T = self.bmi.shape
        month = np.tile(np.arange(T), n)
        x = np.repeat(self.event_time, T)
        with np.errstate(invalid="ignore"):
            known = x <= month
        data = {
            "subject_id": np.repeat(self.ids, T),
            "month": month,
            "bmi": self.bmi.reshape(-1),
            "alive": self.alive.reshape(-1).astype(int),
            "event_time": np.where(known, x, np.nan),
            "utility": np.repeat(self.utility, T),
        }
        for k, name in enumerate(self.cov_names):
            data[name] = self.covariates[:, :, k].reshape(-1)
        return pd.DataFrame(data)

    @classmethod
    def from_frame(cls, df: pd.DataFrame, check=True):
        """Build a cohort from a long person-month table, validating it first."""
        missing = [c for c in FIXED_COLUMNS if c not in df.columns]
        if missing:
            raise DataError(f"person-month table lacks required columns {missing}")
        if check:
            report = validate_table(df)
            if not report.ok:
                raise DataError(
                    f"person-month table failed validation with {len(report)} violation(s); "
                    f"first: {report.violations[0]}",
                    report.violations,
                )
        cov_names = [c for c in df.columns if c not in FIXED_COLUMNS]
        df = df.copy()
        df["subject_id"] = df["subject_id"].astype(str)
        order = pd.unique(df["subject_id"])
        df["_sid"] = pd.Categorical(df["subject_id"], categories=order)
        df = df.sort_values(["_sid", "month"], kind="stable")
        n = len(order)
        T = int(df["month"].max()) + 1
        if len(df) != n * T:
            raise DataError("person-month table is not rectangular after validation")
        bmi = df["bmi"].to_numpy(dtype=float).reshape(n, T)
        alive = df["alive"].astype(bool).to_numpy().reshape(n, T)
        cov = df[cov_names].to_numpy(dtype=float).reshape(n, T, len(cov_names))
        grouped = df.groupby("_sid", observed=True, sort=False)
        utility = grouped["utility"].first().to_numpy(dtype=float)
        event = grouped["event_time"].max().to_numpy(dtype=float)
        return cls(list(order), bmi, alive, cov, cov_names, utility, event, check=False)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, na_rep="")

    @classmethod
    def read_csv(cls, path, check=True):
        try:
            df = pd.read_csv(path, dtype={"subject_id": str}, float_precision="round_trip",
                             encoding="utf-8")
        except FileNotFoundError:
            raise
        except Exception as exc:  # pandas raises several parser error types
            raise DataError(f"cannot parse person-month file {path}: {exc}") from None
        return cls.from_frame(df, check=check)

    def __repr__(self):
        return f"Cohort(n={self.n}, horizon={self.horizon}, covariates={list(self.cov_names)})"


# ---------------------------------------------------------------------------
# analysis frame


@dataclass(frozen=True)
class AnalysisFrame:
    """Person-month arrays consumed by the estimators.

    ``exposure`` and ``xi`` are whatever exposure the analysis targets: the
    plain gain, a regime residual, or a masked version.
    """

    exposure: np.ndarray
    xi: np.ndarray
    covariates: np.ndarray
    cov_names: tuple
    bmi: np.ndarray
    utility: np.ndarray
    event_time: np.ndarray
    ids: np.ndarray

    @property
    def n(self):
        return self.exposure.shape[0]

    @property
    def horizon(self):
        return self.exposure.shape[1]

    @property
    def censored(self):
        return np.isnan(self.event_time)

    def with_exposure(self, exposure, xi):
        return AnalysisFrame(np.asarray(exposure, float), np.asarray(xi, bool), self.covariates,
                             self.cov_names, self.bmi, self.utility, self.event_time, self.ids)

    def subset(self, index):
        return AnalysisFrame(self.exposure[index], self.xi[index], self.covariates[index],
                             self.cov_names, self.bmi[index], self.utility[index],
                             self.event_time[index], self.ids[index])

    def context(self, x=None, a=None, threshold=None, exposure=None):
        """Feature context over the (n, H) exposure-month grid."""
        n, H = self.exposure.shape
        exposure = self.exposure if exposure is None else exposure
        m = np.broadcast_to(np.arange(H, dtype=float), (n, H))
        covs = {name: self.covariates[:, :H, k] for k, name in enumerate(self.cov_names)}
        lagged = {}
        for k, name in enumerate(self.cov_names):
            lag = np.zeros((n, H))
            lag[:, 1:] = self.covariates[:, : H - 1, k]
            lagged[name] = lag
        prev = np.zeros((n, H))
        prev[:, 1:] = exposure[:, : H - 1]
        with np.errstate(invalid="ignore"):
            post = (self.event_time[:, None] <= m).astype(float)
        return FeatureContext(m, covs, lagged, self.bmi[:, :H], prev, post, x, a, threshold)


def as_frame(data):
    """Accept a :class:`Cohort` or :class:`AnalysisFrame` and return a frame."""
    if isinstance(data, AnalysisFrame):
        return data
    if isinstance(data, Cohort):
        return data.frame()
    raise TypeError(f"expected Cohort or AnalysisFrame, got {type(data).__name__}")


# ---------------------------------------------------------------------------
# transformations


def coarsen(cohort: Cohort, factor: int) -> Cohort:
    """Subsample the time axis to every ``factor``-th month.

    BMI, covariates and vital status are taken at block starts, a trailing
    partial block is dropped, and event times are expressed in coarse units
    (``X / factor``).  Subjects whose rescaled event time lies beyond the new
    horizon become censored.  Utilities are unchanged.
    """
    factor = int(factor)
    if factor < 1:
        raise ConfigError(f"coarsening factor must be >= 1, got {factor}")
    if factor == 1:
        return cohort.replace()
    H = cohort.horizon
    h_new = H // factor
    if h_new < 1:
        raise ConfigError(f"coarsening factor {factor} exceeds the horizon {H}")
    rows = np.arange(h_new + 1) * factor
    x = cohort.event_time / factor
    with np.errstate(invalid="ignore"):
        x = np.where(x > h_new, np.nan, x)
    return Cohort(cohort.ids, cohort.bmi[:, rows], cohort.alive[:, rows],
                  cohort.covariates[:, rows, :], cohort.cov_names, cohort.utility, x, check=False)


def mask_intractable(cohort: Cohort, mask: SubgroupMask) -> Cohort:
    """Zero exposure and eligibility in flagged person-months.

    Returns a new cohort whose :meth:`Cohort.exposure` reports
    ``A(m) * (1 - IN(m))`` and ``Xi(m) * (1 - IN(m))``; BMI and covariates are untouched.
    """
    ex = cohort.exposure()
    flag = mask.in_flag(cohort.covariates, cohort.cov_names, cohort.bmi, cohort.event_time,
                        cohort.horizon)
    if cohort.in_flag is not None:
        flag = flag | cohort.in_flag
    a = np.where(flag, 0.0, ex.a)
    xi = ex.xi & ~flag
    return Cohort(cohort.ids, cohort.bmi, cohort.alive, cohort.covariates, cohort.cov_names,
                  cohort.utility, cohort.event_time, check=False, _a=a, _xi=xi, _in_flag=flag)


class Coarsener(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`coarsen`."""

    def __init__(self, factor=1):
        self.factor = factor

    def fit(self, cohort, y=None):
        if int(self.factor) < 1:
            raise ConfigError(f"coarsening factor must be >= 1, got {self.factor}")
        self.horizon_in_ = cohort.horizon
        return self

    def transform(self, cohort):
        return coarsen(cohort, self.factor)


class IntractableMasker(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`mask_intractable`."""

    def __init__(self, rules=(), event_window=None):
        self.rules = rules
        self.event_window = event_window

    def fit(self, cohort, y=None):
        self.mask_ = SubgroupMask.from_rules(self.rules, self.event_window)
        return self

    def transform(self, cohort):
        mask = getattr(self, "mask_", None) or SubgroupMask.from_rules(self.rules, self.event_window)
        return mask_intractable(cohort, mask)


# ---------------------------------------------------------------------------
# validation


def validate(cohort) -> ValidationReport:
    """Report structural problems of a cohort (or a raw person-month table).

    Checks vital-status monotonicity, BMI presence and sign, the zero
    convention after death, and consistency of event times with vital status
    and the horizon.  A table additionally gets gap, duplicate and
    constancy checks.
    """
    if isinstance(cohort, pd.DataFrame):
        return validate_table(cohort)
    out = []
    n, T = cohort.bmi.shape
    H = T - 1
    ids = cohort.ids
    alive, bmi, cov = cohort.alive, cohort.bmi, cohort.covariates

    def add(i, t, kind, detail=""):
        out.append(Violation(str(ids[i]), None if t is None else int(t), kind, detail))

    for i in np.flatnonzero(~alive[:, 0]):
        add(i, 0, "dead_at_entry")
    back = alive[:, 1:] & ~alive[:, :-1]
    for i, t in np.argwhere(back):
        add(i, t + 1, "resurrection", "alive after a dead month")
    for i, t in np.argwhere(alive & np.isnan(bmi)):
        add(i, t, "missing_bmi")
    with np.errstate(invalid="ignore"):
        for i, t in np.argwhere(alive & (bmi < 0)):
            add(i, t, "negative_bmi")
        dead_bmi = ~alive & ~np.isnan(bmi) & (bmi != 0)
    for i, t in np.argwhere(dead_bmi):
        add(i, t, "post_death_nonzero", "BMI present after death")
    if cov.shape[2]:
        dead_cov = ~alive[:, :, None] & (cov != 0) & ~np.isnan(cov)
        for i, t in np.argwhere(dead_cov.any(axis=2)):
            add(i, t, "post_death_nonzero", "covariate present after death")
    x = cohort.event_time
    for i in np.flatnonzero(~np.isfinite(cohort.utility)):
        add(i, None, "missing_utility")
    with np.errstate(invalid="ignore"):
        bad_x = ~np.isnan(x) & ((x <= 0) | (x > H) | ~np.isfinite(x))
    for i in np.flatnonzero(bad_x):
        add(i, None, "event_time_range", f"X={x[i]} outside (0, {H}]")
    died = ~alive.all(axis=1)
    first_dead = np.argmax(~alive, axis=1)
    for i in np.flatnonzero(died):
        if np.isnan(x[i]):
            add(i, first_dead[i], "death_without_event", "death recorded but X censored")
        elif x[i] > first_dead[i]:
            add(i, first_dead[i], "event_after_death", f"X={x[i]} after death month")
    return ValidationReport(out)


def validate_table(df: pd.DataFrame) -> ValidationReport:
    """Validate a raw long person-month table."""
    out = []
    missing = [c for c in FIXED_COLUMNS if c not in df.columns]
    if missing:
        return ValidationReport([Violation("*", None, "missing_columns", str(missing))])
    sid = df["subject_id"].astype(str)
    month = pd.to_numeric(df["month"], errors="coerce")
    if month.isna().any() or (month != np.floor(month)).any():
        out.append(Violation("*", None, "bad_month", "non-integer month index"))
        return ValidationReport(out)
    month = month.astype(int)
    dup = pd.DataFrame({"s": sid, "m": month}).duplicated()
    for s, m in zip(sid[dup], month[dup]):
        out.append(Violation(s, int(m), "duplicate"))
    horizons = {}
    for s, grp in pd.DataFrame({"s": sid, "m": month, "i": np.arange(len(df))}).groupby("s", sort=False):
        ms = np.sort(grp["m"].unique())
        if ms[0] != 0:
            out.append(Violation(s, int(ms[0]), "gap", "months must start at 0"))
        expected = np.arange(ms[-1] + 1)
        for gap in np.setdiff1d(expected, ms):
            out.append(Violation(s, int(gap), "gap", "missing month record"))
        horizons[s] = int(ms[-1])
        rows = df.iloc[grp["i"].to_numpy()]
        u = pd.to_numeric(rows["utility"], errors="coerce")
        if u.isna().any() or u.nunique() > 1:
            out.append(Violation(s, None, "utility_inconsistent"))
        ev = pd.to_numeric(rows["event_time"], errors="coerce")
        known = ev.dropna()
        if known.nunique() > 1:
            out.append(Violation(s, None, "event_time_inconsistent", "differing event times"))
        elif len(known):
            xval = float(known.iloc[0])
            mrows = rows["month"].astype(int).to_numpy()
            present = ev.notna().to_numpy()
            should = xval <= mrows
            for t in mrows[present & ~should]:
                out.append(Violation(s, int(t), "event_time_early", "event time reported before it is known"))
            for t in mrows[~present & should]:
                out.append(Violation(s, int(t), "event_time_missing", "event time absent after it is known"))
    if len(set(horizons.values())) > 1:
        out.append(Violation("*", None, "horizon_mismatch", "subjects differ in number of months"))
    if out:
        return ValidationReport(out)
    try:
        cohort = Cohort.from_frame(df, check=False)
    except DataError as exc:
        return ValidationReport([Violation("*", None, "structure", str(exc))])
    return validate(cohort)
