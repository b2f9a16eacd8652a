"""Maximum weight-gain regimes.

A regime ``g`` allows a monthly gain ``g_m`` above the running BMI maximum.
Observed data are compared with the regime through the residual exposure
``A_g(m) = [BMI(m+1) - BMI_max(m) - g_m]_+`` and the indicator
``Xi_g(m) = I(BMI(m+1) >= BMI_max(m) + g_m)``.  Feeding these into the
g-estimation engine in place of ``(A, Xi)`` estimates the mean utility
under the regime.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cohort import Cohort, Predicate, SubjectHistory, exposure_from_bmi, month_values
from .exceptions import ConfigError

KINDS = ("static", "dynamic")


@dataclass(frozen=True)
class Regime:
    """A static or dynamic maximum-gain regime.

    Parameters
    ----------
    kind : {"static", "dynamic"}
    gain : float or tuple of float
        Static regimes: a constant or one value per month.
    rules : tuple of (tuple of Predicate, float)
        Dynamic regimes: ordered rule list; the first rule whose predicates
        all hold sets the gain.
    default : float
        Dynamic regimes: gain when no rule matches.

    Examples
    --------
    >>> Regime.static(0.5).gains_for(month=np.arange(3))
    array([0.5, 0.5, 0.5])
    """

    kind: str = "static"
    gain: object = 0.0
    rules: tuple = ()
    default: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"regime kind must be one of {KINDS}")
        if self.kind == "static":
            g = np.atleast_1d(np.asarray(self.gain, dtype=float))
            if np.any(g < 0) or not np.all(np.isfinite(g)):
                raise ConfigError("allowed gains must be finite and nonnegative")
            object.__setattr__(self, "gain", float(g[0]) if g.size == 1 else tuple(float(v) for v in g))
        else:
            parsed = []
            for rule in self.rules:
                preds, g = rule if not isinstance(rule, dict) else (rule.get("when", ()), rule["gain"])
                if isinstance(preds, (str, dict, Predicate)):
                    preds = [preds]
                if float(g) < 0:
                    raise ConfigError("allowed gains must be nonnegative")
                parsed.append((tuple(Predicate.parse(p) for p in preds), float(g)))
            object.__setattr__(self, "rules", tuple(parsed))
            if self.default < 0:
                raise ConfigError("allowed gains must be nonnegative")

    @classmethod
    def static(cls, gain, name=""):
        return cls("static", gain=gain, name=name)

    @classmethod
    def dynamic(cls, rules, default=0.0, name=""):
        return cls("dynamic", rules=tuple(rules), default=float(default), name=name)

    @classmethod
    def zero(cls):
        return cls("static", gain=0.0, name="zero")

    @property
    def is_zero(self):
        return self.kind == "static" and np.all(np.asarray(self.gain) == 0)

    def gains_for(self, **values):
        """Allowed gain evaluated on arrays of history variables.

        ``values`` must contain ``month`` and every variable referenced by a
        rule; arrays broadcast against each other.
        """
        month = np.asarray(values["month"])
        if self.kind == "static":
            g = np.asarray(self.gain, dtype=float)
            if g.ndim == 0:
                return np.full(month.shape, float(g))
            idx = month.astype(int)
            if idx.max(initial=0) >= len(g):
                raise ConfigError(f"static regime lists {len(g)} monthly gains; month {int(idx.max())} needed")
            return g[idx]
        out = np.full(month.shape, np.nan)
        for preds, g in self.rules:
            hit = np.ones(month.shape, dtype=bool)
            for p in preds:
                hit &= np.broadcast_to(p.evaluate(values), month.shape)
            out = np.where(np.isnan(out) & hit, g, out)
        return np.where(np.isnan(out), self.default, out)

    def gain_matrix(self, cohort):
        """Allowed gains ``g_m`` on the observed history; shape (n, H)."""
        H = cohort.horizon
        vals = month_values(cohort.covariates, cohort.cov_names, cohort.bmi, H)
        a = cohort.exposure().a
        prev = np.zeros_like(a)
        prev[:, 1:] = a[:, :-1]
        vals["prev_a"] = prev
        return self.gains_for(**vals)

    def to_dict(self):
        if self.kind == "static":
            g = self.gain if isinstance(self.gain, float) else list(self.gain)
            return {"kind": "static", "gain": g, "name": self.name}
        return {"kind": "dynamic", "name": self.name, "default": self.default,
                "rules": [{"when": [p.to_dict() for p in preds], "gain": g} for preds, g in self.rules]}

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError("regime declaration needs a 'kind'")
        if d["kind"] == "static":
            return cls.static(d.get("gain", 0.0), d.get("name", ""))
        if d["kind"] == "dynamic":
            return cls.dynamic(d.get("rules", ()), d.get("default", 0.0), d.get("name", ""))
        raise ConfigError(f"unknown regime kind {d['kind']!r}")


def _as_cohort(history):
    if isinstance(history, SubjectHistory):
        return Cohort.from_subjects([history], check=False), True
    if isinstance(history, Cohort):
        return history, False
    raise TypeError(f"expected SubjectHistory or Cohort, got {type(history).__name__}")


def _regime_exposure(cohort, regime):
    g = regime.gain_matrix(cohort)
    ex = exposure_from_bmi(cohort.bmi, cohort.alive, cap=g, ids=cohort.ids)
    a, xi = ex.a, ex.xi
    if cohort.in_flag is not None:
        a = np.where(cohort.in_flag, 0.0, a)
        xi = xi & ~cohort.in_flag
    return a, xi


def residual_exposure(history, regime: Regime):
    """Residual exposure ``A_g(m)`` over the regime's allowed gain.

    Examples
    --------
    >>> h = SubjectHistory.from_bmi([22, 23, 22.5, 24])
    >>> residual_exposure(h, Regime.static(0.5))
    array([0.5, 0. , 0.5])
    """
    cohort, single = _as_cohort(history)
    if regime.is_zero:
        a = cohort.exposure().a
    else:
        a = _regime_exposure(cohort, regime)[0]
    return a[0] if single else a


def regime_indicators(history, regime: Regime):
    """``Xi_g(m) = I(BMI(m+1) >= BMI_max(m) + g_m)``."""
    cohort, single = _as_cohort(history)
    if regime.is_zero:
        xi = cohort.exposure().xi
    else:
        xi = _regime_exposure(cohort, regime)[1]
    return xi[0] if single else xi


def regime_frame(cohort: Cohort, regime: Regime):
    """Analysis frame with ``(A_g, Xi_g)`` in place of ``(A, Xi)``.

    The zero regime returns the plain frame unchanged so results are
    bit-identical to an analysis without a regime.
    """
    frame = cohort.frame()
    if regime.is_zero:
        return frame
    a, xi = _regime_exposure(cohort, regime)
    return frame.with_exposure(a, xi)


def consistent_with(cohort: Cohort, regime: Regime):
    """Per-subject indicator that observed data follow the regime throughout."""
    return ~np.any(residual_exposure(cohort, regime) > 0, axis=1)


@dataclass
class RegimeEvaluation:
    """Residuals, indicators and g-estimation output for one regime."""

    regime: Regime
    a_delta: np.ndarray
    xi_g: np.ndarray
    estimates: object

    @property
    def ey0_g(self):
        return self.estimates.ey0_hat


def estimate_ey0_g(cohort: Cohort, regime: Regime, blip=None, ratio=None, config=None):
    """Estimate the mean utility under ``regime`` by g-estimation.

    Returns
    -------
    RegimeEvaluation
    """
    from .gest import g_estimate

    frame = regime_frame(cohort, regime)
    res = g_estimate(frame, blip, ratio, config)
    return RegimeEvaluation(regime=regime, a_delta=frame.exposure, xi_g=frame.xi, estimates=res)
