"""Declarative feature maps.

Feature maps are declared as lists of string tokens.  A token is a product
of factors joined by ``*`` with an optional leading ``-``.  Recognised
factors:

``1``                 constant one
``m``                 month index
``age``               ``18 + m / 12``
``cov:NAME``          covariate ``NAME`` at month ``m`` (bare ``NAME`` also works)
``lag:NAME``          covariate ``NAME`` at month ``m - 1`` (zero at ``m = 0``)
``bmi``               BMI recorded at month ``m``
``prev_a``            exposure at month ``m - 1`` (zero at ``m = 0``)
``prev_any``          ``I(prev_a > 0)``
``post``              indicator that the event occurred at or before ``m``
``x``                 event-time argument
``x_resid``           ``x - m``
``log_x_resid``       ``log(x - m)``
``x_le``, ``x_gt``    ``I(x - m <= threshold)`` and ``I(x - m > threshold)``
``a``                 the exposure level itself (used for curvature terms)
numeric literal       a constant factor such as ``0.5``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError

X_FACTORS = frozenset({"x", "x_resid", "log_x_resid", "x_le", "x_gt"})
_SIMPLE = frozenset({"1", "m", "age", "bmi", "prev_a", "prev_any", "post", "a"}) | X_FACTORS


@dataclass(frozen=True)
class Token:
    """A parsed feature token."""

    text: str
    sign: float
    factors: tuple

    @property
    def uses_x(self):
        return any(f in X_FACTORS for f in self.factors)

    @property
    def uses_a(self):
        return "a" in self.factors

    @property
    def uses_post(self):
        return "post" in self.factors


def parse_token(text, covariate_names=None):
    """Parse one feature token.

    Parameters
    ----------
    text : str
        Token text, for example ``"cov:L"`` or ``"-a"`` or ``"x_resid*cov:L"``.
    covariate_names : sequence of str, optional
        Names that may appear bare (without the ``cov:`` prefix).

    Returns
    -------
    Token
    """
    if not isinstance(text, str) or not text.strip():
        raise ConfigError(f"feature token must be a non-empty string, got {text!r}")
    raw = text.strip()
    sign = 1.0
    if raw.startswith("-"):
        sign = -1.0
        raw = raw[1:].strip()
    names = set(covariate_names or ())
    factors = []
    for part in raw.split("*"):
        part = part.strip()
        if part in _SIMPLE:
            factors.append(part)
        elif part.startswith("cov:") or part.startswith("lag:"):
            if not part[4:]:
                raise ConfigError(f"empty covariate name in token {text!r}")
            factors.append(part)
        elif part in names:
            factors.append("cov:" + part)
        else:
            try:
                float(part)
            except ValueError:
                raise ConfigError(f"unknown feature factor {part!r} in token {text!r}") from None
            factors.append(part)
    return Token(text=text, sign=sign, factors=tuple(factors))


def parse_tokens(tokens, covariate_names=None):
    if isinstance(tokens, str):
        tokens = [tokens]
    return tuple(parse_token(t, covariate_names) for t in tokens)


def check_covariates(tokens, covariate_names):
    """Raise ConfigError if a token references an undeclared covariate."""
    names = set(covariate_names)
    for tok in tokens:
        for f in tok.factors:
            if f.startswith(("cov:", "lag:")) and f[4:] not in names:
                raise ConfigError(
                    f"feature {tok.text!r} references unknown covariate {f[4:]!r}; "
                    f"available: {sorted(names)}"
                )


class FeatureContext:
    """Arrays from which tokens are evaluated.

    All arrays must broadcast against each other; typically they are
    person-month arrays of shape ``(n, H)`` or scalars for single points.
    """

    def __init__(self, m, covariates=None, lagged=None, bmi=None, prev_a=None,
                 post=None, x=None, a=None, threshold=None):
        self.m = m
        self.covariates = covariates or {}
        self.lagged = lagged or {}
        self.bmi = bmi
        self.prev_a = prev_a
        self.post = post
        self.x = x
        self.a = a
        self.threshold = threshold

    def _need(self, value, what, token):
        if value is None:
            raise ConfigError(f"feature {token.text!r} requires {what}, which is not available here")
        return value

    def factor(self, name, token):
        if name == "1":
            return 1.0
        if name == "m":
            return np.asarray(self.m, dtype=float)
        if name == "age":
            return 18.0 + np.asarray(self.m, dtype=float) / 12.0
        if name == "bmi":
            return self._need(self.bmi, "BMI", token)
        if name == "prev_a":
            return self._need(self.prev_a, "past exposure", token)
        if name == "prev_any":
            return (np.asarray(self._need(self.prev_a, "past exposure", token)) > 0).astype(float)
        if name == "post":
            return self._need(self.post, "event state", token)
        if name == "a":
            return self._need(self.a, "an exposure level", token)
        if name in X_FACTORS:
            x = self._need(self.x, "an event-time argument", token)
            resid = x - np.asarray(self.m, dtype=float)
            if name == "x":
                return x
            if name == "x_resid":
                return resid
            if name == "log_x_resid":
                with np.errstate(divide="ignore", invalid="ignore"):
                    return np.log(np.maximum(resid, 1e-12))
            thr = self._need(self.threshold, "a threshold", token)
            if name == "x_le":
                return (resid <= thr).astype(float)
            return (resid > thr).astype(float)
        if name.startswith("cov:"):
            key = name[4:]
            if key not in self.covariates:
                raise ConfigError(f"unknown covariate {key!r} in feature {token.text!r}")
            return self.covariates[key]
        if name.startswith("lag:"):
            key = name[4:]
            if key not in self.lagged:
                raise ConfigError(f"unknown covariate {key!r} in feature {token.text!r}")
            return self.lagged[key]
        return float(name)

    def evaluate(self, token):
        value = token.sign
        for f in token.factors:
            value = value * self.factor(f, token)
        return value

    def matrix(self, tokens, shape):
        """Stack token values into an array of shape ``shape + (len(tokens),)``."""
        out = np.empty(tuple(shape) + (len(tokens),), dtype=float)
        for k, tok in enumerate(tokens):
            out[..., k] = self.evaluate(tok)
        return out
