"""Synthetic cohorts with known counterfactuals.

The generator makes the structural assumptions of the estimators true by
construction.  Every subject carries a latent event time ``X0`` (time to
diagnosis had they never gained weight above their running maximum) and a
latent utility ``Y0``.  Observed data follow from the rank-preserving
identities

    X0 = int_0^X exp(omega(t)) dt,          Y = Y0 + sum_j gamma_j

so the transforms evaluated at the true parameters reproduce ``X_m`` and
``Y0`` exactly.  All distributional choices below are simulator plumbing.

Generation order within month ``m``: covariate ``L(m)`` given the past,
``X_m = m + X0 - sum_{j<m} exp(omega_j)``, the preclinical indicator
``U(m) = I(X_m <= m + delta)``, then the two-part exposure draw in which
``U(m) = 1`` suppresses gain.  Interventions (regime caps, masked zeroing)
replay the same random numbers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from .cohort import Cohort, SubgroupMask, exposure_from_bmi, month_values
from .ctf import BlipSpec, TimeRatioSpec
from .exceptions import ConfigError, SpecError
from .features import FeatureContext, parse_tokens
from .regimes import Regime

COV_NAMES = ("V", "L")


@dataclass(frozen=True)
class ScenarioSpec:
    """Declaration of a simulated cohort.

    Covariates are a binary baseline ``V`` and a binary monthly chain ``L``
    whose transition depends on ``V``, ``L(m-1)`` and (through ``l_fb``)
    on whether the subject gained weight in month ``m-1``.  ``Z`` is an
    unmeasured baseline factor.

    The monthly diagnosis hazard under no exposure is
    ``expit(h_int + h_v V + h_l L0(m) + h_z Z + h_t m)`` with ``L0`` the covariate
    path under no exposure.  Exposure eligibility and the zero mass are
    logistic in ``(V, L, U)``; positive gains are ``gain_unit`` times a
    rounded-up log-normal, so gains live on a lattice.

    Parameters of note
    ------------------
    rc_gap : float or None
        Preclinical window ``delta``; ``None`` switches reverse causation off.
    mlp_chi : int
        Latent period: exposure in month ``t`` changes the diagnosis rate
        in month ``t + mlp_chi``.
    censor : bool
        When False latent event times are forced into the follow-up window.
    terminal_event : bool
        Treat the event as death (zero-filled records afterwards); requires
        a null time-ratio effect.
    exposure_months : int or None
        Restrict gains to the first months only.
    """

    n: int = 2000
    horizon: int = 60
    seed: int = 0
    blip: BlipSpec = field(default_factory=lambda: BlipSpec("const"))
    beta_true: tuple = (2.0,)
    ratio: Optional[TimeRatioSpec] = None
    psi_true: tuple = ()
    v_prob: float = 0.5
    bmi0_mean: float = 24.0
    bmi0_sd: float = 2.0
    l_init: float = -1.0
    l_init_v: float = 0.5
    l_int: float = -2.0
    l_v: float = 0.5
    l_prev: float = 3.0
    l_fb: float = 1.0
    h_int: float = -5.0
    h_v: float = 0.3
    h_l: float = 1.0
    h_z: float = 0.5
    h_t: float = 0.0
    xi_int: float = 0.3
    xi_v: float = 0.2
    xi_l: float = -0.5
    xi_u: float = -1.0
    zero_int: float = -0.5
    zero_v: float = 0.0
    zero_l: float = 0.8
    zero_u: float = 3.0
    gain_unit: float = 0.1
    gain_mu: float = 0.0
    gain_l: float = 0.0
    gain_sigma: float = 0.6
    drop_max: float = 0.5
    rc_gap: Optional[float] = None
    full_suppression: bool = False
    mlp_chi: int = 0
    censor: bool = True
    terminal_event: bool = False
    exposure_months: Optional[int] = None
    y_int: float = 10.0
    y_v: float = 1.0
    y_l: float = -2.0
    y_z: float = -1.0
    y_x: float = 0.0
    y_sd: float = 1.0
    bmi_noise_sd: float = 0.0
    positivity_floor: float = 1e-3
    name: str = ""

    def __post_init__(self):
        if isinstance(self.blip, dict):
            object.__setattr__(self, "blip", BlipSpec(**self.blip))
        if isinstance(self.ratio, dict):
            object.__setattr__(self, "ratio", TimeRatioSpec(**self.ratio))
        object.__setattr__(self, "beta_true", tuple(float(v) for v in np.atleast_1d(self.beta_true)))
        object.__setattr__(self, "psi_true", tuple(float(v) for v in np.atleast_1d(self.psi_true)))

    def check(self):
        """Raise :class:`SpecError` if the declaration is unusable."""
        if self.n < 1 or self.horizon < 1:
            raise SpecError("n and horizon must be positive")
        if len(self.beta_true) != self.blip.beta_dim:
            raise SpecError(f"beta_true has {len(self.beta_true)} entries, blip expects {self.blip.beta_dim}")
        if self.ratio is not None and len(self.psi_true) != self.ratio.psi_dim:
            raise SpecError(f"psi_true has {len(self.psi_true)} entries, ratio expects {self.ratio.psi_dim}")
        if self.ratio is None and len(self.psi_true):
            raise SpecError("psi_true given without a ratio model")
        if self.terminal_event and self.ratio is not None and any(self.psi_true):
            raise SpecError("terminal events need a null time-ratio effect")
        if self.mlp_chi < 0 or int(self.mlp_chi) != self.mlp_chi:
            raise SpecError("mlp_chi must be a nonnegative integer")
        if self.rc_gap is not None and self.rc_gap < 0:
            raise SpecError("rc_gap must be nonnegative")
        if self.gain_unit <= 0 or self.gain_sigma < 0 or self.drop_max <= 0:
            raise SpecError("gain_unit and drop_max must be positive, gain_sigma nonnegative")
        for t in parse_tokens(self.blip.features, COV_NAMES):
            for f in t.factors:
                if f.startswith(("cov:", "lag:")) and f[4:] not in COV_NAMES:
                    raise SpecError(f"blip feature {t.text!r} uses unknown covariate")
        u_vals = (0.0, 1.0) if self.rc_gap is not None else (0.0,)
        pmin = min(expit(self.zero_int + self.zero_v * v + self.zero_l * l + self.zero_u * u)
                   for v in (0, 1) for l in (0, 1) for u in u_vals)
        if pmin < self.positivity_floor:
            raise SpecError(f"zero-gain probability can drop to {pmin:.2e}, below the positivity floor "
                            f"{self.positivity_floor}")
        return self

    def to_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "blip":
                v = {"family": v.family, "features": list(v.features), "threshold": v.threshold}
            elif f.name == "ratio":
                v = None if v is None else {"family": v.family, "features": list(v.features)}
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown scenario fields: {sorted(extra)}")
        d = dict(d)
        if isinstance(d.get("blip"), dict):
            d["blip"] = BlipSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d["blip"].items()})
        if isinstance(d.get("ratio"), dict):
            d["ratio"] = TimeRatioSpec(**{k: (tuple(v) if isinstance(v, list) else v)
                                         for k, v in d["ratio"].items()})
        return cls(**d)


@dataclass
class GroundTruth:
    """Simulator-only counterfactuals.  Estimators never read this.

    Attributes
    ----------
    y0, x0 : ndarray, shape (n,)
    x_m : ndarray, shape (n, H + 1)
        ``X_m`` under no exposure from month ``m`` on.
    u : ndarray of bool, shape (n, H)
        Preclinical indicator.
    a, xi : ndarray, shape (n, H)
        True exposure and eligibility (before measurement error).
    p_xi, p_zero : ndarray, shape (n, H)
        True eligibility and zero-gain probabilities.
    """

    spec: ScenarioSpec
    y0: np.ndarray
    x0: np.ndarray
    x_m: np.ndarray
    u: np.ndarray
    a: np.ndarray
    xi: np.ndarray
    p_xi: np.ndarray
    p_zero: np.ndarray
    gamma_sum: np.ndarray

    @property
    def ey0(self):
        return float(np.mean(self.y0))

    def cd_audit(self):
        """Fraction of person-months with ``U(m) = 1`` and ``X_m <= m + delta``."""
        if self.spec.rc_gap is None:
            return 1.0
        m = np.arange(self.u.shape[1])[None, :]
        ok = ~self.u | (self.x_m[:, :-1] <= m + self.spec.rc_gap)
        return float(ok.mean())

    def to_json(self, path=None):
        def enc(v):
            if isinstance(v, np.ndarray):
                return v.astype(float).tolist() if v.dtype != bool else v.astype(int).tolist()
            return v

        payload = {"spec": self.spec.to_dict()}
        for f in fields(self):
            if f.name != "spec":
                payload[f.name] = enc(getattr(self, f.name))
        text = json.dumps(payload, sort_keys=True, allow_nan=True, separators=(",", ":"))
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if not text.lstrip().startswith("{"):
            with open(text_or_path, encoding="utf-8") as fh:
                text = fh.read()
        d = json.loads(text)
        spec = ScenarioSpec.from_dict(d.pop("spec"))
        arrays = {k: np.asarray(v, dtype=bool if k in ("u", "xi") else float) for k, v in d.items()}
        return cls(spec=spec, **arrays)


# ---------------------------------------------------------------------------
# generation


def _draws(spec: ScenarioSpec):
    """All random numbers of a scenario, in a fixed order."""
    rng = np.random.default_rng(spec.seed)
    n, H = spec.n, spec.horizon
    return {
        "v": rng.random(n) < spec.v_prob,
        "z": rng.standard_normal(n),
        "bmi0": spec.bmi0_mean + spec.bmi0_sd * rng.standard_normal(n),
        "u_l0": rng.random(n),
        "u_l": rng.random((n, H)),
        "u_x": rng.random((n, H)),
        "u_frac": rng.random(n),
        "x_tail": rng.exponential(size=n),
        "u_xi": rng.random((n, H)),
        "u_zero": rng.random((n, H)),
        "z_gain": rng.standard_normal((n, H)),
        "u_drop": rng.random((n, H)),
        "eps": rng.standard_normal(n),
        "noise": rng.standard_normal((n, H + 1)),
    }


def _l_path(spec, d, fb=None):
    """Covariate chain; ``fb`` is the (n, H) gain indicator feeding back."""
    n, H = spec.n, spec.horizon
    v = d["v"].astype(float)
    L = np.zeros((n, H + 1))
    L[:, 0] = d["u_l0"] < expit(spec.l_init + spec.l_init_v * v)
    for m in range(1, H + 1):
        f = 0.0 if fb is None else fb[:, m - 1]
        L[:, m] = d["u_l"][:, m - 1] < expit(spec.l_int + spec.l_v * v + spec.l_prev * L[:, m - 1] + spec.l_fb * f)
    return L


def _latent_x0(spec, d, L0):
    n, H = spec.n, spec.horizon
    v = d["v"].astype(float)
    h = expit(spec.h_int + spec.h_v * v[:, None] + spec.h_l * L0[:, :H] + spec.h_z * d["z"][:, None]
              + spec.h_t * np.arange(H))
    hit = d["u_x"] < h
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), H)
    x0 = first + d["u_frac"]
    none = first == H
    if spec.censor:
        x0 = np.where(none, H + d["x_tail"] / np.maximum(h[:, -1], 1e-12), x0)
    else:
        x0 = np.where(none, H - 1 + d["u_frac"], x0)
    return x0


def _omega(spec, a, L, t):
    """Log time ratio in month ``t`` from exposure in month ``t - chi``."""
    if spec.ratio is None:
        return np.zeros(a.shape[0])
    s = t - spec.mlp_chi
    if s < 0:
        return np.zeros(a.shape[0])
    psi = np.asarray(spec.psi_true, dtype=float)
    vals = {"V": L["V"], "L": L["L"][:, s]}
    ctx = FeatureContext(float(s), {k: vals[k] for k in vals}, None, None, None, None, None, None)
    G = np.column_stack([np.broadcast_to(ctx.evaluate(tok), a.shape[:1])
                         for tok in parse_tokens(spec.ratio.features, COV_NAMES)])
    return a[:, s] * (G @ psi)


def _run(spec: ScenarioSpec, d, regime: Optional[Regime] = None, mask: Optional[SubgroupMask] = None):
    """Month-by-month generation; ``regime`` caps gains, ``mask`` zeroes gains outside IN(m)."""
    n, H = spec.n, spec.horizon
    v = d["v"].astype(float)
    L0 = _l_path(spec, d)
    x0 = _latent_x0(spec, d, L0)
    L = np.zeros((n, H + 1))
    bmi = np.zeros((n, H + 1))
    bmi[:, 0] = d["bmi0"]
    bmax = bmi[:, 0].copy()
    a = np.zeros((n, H))
    xi = np.zeros((n, H), dtype=bool)
    u = np.zeros((n, H), dtype=bool)
    p_xi = np.zeros((n, H))
    p_zero = np.zeros((n, H))
    rate = np.ones((n, H))
    x_m = np.zeros((n, H + 1))
    x = np.full(n, np.nan)
    rem = x0.copy()
    covs = {"V": v, "L": L}
    for m in range(H + 1):
        if m == 0:
            L[:, 0] = d["u_l0"] < expit(spec.l_init + spec.l_init_v * v)
        else:
            fb = (a[:, m - 1] > 0).astype(float)
            L[:, m] = d["u_l"][:, m - 1] < expit(spec.l_int + spec.l_v * v + spec.l_prev * L[:, m - 1]
                                                 + spec.l_fb * fb)
        done = ~np.isnan(x)
        x_m[:, m] = np.where(done, x, m + rem)
        if m == H:
            break
        if spec.rc_gap is not None:
            u[:, m] = x_m[:, m] <= m + spec.rc_gap
        um = u[:, m].astype(float)
        p_xi[:, m] = expit(spec.xi_int + spec.xi_v * v + spec.xi_l * L[:, m] + spec.xi_u * um)
        p_zero[:, m] = expit(spec.zero_int + spec.zero_v * v + spec.zero_l * L[:, m] + spec.zero_u * um)
        elig = (d["u_xi"][:, m] < p_xi[:, m]) & ~done
        if spec.exposure_months is not None and m >= spec.exposure_months:
            elig &= False
        zero = d["u_zero"][:, m] < p_zero[:, m]
        gain = spec.gain_unit * np.ceil(np.exp(spec.gain_mu + spec.gain_l * L[:, m]
                                               + spec.gain_sigma * d["z_gain"][:, m]))
        prop = np.where(elig & ~zero, gain, 0.0)
        if spec.full_suppression:
            prop = np.where(u[:, m], 0.0, prop)
        if regime is not None:
            vals = {"month": np.full(n, float(m)), "age": np.full(n, 18.0 + m / 12.0), "bmi": bmi[:, m],
                    "V": v, "L": L[:, m], "prev_a": a[:, m - 1] if m else np.zeros(n)}
            prop = np.minimum(prop, regime.gains_for(**vals))
        if mask is not None:
            vals = {"month": np.full(n, float(m)), "age": np.full(n, 18.0 + m / 12.0), "bmi": bmi[:, m],
                    "V": v, "L": L[:, m]}
            flag = np.zeros(n, dtype=bool)
            for rule in mask.rules:
                hit = np.ones(n, dtype=bool)
                for p in rule:
                    hit &= np.broadcast_to(p.evaluate(vals), (n,))
                flag |= hit
            if mask.event_window is not None:
                flag |= x_m[:, m] <= m + mask.event_window
            prop = np.where(flag, prop, 0.0)
        drop = spec.drop_max * (0.05 + 0.95 * d["u_drop"][:, m])
        bmi[:, m + 1] = np.where(elig, bmax + prop, bmax - drop)
        xi[:, m] = elig
        a[:, m] = np.where(elig, bmi[:, m + 1] - bmax, 0.0)
        bmax = np.maximum(bmax, bmi[:, m + 1])
        rate[:, m] = np.exp(_omega(spec, a, covs, m))
        ev = ~done & (rem < rate[:, m])
        x = np.where(ev, m + rem / rate[:, m], x)
        rem = np.where(done | ev, rem, rem - rate[:, m])
    return {"L0": L0, "L": L, "x0": x0, "bmi": bmi, "a": a, "xi": xi, "u": u, "p_xi": p_xi,
            "p_zero": p_zero, "rate": rate, "x_m": x_m, "x": x, "v": v}


def _blip_sum(spec, run, alive, x_arg):
    """Per-subject sum of true blips, accumulated month by month."""
    n, H = spec.n, spec.horizon
    beta = np.asarray(spec.beta_true, dtype=float)
    if not np.any(beta):
        return np.zeros(n)
    a = exposure_from_bmi(run["bmi"], alive).a
    cov = np.stack([np.repeat(run["v"][:, None], H + 1, axis=1), run["L"]], axis=-1)
    toks = parse_tokens(spec.blip.features, COV_NAMES)
    total = np.zeros(n)
    for j in range(H):
        covs = {name: cov[:, j, k] for k, name in enumerate(COV_NAMES)}
        lag = {name: (cov[:, j - 1, k] if j else np.zeros(n)) for k, name in enumerate(COV_NAMES)}
        prev = a[:, j - 1] if j else np.zeros(n)
        with np.errstate(invalid="ignore"):
            post = (run["x"] <= j).astype(float)
        ctx = FeatureContext(float(j), covs, lag, run["bmi"][:, j], prev, post, x_arg[:, j], a[:, j],
                             spec.blip.threshold)
        R = np.column_stack([np.broadcast_to(ctx.evaluate(t), (n,)) for t in toks])
        total = total + a[:, j] * (R @ beta)
    return total


def _x_argument(spec, run, censored):
    """Event-time argument of the blips: ``X_j``, floored under censoring."""
    x_m = run["x_m"]
    if not censored.any():
        return x_m
    H = spec.horizon
    tail = np.cumsum(run["rate"][:, ::-1], axis=1)[:, ::-1]
    k = np.arange(H) + tail[censored].min(axis=0)
    out = x_m.copy()
    out[:, :H] = np.minimum(x_m[:, :H], k[None, :])
    return out


def _alive(spec, x):
    H = spec.horizon
    t = np.arange(H + 1)[None, :]
    if not spec.terminal_event:
        return np.ones((spec.n, H + 1), dtype=bool)
    with np.errstate(invalid="ignore"):
        return ~(x[:, None] <= t)


def _outcome(spec, d, run, alive, x_obs, censored):
    H = spec.horizon
    y0 = (spec.y_int + spec.y_v * run["v"] + spec.y_l * run["L0"][:, :H].mean(axis=1)
          + spec.y_z * d["z"] + spec.y_x * np.minimum(run["x0"], H) + spec.y_sd * d["eps"])
    gsum = _blip_sum(spec, run, alive, _x_argument(spec, run, censored))
    x_eff = np.where(np.isnan(x_obs), H, np.minimum(x_obs, H))
    y = y0 + spec.y_x * (x_eff - np.minimum(run["x0"], H)) + gsum
    return y0, y, gsum


def simulate_cohort(spec: ScenarioSpec):
    """Generate a cohort and its ground truth.

    Returns
    -------
    (Cohort, GroundTruth)
    """
    spec.check()
    d = _draws(spec)
    run = _run(spec, d)
    n, H = spec.n, spec.horizon
    x = run["x"]
    censored = np.isnan(x)
    alive = _alive(spec, x)
    y0, y, gsum = _outcome(spec, d, run, alive, x, censored)
    bmi_true = np.where(alive, run["bmi"], 0.0)
    bmi = bmi_true
    if spec.bmi_noise_sd > 0:
        bmi = np.where(alive, bmi_true + spec.bmi_noise_sd * d["noise"], 0.0)
    cov = np.stack([np.repeat(run["v"][:, None], H + 1, axis=1), run["L"]], axis=-1)
    cov = np.where(alive[:, :, None], cov, 0.0)
    ids = [f"s{i:06d}" for i in range(n)]
    cohort = Cohort(ids, bmi, alive, cov, COV_NAMES, y, x, check=False)
    true_ex = exposure_from_bmi(bmi_true, alive)
    truth = GroundTruth(spec=spec, y0=y0, x0=run["x0"], x_m=run["x_m"], u=run["u"], a=true_ex.a,
                        xi=true_ex.xi, p_xi=run["p_xi"], p_zero=run["p_zero"], gamma_sum=gsum)
    return cohort, truth


def replay(spec: ScenarioSpec, regime: Optional[Regime] = None, mask: Optional[SubgroupMask] = None):
    """Rerun the scenario under an intervention with the same random numbers.

    Returns
    -------
    dict
        ``y`` (utilities under the intervention), ``x`` (event times, NaN
        beyond the horizon), ``a`` (exposures).
    """
    spec.check()
    d = _draws(spec)
    run = _run(spec, d, regime=regime, mask=mask)
    x = run["x"]
    censored = np.isnan(x)
    alive = _alive(spec, x)
    _, y, _ = _outcome(spec, d, run, alive, x, censored)
    return {"y": y, "x": x, "x0": run["x0"], "a": exposure_from_bmi(run["bmi"], alive).a}


def true_counterfactual_mean(truth: GroundTruth, regime: Optional[Regime] = None,
                             mask: Optional[SubgroupMask] = None):
    """True mean utility with no exposure, under a regime, or under masking.

    Without arguments this is the mean stored ``Y0``.  With a regime the
    scenario is replayed with gains capped by the regime; with a mask gains
    are zeroed wherever ``IN(m) = 0`` and left alone where ``IN(m) = 1``.
    """
    if regime is None and mask is None:
        return truth.ey0
    return float(np.mean(replay(truth.spec, regime, mask)["y"]))


def true_survival(truth: GroundTruth, u_grid, regime: Optional[Regime] = None,
                  mask: Optional[SubgroupMask] = None):
    """Sample survival ``P(X^g > u)`` of the replayed event times.

    With no intervention this is the survival of the stored ``X0``.
    """
    u_grid = np.asarray(u_grid, dtype=float)
    if regime is None and mask is None:
        x = truth.x0
    else:
        r = replay(truth.spec, regime, mask)
        x = np.where(np.isnan(r["x"]), np.inf, r["x"])
    return np.array([np.mean(x > u) for u in u_grid])


# ---------------------------------------------------------------------------
# time-independent paradigm


def simulate_paradigm(n=5000, psi=0.5, beta=(0.0, 2.0), zeta=0.3, delta=0.3, seed=0,
                      threshold_blip=True, p_zero=(0.5, 0.3), p_zero_u=3.0, y_x=0.0):
    """Single-exposure cohort on a unit follow-up window.

    One exposure ``A`` in {0, 1} is taken at time 0 and scales the event
    time by ``exp(-psi * A)`` so that ``X0 = X exp(psi A)``.  ``X0`` is
    Beta distributed on (0, 1) with a shape depending on ``L`` and on an
    unmeasured ``Z``.  Reverse causation: ``U = I(X0 <= delta)`` raises the
    probability of no gain.

    With ``threshold_blip`` the outcome blip is
    ``A (beta0 I(X0 <= zeta) + beta1 I(X0 > zeta))``; otherwise it is
    ``beta1 A``.

    Returns
    -------
    (Cohort, GroundTruth)
    """
    rng = np.random.default_rng(seed)
    L = (rng.random(n) < 0.5).astype(float)
    z = rng.standard_normal(n)
    x0 = rng.beta(2.0 + L + 0.5 * (z > 0), 2.0)
    u = x0 <= delta
    pz = expit(np.log(p_zero[0] / (1 - p_zero[0])) + (np.log(p_zero[1] / (1 - p_zero[1]))
                                                       - np.log(p_zero[0] / (1 - p_zero[0]))) * L
               + p_zero_u * u)
    a = (rng.random(n) >= pz).astype(float)
    x = x0 * np.exp(-psi * a)
    censored = x >= 1.0
    x_obs = np.where(censored, np.nan, x)
    b0, b1 = (float(v) for v in np.atleast_1d(beta)) if threshold_blip else (0.0, float(np.atleast_1d(beta)[-1]))
    y0 = 5.0 + 1.0 * L - 1.0 * z + y_x * x0 + rng.standard_normal(n)
    if threshold_blip:
        blip = BlipSpec("x_dependent", ("x_le", "x_gt"), threshold=zeta)
        gam = a * (b0 * (x0 <= zeta) + b1 * (x0 > zeta))
        beta_true = (b0, b1)
    else:
        blip = BlipSpec("const")
        gam = a * b1
        beta_true = (b1,)
    y = y0 + gam
    bmi0 = 24.0 + rng.standard_normal(n)
    bmi = np.column_stack([bmi0, bmi0 + a])
    cov = np.repeat(L[:, None, None], 2, axis=1)
    cohort = Cohort([f"p{i:06d}" for i in range(n)], bmi, np.ones((n, 2), bool), cov, ("L",), y, x_obs,
                    check=False)
    spec = ScenarioSpec(n=n, horizon=1, seed=seed, blip=blip, beta_true=beta_true,
                        ratio=TimeRatioSpec("const"), psi_true=(psi,), rc_gap=delta, name="paradigm")
    x_m = np.column_stack([x0, np.where(censored, x0, x)])
    truth = GroundTruth(spec=spec, y0=y0, x0=x0, x_m=x_m, u=u[:, None], a=a[:, None],
                        xi=np.ones((n, 1), bool), p_xi=np.ones((n, 1)), p_zero=pz[:, None],
                        gamma_sum=gam)
    return cohort, truth


# ---------------------------------------------------------------------------
# quantile-quantile oracle


class QQMap:
    """Per-arm empirical map ``x -> S0^{-1}(S(x))``.

    For each arm the empirical distribution of the observed times is
    pushed through the empirical quantile function of the counterfactual
    times.
    """

    def __init__(self, arms):
        self.arms = arms

    def __call__(self, x, a):
        key = _arm_key(a)
        if key not in self.arms:
            raise ConfigError(f"no samples for arm {a!r}")
        xs, x0s = self.arms[key]
        x = np.asarray(x, dtype=float)
        p = np.interp(x, xs, (np.arange(len(xs)) + 0.5) / len(xs))
        return np.interp(p, (np.arange(len(x0s)) + 0.5) / len(x0s), x0s)


def _arm_key(a):
    return float(a)


def qq_oracle(samples_x_given_a, samples_x0_given_a, min_samples=500):
    """Build the empirical quantile-quantile map per exposure arm.

    Parameters
    ----------
    samples_x_given_a, samples_x0_given_a : dict
        Arm value to 1-d sample arrays of observed and counterfactual times.

    Returns
    -------
    QQMap

    Examples
    --------
    >>> rng = np.random.default_rng(0)
    >>> s = rng.exponential(size=1000)
    >>> qq = qq_oracle({0: s}, {0: s})
    >>> float(qq(np.median(s), 0)) == float(np.median(s))
    True
    """
    arms = {}
    for a, xs in samples_x_given_a.items():
        if a not in samples_x0_given_a:
            raise ConfigError(f"arm {a!r} has no counterfactual samples")
        xs = np.sort(np.asarray(xs, dtype=float))
        x0s = np.sort(np.asarray(samples_x0_given_a[a], dtype=float))
        if len(xs) == 0 or len(x0s) == 0:
            raise ConfigError(f"arm {a!r} is empty")
        if min(len(xs), len(x0s)) < min_samples:
            import warnings
            warnings.warn(f"arm {a!r} has fewer than {min_samples} samples", stacklevel=2)
        arms[_arm_key(a)] = (xs, x0s)
    return QQMap(arms)


# ---------------------------------------------------------------------------
# scenario presets

PRESETS = {
    "null": dict(beta_true=(0.0,), ratio=TimeRatioSpec("const"), psi_true=(0.0,), l_fb=0.0, h_z=0.0,
                 gain_unit=0.5, h_int=-9.25, h_t=0.1),
    "co": dict(beta_true=(2.0,), rc_gap=None),
    "rc_cd": dict(beta_true=(2.0,), ratio=TimeRatioSpec("const"), psi_true=(0.5,), rc_gap=6.0,
                  full_suppression=True, gain_unit=0.5, h_int=-8.0, h_t=0.1, h_z=1.5, y_z=-4.0),
    "censored": dict(beta_true=(2.0,), ratio=TimeRatioSpec("const"), psi_true=(0.5,), gain_unit=0.5,
                     h_int=-9.25, h_t=0.1),
    "mlp": dict(beta_true=(0.0,), ratio=TimeRatioSpec("const"), psi_true=(0.5,), mlp_chi=9, rc_gap=6.0,
                y_x=0.1, horizon=24, zero_int=1.5, h_int=-4.0, full_suppression=True),
    "measurement_error": dict(beta_true=(2.0,), bmi_noise_sd=0.3),
    "regime": dict(beta_true=(2.0,), gain_unit=0.1 / 12, l_fb=0.0, rc_gap=None),
}


def scenario(name, **overrides):
    """A named scenario preset with optional overrides."""
    if name not in PRESETS:
        raise ConfigError(f"unknown scenario {name!r}; available: {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    kw.setdefault("name", name)
    return ScenarioSpec(**kw)
