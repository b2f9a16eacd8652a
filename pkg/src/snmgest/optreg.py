"""Optimal maximum-gain regimes.

Given blip and time-ratio parameters, a backward pass over months picks at
each month the gain on a finite action grid that maximizes the expected
blip, caps it at the observed gain, and shifts event times to the
resulting regime.  A joint grid search then looks for parameters whose
restricted score tests are both zero under the regime they imply.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .cohort import AnalysisFrame, as_frame
from .ctf import BlipSpec, TimeRatioSpec
from .exceptions import BranchResolutionError, ConfigError, MissingArmError, UndefinedEstimateError
from .features import parse_tokens

TIE_TOL = 1e-12


@dataclass(frozen=True)
class OptRegimeSpec:
    """Model pieces for the optimal-regime recursion.

    Parameters
    ----------
    blip : BlipSpec
        Typically the ``concave`` family, ``gamma = a (beta0 - beta1 a + ...)``.
    ratio : TimeRatioSpec, optional
    action_grid : sequence of float
        Nonnegative candidate gains, sorted ascending.
    regression : sequence of str
        History features for the per-month regression of the blip on the
        past, one outcome column per action.
    """

    blip: BlipSpec = field(default_factory=lambda: BlipSpec("concave"))
    ratio: Optional[TimeRatioSpec] = None
    action_grid: tuple = (0.0, 0.5, 1.0)
    regression: tuple = ("1", "cov:*", "prev_a")

    def __post_init__(self):
        g = np.asarray(self.action_grid, dtype=float)
        if g.size == 0 or np.any(g < 0) or not np.all(np.isfinite(g)):
            raise ConfigError("action grid must be a nonempty set of finite nonnegative gains")
        object.__setattr__(self, "action_grid", tuple(float(v) for v in np.unique(g)))
        if isinstance(self.regression, str):
            object.__setattr__(self, "regression", (self.regression,))


def _expand(tokens, cov_names):
    out = []
    for t in tokens:
        out += [t[:-1] + c for c in cov_names] if t.endswith(("cov:*", "lag:*")) else [t]
    return tuple(out)


def _ratio(rate_spec, frame, psi, a):
    """``exp(omega(a))`` on the observed history; ``a`` has shape (n, H)."""
    if rate_spec is None:
        return np.ones_like(a)
    psi = rate_spec.check_psi(psi)
    G = frame.context().matrix(rate_spec.tokens(frame.cov_names), a.shape)
    return np.exp(a * (G @ psi))


def _gamma(blip, frame, beta, a, x):
    """Blip at candidate gains ``a`` (n, H) with observed past and event argument ``x``."""
    ctx = frame.context(x=x, a=a, threshold=blip.threshold)
    R = ctx.matrix(blip.tokens(frame.cov_names), a.shape)
    return a * (R @ np.asarray(beta, dtype=float))


def _shift(d, r_obs, r_new):
    """Remaining time after month start under a new rate in that month.

    ``d`` is the remaining time under the observed rate ``r_obs``.  Latent
    time consumed is ``r_obs * d`` inside the month, ``r_obs + (d - 1)``
    beyond it; the map is inverted at ``r_new``.
    """
    inside = d < 1.0
    latent = np.where(inside, r_obs * d, r_obs + d - 1.0)
    return np.where(latent < r_new, latent / r_new, 1.0 + latent - r_new)


def candidate_x_shift(spec: OptRegimeSpec, history, m, a, x_next, psi, a_obs=None):
    """Event time when month ``m`` gain is ``a`` instead of the observed one.

    Parameters
    ----------
    history : dict
        ``{"covariates": {name: value}}`` at month ``m`` for the ratio
        features; ``a_obs`` may also be given here as ``"a"``.
    x_next : float
        Event time under the observed month-``m`` gain and the regime
        afterwards.

    Examples
    --------
    >>> import math
    >>> spec = OptRegimeSpec(ratio=TimeRatioSpec("const"))
    >>> candidate_x_shift(spec, {"a": 1.0}, 3, 0.0, 3.5, [math.log(2)])
    4.0
    """
    history = history or {}
    a_obs = history.get("a", a_obs)
    if a_obs is None:
        raise ConfigError("the observed gain at month m is required")
    x_next = float(x_next)
    if not np.isfinite(x_next) and not np.isinf(x_next):
        raise BranchResolutionError(f"event time {x_next!r} does not fall in any branch")
    d = x_next - m
    if d <= 0 or spec.ratio is None:
        return x_next
    covs = history.get("covariates", {})
    G = []
    for tok in spec.ratio.tokens(tuple(covs)):
        v = tok.sign
        for f in tok.factors:
            v = v * (1.0 if f == "1" else float(m) if f == "m" else covs[f[4:]] if f.startswith("cov:")
                     else float(f))
        G.append(v)
    psi = spec.ratio.check_psi(psi)
    g = float(np.dot(G, psi))
    with np.errstate(over="ignore"):
        r_obs, r_new = np.exp(a_obs * g), np.exp(a * g)
    if not (np.isfinite(r_obs) and np.isfinite(r_new)):
        raise BranchResolutionError("time ratio is not finite")
    return float(m + _shift(np.asarray(d), r_obs, r_new))


@dataclass
class RecursionState:
    """Output of :func:`optimal_regime_recursion`.

    Attributes
    ----------
    gain_star : ndarray, shape (n, H)
        Unconstrained argmax per subject-month.
    gain : ndarray, shape (n, H)
        Assigned gain ``min(A(m), gain_star)``.
    x_regime : ndarray, shape (n, H + 1)
        Event time when the regime is followed from month ``m`` on.
    x_zero : ndarray, shape (n, H)
        Event time with zero gain at ``m`` and the regime afterwards.
    """

    gain_star: np.ndarray
    gain: np.ndarray
    x_regime: np.ndarray
    x_zero: np.ndarray
    gamma_obs: np.ndarray
    gamma_reg: np.ndarray
    beta: np.ndarray
    psi: Optional[np.ndarray]

    def y_regime(self, utility):
        """``Y - sum_k [gamma_k(A) - gamma_k(g)]``: utility under the regime."""
        return np.asarray(utility) - (self.gamma_obs - self.gamma_reg).sum(axis=1)

    def y_zero_here(self, utility):
        """Per month ``m``: utility with zero gain at ``m`` and the regime afterwards."""
        diff = self.gamma_obs - self.gamma_reg
        later = np.cumsum(diff[:, ::-1], axis=1)[:, ::-1] - diff
        return np.asarray(utility)[:, None] - self.gamma_obs - later


def _regress(W, Y, rows):
    coef, *_ = np.linalg.lstsq(W[rows], Y[rows], rcond=None)
    return W @ coef


def optimal_regime_recursion(cohort, spec: OptRegimeSpec, beta, psi=None, check_concavity=True):
    """Backward recursion for the optimal regime at fixed ``(beta, psi)``.

    At month ``m`` (from the last down to 0) the blip is evaluated for every
    action with the event argument set to the time under zero gain at ``m``
    and the regime afterwards.  Subjects with ``X <= m`` take the pointwise
    argmax; the others take the argmax of a per-action least-squares fit
    on history among subjects with ``X > m``.  Ties go to the smallest
    gain.  The assigned gain is capped at the observed gain.

    Returns
    -------
    RecursionState
    """
    frame = as_frame(cohort)
    beta = spec.blip.check_beta(beta)
    if spec.ratio is not None:
        psi = spec.ratio.check_psi(psi if psi is not None else np.zeros(spec.ratio.psi_dim))
    else:
        psi = None
    if check_concavity:
        rep = concavity_check(spec, frame, beta)
        if not rep.ok:
            raise ConfigError(f"blip is neither zero nor strictly concave on the action grid: "
                              f"{rep.violations[0]}")
    n, H = frame.n, frame.horizon
    acts = np.asarray(spec.action_grid)
    A = frame.exposure
    x_obs = np.where(np.isnan(frame.event_time), np.inf, frame.event_time)
    toks = parse_tokens(_expand(spec.regression, frame.cov_names), frame.cov_names)
    W = frame.context().matrix(toks, (n, H))
    r_obs = _ratio(spec.ratio, frame, psi, A)
    r_zero = np.ones((n, H))
    gain_star = np.zeros((n, H))
    gain = np.zeros((n, H))
    x_reg = np.zeros((n, H + 1))
    x_zero = np.zeros((n, H))
    x_reg[:, H] = x_obs
    gam_obs = np.zeros((n, H))
    gam_reg = np.zeros((n, H))
    x_cur = x_obs.copy()
    for m in range(H - 1, -1, -1):
        d = x_cur - m
        live = d > 0
        with np.errstate(invalid="ignore"):
            xz = np.where(live, m + _shift(np.where(live, d, 1.0), r_obs[:, m], r_zero[:, m]), x_cur)
        x_zero[:, m] = xz
        xm = np.broadcast_to(xz[:, None], (n, H))
        vals = np.empty((n, acts.size))
        for k, a in enumerate(acts):
            cand = A.copy()
            cand[:, m] = a
            vals[:, k] = _gamma(spec.blip, frame, beta, cand, xm)[:, m]
        known = x_obs <= m
        fit_rows = ~known
        score = vals.copy()
        if 0 < fit_rows.sum() < W.shape[2]:
            raise MissingArmError(f"month {m}: {int(fit_rows.sum())} subjects with X > m cannot fit "
                                  f"{W.shape[2]} regression terms")
        if fit_rows.any() and np.any(vals[fit_rows] != 0):
            score[fit_rows] = _regress(W[:, m, :], vals, fit_rows)[fit_rows]
        best = score.max(axis=1, keepdims=True)
        pick = np.argmax(score >= best - TIE_TOL * np.maximum(1.0, np.abs(best)), axis=1)
        gs = acts[pick]
        gain_star[:, m] = gs
        g = np.minimum(A[:, m], gs)
        gain[:, m] = g
        cand = A.copy()
        cand[:, m] = g
        gam_reg[:, m] = _gamma(spec.blip, frame, beta, cand, xm)[:, m]
        gam_obs[:, m] = _gamma(spec.blip, frame, beta, A, xm)[:, m]
        r_g = _ratio(spec.ratio, frame, psi, cand)[:, m]
        with np.errstate(invalid="ignore"):
            x_cur = np.where(live, m + _shift(np.where(live, d, 1.0), r_obs[:, m], r_g), x_cur)
        x_reg[:, m] = x_cur
    return RecursionState(gain_star, gain, x_reg, x_zero, gam_obs, gam_reg, beta, psi)


@dataclass
class ConcavityReport:
    ok: bool
    violations: list
    n_checked: int


def concavity_check(spec: OptRegimeSpec, sample_histories, beta, x=None):
    """Check that the blip is zero or strictly concave in the gain on the action grid.

    Parameters
    ----------
    sample_histories : AnalysisFrame or Cohort
        Histories on which to evaluate the blip at every month.
    x : ndarray, optional
        Event-time argument for x-dependent blips; defaults to the
        observed event time (the horizon for censored subjects).

    Returns
    -------
    ConcavityReport
        ``violations`` lists ``(subject, month, grid index, second difference)``.

    Examples
    --------
    >>> from snmgest.cohort import SubjectHistory, Cohort
    >>> c = Cohort.from_subjects([SubjectHistory.from_bmi([22, 23])])
    >>> concavity_check(OptRegimeSpec(action_grid=(0, 1, 2)), c, [2.0, 1.0]).ok
    True
    >>> concavity_check(OptRegimeSpec(BlipSpec("concave"), action_grid=(0, 1, 2)), c, [0.0, -1.0]).ok
    False
    """
    frame = as_frame(sample_histories)
    beta = spec.blip.check_beta(beta)
    acts = np.asarray(spec.action_grid)
    n, H = frame.n, frame.horizon
    if x is None:
        xv = np.where(np.isnan(frame.event_time), H, frame.event_time)
        x = np.broadcast_to(xv[:, None], (n, H))
    vals = np.stack([_gamma(spec.blip, frame, beta, np.full((n, H), a), x) for a in acts], axis=-1)
    violations = []
    if acts.size >= 3:
        h = np.diff(acts)
        slope = np.diff(vals, axis=-1) / h
        second = np.diff(slope, axis=-1)
        zero = np.all(np.abs(vals) <= 1e-12, axis=-1)
        bad = (second >= 0) & ~zero[..., None]
        for i, m, k in zip(*np.nonzero(bad)):
            violations.append((int(i), int(m), int(k + 1), float(second[i, m, k])))
    return ConcavityReport(not violations, violations, int(n * H))


# ---------------------------------------------------------------------------
# joint estimation


@dataclass
class JointFitConfig:
    """Grids and options for :func:`joint_optimal_fit`.

    ``beta_grid`` and ``psi_grid`` hold one ``(lo, hi, step)`` triple per
    coordinate (at most two coordinates per block).
    """

    beta_grid: tuple = ((0.0, 4.0, 0.25),)
    psi_grid: tuple = ((-1.0, 1.0, 0.1),)
    zeta: Optional[float] = None
    treatment: tuple = ("1", "m", "cov:*", "prev_a")
    alpha_level: float = 0.05
    threads: Optional[int] = None

    def __post_init__(self):
        for name in ("beta_grid", "psi_grid"):
            g = getattr(self, name)
            if g and not isinstance(g[0], (tuple, list)):
                g = (tuple(g),)
                object.__setattr__(self, name, g)
            if len(g) > 2:
                raise ConfigError(f"{name} allows at most two coordinates per block")


def _axis(lo, hi, step):
    k = int(round((hi - lo) / step))
    return np.round(lo + step * np.arange(k + 1), 12)


def _residualize(W, Z, rows):
    out = np.zeros((W.shape[0], Z.shape[1]))
    if rows.sum() == 0:
        return out
    coef, *_ = np.linalg.lstsq(W[rows], Z[rows], rcond=None)
    out[rows] = Z[rows] - W[rows] @ coef
    return out


def _quad(u_rows, subj, n):
    U = u_rows.sum(axis=0)
    per = np.column_stack([np.bincount(subj, weights=u_rows[:, k], minlength=n) for k in range(u_rows.shape[1])])
    V = per.T @ per
    if np.all(np.abs(U) <= 1e-12 * max(1.0, np.abs(u_rows).sum())):
        return 0.0
    return float(U @ np.linalg.pinv(V) @ U)


def _horizon_image(frame, spec, st):
    """Where the end of follow-up lands under zero gain at ``m`` and the regime after."""
    n, H = frame.n, frame.horizon
    r_obs = _ratio(spec.ratio, frame, st.psi, frame.exposure)
    r_reg = _ratio(spec.ratio, frame, st.psi, st.gain)
    out = np.zeros((n, H))
    x_cur = np.full(n, float(H))
    for m in range(H - 1, -1, -1):
        d = x_cur - m
        out[:, m] = m + _shift(d, r_obs[:, m], 1.0)
        x_cur = m + _shift(d, r_obs[:, m], r_reg[:, m])
    return out


def _censor_floor(frame, spec, st):
    """``C_m = min(X_m, K_m)`` with ``K_m`` the smallest horizon image among censored subjects."""
    xz = st.x_zero
    cens = np.isnan(frame.event_time)
    if not cens.any() or spec.ratio is None:
        return xz
    k = _horizon_image(frame, spec, st)[cens].min(axis=0)
    return np.where(cens[:, None], k[None, :], np.minimum(xz, k[None, :]))


def _joint_scores(frame, spec, st, cfg, W):
    n, H = frame.n, frame.horizon
    m = np.arange(H)[None, :]
    incl = frame.xi.copy()
    xz = st.x_zero
    cz = _censor_floor(frame, spec, st)
    if cfg.zeta is not None:
        incl &= cz > m + cfg.zeta
    i, t = np.nonzero(incl)
    if i.size == 0:
        raise UndefinedEstimateError("no person-months pass the restriction")
    Wr = W[i, t]
    rows = np.ones(i.size, dtype=bool)
    # beta block: residualized blip features at the observed gain times the zero-here utility
    F = np.stack([frame.exposure * r for r in
                  np.moveaxis(frame.context(x=np.broadcast_to(xz, (n, H)), a=frame.exposure,
                                            threshold=spec.blip.threshold)
                              .matrix(spec.blip.tokens(frame.cov_names), (n, H)), -1, 0)], axis=-1)
    G = _residualize(Wr, F[i, t], rows)
    hy = st.y_zero_here(frame.utility)[i, t]
    hy = hy - hy.mean()
    stat_b = _quad(G * hy[:, None], i, n)
    stat_p, dof_p = 0.0, 0
    if spec.ratio is not None:
        ga = _residualize(Wr, frame.exposure[i, t][:, None], rows)
        h = np.minimum(cz[i, t], H + 1.0) - t - (cfg.zeta or 0.0)
        stat_p = _quad(ga * h[:, None], i, n)
        dof_p = 1
    return stat_b, stat_p, G.shape[1], dof_p


@dataclass
class JointFitResult:
    beta: np.ndarray
    psi: Optional[np.ndarray]
    regime: RecursionState
    ey0_opt: float
    landscape: pd.DataFrame
    p_value: float


def joint_optimal_fit(cohort, spec: OptRegimeSpec, config: JointFitConfig = None):
    """Grid search for parameters whose two restricted score tests vanish jointly.

    For each grid cell the optimal regime is recomputed, the blip score
    (utility with zero gain at ``m`` and the regime after) and the time
    ratio score (event time under the same intervention) are evaluated,
    and cells are ranked by the sum of the two quadratic statistics.

    Returns
    -------
    JointFitResult
        ``ey0_opt`` is the mean utility under the recovered regime.

    Raises
    ------
    UndefinedEstimateError
        When every cell is rejected at ``alpha_level``; the message carries
        the best cells of the landscape.
    """
    config = config or JointFitConfig()
    frame = as_frame(cohort)
    n, H = frame.n, frame.horizon
    bax = [_axis(*g) for g in config.beta_grid]
    if len(bax) != spec.blip.beta_dim:
        raise ConfigError(f"beta grid has {len(bax)} coordinate(s); the blip has {spec.blip.beta_dim}")
    if spec.ratio is not None:
        pax = [_axis(*g) for g in config.psi_grid]
        if len(pax) != spec.ratio.psi_dim:
            raise ConfigError("psi grid must match the time ratio dimension")
    else:
        pax = []
    toks = parse_tokens(_expand(config.treatment, frame.cov_names), frame.cov_names)
    W = frame.context().matrix(toks, (n, H))
    cells = list(itertools.product(*(bax + pax)))

    def run(cell):
        b = np.asarray(cell[: len(bax)])
        p = np.asarray(cell[len(bax):]) if pax else None
        try:
            st = optimal_regime_recursion(frame, spec, b, p, check_concavity=False)
            sb, sp, db, dp = _joint_scores(frame, spec, st, config, W)
        except (UndefinedEstimateError, MissingArmError, np.linalg.LinAlgError):
            return None
        return sb, sp, db, dp

    if config.threads and config.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            out = list(pool.map(run, cells))
    else:
        out = [run(c) for c in cells]
    rows = []
    for cell, res in zip(cells, out):
        if res is None:
            continue
        sb, sp, db, dp = res
        rows.append(dict({f"beta{k}": v for k, v in enumerate(cell[: len(bax)])},
                         **{f"psi{k}": v for k, v in enumerate(cell[len(bax):])},
                         stat_beta=sb, stat_psi=sp, stat=sb + sp,
                         p_value=float(stats.chi2.sf(sb + sp, db + dp))))
    land = pd.DataFrame(rows)
    if land.empty:
        raise UndefinedEstimateError("no grid cell could be evaluated")
    best = land.loc[land["stat"].idxmin()]
    if best["p_value"] < config.alpha_level:
        dump = land.nsmallest(5, "stat").to_string(index=False)
        raise UndefinedEstimateError(f"no joint zero on the grid; best cells:\n{dump}")
    b = np.array([best[f"beta{k}"] for k in range(len(bax))])
    p = np.array([best[f"psi{k}"] for k in range(len(pax))]) if pax else None
    st = optimal_regime_recursion(frame, spec, b, p, check_concavity=False)
    ey = float(np.mean(st.y_regime(frame.utility)))
    return JointFitResult(b, p, st, ey, land, float(best["p_value"]))
