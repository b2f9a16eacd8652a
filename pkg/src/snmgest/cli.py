"""Command-line interface.

Every subcommand writes into ``--out``:

``report.jsonl``   one JSON object per result row
``report.txt``     the same rows as an aligned table
``manifest.json``  command, paths, seed, version, config digest and output hashes

Errors are reported as one JSON line on stderr with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .altest import HazardModel, ZeroProbModel, gformula_mean_y0, gformula_survival, iptw_intercal, \
    iptw_mean_y0, iptw_survival
from .cohort import Cohort, coarsen, mask_intractable
from .config import RunConfig, load_config, parse_config
from .exceptions import ConfigError, SNMError
from .gest import g_estimate, sensitivity_zeta
from .optreg import JointFitConfig, OptRegimeSpec, joint_optimal_fit
from .regimes import Regime, estimate_ey0_g
from .simlab import PRESETS, ScenarioSpec, scenario, simulate_cohort

COMMANDS = ("simulate", "estimate", "iptw", "gformula", "regime-eval", "opt-regime", "sensitivity")
DEFAULT_ANCHOR = 72.0


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    vals = _floats(text)
    if any(v != int(v) or v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"expected comma-separated positive integers, got {text!r}")
    return [int(v) for v in vals]


def build_parser():
    p = _Parser(prog="snmgest", description="g-estimation of structural nested models")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML or JSON run configuration")
        s.add_argument("--input", help="person-month CSV")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--threads", type=int, default=None)
        s.add_argument("--zeta", type=_floats, default=None)
        s.add_argument("--coarsen", type=_ints, default=None)
        s.add_argument("--variance", choices=("iid", "cluster"), default=None)
    return p


# ---------------------------------------------------------------------------
# output helpers


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return None if math.isnan(v) else v
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return [_clean(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    return v


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, dict)):
        return json.dumps(v, sort_keys=True)
    return str(v)


def write_report(out: Path, rows):
    rows = [_clean(r) for r in rows]
    with open(out / "report.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, allow_nan=False) + "\n")
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    table = pd.DataFrame([{c: _fmt(r.get(c)) for c in cols} for r in rows], columns=cols)
    text = table.to_string(index=False) if len(table) else "(no rows)"
    with open(out / "report.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, args, cfg: RunConfig, files):
    manifest = {
        "command": args.command,
        "config": args.config,
        "config_digest": cfg.digest(),
        "input": args.input,
        "out": args.out,
        "seed": args.seed,
        "zeta": args.zeta,
        "coarsen": args.coarsen,
        "variance": args.variance,
        "version": __version__,
        "outputs": {f: _sha256(out / f) for f in sorted(files)},
    }
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _read_cohort(args):
    if not args.input:
        raise ConfigError(f"{args.command} needs --input")
    return Cohort.read_csv(args.input)


def _threads(args):
    return args.threads if args.threads else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, cfg, out):
    sc = dict(cfg.section("scenario"))
    preset = sc.pop("preset", None)
    sc["seed"] = args.seed
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown scenario preset {preset!r}")
        base = scenario(preset).to_dict()
        base.update(sc)
        sc = base
    spec = ScenarioSpec.from_dict(sc)
    cohort, truth = simulate_cohort(spec)
    cohort.to_csv(out / "cohort.csv")
    truth.to_json(out / "truth.json")
    rows = [{"scenario": spec.name, "n": cohort.n, "horizon": cohort.horizon,
             "censored": float(np.mean(cohort.censored)), "mean_y": float(np.mean(cohort.utility)),
             "ey0_true": truth.ey0, "seed": spec.seed}]
    return rows, ["cohort.csv", "truth.json"]


def _estimate_rows(cohort, cfg, gcfg, extra):
    res = g_estimate(cohort, cfg.blip, cfg.ratio, gcfg)
    d = res.to_dict()
    rows = []
    for kind in ("beta", "psi"):
        if d[f"{kind}_hat"] is None:
            continue
        for k, name in enumerate(d[f"{kind}_names"]):
            se = d[f"{kind}_se"]
            rows.append(dict(extra, parameter=name, estimate=d[f"{kind}_hat"][k],
                             se=None if se is None else se[k],
                             ci=d["confidence_set"].get(name), verdict=d["verdict"]))
    rows.append(dict(extra, parameter="E[Y0]", estimate=d["ey0_hat"], se=d["ey0_se"], ci=None,
                     verdict=d["verdict"]))
    return rows


def _scaled(gcfg, k):
    from dataclasses import replace

    z = None if gcfg.zeta is None else gcfg.zeta / k
    c = None if gcfg.chi is None else gcfg.chi / k
    return replace(gcfg, zeta=z, chi=c)


def cmd_estimate(args, cfg, out):
    cohort = _read_cohort(args)
    if cfg.mask is not None:
        cohort = mask_intractable(cohort, cfg.mask)
    zeta = args.zeta[0] if args.zeta else None
    if args.zeta and len(args.zeta) > 1:
        raise ConfigError("estimate takes a single --zeta; use the sensitivity command for a scan")
    gcfg = cfg.gest(zeta=zeta, variance=args.variance, threads=_threads(args))
    factors = args.coarsen or [1]
    if factors != [1] and 1 not in factors:
        factors = [1] + factors
    rows = []
    for k in factors:
        data = cohort if k == 1 else coarsen(cohort, k)
        extra = {"coarsen": k} if len(factors) > 1 else {}
        rows += _estimate_rows(data, cfg, _scaled(gcfg, k), extra)
    return rows, []


def _zero_model(cfg):
    s = cfg.section("iptw")
    return ZeroProbModel(tuple(s.get("features", ("1", "cov:*"))), bool(s.get("at_risk_only", False)))


def _u_grid(cfg):
    return [float(u) for u in cfg.section("survival").get("u_grid", [])]


def cmd_iptw(args, cfg, out):
    cohort = _read_cohort(args)
    s = cfg.section("iptw")
    chi = int(s.get("chi", 0))
    normalized = bool(s.get("normalized", True))
    rows = []
    for reg in [None] + cfg.regimes:
        est = iptw_mean_y0(cohort, reg, _zero_model(cfg), normalized=normalized, chi=chi)
        rows.append({"target": "E[Y0]", "regime": "none" if reg is None else reg.name or reg.kind,
                     "u": None, "estimate": est.estimate, "se": est.se, "n_consistent": est.n_consistent})
    if cfg.mask is not None:
        est = iptw_intercal(cohort, cfg.mask, chi, _zero_model(cfg), normalized=normalized)
        rows.append({"target": "E[Y0 outside IN]", "regime": "none", "u": None, "estimate": est.estimate,
                     "se": est.se, "n_consistent": est.n_consistent})
    grid = _u_grid(cfg)
    if grid:
        zm = ZeroProbModel(tuple(s.get("features", ("1", "cov:*"))), True)
        tab = iptw_survival(cohort, None, zm, grid, chi=chi, normalized=bool(s.get("survival_normalized", False)))
        for r in tab.itertuples(index=False):
            rows.append({"target": "S0(u)", "regime": "none", "u": r.u, "estimate": r.S, "se": r.mc_se,
                         "n_consistent": None})
    return rows, []


def cmd_gformula(args, cfg, out):
    cohort = _read_cohort(args)
    s = cfg.section("gformula")
    model = HazardModel(tuple(s.get("hazard_features", ("1", "m", "cov:*"))),
                        {k: tuple(v) for k, v in (s.get("transitions") or {}).items()} or None,
                        tuple(s.get("outcome_features", ("1",))), bool(s.get("unexposed_only", False)))
    draws = int(s.get("mc_draws", 10000))
    threads = _threads(args)
    model.fit(cohort)
    rows = []
    est = gformula_mean_y0(cohort, None, model, draws, args.seed, threads)
    rows.append({"target": "E[Y0]", "u": None, "estimate": est.estimate, "mc_se": est.se})
    grid = _u_grid(cfg)
    if grid:
        tab = gformula_survival(cohort, None, model, grid, draws, args.seed, threads)
        for r in tab.itertuples(index=False):
            rows.append({"target": "S0(u)", "u": r.u, "estimate": r.S, "mc_se": r.mc_se})
    return rows, []


def cmd_regime_eval(args, cfg, out):
    cohort = _read_cohort(args)
    regimes = cfg.regimes or [Regime.zero()]
    zeta = args.zeta[0] if args.zeta else None
    gcfg = cfg.gest(zeta=zeta, variance=args.variance, threads=_threads(args))
    rows = []
    for reg in regimes:
        ev = estimate_ey0_g(cohort, reg, cfg.blip, cfg.ratio, gcfg)
        r = ev.estimates
        rows.append({"regime": reg.name or reg.kind, "definition": reg.to_dict(), "ey0_g": r.ey0_hat,
                     "se": r.ey0_se, "beta": r.beta_hat, "psi": r.psi_hat, "verdict": r.diagnostics["verdict"]})
    return rows, []


def regime_table(cohort, state):
    """Recovered optimal regime as a dynamic rule list keyed on month and covariates.

    Distinct histories that map to the same gain share a rule; a history
    that maps to several gains (possible when the regression uses
    continuous features) keeps the first and is counted in ``conflicts``.
    """
    names = list(cohort.cov_names)
    H = cohort.horizon
    cov = cohort.covariates[:, :H, :]
    seen = {}
    conflicts = 0
    for m in range(H):
        keys = np.column_stack([cov[:, m, :], state.gain_star[:, m]])
        for row in np.unique(keys, axis=0):
            key = (m,) + tuple(row[:-1])
            if key in seen and seen[key] != row[-1]:
                conflicts += 1
                continue
            seen.setdefault(key, float(row[-1]))
    rules = []
    for key, g in sorted(seen.items()):
        when = [f"month == {key[0]}"] + [f"{n} == {v:g}" for n, v in zip(names, key[1:])]
        rules.append((when, g))
    return Regime.dynamic(rules, default=0.0, name="optimal"), conflicts


def cmd_opt_regime(args, cfg, out):
    cohort = _read_cohort(args)
    s = dict(cfg.section("optreg"))
    spec = OptRegimeSpec(cfg.blip, cfg.ratio, tuple(s.pop("action_grid", (0.0, 0.5, 1.0))),
                         tuple(s.pop("regression", ("1", "cov:*", "prev_a"))))
    if args.zeta:
        s["zeta"] = args.zeta[0]
    for k in ("beta_grid", "psi_grid", "treatment"):
        if k in s:
            s[k] = tuple(tuple(g) if isinstance(g, list) else g for g in s[k])
    s["threads"] = _threads(args)
    res = joint_optimal_fit(cohort, spec, JointFitConfig(**s))
    reg, conflicts = regime_table(cohort, res.regime)
    with open(out / "regimes.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"regimes": [reg.to_dict()]}, sort_keys=True, indent=2) + "\n")
    res.landscape.to_csv(out / "landscape.csv", index=False, float_format="%.10g")
    rows = [{"beta": res.beta, "psi": res.psi, "ey0_opt": res.ey0_opt, "p_value": res.p_value,
             "rules": len(reg.rules), "conflicts": conflicts}]
    return rows, ["regimes.json", "landscape.csv"]


def cmd_sensitivity(args, cfg, out):
    cohort = _read_cohort(args)
    if cfg.mask is not None:
        cohort = mask_intractable(cohort, cfg.mask)
    s = cfg.section("sensitivity")
    zetas = args.zeta or s.get("zeta") or [36.0, 72.0, 120.0]
    anchor = float(s.get("anchor", DEFAULT_ANCHOR))
    gcfg = cfg.gest(variance=args.variance, threads=_threads(args))
    rows = []
    tab = sensitivity_zeta(cohort, cfg.blip, cfg.ratio, gcfg, zetas, anchor)
    for r in tab.to_dict("records"):
        rows.append(dict({"table": "zeta"}, **r))
    factors = args.coarsen or s.get("coarsen")
    if factors:
        for k in factors:
            data = cohort if int(k) == 1 else coarsen(cohort, int(k))
            try:
                rows += _estimate_rows(data, cfg, _scaled(gcfg, int(k)), {"table": "coarsen", "coarsen": int(k)})
            except SNMError as exc:
                rows.append({"table": "coarsen", "coarsen": int(k), "error": f"{type(exc).__name__}: {exc}"})
    return rows, []


HANDLERS = {
    "simulate": cmd_simulate, "estimate": cmd_estimate, "iptw": cmd_iptw, "gformula": cmd_gformula,
    "regime-eval": cmd_regime_eval, "opt-regime": cmd_opt_regime, "sensitivity": cmd_sensitivity,
}


def _fail(kind, message, code=2):
    line = json.dumps({"error": kind, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def dispatch(argv=None):
    """Run one subcommand; returns the exit status."""
    try:
        args = build_parser().parse_args(argv)
    except CLIError as exc:
        return _fail("UsageError", exc)
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config) if args.config else parse_config({})
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rows, files = HANDLERS[args.command](args, cfg, out)
        write_report(out, rows)
        write_manifest(out, args, cfg, files + ["report.jsonl", "report.txt"])
    except FileNotFoundError as exc:
        return _fail("FileNotFoundError", f"{exc.strerror}: {exc.filename}")
    except SNMError as exc:
        return _fail(type(exc).__name__, exc, 1)
    except (TypeError, ValueError) as exc:
        return _fail("ConfigError", exc)
    return 0


def main():
    sys.exit(dispatch())
