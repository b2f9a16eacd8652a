"""Run configuration shared by the library entry points and the CLI.

A configuration is a YAML or JSON mapping with optional sections::

    scenario:   {preset: co, n: 2000, ...}      # simulate
    blip:       {family: const}
    ratio:      {family: const}                  # or null
    gest:       {zeta: 72, beta_grid: [-10, 10, 0.1], variance: cluster, ...}
    regimes:    [{kind: static, gain: 0.0083}]
    mask:       {rules: ["L == 1"], event_window: 6}
    iptw:       {normalized: true, chi: 0, features: ["1", "cov:*"]}
    gformula:   {hazard_features: [...], transitions: {L: [...]}, mc_draws: 10000}
    survival:   {u_grid: [12, 24]}
    optreg:     {action_grid: [0, 0.5, 1], beta_grid: [[0, 4, 0.25]], ...}
    sensitivity: {zeta: [36, 72, 120], anchor: 72, coarsen: [1, 6]}

Unknown top-level sections are rejected so that typos fail loudly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .cohort import SubgroupMask
from .ctf import BlipSpec, TimeRatioSpec
from .exceptions import ConfigError
from .gest import GEstConfig
from .regimes import Regime

SECTIONS = ("scenario", "blip", "ratio", "gest", "regimes", "mask", "iptw", "gformula", "survival",
            "optreg", "sensitivity")


def _tuples(d):
    return {k: (tuple(v) if isinstance(v, list) and k not in ("beta_grid", "psi_grid") else v)
            for k, v in d.items()}


def _grid(v):
    if v is None:
        return None
    if isinstance(v, (list, tuple)) and v and isinstance(v[0], (list, tuple)):
        return tuple(tuple(float(x) for x in g) for g in v)
    return tuple(float(x) for x in v)


@dataclass
class RunConfig:
    """Parsed configuration; every section keeps its raw mapping as well."""

    raw: dict = field(default_factory=dict)
    source: Optional[str] = None

    def section(self, name):
        v = self.raw.get(name)
        return {} if v is None else v

    @property
    def blip(self):
        d = self.raw.get("blip")
        return BlipSpec("const") if d is None else BlipSpec(**_tuples(d))

    @property
    def ratio(self):
        d = self.raw.get("ratio")
        return None if d is None else TimeRatioSpec(**_tuples(d))

    def gest(self, **overrides):
        d = dict(self.section("gest"))
        d.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(GEstConfig)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown gest settings: {sorted(extra)}")
        for k in ("beta_grid", "psi_grid"):
            if k in d:
                d[k] = _grid(d[k])
        for k in ("q_star", "q_star_psi"):
            if isinstance(d.get(k), list):
                d[k] = tuple(d[k])
        if isinstance(d.get("treatment"), dict):
            d["treatment"] = _tuples(d["treatment"])
        return GEstConfig(**d)

    @property
    def regimes(self):
        items = self.raw.get("regimes") or []
        if isinstance(items, dict):
            items = [items]
        return [Regime.from_dict(r) for r in items]

    @property
    def mask(self):
        d = self.raw.get("mask")
        if d is None:
            return None
        return SubgroupMask.from_rules(d.get("rules", ()), d.get("event_window"))

    def digest(self):
        """sha256 of the canonical JSON form."""
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_config(obj, source=None) -> RunConfig:
    """Validate a configuration mapping.

    Examples
    --------
    >>> parse_config({"gest": {"zeta": 6}}).gest().zeta
    6
    >>> parse_config({"gset": {}})
    Traceback (most recent call last):
    ...
    snmgest.exceptions.ConfigError: unknown config section(s): ['gset']
    """
    if obj is None:
        obj = {}
    if not isinstance(obj, dict):
        raise ConfigError("configuration must be a mapping")
    extra = sorted(set(obj) - set(SECTIONS))
    if extra:
        raise ConfigError(f"unknown config section(s): {extra}")
    cfg = RunConfig(dict(obj), source)
    # touch the typed sections so malformed values fail at load time
    cfg.blip, cfg.ratio, cfg.regimes, cfg.mask
    cfg.gest()
    return cfg


def load_config(path) -> RunConfig:
    """Read a YAML or JSON configuration file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        obj = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"malformed config {path}: {str(exc).splitlines()[0]}") from None
    try:
        return parse_config(obj, str(path))
    except TypeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
