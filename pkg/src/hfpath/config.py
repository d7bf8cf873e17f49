"""INI configuration files for models, grids, functionals and experiments.

Sections mirror the dataclass field names::

    [model]       x0, drift, drift_slope, rho_wv
    [vol]         sigma0, mu_tilde, sigma_tilde, v_tilde (each with optional
                  ``<name>_slope``), positivity_floor
    [jumps]       kind = none | poisson | fixed
                  poisson: intensity, law + law parameters
                  fixed:   times, sizes, kappa_mode
    [vol_jumps]   intensity, law + law parameters (optional)
    [cojumps]     law + law parameters (optional)
    [grid]        horizon, n_coarse, m_fine
    [functional]  kind, p
    [experiment]  kind, ladder (``n:m, n:m, ...``), replications, level,
                  p, p_grid, limit_draws, constant_method

A coefficient ``c`` with ``c_slope = b`` becomes ``c + b * state``, where the
state is X for the drift and sigma for the volatility coefficients.
Jump size laws: ``two_point`` (a, b, prob_a), ``truncated_gaussian``
(mean, sd, floor), ``uniform_signed`` (lo, hi).
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ConfigurationError
from .experiment import ExperimentConfig
from .functional import FunctionalSpec, integral_power, range_power, terminal_power
from .model import (
    FixedJumps,
    JumpSpec,
    ModelSpec,
    TimeGrid,
    TruncatedGaussian,
    TwoPoint,
    UniformSigned,
    VolSpec,
)

FUNCTIONALS = {"terminal_power": terminal_power, "integral_power": integral_power,
               "range_power": range_power}
_KNOWN = {
    "model": {"x0", "drift", "drift_slope", "rho_wv"},
    "vol": {"sigma0", "mu_tilde", "mu_tilde_slope", "sigma_tilde", "sigma_tilde_slope",
            "v_tilde", "v_tilde_slope", "positivity_floor"},
    "jumps": {"kind", "intensity", "law", "a", "b", "prob_a", "mean", "sd", "floor", "lo", "hi",
              "times", "sizes", "kappa_mode"},
    "vol_jumps": {"intensity", "law", "a", "b", "prob_a", "mean", "sd", "floor", "lo", "hi"},
    "cojumps": {"law", "a", "b", "prob_a", "mean", "sd", "floor", "lo", "hi"},
    "grid": {"horizon", "n_coarse", "m_fine"},
    "functional": {"kind", "p"},
    "experiment": {"kind", "ladder", "replications", "level", "p", "p_grid", "limit_draws",
                   "constant_method"},
}


@dataclass(frozen=True)
class Affine:
    """``intercept + slope * state``; a picklable, printable coefficient."""

    intercept: float
    slope: float

    def __call__(self, t, state):
        return self.intercept + self.slope * np.asarray(state)


@dataclass(frozen=True)
class LoadedConfig:
    model: ModelSpec
    grid: TimeGrid
    functional: FunctionalSpec | None
    experiment: dict
    digest: str


class _Reader:
    def __init__(self, cp: configparser.ConfigParser):
        self.cp = cp

    def raw(self, section, key):
        if not self.cp.has_section(section):
            return None
        v = self.cp.get(section, key, fallback=None)
        return None if v is None or v.strip() == "" else v.strip()

    def num(self, section, key, default=None, cast=float):
        v = self.raw(section, key)
        if v is None:
            return default
        try:
            return cast(v)
        except ValueError:
            raise ConfigurationError(f"{section}.{key}: cannot parse {v!r} as {cast.__name__}",
                                     f"{section}.{key}") from None

    def floats(self, section, key):
        v = self.raw(section, key)
        if v is None:
            return None
        try:
            return tuple(float(t) for t in v.replace(",", " ").split())
        except ValueError:
            raise ConfigurationError(f"{section}.{key}: expected a list of numbers",
                                     f"{section}.{key}") from None

    def coef(self, section, key):
        c = self.num(section, key, 0.0)
        b = self.num(section, f"{key}_slope", 0.0)
        return Affine(c, b) if b != 0 else c


def _size_law(r: _Reader, section: str):
    law = r.raw(section, "law")
    if law is None:
        raise ConfigurationError(f"{section}.law is required", f"{section}.law")
    need = {"two_point": ("a", "b"), "truncated_gaussian": ("mean", "sd", "floor"),
            "uniform_signed": ("lo", "hi")}
    if law not in need:
        raise ConfigurationError(f"{section}.law: unknown law {law!r}", f"{section}.law")
    vals = {}
    for k in need[law]:
        v = r.num(section, k)
        if v is None:
            raise ConfigurationError(f"{section}.{k} is required for law {law}", f"{section}.{k}")
        vals[k] = v
    if law == "two_point":
        return TwoPoint(vals["a"], vals["b"], r.num(section, "prob_a", 0.5))
    if law == "truncated_gaussian":
        return TruncatedGaussian(vals["mean"], vals["sd"], vals["floor"])
    return UniformSigned(vals["lo"], vals["hi"])


def _jumps(r: _Reader):
    kind = r.raw("jumps", "kind") or "none"
    if kind == "none":
        return None
    if kind == "poisson":
        return JumpSpec(r.num("jumps", "intensity", 1.0), _size_law(r, "jumps"))
    if kind == "fixed":
        times, sizes = r.floats("jumps", "times"), r.floats("jumps", "sizes")
        if times is None or sizes is None:
            raise ConfigurationError("jumps.times and jumps.sizes are required for fixed jumps",
                                     "jumps.times")
        return FixedJumps(times, sizes, r.raw("jumps", "kappa_mode") or "exact")
    raise ConfigurationError(f"jumps.kind: unknown kind {kind!r}", "jumps.kind")


def parse_ladder(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        n, _, m = item.partition(":")
        try:
            out.append((int(n), int(m) if m else 50))
        except ValueError:
            raise ConfigurationError(f"experiment.ladder: bad entry {item!r}", "experiment.ladder") from None
    return tuple(out)


def load_config(path) -> LoadedConfig:
    """Read an INI file. Unknown sections or keys are configuration errors."""
    text = Path(path).read_text()
    return parse_config(text)


def parse_config(text: str) -> LoadedConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}", "config") from None
    for sec in cp.sections():
        if sec not in _KNOWN:
            raise ConfigurationError(f"unknown section [{sec}]", sec)
        for key in cp[sec]:
            if key not in _KNOWN[sec]:
                raise ConfigurationError(f"unknown key {sec}.{key}", f"{sec}.{key}")
    r = _Reader(cp)
    try:
        vol = VolSpec(
            sigma0=r.num("vol", "sigma0", 1.0),
            mu_tilde=r.coef("vol", "mu_tilde"),
            sigma_tilde=r.coef("vol", "sigma_tilde"),
            v_tilde=r.coef("vol", "v_tilde"),
            vol_jumps=(JumpSpec(r.num("vol_jumps", "intensity", 1.0), _size_law(r, "vol_jumps"))
                       if cp.has_section("vol_jumps") else None),
            cojump_law=_size_law(r, "cojumps") if cp.has_section("cojumps") else None,
            positivity_floor=r.num("vol", "positivity_floor"),
        )
        model = ModelSpec(x0=r.num("model", "x0", 0.0), drift=r.coef("model", "drift"), vol=vol,
                          jumps=_jumps(r), rho_wv=r.num("model", "rho_wv", 0.0))
        grid = TimeGrid(r.num("grid", "horizon", 1.0), r.num("grid", "n_coarse", 1024, int),
                        r.num("grid", "m_fine", 50, int))
        kind = r.raw("functional", "kind")
        functional = None
        if kind is not None:
            if kind not in FUNCTIONALS:
                raise ConfigurationError(f"functional.kind: unknown kind {kind!r}", "functional.kind")
            p = r.num("functional", "p")
            if p is None:
                raise ConfigurationError("functional.p is required", "functional.p")
            functional = FUNCTIONALS[kind](p)
    except ArgumentError as exc:
        raise ConfigurationError(str(exc), "config") from None
    exp = {}
    if cp.has_section("experiment"):
        if (v := r.raw("experiment", "kind")) is not None:
            exp["kind"] = v
        if (v := r.raw("experiment", "ladder")) is not None:
            exp["ladder"] = parse_ladder(v)
        for key, cast in (("replications", int), ("level", float), ("p", float), ("limit_draws", int)):
            if (v := r.num("experiment", key, cast=cast)) is not None:
                exp[key] = v
        if (v := r.floats("experiment", "p_grid")) is not None:
            exp["p_grid"] = v
        if (v := r.raw("experiment", "constant_method")) is not None:
            exp["constant_method"] = v
    digest = hashlib.sha256(text.encode()).hexdigest()
    return LoadedConfig(model, grid, functional, exp, digest)


def experiment_config(loaded: LoadedConfig, kind: str, **overrides) -> ExperimentConfig:
    """Combine a loaded file with CLI overrides (overrides win)."""
    fields = dict(loaded.experiment)
    fields.pop("kind", None)
    fields.setdefault("ladder", ((loaded.grid.n_coarse, loaded.grid.m_fine),))
    fields.update({k: v for k, v in overrides.items() if v is not None})
    if loaded.functional is not None and "functional" not in fields:
        fields["functional"] = loaded.functional
    try:
        return ExperimentConfig(kind=kind, model=loaded.model, horizon=loaded.grid.horizon, **fields)
    except ArgumentError as exc:
        raise ConfigurationError(str(exc), "experiment") from None
