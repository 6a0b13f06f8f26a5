"""Sectioned ``key = value`` experiment configuration.

Example::

    [market]
    sigma = 1
    eta = 0.01
    lbar = 1

    [payoff]
    variant = smoothed_call
    strike = 0
    smoothing_stdev = 0.3

Lines starting with ``#`` or ``;`` are comments. Overrides use
``section.key=value``. Every value is validated when the config is resolved and
errors carry the line (or override) that produced the offending value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .core_model import (
    RAW,
    RESCALED,
    Call,
    Constant,
    Forward,
    LinearCombination,
    MarketParams,
    ModelError,
    Put,
    SmoothedCall,
)
from .hjb import Grid, SolverOptions

DEFAULTS: dict[str, dict[str, str]] = {
    "market": {"sigma": "1", "eta": "0.01", "gamma": "1", "lbar": "1", "T": "1", "penalty_mode": RESCALED},
    "payoff": {"variant": "smoothed_call", "strike": "0", "smoothing_stdev": "0.3"},
    "scenario": {"t0": "0", "s0": "0", "pi0": "0", "x0": "0", "Q": "1"},
    "grid": {"n_t": "64", "n_s": "129", "n_pi": "97", "s_halfwidth_sd": "5", "pi_min": "-2.5", "pi_max": "2.5",
             "epsilon_cap": "0", "tolerance": "1e-10", "max_iters": "50", "cfl": "0.5"},
    "mc": {"n_paths": "100000", "n_steps": "256", "seed": "42"},
    "study": {"eta_list": "0.04, 0.01, 0.0025", "dQ": "auto"},
    "output": {"directory": "out", "formats": "csv,json"},
}

ALLOWED = {
    "market": {"sigma", "eta", "gamma", "lbar", "l", "T", "penalty_mode"},
    "payoff": {"variant", "strike", "smoothing_stdev", "level", "terms"},
    "scenario": {"t0", "s0", "pi0", "x0", "Q"},
    "grid": {"n_t", "n_s", "n_pi", "s_min", "s_max", "s_halfwidth_sd", "pi_min", "pi_max",
             "epsilon_cap", "tolerance", "max_iters", "cfl"},
    "mc": {"n_paths", "n_steps", "seed"},
    "study": {"eta_list", "dQ"},
    "output": {"directory", "formats"},
}


class ConfigError(ValueError):
    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


@dataclass
class RawConfig:
    """Parsed text: ``values[section][key] = (text, origin)``."""

    values: dict[str, dict[str, tuple[str, str]]] = field(default_factory=dict)

    def set(self, section, key, text, origin):
        if section not in ALLOWED:
            raise ConfigError(f"unknown section [{section}]", origin)
        if key not in ALLOWED[section]:
            raise ConfigError(f"unknown key '{key}' in [{section}]", origin)
        self.values.setdefault(section, {})[key] = (text, origin)


def parse_text(text: str, source: str = "<config>") -> RawConfig:
    raw = RawConfig()
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{no}"
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError("malformed section header", where)
            section = s[1:-1].strip()
            if section not in ALLOWED:
                raise ConfigError(f"unknown section [{section}]", where)
            continue
        if "=" not in s:
            raise ConfigError("expected 'key = value'", where)
        if section is None:
            raise ConfigError("key outside of any section", where)
        key, _, value = s.partition("=")
        raw.set(section, key.strip(), value.strip(), where)
    return raw


def parse_file(path) -> RawConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    return parse_text(text, str(path))


def apply_overrides(raw: RawConfig, overrides) -> RawConfig:
    for item in overrides or ():
        where = f"--set {item}"
        if "=" not in item:
            raise ConfigError("override must be section.key=value", where)
        lhs, _, value = item.partition("=")
        if "." not in lhs:
            raise ConfigError("override must be section.key=value", where)
        section, _, key = lhs.strip().partition(".")
        raw.set(section.strip(), key.strip(), value.strip(), where)
    return raw


@dataclass(frozen=True)
class MCConfig:
    n_paths: int = 100000
    n_steps: int = 256
    seed: int = 42


@dataclass(frozen=True)
class StudyConfig:
    eta_list: tuple = (0.04, 0.01, 0.0025)
    dQ: float | None = None


@dataclass
class ExperimentConfig:
    params: MarketParams
    payoff: object
    t0: float
    s0: float
    pi0: float
    x0: float
    Q: float
    grid: Grid
    options: SolverOptions
    mc: MCConfig
    study: StudyConfig
    out_dir: str
    formats: tuple
    resolved: dict

    def scenario(self):
        from .pricing import Scenario

        return Scenario(self.params, self.payoff, self.t0, self.s0, self.pi0, self.x0, self.Q)


class _Reader:
    def __init__(self, raw: RawConfig):
        self.raw = raw
        self.resolved: dict[str, dict[str, str]] = {}

    def has(self, section, key):
        return key in self.raw.values.get(section, {})

    def text(self, section, key):
        if self.has(section, key):
            text, where = self.raw.values[section][key]
        else:
            text, where = DEFAULTS[section][key], f"default {section}.{key}"
        self.resolved.setdefault(section, {})[key] = text
        return text, where

    def where(self, section, key):
        return self.raw.values.get(section, {}).get(key, (None, f"default {section}.{key}"))[1]

    def float(self, section, key, positive=False, nonneg=False):
        text, where = self.text(section, key)
        try:
            v = float(text)
        except ValueError:
            raise ConfigError(f"{section}.{key} must be a number, got '{text}'", where) from None
        if not math.isfinite(v):
            raise ConfigError(f"{section}.{key} must be finite", where)
        if positive and v <= 0:
            raise ConfigError(f"{section}.{key} must be > 0", where)
        if nonneg and v < 0:
            raise ConfigError(f"{section}.{key} must be >= 0", where)
        return v

    def int(self, section, key, minimum=None):
        text, where = self.text(section, key)
        try:
            v = int(text)
        except ValueError:
            raise ConfigError(f"{section}.{key} must be an integer, got '{text}'", where) from None
        if minimum is not None and v < minimum:
            raise ConfigError(f"{section}.{key} must be >= {minimum}", where)
        return v


def _payoff_from(variant, args, where):
    v = variant.lower()
    try:
        if v == "call":
            return Call(float(args["strike"]))
        if v == "put":
            return Put(float(args["strike"]))
        if v == "forward":
            return Forward()
        if v == "constant":
            return Constant(float(args["level"]))
        if v in ("smoothed_call", "smoothedcall"):
            return SmoothedCall(float(args["strike"]), float(args["smoothing_stdev"]))
    except KeyError as exc:
        raise ConfigError(f"payoff '{variant}' needs parameter {exc.args[0]}", where) from None
    except (ValueError, ModelError) as exc:
        raise ConfigError(f"bad payoff parameters: {exc}", where) from None
    raise ConfigError(f"unknown payoff variant '{variant}'", where)


def _parse_terms(text, where):
    """``"w variant k=v ...; w variant ..."``, e.g. ``"1 call strike=0; -1 call strike=1"``."""
    terms = []
    for chunk in text.split(";"):
        parts = chunk.split()
        if not parts:
            continue
        if len(parts) < 2:
            raise ConfigError(f"bad combination term '{chunk.strip()}'", where)
        try:
            w = float(parts[0])
        except ValueError:
            raise ConfigError(f"bad weight in term '{chunk.strip()}'", where) from None
        args = {}
        for kv in parts[2:]:
            if "=" not in kv:
                raise ConfigError(f"expected key=value in term '{chunk.strip()}'", where)
            k, _, val = kv.partition("=")
            args[k] = val
        terms.append((w, _payoff_from(parts[1], args, where)))
    if not terms:
        raise ConfigError("combination has no terms", where)
    return LinearCombination(tuple(terms))


def resolve(raw: RawConfig) -> ExperimentConfig:
    r = _Reader(raw)

    # market
    sigma = r.float("market", "sigma", positive=True)
    eta = r.float("market", "eta", positive=True)
    gamma = r.float("market", "gamma", positive=True)
    T = r.float("market", "T", positive=True)
    mode, mode_where = r.text("market", "penalty_mode")
    if mode not in (RAW, RESCALED):
        raise ConfigError("penalty_mode must be 'raw' or 'rescaled'", mode_where)
    if mode == RAW:
        if not r.has("market", "l"):
            raise ConfigError("raw penalty mode needs market.l", mode_where)
        if r.has("market", "lbar"):
            raise ConfigError("give market.l or market.lbar, not both", r.where("market", "lbar"))
        pen_key = "l"
    else:
        if r.has("market", "l"):
            raise ConfigError("market.l requires penalty_mode = raw", r.where("market", "l"))
        pen_key = "lbar"
    penalty = r.float("market", pen_key, nonneg=True)
    try:
        params = MarketParams(sigma, eta, gamma, penalty, mode, T)
    except ModelError as exc:
        raise ConfigError(str(exc), r.where("market", pen_key)) from None

    # payoff
    variant, vwhere = r.text("payoff", "variant")
    if variant.lower() in ("combination", "linear_combination"):
        text, where = r.text("payoff", "terms") if r.has("payoff", "terms") else ("", vwhere)
        payoff = _parse_terms(text, where)
    else:
        args = {}
        for key in ("strike", "smoothing_stdev", "level"):
            if r.has("payoff", key) or key in DEFAULTS["payoff"]:
                args[key] = r.text("payoff", key)[0]
        payoff = _payoff_from(variant, args, vwhere)

    # scenario
    t0 = r.float("scenario", "t0", nonneg=True)
    if t0 >= T:
        raise ConfigError("scenario.t0 must be < T", r.where("scenario", "t0"))
    s0 = r.float("scenario", "s0")
    pi0 = r.float("scenario", "pi0")
    x0 = r.float("scenario", "x0")
    Q = r.float("scenario", "Q")
    if not math.isfinite(payoff.lipschitz_H):
        raise ConfigError("payoff must be globally Lipschitz", vwhere)

    # grid
    half = r.float("grid", "s_halfwidth_sd", positive=True) * sigma * math.sqrt(T)
    s_min = r.float("grid", "s_min") if r.has("grid", "s_min") else s0 - half
    s_max = r.float("grid", "s_max") if r.has("grid", "s_max") else s0 + half
    try:
        grid = Grid(r.int("grid", "n_t", 2), s_min, s_max, r.int("grid", "n_s", 5),
                    r.float("grid", "pi_min"), r.float("grid", "pi_max"), r.int("grid", "n_pi", 5))
    except ModelError as exc:
        raise ConfigError(str(exc), "grid section") from None
    if not (grid.s_min <= s0 <= grid.s_max):
        raise ConfigError("scenario.s0 outside the price grid", r.where("scenario", "s0"))
    from .hjb import max_abs_delta

    if not grid.check_containment(Q, max_abs_delta(payoff, params, grid), pi0):
        need = 2 * abs(Q) * max_abs_delta(payoff, params, grid) + abs(pi0)
        raise ConfigError(f"inventory grid must cover +-{need:.6g} (2 max|Q P_s| + |pi0|)",
                          r.where("grid", "pi_max"))
    cfl = r.float("grid", "cfl", positive=True)
    if cfl > 1.0:
        raise ConfigError("grid.cfl must be <= 1", r.where("grid", "cfl"))
    options = SolverOptions(r.float("grid", "epsilon_cap", nonneg=True),
                            r.float("grid", "tolerance", positive=True),
                            r.int("grid", "max_iters", 1), cfl)

    mc = MCConfig(r.int("mc", "n_paths", 1), r.int("mc", "n_steps", 1), r.int("mc", "seed", 0))

    text, where = r.text("study", "eta_list")
    try:
        etas = tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())
    except ValueError:
        raise ConfigError("study.eta_list must be comma-separated numbers", where) from None
    if not etas or any(e <= 0 for e in etas):
        raise ConfigError("study.eta_list needs positive entries", where)
    if any(b >= a for a, b in zip(etas, etas[1:])):
        raise ConfigError("study.eta_list must be strictly decreasing", where)
    for e in etas:
        try:
            params.with_eta(e)
        except ModelError as exc:
            raise ConfigError(f"eta={e}: {exc}", where) from None
    dq_text, dq_where = r.text("study", "dQ")
    dQ = None
    if dq_text != "auto":
        dQ = r.float("study", "dQ", positive=True)
    study = StudyConfig(etas, dQ)

    out_dir, _ = r.text("output", "directory")
    ftext, fwhere = r.text("output", "formats")
    formats = tuple(f.strip() for f in ftext.split(",") if f.strip())
    if not formats or any(f not in ("csv", "json") for f in formats):
        raise ConfigError("output.formats must list csv and/or json", fwhere)

    resolved = {sec: dict(sorted(vals.items())) for sec, vals in sorted(r.resolved.items())}
    resolved["grid"]["s_min"] = repr(grid.s_min)
    resolved["grid"]["s_max"] = repr(grid.s_max)
    return ExperimentConfig(params, payoff, t0, s0, pi0, x0, Q, grid, options, mc, study,
                            out_dir, formats, resolved)


def load(path=None, overrides=()) -> ExperimentConfig:
    raw = parse_file(path) if path else RawConfig()
    apply_overrides(raw, overrides)
    return resolve(raw)


def render(resolved: dict) -> str:
    """Resolved config back in file syntax."""
    lines = []
    for sec, vals in resolved.items():
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {v}" for k, v in vals.items())
        lines.append("")
    return "\n".join(lines)
