"""Indifference and marginal (Davis) prices.

Two routes to the marginal price ``p* = P - (1/gamma) d_Q u``:

* finite differences of PDE solves in ``Q`` with a Richardson error estimate;
* Monte Carlo of ``H(S_T)`` under the tilted measure, reusing physical paths
  with the stochastic exponential of ``int Z dW`` as weights.
"""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core_model import MarketParams, ModelError, Payoff, frictionless_price, payoff_eval
from .expansion import expansion_price, impact_coefficient
from .hedging import HedgeOutcome, PathEnsemble, optimal_inventory
from .hjb import Grid, SolverOptions, ValueSurface, max_abs_delta, solve

log = logging.getLogger(__name__)

MAX_ABS_LOG_WEIGHT = 50.0
MIN_ESS_FRACTION = 0.05


class WeightError(RuntimeError):
    pass


@dataclass(frozen=True)
class Scenario:
    """Market, claim and initial state of one pricing experiment."""

    params: MarketParams = field(default_factory=MarketParams)
    payoff: Payoff | None = None
    t0: float = 0.0
    s0: float = 0.0
    pi0: float = 0.0
    x0: float = 0.0
    Q: float = 1.0

    def __post_init__(self):
        if self.payoff is None:
            from .core_model import SmoothedCall

            object.__setattr__(self, "payoff", SmoothedCall(0.0, 0.3))
        self.params.check_time(self.t0)

    def with_eta(self, eta: float) -> "Scenario":
        return replace(self, params=self.params.with_eta(eta))

    def with_Q(self, Q: float) -> "Scenario":
        return replace(self, Q=Q)

    def as_dict(self) -> dict:
        return {"params": self.params.as_dict(), "payoff": self.payoff.describe(), "t0": self.t0,
                "s0": self.s0, "pi0": self.pi0, "x0": self.x0, "Q": self.Q}


def fit_grid(scenario: Scenario, base: Grid = Grid(), n_sd: float = 5.0, Q_max: float | None = None) -> Grid:
    """``base`` re-centred on ``s0`` (``n_sd`` standard deviations each side) with the
    inventory range widened, if needed, to ``2 max|Q P_s| + |pi0|`` plus one cell."""
    p = scenario.params
    half = n_sd * p.sigma * math.sqrt(p.horizon - scenario.t0 if p.horizon > scenario.t0 else p.horizon)
    g = replace(base, s_min=scenario.s0 - half, s_max=scenario.s0 + half)
    q = abs(scenario.Q) if Q_max is None else Q_max
    need = 2.0 * q * max_abs_delta(scenario.payoff, p, g) + abs(scenario.pi0)
    need += (g.pi_max - g.pi_min) / (g.n_pi - 1)
    if g.pi_max < need or -g.pi_min < need:
        lim = max(need, g.pi_max, -g.pi_min)
        g = replace(g, pi_min=-lim, pi_max=lim)
    return g


class Pricer:
    """PDE-route prices for one market/claim/grid, caching surfaces by ``Q``."""

    def __init__(self, params: MarketParams, payoff: Payoff, grid: Grid = Grid(),
                 options: SolverOptions = SolverOptions(), cache_size: int = 6):
        self.params = params
        self.payoff = payoff
        self.grid = grid
        self.options = options
        self._cache: OrderedDict[float, ValueSurface] = OrderedDict()
        self._cache_size = cache_size

    def surface(self, Q: float) -> ValueSurface:
        Q = float(Q)
        if Q in self._cache:
            self._cache.move_to_end(Q)
            return self._cache[Q]
        surf = solve(self.params, self.payoff, Q, self.grid, self.options)
        self._cache[Q] = surf
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return surf

    def u(self, t, s, pi, Q) -> float:
        return float(self.surface(Q).value(t, s, pi))

    def indifference_price(self, t, s, pi, x, Q, dQ) -> float:
        """``dQ P(t, s) - (u(Q) - u(Q - dQ)) / gamma``. ``x`` never enters."""
        del x  # exponential utility: wealth factors out
        if dQ == 0.0:
            return 0.0
        P = float(frictionless_price(self.payoff, t, s, self.params))
        du = self.u(t, s, pi, Q) - self.u(t, s, pi, Q - dQ)
        return dQ * P - du / self.params.gamma

    def _central(self, t, s, pi, Q, h):
        return (self.u(t, s, pi, Q + h) - self.u(t, s, pi, Q - h)) / (2.0 * h)

    def marginal_price_fd(self, t, s, pi, Q, dQ: float | None = None, richardson: bool = True) -> dict:
        """``P - d_Q u / gamma`` by central differences.

        With ``richardson`` the difference is repeated at ``dQ / 2``; the finer
        value is returned with error estimate ``|D(dQ) - D(dQ/2)| / 3``.
        """
        h = 1e-2 * max(1.0, abs(Q)) if dQ is None else float(dQ)
        if h <= 0.0:
            raise ModelError("dQ must be > 0")
        P = float(frictionless_price(self.payoff, t, s, self.params))
        d1 = self._central(t, s, pi, Q, h)
        if richardson:
            d2 = self._central(t, s, pi, Q, 0.5 * h)
            err = abs(d1 - d2) / 3.0 / self.params.gamma
            d = d2
        else:
            d2, err, d = math.nan, math.nan, d1
        return {"estimate": P - d / self.params.gamma, "error": err, "dQ": h,
                "frictionless": P, "du_dQ": d, "du_dQ_coarse": d1}


@dataclass
class GirsanovWeight:
    """Terminal density ``dQ/dP`` per path."""

    log_values: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    def mean_stderr(self) -> tuple[float, float]:
        from .hedging import pair_mean_stderr

        return pair_mean_stderr(self.values)

    def ess(self) -> float:
        w = self.values
        return float(np.sum(w) ** 2 / np.sum(w * w))

    def check(self) -> None:
        worst = float(np.max(np.abs(self.log_values)))
        if not math.isfinite(worst) or worst > MAX_ABS_LOG_WEIGHT:
            raise WeightError(f"|log weight| reached {worst:.3g} > {MAX_ABS_LOG_WEIGHT}")


def weighted_mean_stderr(w: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Self-normalised estimate ``sum w y / sum w`` with a delta-method stderr
    over antithetic pairs."""
    a = w * y
    if len(w) % 2 == 0 and len(w) >= 4:
        a = a[0::2] + a[1::2]
        b = w[0::2] + w[1::2]
    else:
        b = w
    est = float(np.sum(a) / np.sum(b))
    n = len(a)
    if n < 2:
        return est, 0.0
    resid = a - est * b
    se = math.sqrt(float(np.sum(resid * resid)) * n / (n - 1)) / float(np.sum(b))
    return est, se


def marginal_price_mc(surface: ValueSurface, ensemble: PathEnsemble, pi0: float,
                      outcome: HedgeOutcome | None = None, threads: int = 1) -> dict:
    """Weighted Monte Carlo estimate of ``E^Q[H(S_T)]``.

    The estimator normalises by the realised weight sum, so a constant payoff
    is returned exactly.
    """
    if outcome is None:
        outcome = optimal_inventory(surface, ensemble, pi0, threads=threads)
    gw = GirsanovWeight(outcome.log_weight)
    gw.check()
    w = gw.values
    HT = np.asarray(payoff_eval(surface.payoff, ensemble.terminal), dtype=float)
    est, se = weighted_mean_stderr(w, HT)
    wm, wse = gw.mean_stderr()
    ess = gw.ess()
    frac = ess / len(w)
    if frac < MIN_ESS_FRACTION:
        log.warning("weight degeneracy: effective sample size %.1f%% of paths", 100 * frac)
    return {"estimate": est, "stderr": se, "weight_mean": wm, "weight_stderr": wse,
            "ess": ess, "ess_fraction": frac, "degenerate": frac < MIN_ESS_FRACTION,
            "max_abs_log_weight": float(np.max(np.abs(outcome.log_weight)))}


PRICE_CSV_COLUMNS = ("t", "s", "pi", "Q", "eta", "frictionless", "pstar_fd", "fd_err", "pstar_mc",
                     "mc_stderr", "pstar_expansion", "gamma_term", "displacement_term", "impact_coefficient")


@dataclass
class PriceReport:
    t: float
    s: float
    pi: float
    Q: float
    eta: float
    frictionless: float
    pstar_fd: float
    fd_err: float
    pstar_mc: float = math.nan
    mc_stderr: float = math.nan
    pstar_expansion: float = math.nan
    gamma_term: float = math.nan
    displacement_term: float = math.nan
    impact_coefficient: float = math.nan
    metadata: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def csv_header() -> str:
        return ",".join(PRICE_CSV_COLUMNS)

    def csv_row(self) -> str:
        out = []
        for c in PRICE_CSV_COLUMNS:
            v = getattr(self, c)
            out.append("nan" if math.isnan(v) else f"{v:.16e}")
        return ",".join(out)

    def write(self, json_path, csv_path=None, extra: dict | None = None) -> None:
        doc = self.as_dict()
        if extra:
            doc.update(extra)
        Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if csv_path is not None:
            Path(csv_path).write_text(self.csv_header() + "\n" + self.csv_row() + "\n", encoding="utf-8")


def no_arbitrage_check(report: PriceReport, payoff: Payoff) -> bool | None:
    """``inf H <= pstar_fd <= sup H``; ``None`` (check skipped) for unbounded payoffs."""
    lo, hi = payoff.bounds
    if not (math.isfinite(lo) and math.isfinite(hi)):
        log.info("no-arbitrage check skipped: %s is unbounded", payoff.describe())
        return None
    p = report.pstar_fd
    return bool(math.isfinite(p) and lo <= p <= hi)


def price_report(scenario: Scenario, grid: Grid, options: SolverOptions = SolverOptions(),
                 n_paths: int = 0, n_steps: int = 256, seed: int = 42, threads: int = 1,
                 dQ: float | None = None, pricer: Pricer | None = None) -> PriceReport:
    """All routes for one scenario; the expansion is included when it applies."""
    from .hedging import simulate_paths

    sc = scenario
    pricer = pricer or Pricer(sc.params, sc.payoff, grid, options)
    fd = pricer.marginal_price_fd(sc.t0, sc.s0, sc.pi0, sc.Q, dQ)
    rep = PriceReport(sc.t0, sc.s0, sc.pi0, sc.Q, sc.params.eta, fd["frictionless"], fd["estimate"], fd["error"])
    meta = {"payoff": sc.payoff.describe(), "grid": grid.as_dict(), "dQ": fd["dQ"], "solver": options.as_dict()}
    if n_paths > 0:
        surface = pricer.surface(sc.Q)
        ens = simulate_paths(sc.params, sc.t0, sc.s0, n_paths, n_steps, seed, threads)
        mc = marginal_price_mc(surface, ens, sc.pi0, threads=threads)
        rep.pstar_mc, rep.mc_stderr = mc["estimate"], mc["stderr"]
        meta.update({"seed": seed, "n_paths": n_paths, "n_steps": n_steps,
                     "weight_mean": mc["weight_mean"], "weight_stderr": mc["weight_stderr"],
                     "ess_fraction": mc["ess_fraction"]})
    if sc.payoff.has_bounded_gamma and sc.params.penalty_mode != "raw":
        exp = expansion_price(sc.payoff, sc.t0, sc.s0, sc.pi0, sc.Q, sc.params)
        rep.pstar_expansion = exp.total
        rep.gamma_term = exp.gamma_term
        rep.displacement_term = exp.displacement_term
        rep.impact_coefficient = impact_coefficient(sc.payoff, sc.t0, sc.s0, sc.params)
    rep.metadata = meta
    return rep
