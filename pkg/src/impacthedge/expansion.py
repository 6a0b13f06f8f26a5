"""Small-impact asymptotics of the marginal price.

For small ``eta`` the marginal price is

    p* = P - sqrt(2 eta gamma sigma^2) [ Q CGI + (pi + Q P_s) P_s ] + o(sqrt(eta)),

with the cash-gamma integral ``CGI = int_t^T E_{t,s}[sigma^2 (P_ss(r, S_r))^2] dr``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.integrate import quad

from .core_model import (
    RAW,
    MarketParams,
    ModelError,
    Payoff,
    frictionless_delta,
    frictionless_price,
)

HERMITE_NODES = 64
MAX_HERMITE_NODES = 256
_RULES: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _rule(n: int):
    if n not in _RULES:
        x, w = hermegauss(n)
        _RULES[n] = (x, w / math.sqrt(2.0 * math.pi))
    return _RULES[n]


def _check_gamma(payoff: Payoff) -> None:
    if not payoff.has_bounded_gamma:
        raise ModelError(f"{payoff.describe()} has unbounded gamma; H' must be Lipschitz")


def expected_squared_gamma(payoff: Payoff, t: float, r: float, s: float, params: MarketParams,
                           rel_tol: float = 1e-10) -> float:
    """``E_{t,s}[(P_ss(r, S_r))^2]`` with ``S_r ~ N(s, sigma^2 (r - t))``.

    Gauss-Hermite starting at 64 nodes, doubled until two rules agree. Close to
    maturity the squared gamma can be much narrower than the law of ``S_r``;
    past 256 nodes the integral falls back to adaptive quadrature in price.
    """
    sd = params.sigma * math.sqrt(max(r - t, 0.0))
    var_left = params.sigma**2 * max(params.horizon - r, 0.0)

    def f(x):
        g = np.asarray(payoff.expectation_gamma(x, var_left), dtype=float)
        return g * g

    if sd == 0.0:
        return float(f(np.array([s]))[0])
    prev = None
    n = HERMITE_NODES
    while n <= MAX_HERMITE_NODES:
        x, w = _rule(n)
        val = float(w @ f(s + sd * x))
        if prev is not None and abs(val - prev) <= rel_tol * max(abs(val), 1e-300):
            return val
        prev = val
        n *= 2
    dens = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)  # noqa: E731
    val, _ = quad(lambda z: float(f(np.array([s + sd * z]))[0]) * dens(z), -np.inf, np.inf,
                  epsabs=0.0, epsrel=rel_tol, limit=400)
    return float(val)


def cash_gamma_integral(payoff: Payoff, t: float, s: float, params: MarketParams,
                        rel_tol: float = 1e-8) -> tuple[float, float]:
    """``int_t^T E_{t,s}[sigma^2 (P_ss)^2] dr`` and an absolute error estimate.

    Adaptive quadrature in ``r`` around the adaptive Gauss-Hermite inner rule.
    """
    _check_gamma(payoff)
    params.check_time(t)
    if t >= params.horizon:
        return 0.0, 0.0
    sig2 = params.sigma**2
    value, err = quad(lambda r: sig2 * expected_squared_gamma(payoff, t, r, s, params),
                      t, params.horizon, epsabs=0.0, epsrel=rel_tol, limit=200)
    return float(max(value, 0.0)), float(err)


@dataclass(frozen=True)
class ExpansionReport:
    base: float
    gamma_term: float
    displacement_term: float
    total: float
    eta: float
    cash_gamma_integral: float
    quadrature_error: float
    Q: float
    pi: float
    delta: float
    leading_order: bool = False
    meta: dict = field(default_factory=dict)

    def scaled_terms(self) -> tuple[float, float]:
        """Both corrections divided by ``sqrt(eta)``; independent of ``eta``."""
        if self.eta == 0.0:
            return 0.0, 0.0
        r = math.sqrt(self.eta)
        return self.gamma_term / r, self.displacement_term / r

    def as_dict(self) -> dict:
        return asdict(self)


def expansion_price(payoff: Payoff, t: float, s: float, pi: float, Q: float, params: MarketParams,
                    eta: float | None = None, leading_order: bool = False) -> ExpansionReport:
    """Small-impact approximation of the marginal price.

    Parameters
    ----------
    eta : float, optional
        Overrides ``params.eta``; ``0`` returns the frictionless price.
    leading_order : bool
        Drop the displacement term, i.e. evaluate along the frictionless hedge.
    """
    if params.penalty_mode == RAW:
        raise ModelError("the expansion requires the rescaled penalty mode")
    e = params.eta if eta is None else float(eta)
    if e < 0.0:
        raise ModelError("eta must be >= 0")
    cgi, err = cash_gamma_integral(payoff, t, s, params)
    base = float(frictionless_price(payoff, t, s, params))
    delta = float(frictionless_delta(payoff, t, s, params))
    scale = _scale(e, params)
    gamma_term = -Q * scale * cgi
    displacement = 0.0 if leading_order else -scale * (pi + Q * delta) * delta
    return ExpansionReport(base, gamma_term, displacement, base + gamma_term + displacement, e,
                           cgi, err, float(Q), float(pi), delta, leading_order)


def impact_coefficient(payoff: Payoff, t: float, s: float, params: MarketParams,
                       eta: float | None = None) -> float:
    """``sqrt(2 eta gamma sigma^2) * CGI``: price concession per option unit held."""
    e = params.eta if eta is None else float(eta)
    cgi, _ = cash_gamma_integral(payoff, t, s, params)
    return _scale(e, params) * cgi


def _scale(eta: float, params: MarketParams) -> float:
    # sqrt(eta) factored out so that quadrupling eta doubles the result exactly
    return math.sqrt(eta) * math.sqrt(2.0 * params.gamma * params.sigma**2)


# ---------------------------------------------------------------------------
# convergence study
# ---------------------------------------------------------------------------

CONVERGENCE_COLUMNS = ("eta", "pstar_fd", "fd_err", "pstar_mc", "mc_stderr", "expansion", "rho", "rho_ratio")


@dataclass
class ConvergenceRow:
    eta: float
    pstar_fd: float
    fd_err: float
    pstar_mc: float
    mc_stderr: float
    expansion: float
    rho: float
    rho_ratio: float = math.nan

    def values(self) -> tuple:
        return tuple(getattr(self, c) for c in CONVERGENCE_COLUMNS)


class StudyError(RuntimeError):
    def __init__(self, message, rows):
        super().__init__(message)
        self.rows = rows


def convergence_study(scenario, eta_list, grid=None, options=None, n_paths: int = 0, n_steps: int = 256,
                      seed: int = 42, threads: int = 1, dQ: float | None = None) -> list[ConvergenceRow]:
    """Normalised residual ``rho(eta) = |pstar_fd - expansion| / sqrt(eta)`` along ``eta_list``.

    ``n_paths = 0`` skips the Monte Carlo route (``pstar_mc`` and its stderr are NaN).
    Failures abort with :class:`StudyError` carrying the rows computed so far.
    """
    from .hedging import optimal_inventory, simulate_paths
    from .hjb import Grid, SolverOptions
    from .pricing import Pricer, marginal_price_mc

    etas = [float(e) for e in eta_list]
    if not etas:
        raise ModelError("eta_list is empty")
    if any(b >= a for a, b in zip(etas, etas[1:])):
        raise ModelError("eta_list must be strictly decreasing")
    grid = grid or Grid()
    options = options or SolverOptions()
    rows: list[ConvergenceRow] = []
    for e in etas:
        try:
            sc = scenario.with_eta(e)
            pricer = Pricer(sc.params, sc.payoff, grid, options)
            fd = pricer.marginal_price_fd(sc.t0, sc.s0, sc.pi0, sc.Q, dQ)
            pmc, se = math.nan, math.nan
            if n_paths > 0:
                surface = pricer.surface(sc.Q)
                ens = simulate_paths(sc.params, sc.t0, sc.s0, n_paths, n_steps, seed, threads)
                out = optimal_inventory(surface, ens, sc.pi0, sc.x0, threads=threads)
                mc = marginal_price_mc(surface, ens, sc.pi0, outcome=out)
                pmc, se = mc["estimate"], mc["stderr"]
            exp = expansion_price(sc.payoff, sc.t0, sc.s0, sc.pi0, sc.Q, sc.params)
        except Exception as exc:  # noqa: BLE001 - rethrown with the partial table
            raise StudyError(f"convergence study failed at eta={e}: {exc}", rows) from exc
        rho = abs(fd["estimate"] - exp.total) / math.sqrt(e)
        row = ConvergenceRow(e, fd["estimate"], fd["error"], pmc, se, exp.total, rho)
        if rows:
            row.rho_ratio = rho / rows[-1].rho if rows[-1].rho > 0 else math.inf
        rows.append(row)
    return rows


def format_table(rows) -> str:
    lines = [",".join(CONVERGENCE_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(v) for v in r.values()))
    return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{v:.16e}"
