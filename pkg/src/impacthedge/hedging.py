"""Monte Carlo simulation of the optimally hedged position.

Prices follow ``S = s0 + sigma W``. The inventory solves the feedback ODE
``dpi = nu*(t, S_t, pi_t) dt`` integrated with classical RK4 on the simulation
grid, the price at stage midpoints taken as the average of the two endpoints.
Wealth is booked with ``int S dpi = sum S_mid dpi`` and the objective is
``exp(Psi + Q Gamma)`` with

    Psi   = gamma eta int nu^2 + gamma l pi_T^2 / 2 - gamma int pi dS,
    Gamma = -gamma (H(S_T) - P(t0, s0)).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core_model import MarketParams, ModelError, frictionless_delta, frictionless_price, payoff_eval
from .hjb import ValueSurface, feedback_rate, zz

BLOCK_PAIRS = 512  # RNG block size in antithetic pairs; fixed so output is worker-count independent
MAX_EXIT_FRACTION = 1e-3
N_CHECKPOINTS = 10


class GridExitError(RuntimeError):
    pass


@dataclass
class PathEnsemble:
    """Bachelier price paths on a uniform time grid.

    ``prices`` has shape ``(n_paths, n_steps + 1)``; ``increments`` holds the
    price increments ``sigma dW`` used to build them.
    """

    s0: float
    t0: float
    n_paths: int
    n_steps: int
    dt: float
    prices: np.ndarray
    increments: np.ndarray
    seed: int
    sigma: float

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def terminal(self) -> np.ndarray:
        return self.prices[:, -1]


def _block_normals(seed: int, block: int, n_pairs: int, n_steps: int) -> np.ndarray:
    ss = np.random.SeedSequence(seed, spawn_key=(block,))
    rng = np.random.Generator(np.random.Philox(ss))
    return rng.standard_normal((n_pairs, n_steps))


def _run_chunks(fn, chunks, threads):
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def simulate_paths(params: MarketParams, t0: float, s0: float, n_paths: int, n_steps: int,
                   seed: int, threads: int = 1) -> PathEnsemble:
    """Antithetic Bachelier paths from ``t0`` to the horizon.

    Path ``2k + 1`` uses the negated increments of path ``2k``. Normals are
    drawn per block of pairs from a Philox stream keyed by ``(seed, block)``.
    """
    if n_paths < 1 or n_steps < 1:
        raise ModelError("n_paths and n_steps must be >= 1")
    params.check_time(t0)
    if t0 >= params.horizon:
        raise ModelError("t0 must be before the horizon")
    dt = (params.horizon - t0) / n_steps
    n_pairs = (n_paths + 1) // 2
    blocks = [(b, min(BLOCK_PAIRS, n_pairs - b * BLOCK_PAIRS))
              for b in range(math.ceil(n_pairs / BLOCK_PAIRS))]
    normals = _run_chunks(lambda bn: _block_normals(seed, bn[0], bn[1], n_steps), blocks, threads)
    z = np.concatenate(normals, axis=0)
    inc = np.empty((2 * n_pairs, n_steps))
    scale = params.sigma * math.sqrt(dt)
    inc[0::2] = scale * z
    inc[1::2] = -inc[0::2]
    inc = inc[:n_paths]
    prices = np.empty((n_paths, n_steps + 1))
    prices[:, 0] = s0
    np.cumsum(inc, axis=1, out=prices[:, 1:])
    prices[:, 1:] += s0
    return PathEnsemble(float(s0), float(t0), n_paths, n_steps, dt, prices, inc, seed, params.sigma)


@dataclass(frozen=True)
class Perturbation:
    """Additive rate perturbation ``amplitude * sin(2 pi frequency x + phase)``,
    ``x`` the elapsed fraction of the hedging window."""

    amplitude: float = 0.0
    frequency: float = 1.0
    phase: float = 0.0

    def __call__(self, t, t0, horizon):
        x = (t - t0) / (horizon - t0)
        return self.amplitude * math.sin(2.0 * math.pi * self.frequency * x + self.phase)

    def as_dict(self) -> dict:
        return {"amplitude": self.amplitude, "frequency": self.frequency, "phase": self.phase}


SHIPPED_PERTURBATIONS = (
    Perturbation(0.5, 1.0, 0.0),
    Perturbation(0.5, 0.5, math.pi / 2),
    Perturbation(-0.5, 2.0, math.pi / 4),
    Perturbation(1.0, 1.5, 1.0),
    Perturbation(0.3, 0.0, math.pi / 2),  # constant drift of 0.3
)


@dataclass
class HedgeOutcome:
    """Per-path results of running a feedback strategy on an ensemble."""

    times: np.ndarray
    inventory: np.ndarray
    wealth_terminal: np.ndarray
    objective_samples: np.ndarray
    utility_samples: np.ndarray
    deviation: np.ndarray
    max_abs_rate: np.ndarray
    log_weight: np.ndarray
    log_weight_checkpoints: np.ndarray
    checkpoint_steps: np.ndarray
    wealth_residual: float
    grid_exits: int
    Q: float
    pi0: float
    x0: float
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.inventory.shape[0]

    def summary(self) -> dict:
        obj = self.objective_samples
        mean, se = pair_mean_stderr(obj)
        return {
            "n_paths": int(self.n_paths),
            "Q": self.Q,
            "pi0": self.pi0,
            "x0": self.x0,
            "objective_mean": float(mean),
            "objective_stderr": float(se),
            "utility_mean": float(np.mean(self.utility_samples)),
            "wealth_mean": float(np.mean(self.wealth_terminal)),
            "wealth_std": float(np.std(self.wealth_terminal)),
            "max_abs_rate": float(np.max(self.max_abs_rate)),
            "max_abs_deviation": float(np.max(np.abs(self.deviation))),
            "wealth_identity_residual": float(self.wealth_residual),
            "grid_exits": int(self.grid_exits),
            **self.meta,
        }

    def write_csv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("path,wealth_terminal,utility_sample,max_abs_rate,max_abs_deviation\n")
            max_dev = np.max(np.abs(self.deviation), axis=1)
            for i in range(self.n_paths):
                fh.write(f"{i},{self.wealth_terminal[i]:.16e},{self.utility_samples[i]:.16e},"
                         f"{self.max_abs_rate[i]:.16e},{max_dev[i]:.16e}\n")

    def write_json(self, path, extra: dict | None = None) -> None:
        doc = self.summary()
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def pair_mean_stderr(x: np.ndarray) -> tuple[float, float]:
    """Mean and standard error treating consecutive antithetic pairs as one draw."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n % 2 == 0 and n >= 4:
        units = 0.5 * (x[0::2] + x[1::2])
    else:
        units = x
    m = units.shape[0]
    mean = float(np.mean(x))
    if m < 2:
        return mean, 0.0
    return mean, float(np.std(units, ddof=1) / math.sqrt(m))


PATH_CHUNK = 8192  # fixed so array shapes, hence rounding, do not depend on the worker count


def _chunk_slices(n):
    return [slice(i, min(n, i + PATH_CHUNK)) for i in range(0, n, PATH_CHUNK)]


def optimal_inventory(surface: ValueSurface, ensemble: PathEnsemble, pi0: float, x0: float = 0.0,
                      perturbation: Perturbation | None = None, threads: int = 1,
                      rate_fn: Callable | None = None) -> HedgeOutcome:
    """Run the feedback strategy (optionally perturbed) along every path.

    Path/step pairs whose left-point state leaves the surface grid are clamped
    and counted; more than ``0.1%`` aborts with :class:`GridExitError`.
    ``rate_fn(t, s, pi)`` replaces the surface feedback when given.
    """
    p = surface.params
    T = p.horizon
    if abs(ensemble.t0 + ensemble.n_steps * ensemble.dt - T) > 1e-12:
        raise ModelError("ensemble must run to the horizon")
    base = rate_fn if rate_fn is not None else (lambda t, s, x: feedback_rate(surface, t, s, x, clip=True))
    pert = perturbation if perturbation is not None else Perturbation()

    def rate(t, s, x):
        return base(t, s, x) + pert(t, ensemble.t0, T)

    g = surface.grid
    n_steps = ensemble.n_steps
    h = ensemble.dt
    times = ensemble.times
    ckpt = np.unique(np.linspace(0, n_steps, N_CHECKPOINTS + 1).round().astype(int))

    def run(sl):
        S = ensemble.prices[sl]
        n = S.shape[0]
        inv = np.empty((n, n_steps + 1))
        inv[:, 0] = pi0
        cost = np.zeros(n)  # int nu^2
        s_dpi = np.zeros(n)  # int S dpi
        pi_ds = np.zeros(n)  # int pi dS
        max_rate = np.zeros(n)
        logw = np.zeros(n)
        logw_ck = np.zeros((n, len(ckpt)))
        exits = 0
        ci = 1 if ckpt[0] == 0 else 0
        for k in range(n_steps):
            t = times[k]
            s_a = S[:, k]
            s_b = S[:, k + 1]
            s_m = 0.5 * (s_a + s_b)
            x = inv[:, k]
            exits += int(np.count_nonzero((s_a < g.s_min) | (s_a > g.s_max)
                                          | (x < g.pi_min) | (x > g.pi_max)))
            z = zz(surface, t, s_a, x, clip=True)
            dw = (s_b - s_a) / p.sigma
            logw += z * dw - 0.5 * z * z * h
            v1 = rate(t, s_a, x)
            v2 = rate(t + 0.5 * h, s_m, x + 0.5 * h * v1)
            v3 = rate(t + 0.5 * h, s_m, x + 0.5 * h * v2)
            v4 = rate(t + h, s_b, x + h * v3)
            dpi = h * (v1 + 2.0 * v2 + 2.0 * v3 + v4) / 6.0
            cost += h * (v1 * v1 + 2.0 * v2 * v2 + 2.0 * v3 * v3 + v4 * v4) / 6.0
            inv[:, k + 1] = x + dpi
            s_dpi += s_m * dpi
            pi_ds += 0.5 * (x + inv[:, k + 1]) * (s_b - s_a)
            np.maximum(max_rate, np.maximum(np.maximum(np.abs(v1), np.abs(v2)),
                                            np.maximum(np.abs(v3), np.abs(v4))), out=max_rate)
            while ci < len(ckpt) and ckpt[ci] == k + 1:
                logw_ck[:, ci] = logw
                ci += 1
        if not np.all(np.isfinite(inv)):
            raise FloatingPointError("non-finite inventory")
        return inv, cost, s_dpi, pi_ds, max_rate, logw, logw_ck, exits

    parts = _run_chunks(run, _chunk_slices(ensemble.n_paths), threads)
    inv = np.concatenate([q[0] for q in parts])
    cost = np.concatenate([q[1] for q in parts])
    s_dpi = np.concatenate([q[2] for q in parts])
    pi_ds = np.concatenate([q[3] for q in parts])
    max_rate = np.concatenate([q[4] for q in parts])
    logw = np.concatenate([q[5] for q in parts])
    logw_ck = np.concatenate([q[6] for q in parts])
    exits = sum(q[7] for q in parts)
    if exits > MAX_EXIT_FRACTION * ensemble.n_paths * n_steps:
        raise GridExitError(f"{exits} path-steps left the solution grid "
                            f"({exits / (ensemble.n_paths * n_steps):.2%})")

    S = ensemble.prices
    S_T = S[:, -1]
    pi_T = inv[:, -1]
    Q = surface.Q
    wealth = x0 - p.eta * cost - s_dpi
    # discrete integration by parts: sum S_mid dpi + sum pi_mid dS = pi_N S_N - pi_0 S_0
    ibp = pi_T * S_T - pi0 * S[:, 0] - pi_ds
    scale = np.maximum(1.0, np.abs(s_dpi))
    wealth_residual = float(np.max(np.abs(ibp - s_dpi) / scale))

    psi = p.gamma * p.eta * cost + 0.5 * p.gamma * p.l * pi_T**2 - p.gamma * pi_ds
    P0 = frictionless_price(surface.payoff, ensemble.t0, ensemble.s0, p)
    HT = np.asarray(payoff_eval(surface.payoff, S_T), dtype=float)
    gam_term = -p.gamma * (HT - P0)
    expo = psi + Q * gam_term
    objective = np.exp(expo)
    shift = -p.gamma * (x0 + pi0 * ensemble.s0 + Q * P0)
    utility = -np.exp(shift + expo)

    deviation = inv.copy()
    if Q != 0.0:
        for k, tk in enumerate(np.minimum(times, T)):
            deviation[:, k] += Q * np.asarray(frictionless_delta(surface.payoff, tk, S[:, k], p))

    meta = {"perturbation": pert.as_dict(), "rk4_steps": n_steps, "frictionless_price": float(P0)}
    return HedgeOutcome(times, inv, wealth, objective, utility, deviation, max_rate, logw, logw_ck,
                        ckpt, wealth_residual, exits, float(Q), float(pi0), float(x0), meta)


def evaluate_objective(surface: ValueSurface, ensemble: PathEnsemble, pi0: float, x0: float = 0.0,
                       threads: int = 1, outcome: HedgeOutcome | None = None) -> dict:
    """MC estimate of ``E[exp(Psi + Q Gamma)]`` next to the PDE value ``exp(u)``."""
    if outcome is None:
        outcome = optimal_inventory(surface, ensemble, pi0, x0, threads=threads)
    mean, se = pair_mean_stderr(outcome.objective_samples)
    pde = math.exp(surface.value(ensemble.t0, ensemble.s0, pi0))
    return {"mc_mean": mean, "mc_stderr": se, "pde_value": pde}


def suboptimality_probe(surface: ValueSurface, ensemble: PathEnsemble, pi0: float, x0: float,
                        perturbation: Perturbation, threads: int = 1,
                        optimal: HedgeOutcome | None = None) -> dict:
    """Objective of the feedback strategy and of a perturbed copy on the same paths.

    ``z`` is the paired one-sided statistic ``(perturbed - optimal) / stderr``.
    """
    if optimal is None:
        optimal = optimal_inventory(surface, ensemble, pi0, x0, threads=threads)
    pert = optimal_inventory(surface, ensemble, pi0, x0, perturbation, threads=threads)
    a = optimal.objective_samples
    b = pert.objective_samples
    diff_mean, diff_se = pair_mean_stderr(b - a)
    z = diff_mean / diff_se if diff_se > 0 else (math.inf if diff_mean > 0 else 0.0)
    return {
        "optimal_value": float(np.mean(a)),
        "perturbed_value": float(np.mean(b)),
        "gap": diff_mean,
        "gap_stderr": diff_se,
        "z": z,
        "perturbation": perturbation.as_dict(),
    }


def _trapezoid(y, x):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def deviation_stats(outcome: HedgeOutcome, params: MarketParams, weights: np.ndarray | None = None) -> dict:
    """Time integrals of the mean of ``Delta^2`` and ``Delta^4``.

    ``weights`` (per path, mean ~1) switches the path average to the tilted measure.
    The stderr of the ``Delta^2`` integral treats antithetic pairs as one draw.
    """
    dev = outcome.deviation
    t = outcome.times
    if weights is None:
        w = np.full(dev.shape[0], 1.0 / dev.shape[0])
    else:
        w = np.asarray(weights, dtype=float) / np.sum(weights)
    d2 = dev * dev
    m2 = w @ d2
    m4 = w @ (d2 * d2)
    ma = w @ np.abs(dev)
    # per-path time integrals give the sampling error of the integral
    per_path = np.sum(0.5 * (d2[:, 1:] + d2[:, :-1]) * np.diff(t)[None, :], axis=1)
    if weights is None:
        _, se = pair_mean_stderr(per_path)
    else:
        n = len(per_path)
        est = float(w @ per_path)
        se = float(math.sqrt(np.sum((w * (per_path - est)) ** 2) * n / max(n - 1, 1)))
    return {
        "integral_E_delta2": _trapezoid(m2, t),
        "integral_E_delta2_stderr": se,
        "integral_E_delta4": _trapezoid(m4, t),
        "sup_mean_abs": float(np.max(ma)),
    }


def martingale_diagnostic(outcome: HedgeOutcome) -> list[float]:
    """z-scores of ``mean(M_t) - 1`` at the stored checkpoints, ``M`` the
    stochastic exponential of ``int Z dW``."""
    out = []
    for j in range(outcome.log_weight_checkpoints.shape[1]):
        m = np.exp(outcome.log_weight_checkpoints[:, j])
        mean, se = pair_mean_stderr(m)
        out.append(0.0 if se == 0 else (mean - 1.0) / se)
    return out
