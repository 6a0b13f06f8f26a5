"""Finite-difference solver for the log-value function ``u(t, s, pi)``.

``u`` solves, backward from ``u(T) = l gamma pi^2 / 2``,

    u_t + sigma^2/2 u_ss + H_eps(u_pi) + sigma^2/2 (u_s - gamma (pi + Q P_s))^2 = 0,

with ``H_eps(p) = inf_{|nu| <= 1/eps} (gamma eta nu^2 + p nu)``.

Scheme, per sub-step of size ``h`` (``t_hi -> t_hi - h``):

* the ``pi``-Hamiltonian is explicit with the Godunov upwind flux. One-sided
  differences are taken of ``u - gamma eta m(t) pi^2`` and the analytic gradient
  of the subtracted quadratic is added back, so the stencil is exact on the
  Riccati part of the solution and only the bounded remainder sees the
  first-order upwind error. The sub-step honours ``h max|nu| / dpi <= cfl``.
* diffusion and the ``s``-gradient square are implicit. The square is
  linearised around the previous iterate and the resulting tridiagonal systems
  (one per ``pi``-line) are solved in a single banded solve, iterating to
  ``tolerance``. Central differences are used where the cell Peclet number
  allows a monotone stencil, upwind otherwise.
* boundaries: linear extrapolation in ``s``; in ``pi`` the second difference is
  pinned to ``2 gamma eta m(t) dpi^2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from .core_model import (
    MarketParams,
    ModelError,
    Payoff,
    delta_field,
    frictionless_delta,
    q0_value,
    riccati_integral,
    riccati_m,
)

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Numerical failure of the HJB solve."""


class CFLError(SolverError):
    pass


class OutOfGridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    n_t: int = 64
    s_min: float = -5.0
    s_max: float = 5.0
    n_s: int = 129
    pi_min: float = -2.5
    pi_max: float = 2.5
    n_pi: int = 97

    def __post_init__(self):
        if self.n_t < 2:
            raise ModelError("n_t must be >= 2")
        if not self.s_min < self.s_max:
            raise ModelError("s_min must be < s_max")
        if not self.pi_min < self.pi_max:
            raise ModelError("pi_min must be < pi_max")
        if self.n_s < 5 or self.n_pi < 5:
            raise ModelError("need at least 5 nodes per space direction")

    @property
    def s_nodes(self) -> np.ndarray:
        return np.linspace(self.s_min, self.s_max, self.n_s)

    @property
    def pi_nodes(self) -> np.ndarray:
        return np.linspace(self.pi_min, self.pi_max, self.n_pi)

    @property
    def ds(self) -> float:
        return (self.s_max - self.s_min) / (self.n_s - 1)

    @property
    def dpi(self) -> float:
        return (self.pi_max - self.pi_min) / (self.n_pi - 1)

    def times(self, horizon: float) -> np.ndarray:
        return np.linspace(0.0, horizon, self.n_t + 1)

    def refined(self) -> "Grid":
        """Halve every spacing (time steps included)."""
        return Grid(2 * self.n_t, self.s_min, self.s_max, 2 * self.n_s - 1,
                    self.pi_min, self.pi_max, 2 * self.n_pi - 1)

    def coarsened(self) -> "Grid":
        if (self.n_s - 1) % 2 or (self.n_pi - 1) % 2 or self.n_t % 2:
            raise ModelError("grid cannot be coarsened by two")
        return Grid(self.n_t // 2, self.s_min, self.s_max, (self.n_s + 1) // 2,
                    self.pi_min, self.pi_max, (self.n_pi + 1) // 2)

    def check_containment(self, Q: float, max_abs_delta: float, pi0: float = 0.0) -> bool:
        """Domain rule ``pi_max >= 2 max|Q d_sP| + |pi0|`` (symmetric in sign)."""
        need = 2.0 * abs(Q) * max_abs_delta + abs(pi0)
        return self.pi_max >= need and -self.pi_min >= need

    def as_dict(self) -> dict:
        return {
            "n_t": self.n_t, "s_min": self.s_min, "s_max": self.s_max, "n_s": self.n_s,
            "pi_min": self.pi_min, "pi_max": self.pi_max, "n_pi": self.n_pi,
        }


@dataclass(frozen=True)
class SolverOptions:
    epsilon_cap: float = 0.0
    tolerance: float = 1e-10
    max_iters: int = 50
    cfl: float = 0.5
    substeps: int | None = None  # None: chosen from the CFL bound
    force_full: bool = False  # run the scheme even when Q == 0

    def as_dict(self) -> dict:
        return {
            "epsilon_cap": self.epsilon_cap, "tolerance": self.tolerance,
            "max_iters": self.max_iters, "cfl": self.cfl, "substeps": self.substeps,
            "force_full": self.force_full,
        }


def hamiltonian(p, params: MarketParams, epsilon_cap: float = 0.0):
    """``H_eps(p)`` and its minimiser ``nu*``.

    Returns ``(value, nu_star)``; for ``epsilon_cap == 0`` the value is
    ``-p^2 / (4 eta gamma)``.
    """
    p = np.asarray(p, dtype=float)
    ge = params.gamma * params.eta
    nu = -p / (2.0 * ge)
    if epsilon_cap > 0.0:
        nu = np.clip(nu, -1.0 / epsilon_cap, 1.0 / epsilon_cap)
    value = ge * nu * nu + p * nu
    if epsilon_cap == 0.0:
        value = -p * p / (4.0 * ge)
    if value.ndim == 0:
        return value.item(), nu.item()
    return value, nu


def _godunov(p_minus, p_plus, params, epsilon_cap):
    """Upwind Hamiltonian for the backward equation and the selected gradient.

    With ``G(p) = -H_eps(p)`` convex, even and minimal at 0, the Godunov flux
    is ``max(G(p-^+), G(p+^-))``.
    """
    a = np.maximum(p_minus, 0.0)
    b = np.minimum(p_plus, 0.0)
    ha, _ = hamiltonian(a, params, epsilon_cap)
    hb, _ = hamiltonian(b, params, epsilon_cap)
    use_a = ha <= hb  # H <= 0, the larger G wins
    value = np.where(use_a, ha, hb)
    p_sel = np.where(use_a, a, b)
    return value, p_sel


@dataclass
class ValueSurface:
    """Grid solution ``u(t_k, s_j, pi_i)`` with stored gradient fields.

    Arrays are indexed ``[t, s, pi]``. ``du_dpi`` is the gradient selected by
    the upwind flux, ``du_ds`` the centred difference (one-sided on the edge).
    """

    u: np.ndarray
    du_ds: np.ndarray
    du_dpi: np.ndarray
    times: np.ndarray
    grid: Grid
    Q: float
    payoff: Payoff
    params: MarketParams
    scheme_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._quad = (self.params.gamma * self.params.eta
                      * np.asarray(riccati_m(self.times, self.params)))
        pi = self.grid.pi_nodes
        # remainders after removing the Riccati quadratic; interpolated instead
        # of u itself so that the stiff m(t) factor is never interpolated in t
        self._v = self.u - self._quad[:, None, None] * pi[None, None, :] ** 2
        self._v_pi = self.du_dpi - 2.0 * self._quad[:, None, None] * pi[None, None, :]

    # -- interpolation -----------------------------------------------------

    def _locate(self, t, s, pi, clip):
        g = self.grid
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        pi = np.asarray(pi, dtype=float)
        T = self.times[-1]
        if not clip:
            bad = ((t < 0) | (t > T) | (s < g.s_min) | (s > g.s_max)
                   | (pi < g.pi_min) | (pi > g.pi_max))
            if np.any(bad):
                raise OutOfGridError("query outside the solution grid")
        t = np.clip(t, 0.0, T)
        s = np.clip(s, g.s_min, g.s_max)
        pi = np.clip(pi, g.pi_min, g.pi_max)
        xt = t / T * g.n_t
        xs = (s - g.s_min) / g.ds
        xp = (pi - g.pi_min) / g.dpi
        it = np.clip(np.floor(xt).astype(int), 0, g.n_t - 1)
        js = np.clip(np.floor(xs).astype(int), 0, g.n_s - 2)
        ip = np.clip(np.floor(xp).astype(int), 0, g.n_pi - 2)
        return it, xt - it, js, xs - js, ip, xp - ip

    def _interp(self, arr, t, s, pi, clip=False):
        it, wt, js, ws, ip, wp = self._locate(t, s, pi, clip)

        def bil(k):
            a = arr[k, js, ip]
            b = arr[k, js + 1, ip]
            c = arr[k, js, ip + 1]
            d = arr[k, js + 1, ip + 1]
            return (1 - ws) * ((1 - wp) * a + wp * c) + ws * ((1 - wp) * b + wp * d)

        out = (1 - wt) * bil(it) + wt * bil(it + 1)
        return out.item() if np.ndim(out) == 0 else out

    def value(self, t, s, pi, clip=False):
        v = self._interp(self._v, t, s, pi, clip)
        if clip:
            g = self.grid
            pi = np.clip(pi, g.pi_min, g.pi_max)
        quad = self.params.gamma * self.params.eta * np.asarray(riccati_m(np.clip(t, 0, self.times[-1]), self.params))
        out = quad * np.square(pi) + v
        return out.item() if np.ndim(out) == 0 else out

    def grad_s(self, t, s, pi, clip=False):
        return self._interp(self.du_ds, t, s, pi, clip)

    def grad_pi(self, t, s, pi, clip=False):
        vp = self._interp(self._v_pi, t, s, pi, clip)
        quad = self.params.gamma * self.params.eta * np.asarray(riccati_m(np.clip(t, 0, self.times[-1]), self.params))
        out = 2.0 * quad * np.asarray(pi, dtype=float) + vp
        return out.item() if np.ndim(out) == 0 else out

    # -- invariants ---------------------------------------------------------

    def terminal_error(self) -> float:
        pi = self.grid.pi_nodes
        target = 0.5 * self.params.l * self.params.gamma * pi**2
        return float(np.max(np.abs(self.u[-1] - target[None, :])))

    def interior(self, arr):
        return arr[:, 1:-1, 1:-1]

    def lower_sandwich_violation(self) -> float:
        """Largest ``gamma eta m(t) pi^2 - u`` over interior nodes (<= 0 ideally).

        Exact lower bound for ``Q = 0``; for ``Q != 0`` the bound shifts by the
        hedgeable part and the figure is a diagnostic.
        """
        pi = self.grid.pi_nodes
        lb = self._quad[:, None, None] * pi[None, None, :] ** 2
        return float(np.max(self.interior(lb - self.u)))

    def convexity_min(self) -> float:
        """Minimum discrete second difference in ``pi`` (scaled by ``dpi^2``)."""
        d2 = self.u[:, :, 2:] - 2.0 * self.u[:, :, 1:-1] + self.u[:, :, :-2]
        return float(np.min(d2[:, 1:-1, :]))

    def s_lipschitz(self) -> float:
        ds = self.grid.ds
        return float(np.max(np.abs(np.diff(self.u, axis=1))) / ds)

    def pi_gradient_monotone_min(self) -> float:
        return float(np.min(np.diff(self.du_dpi[:, 1:-1, :], axis=2)))

    # -- serialisation -----------------------------------------------------

    def header(self) -> dict:
        return {
            "format": "impacthedge.value_surface/1",
            "params": self.params.as_dict(),
            "grid": self.grid.as_dict(),
            "Q": self.Q,
            "payoff": self.payoff.describe(),
            "scheme": self.scheme_meta,
        }

    def write(self, path, extra_header: dict | None = None) -> None:
        """Text format: ``# key: json`` header lines, then CSV rows
        ``t_index,s_index,pi_index,u,du_ds,du_dpi``."""
        import json

        path = Path(path)
        head = self.header()
        if extra_header:
            head.update(extra_header)
        nt, ns, npi = self.u.shape
        idx = np.indices((nt, ns, npi)).reshape(3, -1).T
        vals = np.column_stack([self.u.ravel(), self.du_ds.ravel(), self.du_dpi.ravel()])
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for key in sorted(head):
                fh.write(f"# {key}: {json.dumps(head[key], sort_keys=True)}\n")
            fh.write("t_index,s_index,pi_index,u,du_ds,du_dpi\n")
            for (a, b, c), (x, y, z) in zip(idx, vals):
                fh.write(f"{a},{b},{c},{x:.16e},{y:.16e},{z:.16e}\n")


def read_surface_arrays(path) -> tuple[dict, np.ndarray, np.ndarray, np.ndarray]:
    """Parse a written surface back into ``(header, u, du_ds, du_dpi)``."""
    import json

    head = {}
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# "):
                key, _, rest = line[2:].partition(": ")
                head[key] = json.loads(rest)
            elif line.startswith("t_index"):
                continue
            else:
                rows.append(line)
    data = np.loadtxt(rows, delimiter=",")
    g = head["grid"]
    shape = (g["n_t"] + 1, g["n_s"], g["n_pi"])
    return head, data[:, 3].reshape(shape), data[:, 4].reshape(shape), data[:, 5].reshape(shape)


# ---------------------------------------------------------------------------
# the scheme
# ---------------------------------------------------------------------------


def _grad_s(u, ds):
    g = np.empty_like(u)
    g[1:-1] = (u[2:] - u[:-2]) / (2.0 * ds)
    g[0] = (u[1] - u[0]) / ds
    g[-1] = (u[-1] - u[-2]) / ds
    return g


def _pi_flux(u, t, pi, dpi, params, eps):
    """Upwind ``H_eps(u_pi)`` and selected gradient on interior ``pi`` nodes."""
    c = params.gamma * params.eta * float(riccati_m(t, params))
    w = u - c * pi[None, :] ** 2
    dw = np.diff(w, axis=1) / dpi
    base = 2.0 * c * pi[None, 1:-1]
    p_minus = base + dw[:, :-1]
    p_plus = base + dw[:, 1:]
    return _godunov(p_minus, p_plus, params, eps)


def _gradient_fields(u, t, grid, params, eps):
    """Stored gradients: centred in ``s``, upwind-selected in ``pi``."""
    pi = grid.pi_nodes
    du_ds = _grad_s(u, grid.ds)
    _, p_sel = _pi_flux(u, t, pi, grid.dpi, params, eps)
    du_dpi = np.empty_like(u)
    du_dpi[:, 1:-1] = p_sel
    c = params.gamma * params.eta * float(riccati_m(t, params))
    # edges: one-sided remainder slope plus the exact quadratic slope
    w = u - c * pi[None, :] ** 2
    du_dpi[:, 0] = 2 * c * pi[0] + (w[:, 1] - w[:, 0]) / grid.dpi
    du_dpi[:, -1] = 2 * c * pi[-1] + (w[:, -1] - w[:, -2]) / grid.dpi
    return du_ds, du_dpi


def _max_rate(u, t_hi, t_lo, grid, params, eps):
    """Bound on ``|nu*|`` over ``[t_lo, t_hi]``.

    The quadratic part of the gradient is bounded with the larger endpoint
    value of ``m`` (monotone in ``t``); the remainder is frozen at ``t_hi``.
    """
    pi = grid.pi_nodes
    _, p_sel = _pi_flux(u, t_hi, pi, grid.dpi, params, eps)
    ge = params.gamma * params.eta
    c_hi = ge * float(riccati_m(t_hi, params))
    c_max = ge * max(float(riccati_m(t_hi, params)), float(riccati_m(t_lo, params)))
    remainder = np.max(np.abs(p_sel - 2.0 * c_hi * pi[None, 1:-1]))
    rate = (remainder + 2.0 * c_max * np.max(np.abs(pi))) / (2.0 * ge)
    if eps > 0.0:
        rate = min(rate, 1.0 / eps)
    return rate


def _s_implicit(rhs, g_lo, h, grid, params, opts, u_guess):
    """Solve ``U - h sigma^2/2 U_ss - h sigma^2/2 (U_s - g)^2 = rhs`` on interior s-nodes.

    ``rhs``, ``g_lo`` and ``u_guess`` have shape ``(n_s, m)``; each column is an
    independent line. Returns the solution (edges by linear extrapolation) and
    the iteration count.
    """
    ns, m = rhs.shape
    ds = grid.ds
    sig2 = params.sigma**2
    a_diff = h * sig2 / (2.0 * ds * ds)
    U = u_guess.copy()
    n_int = ns - 2
    for it in range(1, opts.max_iters + 1):
        beta = _grad_s(U, ds)[1:-1] - g_lo[1:-1]
        central = np.abs(beta) * ds <= 1.0
        adv = h * sig2 * beta / ds
        lower = np.where(central, -a_diff + 0.5 * adv, -a_diff + np.minimum(adv, 0.0))
        upper = np.where(central, -a_diff - 0.5 * adv, -a_diff - np.maximum(adv, 0.0))
        diag = np.where(central, 1.0 + 2.0 * a_diff, 1.0 + 2.0 * a_diff + np.abs(adv))
        b = rhs[1:-1] - h * sig2 * beta * g_lo[1:-1] - 0.5 * h * sig2 * beta**2
        # fold the extrapolated edges U_0 = 2U_1 - U_2 (and mirror) into the rows
        diag[0] += 2.0 * lower[0]
        upper[0] -= lower[0]
        diag[-1] += 2.0 * upper[-1]
        lower[-1] -= upper[-1]
        lower[0] = 0.0
        upper[-1] = 0.0
        # lines are stacked column-major into one banded system
        ab = np.zeros((3, n_int * m))
        ab[0, 1:] = upper.T.ravel()[:-1]
        ab[1] = diag.T.ravel()
        ab[2, :-1] = lower.T.ravel()[1:]
        sol = solve_banded((1, 1), ab, b.T.ravel(), check_finite=False).reshape(m, n_int).T
        new = np.empty_like(U)
        new[1:-1] = sol
        new[0] = 2.0 * sol[0] - sol[1]
        new[-1] = 2.0 * sol[-1] - sol[-2]
        change = float(np.max(np.abs(new - U)))
        U = new
        if not np.isfinite(change):
            raise SolverError("non-finite values in the implicit s-solve")
        if change <= opts.tolerance * max(1.0, float(np.max(np.abs(U)))):
            return U, it
    raise SolverError(f"implicit s-step did not converge in {opts.max_iters} iterations (last change {change:.3e})")


def solve_q0_closed_form(params, payoff, grid, opts=SolverOptions()):
    times = grid.times(params.horizon)
    pi = grid.pi_nodes
    c = params.gamma * params.eta * np.asarray(riccati_m(times, params))
    u = np.broadcast_to(c[:, None, None] * pi[None, None, :] ** 2, (len(times), grid.n_s, grid.n_pi)).copy()
    u[-1] = 0.5 * params.l * params.gamma * pi[None, :] ** 2
    du_dpi = np.broadcast_to(2.0 * c[:, None, None] * pi[None, None, :], u.shape).copy()
    du_ds = np.zeros_like(u)
    meta = {"method": "closed_form_q0", "epsilon_cap": opts.epsilon_cap, "boundary": "exact"}
    return ValueSurface(u, du_ds, du_dpi, times, grid, 0.0, payoff, params, meta)


def solve(params: MarketParams, payoff: Payoff, Q: float, grid: Grid = Grid(),
          options: SolverOptions = SolverOptions()) -> ValueSurface:
    """Backward solve of the HJB equation on ``grid``.

    Raises
    ------
    CFLError
        A fixed ``options.substeps`` is too coarse for the explicit ``pi`` flux.
    SolverError
        Nonconvergence of the implicit step or non-finite values.
    """
    if Q == 0.0 and not options.force_full:
        return solve_q0_closed_form(params, payoff, grid, options)
    if not math.isfinite(payoff.lipschitz_H):
        raise ModelError("payoff must be globally Lipschitz")

    eps = options.epsilon_cap
    times = grid.times(params.horizon)
    s = grid.s_nodes
    pi = grid.pi_nodes
    dt = params.horizon / grid.n_t
    gam = params.gamma

    u = np.empty((grid.n_t + 1, grid.n_s, grid.n_pi))
    du_ds = np.empty_like(u)
    du_dpi = np.empty_like(u)

    cur = np.broadcast_to(0.5 * params.l * gam * pi[None, :] ** 2, (grid.n_s, grid.n_pi)).copy()
    u[-1] = cur
    du_ds[-1], du_dpi[-1] = _gradient_fields(cur, times[-1], grid, params, eps)

    total_sub = 0
    total_iters = 0
    max_cfl = 0.0
    for k in range(grid.n_t, 0, -1):
        t_hi = times[k]
        if options.substeps is None:
            # headroom for the remainder gradient moving within the step
            rate = 1.25 * _max_rate(cur, t_hi, times[k - 1], grid, params, eps)
            n_sub = max(1, int(math.ceil(dt * rate / (options.cfl * grid.dpi))))
        else:
            n_sub = options.substeps
        h = dt / n_sub
        for j in range(n_sub):
            t = t_hi - j * h
            t_lo = t_hi - (j + 1) * h if j < n_sub - 1 else times[k - 1]
            flux, p_sel = _pi_flux(cur, t, pi, grid.dpi, params, eps)
            _, nu = hamiltonian(p_sel, params, eps)
            cfl_now = h * float(np.max(np.abs(nu))) / grid.dpi
            max_cfl = max(max_cfl, cfl_now)
            if cfl_now > 1.0:
                raise CFLError(f"CFL number {cfl_now:.3f} > 1 at t={t:.6f}; use more substeps")
            rhs = cur[:, 1:-1] + h * flux
            g_lo = gam * (pi[None, 1:-1] + Q * np.asarray(frictionless_delta(payoff, t_lo, s, params))[:, None])
            new_int, iters = _s_implicit(rhs, g_lo, h, grid, params, options, cur[:, 1:-1])
            total_iters += iters
            c_lo = gam * params.eta * float(riccati_m(t_lo, params))
            nxt = np.empty_like(cur)
            nxt[:, 1:-1] = new_int
            nxt[:, 0] = 2.0 * nxt[:, 1] - nxt[:, 2] + 2.0 * c_lo * grid.dpi**2
            nxt[:, -1] = 2.0 * nxt[:, -2] - nxt[:, -3] + 2.0 * c_lo * grid.dpi**2
            if not np.all(np.isfinite(nxt)):
                raise SolverError(f"non-finite value function at t={t_lo:.6f}")
            cur = nxt
        total_sub += n_sub
        u[k - 1] = cur
        du_ds[k - 1], du_dpi[k - 1] = _gradient_fields(cur, times[k - 1], grid, params, eps)

    meta = {
        "method": "upwind_explicit_pi_implicit_s",
        "epsilon_cap": eps,
        "boundary": "s: linear extrapolation; pi: second difference = 2 gamma eta m(t)",
        "substeps": total_sub,
        "newton_iterations": total_iters,
        "max_cfl": max_cfl,
        "tolerance": options.tolerance,
    }
    log.debug("solve Q=%s: %d substeps, %d iterations", Q, total_sub, total_iters)
    return ValueSurface(u, du_ds, du_dpi, times, grid, float(Q), payoff, params, meta)


# ---------------------------------------------------------------------------
# derived fields
# ---------------------------------------------------------------------------


def zz(surface: ValueSurface, t, s, pi, clip=False):
    """``Z = sigma (u_s - gamma (pi + Q P_s))``: the Girsanov kernel."""
    p = surface.params
    us = surface.grad_s(t, s, pi, clip)
    t_c, s_b = np.broadcast_arrays(np.clip(np.asarray(t, dtype=float), 0.0, p.horizon), np.asarray(s, dtype=float))
    d = np.empty(t_c.shape)
    for tv in np.unique(t_c):  # the greeks take one maturity at a time
        mask = t_c == tv
        d[mask] = frictionless_delta(surface.payoff, float(tv), s_b[mask], p)
    out = p.sigma * (us - p.gamma * (np.asarray(pi, dtype=float) + surface.Q * d))
    return out.item() if np.ndim(out) == 0 else out


def feedback_rate(surface: ValueSurface, t, s, pi, clip=False):
    """Optimal trading rate ``-u_pi / (2 eta gamma)``, clamped to ``1/eps`` if capped."""
    p = surface.params
    nu = -np.asarray(surface.grad_pi(t, s, pi, clip)) / (2.0 * p.eta * p.gamma)
    eps = surface.scheme_meta.get("epsilon_cap", 0.0)
    if eps:
        nu = np.clip(nu, -1.0 / eps, 1.0 / eps)
    return nu.item() if np.ndim(nu) == 0 else nu


def r_function(surface: ValueSurface, t, s, pi, clip=False):
    """``R = (u_pi - 2 gamma eta m(t) pi) exp(-int_0^t m)``."""
    vp = surface._interp(surface._v_pi, t, s, pi, clip)
    out = np.asarray(vp) * np.exp(-np.asarray(riccati_integral(0.0, np.clip(t, 0, surface.times[-1]), surface.params)))
    return out.item() if np.ndim(out) == 0 else out


def r_field(surface: ValueSurface) -> np.ndarray:
    """``R`` on every grid node."""
    w = np.exp(-np.asarray(riccati_integral(0.0, surface.times, surface.params)))
    return surface._v_pi * w[:, None, None]


def max_abs_delta(payoff: Payoff, params: MarketParams, grid: Grid) -> float:
    d = delta_field(payoff, grid.times(params.horizon), grid.s_nodes, params)
    return float(np.max(np.abs(d)))


def q0_error(surface: ValueSurface) -> float:
    """Sup over interior nodes of ``|u - gamma eta m(t) pi^2|``."""
    ref = q0_value(surface.times[:, None, None], surface.grid.pi_nodes[None, None, :], surface.params)
    ref = np.broadcast_to(ref, surface.u.shape).copy()
    ref[-1] = 0.5 * surface.params.l * surface.params.gamma * surface.grid.pi_nodes[None, :] ** 2
    return float(np.max(np.abs(surface.interior(surface.u - ref))))
