"""Market parameters, payoffs, Bachelier analytics and the Riccati curve.

The underlying follows an arithmetic Brownian motion ``S_v = s + sigma W``;
trading at rate ``nu`` costs ``eta * nu`` per share on top of the unaffected
price. Everything here is closed form and side-effect free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

RAW = "raw"
RESCALED = "rescaled"


class ModelError(ValueError):
    """Invalid model input (parameters, payoff, or evaluation point)."""


def _npdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(x))


def _scalar_or_array(x):
    x = np.asarray(x, dtype=float)
    return x.item() if x.ndim == 0 else x


# ---------------------------------------------------------------------------
# market parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarketParams:
    """Market and preference constants.

    Attributes
    ----------
    sigma : float
        Volatility of the arithmetic price, price units per sqrt(time).
    eta : float
        Linear temporary impact, price units per unit trading rate.
    gamma : float
        Absolute risk aversion.
    penalty : float
        Liquidation penalty. In ``"rescaled"`` mode this is ``lbar`` and the
        raw penalty is ``lbar * eta``; in ``"raw"`` mode it is ``l`` itself.
    penalty_mode : {"rescaled", "raw"}
    horizon : float
        Option maturity ``T``.
    """

    sigma: float = 1.0
    eta: float = 0.01
    gamma: float = 1.0
    penalty: float = 1.0
    penalty_mode: str = RESCALED
    horizon: float = 1.0

    def __post_init__(self):
        for name in ("sigma", "eta", "gamma", "horizon"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ModelError(f"{name} must be finite and > 0, got {value!r}")
        if not (math.isfinite(self.penalty) and self.penalty >= 0.0):
            raise ModelError(f"penalty must be finite and >= 0, got {self.penalty!r}")
        if self.penalty_mode not in (RAW, RESCALED):
            raise ModelError(f"penalty_mode must be 'raw' or 'rescaled', got {self.penalty_mode!r}")
        if self.penalty_mode == RESCALED:
            if self.penalty * math.sqrt(self.eta) >= math.sqrt(2.0 * self.gamma * self.sigma**2):
                raise ModelError(
                    "rescaled penalty requires lbar*sqrt(eta) < sqrt(2*gamma*sigma^2) "
                    f"(lbar={self.penalty}, eta={self.eta})"
                )
        if not (math.isfinite(self.kappa) and self.kappa > 0.0):
            raise ModelError("kappa is not finite and positive")

    @property
    def l(self) -> float:
        """Raw liquidation penalty."""
        if self.penalty_mode == RESCALED:
            return self.penalty * self.eta
        return self.penalty

    @property
    def lbar(self) -> float | None:
        return self.penalty if self.penalty_mode == RESCALED else None

    @property
    def kappa(self) -> float:
        return math.sqrt(self.sigma**2 * self.gamma / (2.0 * self.eta))

    @property
    def critical_penalty(self) -> float:
        """``sqrt(2 gamma sigma^2 eta)``: the penalty at which ``m`` is constant."""
        return math.sqrt(2.0 * self.gamma * self.sigma**2 * self.eta)

    @property
    def phi(self) -> float:
        """Offset of the tanh (or coth, above the critical penalty) branch of ``m``."""
        l, r = self.l, self.critical_penalty
        if l == r:
            return math.inf
        if l < r:
            return 0.5 * math.log((l + r) / (r - l))
        return 0.5 * math.log((l + r) / (l - r))

    @property
    def impact_scale(self) -> float:
        """``sqrt(2 eta gamma sigma^2)``, the prefactor of the small-impact corrections."""
        return math.sqrt(2.0 * self.eta * self.gamma * self.sigma**2)

    def with_eta(self, eta: float) -> "MarketParams":
        """Same market with another impact coefficient (``lbar`` kept in rescaled mode)."""
        return replace(self, eta=eta)

    def as_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "eta": self.eta,
            "gamma": self.gamma,
            "penalty": self.penalty,
            "penalty_mode": self.penalty_mode,
            "horizon": self.horizon,
            "l": self.l,
            "kappa": self.kappa,
        }

    def check_time(self, t) -> None:
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > self.horizon) or np.any(~np.isfinite(t)):
            raise ModelError(f"time outside [0, T={self.horizon}]")

    def variance_to_maturity(self, t):
        return self.sigma**2 * np.maximum(self.horizon - np.asarray(t, dtype=float), 0.0)


# ---------------------------------------------------------------------------
# payoffs
# ---------------------------------------------------------------------------


class Payoff:
    """European payoff ``H`` with Gaussian-smoothed analytics.

    Subclasses implement the expectation ``E[H(s + sqrt(v) Z)]`` and its first
    two ``s``-derivatives for a total variance ``v >= 0``.
    """

    name = "payoff"

    lipschitz_H: float = 1.0
    lipschitz_Hprime: float = math.inf  # inf stands for "unbounded"

    def __call__(self, s):
        return self.expectation(s, 0.0)

    def expectation(self, s, variance):
        raise NotImplementedError

    def expectation_delta(self, s, variance):
        raise NotImplementedError

    def expectation_gamma(self, s, variance):
        raise NotImplementedError

    @property
    def bounds(self) -> tuple[float, float]:
        return (-math.inf, math.inf)

    @property
    def has_bounded_gamma(self) -> bool:
        return math.isfinite(self.lipschitz_Hprime)

    def describe(self) -> str:
        raise NotImplementedError


def _bachelier_call(x, sd):
    """Call value, delta, gamma in moneyness ``x = s - K`` with stdev ``sd > 0``."""
    d = x / sd
    return x * ndtr(d) + sd * _npdf(d), ndtr(d), _npdf(d) / sd


@dataclass(frozen=True)
class Call(Payoff):
    strike: float
    name = "call"

    @property
    def lipschitz_H(self):
        return 1.0

    @property
    def bounds(self):
        return (0.0, math.inf)

    def expectation(self, s, variance):
        x = np.asarray(s, dtype=float) - self.strike
        if variance <= 0.0:
            return _scalar_or_array(np.maximum(x, 0.0))
        return _scalar_or_array(_bachelier_call(x, math.sqrt(variance))[0])

    def expectation_delta(self, s, variance):
        x = np.asarray(s, dtype=float) - self.strike
        if variance <= 0.0:
            return _scalar_or_array(np.where(x > 0, 1.0, np.where(x < 0, 0.0, 0.5)))
        return _scalar_or_array(_bachelier_call(x, math.sqrt(variance))[1])

    def expectation_gamma(self, s, variance):
        if variance <= 0.0:
            raise ModelError("gamma of a kinked payoff is singular at maturity")
        x = np.asarray(s, dtype=float) - self.strike
        return _scalar_or_array(_bachelier_call(x, math.sqrt(variance))[2])

    def describe(self):
        return f"call(strike={self.strike!r})"


@dataclass(frozen=True)
class Put(Payoff):
    strike: float
    name = "put"

    @property
    def lipschitz_H(self):
        return 1.0

    @property
    def bounds(self):
        return (0.0, max(self.strike, 0.0)) if self.strike >= 0 else (0.0, math.inf)

    def expectation(self, s, variance):
        x = np.asarray(s, dtype=float) - self.strike
        if variance <= 0.0:
            return _scalar_or_array(np.maximum(-x, 0.0))
        c, _, _ = _bachelier_call(x, math.sqrt(variance))
        return _scalar_or_array(c - x)  # put-call parity for a martingale

    def expectation_delta(self, s, variance):
        x = np.asarray(s, dtype=float) - self.strike
        if variance <= 0.0:
            return _scalar_or_array(np.where(x > 0, 0.0, np.where(x < 0, -1.0, -0.5)))
        return _scalar_or_array(_bachelier_call(x, math.sqrt(variance))[1] - 1.0)

    def expectation_gamma(self, s, variance):
        if variance <= 0.0:
            raise ModelError("gamma of a kinked payoff is singular at maturity")
        x = np.asarray(s, dtype=float) - self.strike
        return _scalar_or_array(_bachelier_call(x, math.sqrt(variance))[2])

    def describe(self):
        return f"put(strike={self.strike!r})"


@dataclass(frozen=True)
class Forward(Payoff):
    name = "forward"

    @property
    def lipschitz_H(self):
        return 1.0

    @property
    def lipschitz_Hprime(self):
        return 0.0

    def expectation(self, s, variance):
        return _scalar_or_array(np.asarray(s, dtype=float).copy())

    def expectation_delta(self, s, variance):
        return _scalar_or_array(np.ones_like(np.asarray(s, dtype=float)))

    def expectation_gamma(self, s, variance):
        return _scalar_or_array(np.zeros_like(np.asarray(s, dtype=float)))

    def describe(self):
        return "forward()"


@dataclass(frozen=True)
class Constant(Payoff):
    level: float
    name = "constant"

    @property
    def lipschitz_H(self):
        return 0.0

    @property
    def lipschitz_Hprime(self):
        return 0.0

    @property
    def bounds(self):
        return (self.level, self.level)

    def expectation(self, s, variance):
        return _scalar_or_array(np.full_like(np.asarray(s, dtype=float), self.level))

    def expectation_delta(self, s, variance):
        return _scalar_or_array(np.zeros_like(np.asarray(s, dtype=float)))

    def expectation_gamma(self, s, variance):
        return _scalar_or_array(np.zeros_like(np.asarray(s, dtype=float)))

    def describe(self):
        return f"constant(level={self.level!r})"


@dataclass(frozen=True)
class SmoothedCall(Payoff):
    """Call payoff convolved with a centred Gaussian of stdev ``smoothing_stdev``.

    ``H(s) = E[(s + smoothing_stdev * Z - K)^+]``. Its derivative is Lipschitz
    with constant ``1 / (smoothing_stdev * sqrt(2 pi))``, so gammas stay bounded
    up to maturity.
    """

    strike: float
    smoothing_stdev: float
    name = "smoothed_call"

    def __post_init__(self):
        if not (self.smoothing_stdev > 0.0 and math.isfinite(self.smoothing_stdev)):
            raise ModelError("smoothing_stdev must be > 0")

    @property
    def lipschitz_H(self):
        return 1.0

    @property
    def lipschitz_Hprime(self):
        return _INV_SQRT_2PI / self.smoothing_stdev

    @property
    def bounds(self):
        return (0.0, math.inf)

    def _sd(self, variance):
        return math.sqrt(max(variance, 0.0) + self.smoothing_stdev**2)

    def expectation(self, s, variance):
        x = np.asarray(s, dtype=float) - self.strike
        return _scalar_or_array(_bachelier_call(x, self._sd(variance))[0])

    def expectation_delta(self, s, variance):
        x = np.asarray(s, dtype=float) - self.strike
        return _scalar_or_array(_bachelier_call(x, self._sd(variance))[1])

    def expectation_gamma(self, s, variance):
        x = np.asarray(s, dtype=float) - self.strike
        return _scalar_or_array(_bachelier_call(x, self._sd(variance))[2])

    def describe(self):
        return f"smoothed_call(strike={self.strike!r}, smoothing_stdev={self.smoothing_stdev!r})"


@dataclass(frozen=True)
class LinearCombination(Payoff):
    terms: tuple = field(default_factory=tuple)  # ((weight, Payoff), ...)
    name = "combination"

    def __post_init__(self):
        if not self.terms:
            raise ModelError("combination needs at least one term")
        object.__setattr__(self, "terms", tuple((float(w), p) for w, p in self.terms))

    @property
    def lipschitz_H(self):
        return sum(abs(w) * p.lipschitz_H for w, p in self.terms)

    @property
    def lipschitz_Hprime(self):
        return sum(abs(w) * p.lipschitz_Hprime for w, p in self.terms if w != 0.0)

    @property
    def bounds(self):
        # sum of component bounds; a superset of the true range
        lo = hi = 0.0
        for w, p in self.terms:
            a, b = p.bounds
            lo += w * (a if w >= 0 else b)
            hi += w * (b if w >= 0 else a)
        return (lo, hi)

    def _sum(self, method, s, variance):
        out = 0.0
        for w, p in self.terms:
            out = out + w * np.asarray(getattr(p, method)(s, variance), dtype=float)
        return _scalar_or_array(out)

    def expectation(self, s, variance):
        return self._sum("expectation", s, variance)

    def expectation_delta(self, s, variance):
        return self._sum("expectation_delta", s, variance)

    def expectation_gamma(self, s, variance):
        return self._sum("expectation_gamma", s, variance)

    def describe(self):
        inner = "; ".join(f"{w!r}*{p.describe()}" for w, p in self.terms)
        return f"combination({inner})"


def payoff_eval(payoff: Payoff, s):
    """Terminal payoff ``H(s)``."""
    return payoff(s)


def frictionless_price(payoff: Payoff, t, s, params: MarketParams):
    """Bachelier price ``P(t, s) = E[H(s + sigma (W_T - W_t))]``."""
    params.check_time(t)
    return payoff.expectation(s, float(params.variance_to_maturity(t)))


def frictionless_delta(payoff: Payoff, t, s, params: MarketParams):
    params.check_time(t)
    return payoff.expectation_delta(s, float(params.variance_to_maturity(t)))


def frictionless_gamma(payoff: Payoff, t, s, params: MarketParams):
    params.check_time(t)
    return payoff.expectation_gamma(s, float(params.variance_to_maturity(t)))


def delta_field(payoff: Payoff, times: Sequence[float], s_nodes, params: MarketParams) -> np.ndarray:
    """``d_s P`` on a (time, price) grid."""
    return np.stack([np.asarray(frictionless_delta(payoff, t, s_nodes, params), dtype=float) for t in times])


# ---------------------------------------------------------------------------
# Riccati curve
# ---------------------------------------------------------------------------


def _riccati_parts(params: MarketParams):
    l, r = params.l, params.critical_penalty
    return params.kappa, (l - r) / (l + r)


def riccati_m(t, params: MarketParams):
    """Non-exploding solution of ``-m' + m^2 = kappa^2`` with ``m(T) = l / (2 eta)``.

    Evaluated in the rational form ``-kappa + 2 kappa / (1 - rho e^{-2 kappa (T-t)})``
    with ``rho = (l - r)/(l + r)``, ``r = sqrt(2 gamma sigma^2 eta)``. It equals the
    tanh branch for ``l <= r`` and the coth branch above, without the overflow
    those forms have near the critical penalty.
    """
    params.check_time(t)
    kappa, rho = _riccati_parts(params)
    tau = params.horizon - np.asarray(t, dtype=float)
    m = -kappa + 2.0 * kappa / (1.0 - rho * np.exp(-2.0 * kappa * tau))
    # pin the terminal value; the rational form is only exact up to rounding there
    return _scalar_or_array(np.where(tau == 0.0, params.l / (2.0 * params.eta), m))


def riccati_m_branch(t, params: MarketParams):
    """Same curve through the explicit tanh/coth branch, kept for cross-checks."""
    params.check_time(t)
    kappa, phi = params.kappa, params.phi
    tau = params.horizon - np.asarray(t, dtype=float)
    if math.isinf(phi):
        return _scalar_or_array(np.full_like(tau, kappa))
    if params.l <= params.critical_penalty:
        return _scalar_or_array(kappa * np.tanh(kappa * tau + phi))
    return _scalar_or_array(kappa / np.tanh(kappa * tau + phi))


def riccati_dm(t, params: MarketParams):
    """Analytic ``m'(t)``."""
    params.check_time(t)
    kappa, rho = _riccati_parts(params)
    e = np.exp(-2.0 * kappa * (params.horizon - np.asarray(t, dtype=float)))
    return _scalar_or_array(4.0 * kappa**2 * rho * e / (1.0 - rho * e) ** 2)


def riccati_tail_integral(t, params: MarketParams):
    """``int_t^T m(r) dr`` in closed form."""
    kappa, rho = _riccati_parts(params)
    tau = params.horizon - np.asarray(t, dtype=float)
    return _scalar_or_array(kappa * tau + np.log1p(-rho * np.exp(-2.0 * kappa * tau)) - math.log1p(-rho))


def riccati_integral(t0, t1, params: MarketParams):
    """``int_{t0}^{t1} m(r) dr``."""
    return _scalar_or_array(
        np.asarray(riccati_tail_integral(t0, params)) - np.asarray(riccati_tail_integral(t1, params))
    )


@dataclass(frozen=True)
class RiccatiCurve:
    """Dense samples of ``m`` on ``[0, T]`` together with ``kappa`` and ``phi``."""

    times: np.ndarray
    m_values: np.ndarray
    kappa: float
    phi: float
    params: MarketParams

    @classmethod
    def build(cls, params: MarketParams, n: int = 1001) -> "RiccatiCurve":
        times = np.linspace(0.0, params.horizon, n)
        return cls(times, np.asarray(riccati_m(times, params)), params.kappa, params.phi, params)

    def __call__(self, t):
        return riccati_m(t, self.params)

    def derivative(self, t):
        return riccati_dm(t, self.params)

    def integral(self, t0, t1):
        return riccati_integral(t0, t1, self.params)

    def residual(self, t):
        """``-m' + m^2 - kappa^2``; zero up to rounding."""
        m = np.asarray(self(t))
        return _scalar_or_array(-np.asarray(self.derivative(t)) + m * m - self.kappa**2)


def q0_value(t, pi, params: MarketParams):
    """Exact log-value ``gamma eta m(t) pi^2`` of the problem without options (``Q = 0``)."""
    return _scalar_or_array(
        params.gamma * params.eta * np.asarray(riccati_m(t, params)) * np.square(np.asarray(pi, dtype=float))
    )
