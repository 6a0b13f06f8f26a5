from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import quad

from impacthedge.core_model import RAW, Call, Constant, Forward, MarketParams, ModelError, SmoothedCall
from impacthedge.expansion import (
    CONVERGENCE_COLUMNS,
    cash_gamma_integral,
    convergence_study,
    expansion_price,
    format_table,
    impact_coefficient,
)
from impacthedge.hjb import Grid
from impacthedge.pricing import Scenario

P = MarketParams()
PAYOFF = SmoothedCall(0.0, 0.3)
# closed form arcsin(1/1.09) / (2 pi) for the default smoothed call at t = 0, s = 0
CGI_DEFAULT = 0.1848705076248701


def _cgi_oracle(delta, sigma, T, t, s, K):
    # E[phi(S_r - K; v)^2] = exp(-(s - K)^2 / (v + 2c)) / (2 pi sqrt(v (v + 2c))) for S_r ~ N(s, c)
    def f(r):
        v = delta**2 + sigma**2 * (T - r)
        c = sigma**2 * (r - t)
        return sigma**2 * math.exp(-((s - K) ** 2) / (v + 2 * c)) / (2 * math.pi * math.sqrt(v * (v + 2 * c)))

    return quad(f, t, T, epsabs=1e-14, epsrel=1e-13)[0]


def test_cgi_closed_form():
    assert CGI_DEFAULT == pytest.approx(math.asin(1 / 1.09) / (2 * math.pi), rel=1e-15)
    val, err = cash_gamma_integral(PAYOFF, 0.0, 0.0, P)
    assert val == pytest.approx(CGI_DEFAULT, rel=1e-8)
    assert err < 1e-8


@pytest.mark.parametrize("sigma,t,s,K,delta", [(1.5, 0.2, 0.4, 1.0, 0.5), (0.7, 0.0, -1.0, 0.0, 0.2),
                                               (1.0, 0.9, 0.0, 0.0, 0.1)])
def test_cgi_matches_gaussian_oracle(sigma, t, s, K, delta):
    p = MarketParams(sigma=sigma)
    val, _ = cash_gamma_integral(SmoothedCall(K, delta), t, s, p)
    assert val == pytest.approx(_cgi_oracle(delta, sigma, 1.0, t, s, K), rel=1e-7)


def test_cgi_matches_monte_carlo():
    rng = np.random.default_rng(123)
    n = 400_000
    r = rng.uniform(0.0, 1.0, n)
    x = rng.normal(0.0, np.sqrt(r))
    v = 0.09 + (1.0 - r)
    g = np.exp(-x * x / (2 * v)) / np.sqrt(2 * np.pi * v)
    est = np.mean(g * g)
    se = np.std(g * g) / math.sqrt(n)
    assert abs(cash_gamma_integral(PAYOFF, 0.0, 0.0, P)[0] - est) < 4 * se


def test_zero_gamma_claims_have_no_correction():
    for pay in (Forward(), Constant(2.0)):
        rep = expansion_price(pay, 0.0, 0.3, 0.2, 1.0, P)
        assert rep.gamma_term == 0.0
        assert rep.cash_gamma_integral == 0.0
    fwd = expansion_price(Forward(), 0.0, 0.3, 0.2, 1.0, P)
    # forward: only displacement -sqrt(2 eta gamma sigma^2) (pi + Q)
    assert fwd.total == pytest.approx(0.3 - math.sqrt(2 * P.eta) * 1.2, rel=1e-14)


def test_eta_zero_is_frictionless():
    rep = expansion_price(PAYOFF, 0.0, 0.0, 0.5, 1.0, P, eta=0.0)
    assert rep.total == rep.base
    assert rep.scaled_terms() == (0.0, 0.0)


def test_frictionless_hedge_kills_displacement():
    rep = expansion_price(PAYOFF, 0.2, 0.1, 0.0, 1.0, P)
    at_hedge = expansion_price(PAYOFF, 0.2, 0.1, -rep.delta, 1.0, P)
    assert at_hedge.displacement_term == 0.0
    lo = expansion_price(PAYOFF, 0.2, 0.1, 0.0, 1.0, P, leading_order=True)
    assert lo.displacement_term == 0.0 and lo.gamma_term == rep.gamma_term


def test_formula_against_hand_evaluation():
    rep = expansion_price(PAYOFF, 0.0, 0.0, 0.2, -1.0, P)
    scale = math.sqrt(2 * P.eta * P.gamma * P.sigma**2)
    assert rep.delta == pytest.approx(0.5, abs=1e-15)
    assert rep.gamma_term == pytest.approx(scale * CGI_DEFAULT, rel=1e-8)
    assert rep.displacement_term == pytest.approx(-scale * (0.2 - 0.5) * 0.5, rel=1e-12)


def test_sqrt_eta_scaling_is_exact():
    a = expansion_price(PAYOFF, 0.0, 0.0, 0.3, 1.0, P, eta=0.01)
    b = expansion_price(PAYOFF, 0.0, 0.0, 0.3, 1.0, P, eta=0.04)
    assert b.gamma_term == 2 * a.gamma_term
    assert b.displacement_term == 2 * a.displacement_term
    assert a.scaled_terms() == pytest.approx(b.scaled_terms(), rel=1e-15)
    k1 = impact_coefficient(PAYOFF, 0.0, 0.0, P, eta=0.0025)
    assert impact_coefficient(PAYOFF, 0.0, 0.0, P, eta=0.01) == 2 * k1
    assert k1 >= 0.0


def test_invalid_inputs():
    with pytest.raises(ModelError):
        expansion_price(PAYOFF, 0.0, 0.0, 0.0, 1.0, MarketParams(penalty=1.0, penalty_mode=RAW))
    with pytest.raises(ModelError):
        expansion_price(Call(0.0), 0.0, 0.0, 0.0, 1.0, P)
    with pytest.raises(ModelError):
        expansion_price(PAYOFF, 0.0, 0.0, 0.0, 1.0, P, eta=-1.0)
    assert cash_gamma_integral(PAYOFF, 1.0, 0.0, P) == (0.0, 0.0)


def test_convergence_study_single_eta():
    rows = convergence_study(Scenario(), [0.01], Grid(16, -5.0, 5.0, 33, -2.5, 2.5, 25))
    assert len(rows) == 1
    r = rows[0]
    assert math.isnan(r.pstar_mc) and math.isnan(r.rho_ratio)
    assert r.rho == pytest.approx(abs(r.pstar_fd - r.expansion) / 0.1)
    table = format_table(rows).splitlines()
    assert table[0] == ",".join(CONVERGENCE_COLUMNS)
    assert len(table[1].split(",")) == len(CONVERGENCE_COLUMNS)


def test_convergence_study_validates_ladder():
    with pytest.raises(ModelError):
        convergence_study(Scenario(), [])
    with pytest.raises(ModelError):
        convergence_study(Scenario(), [0.01, 0.04])
