from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad, solve_ivp

from impacthedge.core_model import (
    RAW,
    Call,
    Constant,
    Forward,
    LinearCombination,
    MarketParams,
    ModelError,
    Put,
    RiccatiCurve,
    SmoothedCall,
    delta_field,
    frictionless_delta,
    frictionless_gamma,
    frictionless_price,
    payoff_eval,
    q0_value,
    riccati_dm,
    riccati_integral,
    riccati_m,
    riccati_m_branch,
)

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Independent oracles, computed once and frozen:
#   backward DOP853 integration (rtol 1e-13) of m' = m^2 - kappa^2
M0_ETA_005 = 9.999999962702928
M_HALF_ETA_01 = 7.060650682469472
#   adaptive quadrature of the payoff against the Gaussian density
PUT_K1_S05_T025_SIG2 = 0.9695811931604754
SMOOTH_K1_D05_S03_T04_SIG15 = 0.22998419950134982


# -- parameters ----------------------------------------------------------------


@pytest.mark.parametrize("field", ["sigma", "eta", "gamma", "horizon"])
def test_params_reject_nonpositive(field):
    with pytest.raises(ModelError):
        MarketParams(**{field: 0.0})


def test_params_reject_negative_penalty():
    with pytest.raises(ModelError):
        MarketParams(penalty=-1.0)


def test_rescaled_penalty_must_keep_phi_real():
    # lbar sqrt(eta) < sqrt(2 gamma sigma^2) = sqrt(2)
    with pytest.raises(ModelError):
        MarketParams(eta=1.0, penalty=2.0)
    MarketParams(eta=1.0, penalty=1.4)


def test_derived_constants():
    p = MarketParams(sigma=2.0, eta=0.02, gamma=0.5, penalty=3.0)
    assert p.l == pytest.approx(0.06)
    assert p.kappa == pytest.approx(math.sqrt(4 * 0.5 / 0.04))
    assert p.impact_scale == pytest.approx(math.sqrt(2 * 0.02 * 0.5 * 4))
    r = p.critical_penalty
    assert p.phi == pytest.approx(0.5 * math.log((0.06 + r) / (r - 0.06)))
    raw = MarketParams(penalty=2.0, penalty_mode=RAW)
    assert raw.l == 2.0 and raw.lbar is None


# -- payoffs -----------------------------------------------------------------


def test_payoff_eval_examples():
    assert payoff_eval(Call(100.0), 100.0) == 0.0
    assert payoff_eval(Constant(5.0), -42.0) == 5.0
    assert payoff_eval(SmoothedCall(0.0, 1.0), 0.0) == pytest.approx(INV_SQRT_2PI, abs=1e-15)
    assert payoff_eval(Put(1.0), np.array([0.0, 2.0])).tolist() == [1.0, 0.0]


def test_lipschitz_metadata():
    assert math.isinf(Call(0.0).lipschitz_Hprime)
    assert math.isinf(Put(0.0).lipschitz_Hprime)
    assert Forward().lipschitz_Hprime == 0.0
    assert SmoothedCall(0.0, 0.5).lipschitz_Hprime == pytest.approx(1.0 / (0.5 * math.sqrt(2 * math.pi)))
    combo = LinearCombination(((1.0, SmoothedCall(0.0, 0.5)), (-2.0, Forward())))
    assert combo.lipschitz_H == pytest.approx(3.0)
    assert combo.has_bounded_gamma
    assert not LinearCombination(((1.0, Call(0.0)),)).has_bounded_gamma


def test_smoothed_call_requires_positive_stdev():
    with pytest.raises(ModelError):
        SmoothedCall(0.0, 0.0)


# -- Bachelier analytics ------------------------------------------------------------


def test_price_examples():
    p = MarketParams()
    assert frictionless_price(Forward(), 0.3, 1.7, p) == 1.7
    assert frictionless_price(Call(0.0), 0.0, 0.0, p) == pytest.approx(INV_SQRT_2PI, abs=1e-15)
    assert frictionless_price(Call(1.0), 1.0, 2.5, p) == 1.5
    assert frictionless_price(Call(1.0), 1.0, 0.5, p) == 0.0


def test_price_against_quadrature_oracles():
    assert frictionless_price(Put(1.0), 0.25, 0.5, MarketParams(sigma=2.0)) == pytest.approx(
        PUT_K1_S05_T025_SIG2, abs=1e-13)
    assert frictionless_price(SmoothedCall(1.0, 0.5), 0.4, 0.3, MarketParams(sigma=1.5)) == pytest.approx(
        SMOOTH_K1_D05_S03_T04_SIG15, abs=1e-13)


def test_price_rejects_time_outside_horizon():
    with pytest.raises(ModelError):
        frictionless_price(Call(0.0), 1.5, 0.0, MarketParams())
    with pytest.raises(ModelError):
        frictionless_price(Call(0.0), -0.1, 0.0, MarketParams())


def test_greek_examples():
    p = MarketParams()
    assert frictionless_delta(Forward(), 0.2, 3.0, p) == 1.0
    assert frictionless_gamma(Forward(), 0.2, 3.0, p) == 0.0
    assert frictionless_delta(Call(2.0), 0.4, 2.0, p) == pytest.approx(0.5, abs=1e-15)
    # Richardson-extrapolated central difference of the delta at h=1e-4
    h = 1e-4
    d = lambda hh: (frictionless_delta(Call(0.0), 0.0, hh, p) - frictionless_delta(Call(0.0), 0.0, -hh, p)) / (2 * hh)  # noqa: E731
    fd = (4 * d(h / 2) - d(h)) / 3
    assert frictionless_gamma(Call(0.0), 0.0, 0.0, p) == pytest.approx(fd, abs=1e-9)
    assert fd == pytest.approx(INV_SQRT_2PI, abs=1e-9)


def test_gamma_of_kinked_payoff_at_maturity_raises():
    with pytest.raises(ModelError):
        frictionless_gamma(Call(0.0), 1.0, 0.0, MarketParams())
    with pytest.raises(ModelError):
        frictionless_gamma(Put(0.0), 1.0, 0.0, MarketParams())


@pytest.mark.parametrize("payoff", [Call(0.3), Put(-0.2), SmoothedCall(0.1, 0.4), Forward(), Constant(2.0),
                                    LinearCombination(((0.5, Call(0.0)), (1.5, Put(1.0))))])
def test_delta_matches_finite_differences(payoff):
    p = MarketParams(sigma=1.3)
    h = 1e-5
    for t in (0.0, 0.3, 0.9):
        s = np.linspace(-2, 2, 9)
        fd = (np.asarray(frictionless_price(payoff, t, s + h, p)) - np.asarray(frictionless_price(payoff, t, s - h, p))) / (2 * h)
        assert np.max(np.abs(np.asarray(frictionless_delta(payoff, t, s, p)) - fd)) < 1e-6


def test_delta_field_shape():
    p = MarketParams()
    f = delta_field(SmoothedCall(0.0, 0.3), [0.0, 0.5, 1.0], np.linspace(-1, 1, 5), p)
    assert f.shape == (3, 5)
    assert np.all((f >= 0) & (f <= 1))


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 0.99), st.floats(-2, 2))
def test_put_call_parity(s, k, t, _):
    p = MarketParams(sigma=0.7)
    c = frictionless_price(Call(k), t, s, p)
    q = frictionless_price(Put(k), t, s, p)
    assert c - q == pytest.approx(s - k, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 1))
def test_price_is_lipschitz_in_s(s1, s2, t):
    p = MarketParams()
    for pay in (Call(0.2), Put(0.0), SmoothedCall(0.0, 0.3)):
        d = abs(frictionless_price(pay, t, s1, p) - frictionless_price(pay, t, s2, p))
        assert d <= pay.lipschitz_H * abs(s1 - s2) + 1e-12


# -- Riccati -------------------------------------------------------------------------


def test_riccati_terminal_value_exact():
    for p in (MarketParams(), MarketParams(eta=0.003, penalty=0.7), MarketParams(penalty=5.0, penalty_mode=RAW)):
        assert riccati_m(p.horizon, p) == p.l / (2.0 * p.eta)


def test_riccati_zero_penalty_is_tanh():
    p = MarketParams(penalty=0.0)
    t = np.linspace(0, 1, 11)
    assert np.allclose(riccati_m(t, p), p.kappa * np.tanh(p.kappa * (1 - t)), rtol=1e-13, atol=1e-13)


def test_riccati_against_ode_oracle():
    assert riccati_m(0.0, MarketParams(eta=0.005)) == pytest.approx(M0_ETA_005, abs=1e-8)
    assert riccati_m(0.5, MarketParams()) == pytest.approx(M_HALF_ETA_01, abs=1e-8)


@pytest.mark.parametrize("params", [MarketParams(), MarketParams(penalty=3.0, penalty_mode=RAW),
                                    MarketParams(eta=0.3, penalty=0.2)])
def test_riccati_matches_dense_ode(params):
    k2 = params.kappa**2
    t_eval = np.linspace(params.horizon, 0.0, 201)
    sol = solve_ivp(lambda t, m: m * m - k2, [params.horizon, 0.0], [params.l / (2 * params.eta)],
                    t_eval=t_eval, rtol=1e-12, atol=1e-13, method="DOP853")
    assert np.max(np.abs(sol.y[0] - riccati_m(t_eval, params))) < 1e-8


def test_branch_forms_agree():
    for p in (MarketParams(), MarketParams(penalty=3.0, penalty_mode=RAW)):
        t = np.linspace(0, 1, 101)
        assert np.allclose(riccati_m(t, p), riccati_m_branch(t, p), rtol=1e-12)


def test_riccati_bounds_between_terminal_and_kappa():
    for p in (MarketParams(), MarketParams(penalty=3.0, penalty_mode=RAW)):
        t = np.linspace(0, 1, 1001)[:-1]
        m = np.asarray(riccati_m(t, p))
        lo, hi = sorted((p.l / (2 * p.eta), p.kappa))
        assert np.all((m > lo) & (m < hi))


def test_riccati_derivative_and_integral():
    p = MarketParams(eta=0.05)
    t = np.linspace(0.01, 0.99, 7)
    h = 1e-5
    fd = (np.asarray(riccati_m(t + h, p)) - np.asarray(riccati_m(t - h, p))) / (2 * h)
    assert np.allclose(riccati_dm(t, p), fd, rtol=1e-7)
    for a, b in ((0.0, 1.0), (0.2, 0.7)):
        ref, _ = quad(lambda x: float(riccati_m(x, p)), a, b, epsabs=1e-13)
        assert riccati_integral(a, b, p) == pytest.approx(ref, abs=1e-11)


def test_riccati_curve_residual():
    c = RiccatiCurve.build(MarketParams(), 10_001)
    assert np.max(np.abs(c.residual(c.times))) < 1e-8
    assert c.kappa == MarketParams().kappa


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 3), st.floats(1e-4, 0.5), st.floats(0.1, 3), st.floats(0, 1.0), st.floats(0, 1))
def test_riccati_residual_property(sigma, eta, gamma, lbar_frac, t):
    # keep the rescaled penalty strictly inside its admissible range
    lbar = lbar_frac * 0.99 * math.sqrt(2 * gamma * sigma**2) / math.sqrt(eta)
    p = MarketParams(sigma, eta, gamma, lbar)
    m = riccati_m(t, p)
    assert abs(-riccati_dm(t, p) + m * m - p.kappa**2) <= 1e-8 * max(1.0, p.kappa**2)


# -- Q = 0 value ---------------------------------------------------------------------


def test_q0_value_examples():
    p = MarketParams()
    assert q0_value(1.0, 1.3, p) == pytest.approx(p.l * p.gamma * 1.3**2 / 2, rel=1e-15)
    assert q0_value(0.4, 0.0, p) == 0.0
    assert q0_value(0.4, 2.0, p) == pytest.approx(4 * p.gamma * p.eta * riccati_m(0.4, p))


def test_q0_value_solves_the_reduced_equation():
    # a(t) pi^2 solves the Q = 0 equation iff a' - a^2/(eta gamma) + sigma^2 gamma^2 / 2 = 0
    p = MarketParams(sigma=1.2, gamma=0.8, eta=0.02)
    t = np.linspace(0.0, 0.99, 50)
    h = 1e-6
    a = lambda x: np.asarray(q0_value(x, 1.0, p))  # noqa: E731
    da = (a(t + h) - a(t - np.where(t > 0, h, 0))) / (h + np.where(t > 0, h, 0))
    resid = da - a(t) ** 2 / (p.eta * p.gamma) + p.sigma**2 * p.gamma**2 / 2
    assert np.max(np.abs(resid)) < 1e-5
