import math

import numpy as np
import pytest
from scipy.stats import norm

from sdedecay import lyapunov as lyap
from sdedecay import models as mdl
from sdedecay import sensitivity as sens
from sdedecay.errors import CapabilityError, CertificateRefused

from _models import brownian

OU = mdl.get_model("ou").coefficients
N = 100_000
# estimators of a noise-free quantity have stderr ~ 1e-17; differences below this are rounding
ROUNDING = 1e-9


def phi(name, **kw):
    return sens.build_test_function(name, **kw)


def test_value_estimator():
    assert sens.estimate_V(OU, phi("constant", value=5.0), 1.0, 0.3, 1000, 1) == (5.0, 0.0)
    assert sens.estimate_V(OU, phi("square"), 0.0, 3.0, 10, 1) == (9.0, 0.0)
    m, se = sens.estimate_V(OU, phi("identity"), 1.0, 2.0, N, 2)
    assert abs(m - 2 * math.exp(-1)) <= 3 * se


def test_constant_has_zero_derivative():
    v, se = sens.estimate_dV_pathwise(OU, phi("constant"), 1.0, 0.5, 1000, 3)
    assert np.all(v == 0) and np.all(se == 0)


@pytest.mark.parametrize("x", [-1.5, 0.0, 2.0])
def test_ou_first_derivative(x):
    v, se = sens.estimate_dV_pathwise(OU, phi("identity"), 1.0, x, N, 4)
    assert abs(v[0] - math.exp(-1)) <= max(3 * se[0], 5e-3)


def test_ou_square_first_and_second_order():
    v1, se1 = sens.estimate_dV_pathwise(OU, phi("square"), 1.0, 1.0, N, 5, order=1)
    v2, se2 = sens.estimate_dV_pathwise(OU, phi("square"), 1.0, 1.0, N, 5, order=2)
    assert abs(v1[0] - 2 * math.exp(-2)) <= max(3 * se1[0], 5e-3)
    assert abs(v2 - 2 * math.exp(-2)) <= max(3 * se2, 5e-3)


def test_fd_equals_pathwise_for_deterministic_linear_flow():
    det = mdl.get_model("ou", sigma=0.0).coefficients
    pw, _ = sens.estimate_dV_pathwise(det, phi("identity"), 1.0, 0.7, 10, 6)
    fd, _ = sens.estimate_dV_fd(det, phi("identity"), 1.0, 0.7, 10, 6)
    assert abs(pw[0] - fd) <= 1e-10


def test_fd_agrees_with_pathwise_on_ou():
    pw, pse = sens.estimate_dV_pathwise(OU, phi("identity"), 1.0, 0.5, N, 7)
    fd, fse = sens.estimate_dV_fd(OU, phi("identity"), 1.0, 0.5, N, 7)
    assert abs(pw[0] - fd) <= max(3 * math.hypot(pse[0], fse), ROUNDING)


def test_fd_of_nonsmooth_abs_matches_gaussian_closed_form():
    s, x = 1.0, 2.0
    sd = math.sqrt((1 - math.exp(-2 * s)) / 2)
    exact = math.exp(-s) * (2 * norm.cdf(x * math.exp(-s) / sd) - 1)
    v, se = sens.estimate_dV_fd(OU, phi("abs"), s, x, N, 8)
    assert math.isfinite(v) and abs(v - exact) <= 3 * se
    with pytest.raises(CapabilityError):
        sens.estimate_dV_pathwise(OU, phi("abs"), s, x, 10, 8)


def test_common_noise_reduces_variance():
    f = phi("tanh")
    _, common = sens.estimate_dV_fd(OU, f, 1.0, 0.5, 10_000, 9)
    _, indep = sens.estimate_dV_fd(OU, f, 1.0, 0.5, 10_000, 9, common_noise=False)
    assert common <= indep


@pytest.mark.parametrize("name,family,kw,ok", [
    ("identity", "S_m", {"m": 2, "W": lyap.quadratic()}, True),
    ("tanh", "S'_m", {"m": 2, "C": 1.0}, True),
    ("square", "S'_m", {"m": 2, "C": 1.0}, True),
    ("square", "S'_m", {"m": 2, "C": 0.1}, False),
    ("square", "S_m", {"m": 2, "W": lyap.quadratic()}, False),
])
def test_family_certificates(name, family, kw, ok):
    if ok:
        f = sens.build_test_function(name, family, **kw)
        assert f.family.kind == family
    else:
        with pytest.raises(CertificateRefused):
            sens.build_test_function(name, family, **kw)


def test_unknown_test_function():
    with pytest.raises(KeyError):
        phi("nope")
    assert phi("poly_local_lipschitz(3)").params == {"m": 3.0}


@pytest.mark.parametrize("values,slope,intercept", [
    (np.exp(-np.arange(1.0, 5.0)), -1.0, 0.0),
    (np.full(4, 0.3), 0.0, math.log(0.3)),
    (2 * np.exp(-0.5 * np.arange(1.0, 6.0)), -0.5, math.log(2.0)),
])
def test_fit_decay_rate_exact_lines(values, slope, intercept):
    t = np.arange(1.0, values.size + 1)
    got, icpt, _ = sens.fit_decay_rate(t, values, np.zeros_like(values))
    assert got == pytest.approx(slope, abs=1e-12)
    assert icpt == pytest.approx(intercept, abs=1e-12)


def test_envelope_check_on_ou():
    env = sens.DecayEnvelope.poly(C=1.0, p=2.0, m=2.0, rate=1.0)
    rep = sens.envelope_check(OU, phi("identity"), env, n_paths=20_000, seed=10)
    assert rep.verdict
    assert rep.fitted_slope == pytest.approx(-1.0, abs=rep.slope_halfwidth + 1e-3)
    assert rep.to_csv().splitlines()[0] == "s,r,stderr,censored"
    assert rep.to_dict()["verdict"] == "pass"


def test_envelope_check_of_constant_is_all_zero():
    env = sens.DecayEnvelope.poly(rate=1.0)
    rep = sens.envelope_check(OU, phi("constant"), env, n_paths=1000, seed=11)
    assert rep.verdict and np.all(rep.values == 0) and np.all(rep.censored)


def test_envelope_check_on_sine_with_tanh():
    sine = mdl.get_model("sine").coefficients
    env = sens.DecayEnvelope.poly(rate=1.0)
    rep = sens.envelope_check(sine, phi("tanh"), env, n_paths=20_000, seed=12, tolerance=0.1)
    assert rep.fitted_slope <= -1.0 + 0.1
    assert rep.verdict


def test_envelope_times_must_exceed_one():
    with pytest.raises(ValueError):
        sens.envelope_check(OU, phi("identity"), sens.DecayEnvelope.poly(), times=[0.5, 2.0])


def test_theoretical_rate_conventions():
    f = phi("identity", family="S_m", m=4, W=lyap.power(4))
    assert sens.theoretical_rate(2.0, f.family)[0] == 0.5
    assert sens.theoretical_rate(2.0, phi("identity").family)[0] == 2.0
    assert sens.theoretical_rate(2.0, phi("identity", family="unrestricted").family)[0] is None


@pytest.mark.parametrize("name", mdl.model_names())
@pytest.mark.parametrize("f", ["identity", "tanh", "square"])
def test_pathwise_and_fd_agree(name, f):
    model = mdl.get_model(name).coefficients
    xs = np.array([[0.0], [1.0]]) if model.dim == 1 else np.array([[0.0] * model.dim, [1.0] * model.dim])
    f = phi(f)
    pw, pse = sens.derivative_table(model, f, [1.0, 2.0], xs, 20_000, 13, 1e-2, method="pathwise", raw=True)
    fd, fse = sens.derivative_table(model, f, [1.0, 2.0], xs, 20_000, 13, 1e-2, method="fd", raw=True)
    assert np.all(np.abs(pw - fd) <= np.maximum(3 * np.hypot(pse, fse), ROUNDING))


TAMED_STIFF = pytest.mark.xfail(
    strict=True,
    reason="tamed Euler has a non-contractive step map at the switching model's exponential wall "
           "(slope about -q|x|/2 for any dt), so the scheme's derivative grows instead of decaying")


@pytest.mark.parametrize("name", [pytest.param(n, marks=TAMED_STIFF) if n == "switching" else n
                                  for n in mdl.model_names()])
@pytest.mark.parametrize("f", ["identity", "tanh"])
def test_decay_is_at_least_the_claimed_rate(name, f):
    entry = mdl.get_model(name)
    model = entry.coefficients
    times = [1.5, 2.0, 3.0, 4.0]
    xs = sens.default_x_grid(model.dim, n=5)
    vals, ses = sens.derivative_table(model, phi(f), times, xs, 20_000, 14, 1e-2)
    env = sens.DecayEnvelope.poly(rate=entry.claimed_M1)
    rep = sens.report_from_table(times, xs, vals, ses, env, 1, 0.1)
    assert rep.fitted_slope is not None, "fewer than three uncensored times"
    assert rep.fitted_slope <= -entry.claimed_M1 + 3 * rep.slope_halfwidth


def test_second_derivative_constant_in_x():
    xs = np.array([-1.0, 0.0, 1.0])
    v, se = sens.derivative_table(OU, phi("square"), [1.0, 2.0], xs, 20_000, 15, order=2, raw=True)
    for i, s in enumerate([1.0, 2.0]):
        assert np.ptp(v[i]) <= max(3 * np.max(se[i]), ROUNDING)
        assert np.all(np.abs(v[i] - 2 * math.exp(-2 * s)) <= np.maximum(3 * se[i], 5e-3))


def test_two_dimensional_fd_hessian():
    ou2 = mdl.get_model("ou", dim=2).coefficients
    f = phi("square")
    mag, _ = sens.derivative_table(ou2, f, [1.0], np.array([[0.5, -0.5]]), 1000, 16, order=2)
    # Hessian of |x|^2 is 2 e^{-2s} I, Frobenius norm sqrt(2) times that
    assert mag[0, 0] == pytest.approx(2 * math.sqrt(2) * math.exp(-2), rel=5e-3)
    with pytest.raises(CapabilityError):
        sens.estimate_dV_pathwise(ou2, f, 1.0, [0.0, 0.0], 10, 1, order=2)


def test_brownian_first_derivative_is_one():
    v, _ = sens.estimate_dV_pathwise(brownian(), phi("identity"), 2.0, 0.0, 100, 17)
    assert v[0] == 1.0
