import math
from types import SimpleNamespace as F

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdedecay import models as mdl
from sdedecay.errors import CapabilityError

from _models import brownian, cubic_no_jacobian

CATALOG = mdl.model_names()


@pytest.mark.parametrize("name,params,t,x,expected", [
    ("ou", {"M1": 1.0}, 0.0, 2.0, -2.0),
    ("sine", {"M1": 1.0}, 0.0, 0.0, 0.0),
    ("switching", {}, 1.0, 0.0, 0.0),
])
def test_drift_examples(name, params, t, x, expected):
    model = mdl.get_model(name, **params).coefficients
    assert mdl.eval_drift(model, t, [x])[0] == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("name,params,t,x,expected", [
    ("ou", {"sigma": 1.0}, 0.3, 1.7, 1.0),
    ("sine", {"sigma": 0.0}, 2.0, -4.0, 0.0),
    ("ou", {"sigma": math.sqrt(2.0)}, 5.0, -3.0, math.sqrt(2.0)),
])
def test_diffusion_examples(name, params, t, x, expected):
    model = mdl.get_model(name, **params).coefficients
    assert mdl.eval_diffusion(model, t, [x])[0, 0] == expected


def test_generator_examples():
    ou = mdl.get_model("ou", M1=1.0, sigma=math.sqrt(2.0)).coefficients
    square = F(grad=lambda x: 2 * x, hess=lambda x: 2 * np.eye(1))
    assert mdl.apply_generator(ou, 0.0, [1.0], square) == pytest.approx(0.0, abs=1e-14)
    const = F(grad=lambda x: np.zeros(x.shape), hess=lambda x: np.zeros((x.size, x.size)))
    for name in CATALOG:
        m = mdl.get_model(name).coefficients
        x = np.full(m.dim, 0.7)
        assert mdl.apply_generator(m, 0.4, x, const) == 0.0
    sine = mdl.get_model("sine").coefficients
    ident = F(grad=lambda x: np.ones(1), hess=lambda x: np.zeros((1, 1)))
    assert mdl.apply_generator(sine, 0.0, [0.0], ident) == 0.0


def test_limiting_model():
    dec = mdl.get_model("decaying").coefficients
    lim = mdl.limiting_model(dec)
    for x in (-2.0, 0.5, 3.0):
        assert mdl.eval_drift(lim, 0.0, [x])[0] == -x
        # the limit is approached as t grows
        assert mdl.eval_drift(dec, 40.0, [x])[0] == pytest.approx(-x, rel=1e-15)
    ou = mdl.get_model("ou").coefficients
    assert mdl.limiting_model(ou) is ou
    with pytest.raises(CapabilityError):
        mdl.limiting_model(mdl.get_model("switching").coefficients)


@pytest.mark.parametrize("name", CATALOG)
def test_drift_jacobian_matches_finite_differences(name):
    model = mdl.get_model(name).coefficients
    rng = np.random.default_rng(7)
    for t, x in zip(rng.uniform(0, 5, 100), rng.uniform(-3, 3, (100, model.dim))):
        J = mdl.eval_drift_jacobian(model, t, x)
        fd = np.empty_like(J)
        for j in range(model.dim):
            h = 1e-5 * (1 + abs(x[j]))
            e = np.zeros(model.dim)
            e[j] = h
            fd[:, j] = (mdl.eval_drift(model, t, x + e) - mdl.eval_drift(model, t, x - e)) / (2 * h)
        assert np.all(np.abs(J - fd) <= 1e-4 * (1 + np.abs(J)))


def test_missing_jacobian_falls_back_to_finite_differences():
    m = cubic_no_jacobian()
    for x in (-1.5, 0.0, 2.0):
        assert mdl.eval_drift_jacobian(m, 0.0, [x])[0, 0] == pytest.approx(-1 - 3 * x * x, rel=1e-6, abs=1e-8)
        assert mdl.eval_drift_hessian(m, 0.0, [x]) == pytest.approx(-6 * x, rel=1e-4, abs=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(CATALOG), st.floats(0, 5), st.floats(-3, 3),
       st.floats(-2, 2), st.floats(-2, 2))
def test_generator_is_linear(name, t, x, a, b):
    model = mdl.get_model(name).coefficients
    x = np.full(model.dim, x)
    f = F(grad=lambda z: np.cos(z), hess=lambda z: np.diag(-np.sin(z)))
    g = F(grad=lambda z: 3 * z**2, hess=lambda z: np.diag(6 * z))
    comb = F(grad=lambda z: a * f.grad(z) + b * g.grad(z), hess=lambda z: a * f.hess(z) + b * g.hess(z))
    lhs = mdl.apply_generator(model, t, x, comb)
    rhs = a * mdl.apply_generator(model, t, x, f) + b * mdl.apply_generator(model, t, x, g)
    scale = abs(a * mdl.apply_generator(model, t, x, f)) + abs(b * mdl.apply_generator(model, t, x, g))
    assert abs(lhs - rhs) <= 1e-12 * max(scale, 1.0)


def test_switching_contraction_after_time_one():
    m = mdl.get_model("switching").coefficients
    for t in np.linspace(1, 5, 21):
        for x in np.linspace(-3, 3, 61):
            assert mdl.eval_drift_jacobian(m, t, [x])[0, 0] <= -0.7


def test_switching_is_total_for_extreme_states():
    m = mdl.get_model("switching").coefficients
    for x in (-50.0, 50.0):
        assert np.isfinite(mdl.eval_drift(m, 2.0, [x])[0])
        assert np.isfinite(mdl.eval_drift_jacobian(m, 2.0, [x])[0, 0])
    assert not np.isnan(mdl.eval_drift(m, 2.0, [1e6])[0])


def test_rows_match_pointwise_evaluation():
    m = mdl.get_model("sine").coefficients
    X = np.linspace(-2, 2, 7).reshape(-1, 1)
    rows = mdl.drift_rows(m, 0.3, X)
    assert np.array_equal(rows[:, 0], [mdl.eval_drift(m, 0.3, x)[0] for x in X])
    ts = np.linspace(0, 1, 7)
    rows_t = mdl.drift_rows(m, ts, X)
    assert np.array_equal(rows_t[:, 0], [mdl.eval_drift(m, t, x)[0] for t, x in zip(ts, X)])


def test_catalog_and_registration():
    assert {"ou", "sine", "switching"} <= set(CATALOG)
    mdl.register_model("brownian_test", brownian, defaults={"sigma": 1.0, "dim": 1},
                       claimed_M1=None, notes="test")
    try:
        assert "brownian_test" in [r["name"] for r in mdl.list_models()]
        assert mdl.get_model("brownian_test", sigma=2.0).coefficients.params[1] == 2.0
    finally:
        mdl.unregister_model("brownian_test")
    assert "brownian_test" not in mdl.model_names()


def test_entry_constants():
    sw = mdl.get_model("switching")
    assert sw.claimed_M1 == 0.7
    assert "1.4" in sw.assumptions["dissipativity_W_quadratic"]
    assert mdl.get_model("ou", M1=3.0).claimed_M1 == 3.0


@pytest.mark.parametrize("bad", [{"nope": 1}, {"M1": -1.0}, {"sigma": [1.0, 2.0]}])
def test_bad_parameters(bad):
    with pytest.raises(ValueError):
        mdl.get_model("ou", **bad)


def test_unknown_model():
    with pytest.raises(KeyError, match="unknown model"):
        mdl.get_model("nope")


def test_point_validation():
    m = mdl.get_model("ou").coefficients
    with pytest.raises(ValueError):
        mdl.eval_drift(m, -1.0, [0.0])
    with pytest.raises(ValueError):
        mdl.eval_drift(m, 0.0, [0.0, 1.0])
    with pytest.raises(TypeError):
        mdl.CoefficientSet("bad", 1, lambda t, x, p, o: None, m.diffusion)


def test_multidimensional_ou():
    m = mdl.get_model("ou", M1=2.0, sigma=[1.0, 3.0], dim=2).coefficients
    assert np.array_equal(mdl.eval_drift(m, 0.0, [1.0, -1.0]), [-2.0, 2.0])
    assert np.array_equal(mdl.eval_diffusion(m, 0.0, [0.0, 0.0]), np.diag([1.0, 3.0]))
    assert m.info["stationary"]["cov"] == [[0.25, 0.0], [0.0, 2.25]]
