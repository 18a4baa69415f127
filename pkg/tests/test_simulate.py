import math

import numpy as np
import pytest

from sdedecay import models as mdl
from sdedecay._jit import set_workers
from sdedecay.errors import SimulationDiverged
from sdedecay.simulate import (TimeGrid, couple_paths, run_states, simulate_paths, simulate_two_leg,
                               simulate_with_tangent, steps_between)
from sdedecay.stats import ks_2samp_stat, ks_threshold, mean_stderr

from _models import brownian, cubic_no_jacobian


def ou(**kw):
    return mdl.get_model("ou", **kw).coefficients


def test_constant_dynamics():
    ens = simulate_paths(brownian(0.0), TimeGrid(0, 1, 0.01), 3.0, 50, 1, record_at=[0.0, 0.5, 1.0])
    assert np.all(ens.states == 3.0)
    assert ens.states.shape == (50, 3, 1)
    assert not ens.states.flags.writeable


def test_deterministic_ou_matches_ode():
    ens = simulate_paths(ou(sigma=0.0), TimeGrid(0, 1, 1e-4), 1.0, 4, 1)
    assert np.all(np.abs(ens.terminal() - math.exp(-1)) <= 1e-3)


def test_ou_variance():
    x = simulate_paths(ou(), TimeGrid(0, 1, 1e-3), 0.0, 100_000, 2).terminal()[:, 0]
    v, se = mean_stderr((x - x.mean()) ** 2)
    assert abs(v - (1 - math.exp(-2)) / 2) <= 3 * se


def test_tangent_of_ou():
    ens, tan = simulate_with_tangent(ou(), TimeGrid(0, 1, 1e-3), 0.3, 1000, 3, record_at=[0.0, 1.0], order=2)
    assert np.all(tan.first[:, 0] == 1.0) and np.all(tan.second[:, 0] == 0.0)
    assert np.all(np.abs(tan.first[:, 1, 0, 0] - math.exp(-1)) <= 5e-3)
    assert np.all(tan.second == 0.0)  # linear drift, constant diffusion
    same = simulate_paths(ou(), TimeGrid(0, 1, 1e-3), 0.3, 1000, 3, record_at=[0.0, 1.0])
    assert np.array_equal(ens.states, same.states)


def test_coupling_identities():
    g = TimeGrid(0, 2, 1e-3)
    a, b = couple_paths(ou(), g, 0.5, 0.5, 500, 4)
    assert np.array_equal(a.states, b.states)
    a, b = couple_paths(ou(), g, 0.0, 1.0, 500, 4, record_at=[1.0, 2.0])
    gap = np.abs(b.states - a.states)[:, :, 0]
    assert np.allclose(gap, np.exp(-np.array([1.0, 2.0])), rtol=5e-3)
    sine = mdl.get_model("sine").coefficients
    a, b = couple_paths(sine, TimeGrid(0, 1, 1e-3), 0.0, 2.0, 10_000, 5)
    assert np.mean((a.terminal() - b.terminal()) ** 2) <= math.exp(-2) * 4 * 1.05


def test_coupled_marginals_match_plain_simulation():
    sine = mdl.get_model("sine").coefficients
    g = TimeGrid(0, 1, 1e-3)
    a, b = couple_paths(sine, g, 0.0, 2.0, 10_000, 6)
    pa = simulate_paths(sine, g, 0.0, 10_000, 7).terminal()
    pb = simulate_paths(sine, g, 2.0, 10_000, 7).terminal()
    assert ks_2samp_stat(a.terminal(), pa) < ks_threshold(10_000)
    assert ks_2samp_stat(b.terminal(), pb) < ks_threshold(10_000)


def test_two_leg_restart():
    det = ou(sigma=0.0)
    direct = simulate_paths(det, TimeGrid(0.5, 2.0, 1e-3), 1.0, 10, 8).terminal()
    assert np.allclose(simulate_two_leg(det, 0.5, 1.5, 1.0, 10, 8).terminal(), direct, rtol=1e-12)
    assert np.all(simulate_two_leg(ou(), 1.0, 0.0, 0.7, 20, 8).terminal() == 0.7)
    a = simulate_two_leg(ou(), 0.0, 2.0, 1.0, 100_000, 9).terminal()
    b = simulate_paths(ou(), TimeGrid(0, 2, 1e-3), 1.0, 100_000, 9).terminal()
    assert ks_2samp_stat(a, b) < ks_threshold(100_000)
    with pytest.raises(ValueError):
        simulate_two_leg(ou(), 1.5, 1.0, 0.0, 10, 1)


def test_worker_count_does_not_change_results():
    sw = mdl.get_model("switching").coefficients
    g = TimeGrid(0, 2, 1e-3)
    out = []
    for w in (1, 4, 16):
        set_workers(w)
        out.append(simulate_with_tangent(sw, g, 0.4, 3000, 10, record_at=[1.0, 2.0], order=2))
    set_workers(8)
    for ens, tan in out[1:]:
        assert np.array_equal(ens.states, out[0][0].states)
        assert np.array_equal(tan.first, out[0][1].first)
        assert np.array_equal(tan.second, out[0][1].second)


def test_weak_error_shrinks_with_dt():
    bias = []
    for dt in (1e-2, 5e-3):
        x = simulate_paths(ou(sigma=0.0), TimeGrid(0, 1, dt), 1.0, 2, 11).terminal()[0, 0]
        bias.append(abs(x - math.exp(-1)))
    assert bias[1] < bias[0] <= 1e-2
    x = simulate_paths(ou(), TimeGrid(0, 1, 5e-3), 1.0, 100_000, 11).terminal()[:, 0]
    m, se = mean_stderr(x)
    assert abs(m - math.exp(-1)) <= 1.0 * 5e-3 + 3 * se


@pytest.mark.parametrize("name", mdl.model_names() + ["cubic"])
def test_tangent_matches_common_noise_difference(name):
    model = cubic_no_jacobian() if name == "cubic" else mdl.get_model(name).coefficients
    if model.dim != 1:
        pytest.skip("checked in d = 1")
    x, h, n = 0.4, 1e-4, 100
    g = TimeGrid(0, 2, 1e-3)
    _, tan = simulate_with_tangent(model, g, x, n, 12)
    st = run_states(model, np.array([[[x - h], [x + h]]]), n, 12, t_base=0.0, step_offset=0, dt=g.dt,
                    n_steps=g.n_steps, rec_steps=[g.n_steps])
    fd = (st[:, 0, 1, 0] - st[:, 0, 0, 0]) / (2 * h)
    J = tan.first[:, 0, 0, 0]
    assert np.all(np.abs(J - fd) <= 1e-3 * (1 + np.abs(J)))


def test_random_initial_conditions_are_reproducible():
    g = TimeGrid(0, 0.1, 0.01)
    draw = lambda n, rng: rng.normal(size=(n, 1))  # noqa: E731
    a = simulate_paths(ou(), g, draw, 100, 13, record_at=[0.0])
    b = simulate_paths(ou(), g, draw, 100, 13, record_at=[0.0])
    assert np.array_equal(a.states, b.states) and a.states.std() > 0.5
    pts = np.linspace(-1, 1, 100).reshape(-1, 1)
    c = simulate_paths(ou(), g, pts, 100, 13, record_at=[0.0])
    assert np.array_equal(c.states[:, 0], pts)


def test_grid_validation():
    g = TimeGrid(0.5, 2.0, 0.25)
    assert g.n_steps == 6 and g.time(2) == 1.0 and g.index_of(1.5) == 4
    with pytest.raises(ValueError):
        g.index_of(1.1)
    with pytest.raises(ValueError):
        TimeGrid(0, 1, 0.3)
    with pytest.raises(ValueError):
        TimeGrid(1, 1, 0.1)
    assert steps_between(0.0, 1.0, 1e-3) == 1000
    with pytest.raises(ValueError):
        simulate_paths(ou(), g, [0.0, 1.0], 10, 1)


def test_divergence_is_reported():
    model = cubic_no_jacobian(sigma=0.0)
    with pytest.raises(SimulationDiverged) as err:
        simulate_paths(model, TimeGrid(0, 10, 0.5), 50.0, 3, 1)
    assert err.value.path == 0
