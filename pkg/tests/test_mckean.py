import math

import numpy as np
import pytest

from sdedecay import mckean as mk
from sdedecay import models as mdl
from sdedecay import sensitivity as sens
from sdedecay._jit import evaluator
from sdedecay.simulate import TimeGrid, simulate_paths
from sdedecay.stats import mean_stderr


@evaluator("mv_vector")
def tanh_attraction(x, cloud, p, out):
    # beta(x, mu) = -x + p[0] * mean over mu of tanh(y - x)
    n = cloud.shape[0]
    for r in range(x.shape[0]):
        s = 0.0
        for j in range(n):
            s += math.tanh(cloud[j, 0] - x[r, 0])
        out[r, 0] = -x[r, 0] + p[0] * s / n


@evaluator("mv_matrix")
def unit_noise(x, cloud, p, out):
    out[:] = 1.0


GENERAL = mk.MVCoefficientSet("tanh_attraction", 1, tanh_attraction, unit_noise, [0.5], additive_noise=True)


def flow_of(mv, x=1.0, N=2000, horizon=1.0, dt=1e-2, seed=1, **kw):
    return mk.simulate_particles(mv, x, N, TimeGrid(0, horizon, dt), seed, **kw)


def test_no_interaction_cloud_matches_ou():
    flow = flow_of(mk.mean_field_linear(2.0, 0.0), x=0.0, N=20_000)
    c = flow.cloud(1.0).samples[:, 0]
    v, se = mean_stderr((c - c.mean()) ** 2)
    assert abs(v - (1 - math.exp(-4)) / 4) <= 4 * se


def test_fixed_point_without_noise():
    flow = flow_of(mk.mean_field_linear(2.0, 0.5, sigma=0.0), x=0.0, N=50)
    assert np.all(flow.clouds == 0.0)


def test_cloud_mean_follows_the_mean_ode():
    flow = flow_of(mk.mean_field_linear(2.0, 0.5), N=10_000, horizon=1.0, dt=1e-3, record_every=100)
    for t in (0.5, 1.0):
        m, se = mean_stderr(flow.cloud(t).samples[:, 0])
        assert abs(m - math.exp(-1.5 * t)) <= 4 * se + 1e-3


def test_frozen_drift():
    mv = mk.mean_field_linear(2.0, 0.5)
    flow = flow_of(mv)
    frozen = mk.freeze_law_flow(mv, flow)
    means = flow.means()[:, 0]
    for k in (0, 37, 100):
        t = flow.times[k]
        for x in (-1.0, 0.3):
            assert mdl.eval_drift(frozen, t, [x])[0] == pytest.approx(-2 * x + 0.5 * means[k], abs=1e-14)
    assert np.all(np.abs(means - np.exp(-1.5 * flow.times)) <= 0.05)
    with pytest.raises(ValueError):
        mdl.eval_drift(frozen, 1.5, [0.0])
    with pytest.raises(ValueError):
        flow.cloud(2.0)


def test_no_interaction_freezes_to_the_autonomous_drift():
    mv = mk.mean_field_linear(2.0, 0.0, sigma=1.3)
    frozen = mk.freeze_law_flow(mv, flow_of(mv))
    ou = mdl.get_model("ou", M1=2.0, sigma=1.3).coefficients
    X = np.linspace(-3, 3, 13).reshape(-1, 1)
    for t in (0.0, 0.25, 1.0):
        assert np.array_equal(mdl.drift_rows(frozen, t, X), mdl.drift_rows(ou, t, X))
        assert np.array_equal(mdl.diffusion_rows(frozen, t, X), mdl.diffusion_rows(ou, t, X))
    g = TimeGrid(0, 1, 1e-2)
    assert np.array_equal(simulate_paths(frozen, g, 0.5, 100, 3).states, simulate_paths(ou, g, 0.5, 100, 3).states)


def test_frozen_jacobian_is_cloud_independent():
    mv = mk.mean_field_linear(2.0, 0.5)
    f1 = mk.freeze_law_flow(mv, flow_of(mv, x=1.0, seed=1))
    f2 = mk.freeze_law_flow(mv, flow_of(mv, x=-3.0, seed=2))
    for t in (0.0, 0.5, 1.0):
        assert mdl.eval_drift_jacobian(f1, t, [0.2])[0, 0] == mdl.eval_drift_jacobian(f2, t, [0.2])[0, 0] == -2.0


def test_flow_is_reproducible():
    mv = mk.mean_field_linear(2.0, 0.5)
    assert np.array_equal(flow_of(mv, seed=5).clouds, flow_of(mv, seed=5).clouds)
    assert not np.array_equal(flow_of(mv, seed=5).clouds, flow_of(mv, seed=6).clouds)


def test_general_structure_freezes_and_simulates():
    flow = flow_of(GENERAL, x=1.0, N=500)
    frozen = mk.freeze_law_flow(GENERAL, flow)
    cloud = flow.clouds[flow.nearest_index(0.5)]
    want = -0.3 + 0.5 * np.mean(np.tanh(cloud[:, 0] - 0.3))
    assert mdl.eval_drift(frozen, 0.5, [0.3])[0] == pytest.approx(want, rel=1e-12)
    ens = simulate_paths(frozen, TimeGrid(0, 1, 1e-2), 1.0, 1000, 4)
    assert np.all(np.isfinite(ens.states))


def test_tag_is_verified():
    with pytest.raises(ValueError):
        mk.MVCoefficientSet("liar", 1, tanh_attraction, unit_noise, [0.5],
                            structure={"kind": "mean_field_linear", "a": 2.0, "c": 0.5})


def test_consistency_with_and_without_interaction():
    res = mk.mv_consistency(mk.mean_field_linear(2.0, 0.5), 1.0, 1.0, 5000, 20_000, 7, 1e-2)
    assert res.passed and not res.low_N
    assert abs(res.frozen_mean[0] - math.exp(-1.5)) <= 4 * res.frozen_mean_se[0] + 1e-2
    free = mk.mv_consistency(mk.mean_field_linear(2.0, 0.0), 1.0, 1.0, 5000, 20_000, 7, 1e-2)
    assert free.passed and free.ks < free.ks_threshold


def test_small_particle_count():
    res = mk.mv_consistency(mk.mean_field_linear(2.0, 0.5), 1.0, 1.0, 2, 2000, 8, 1e-2)
    assert res.low_N and res.allowance == 0.5
    assert res.passed
    with pytest.raises(ValueError):
        flow_of(mk.mean_field_linear(), N=1)


def test_derivative_decay_reduces_to_ou():
    mv = mk.mean_field_linear(2.0, 0.0)
    env = sens.DecayEnvelope.poly(rate=2.0)
    times = [1.5, 2.0, 3.0]
    rep = mk.mv_derivative_decay(mv, [0.0, 1.0], times, sens.build_test_function("identity"), 1, 200,
                                 2000, 9, 1e-2, env)
    assert rep.fitted_slope == pytest.approx(-2.0, abs=rep.slope_halfwidth + 0.05)
    ou = mdl.get_model("ou", M1=2.0).coefficients
    ref = sens.envelope_check(ou, sens.build_test_function("identity"), env, [0.0, 1.0], times, n_paths=2000,
                              seed=9, dt=1e-2)
    assert np.allclose(rep.values, ref.values, rtol=1e-12)


def test_derivative_decay_of_constant_and_tanh():
    mv = mk.mean_field_linear(2.0, 0.5)
    env = sens.DecayEnvelope.poly(rate=1.5)
    rep = mk.mv_derivative_decay(mv, [0.5], [1.5, 2.0, 3.0], sens.build_test_function("constant"), 1, 200,
                                 500, 10, 1e-2, env)
    assert np.all(rep.values == 0) and rep.verdict
    rep = mk.mv_derivative_decay(mv, [0.0, 1.0], [1.5, 2.0, 3.0, 4.0], sens.build_test_function("tanh"), 1, 500,
                                 5000, 11, 1e-2, env)
    assert rep.fitted_slope <= -1.5 + rep.slope_halfwidth
    assert rep.meta["frozen_monotonicity_M1"] == pytest.approx([2.0, 2.0], abs=1e-9)


def test_law_flow_export(tmp_path):
    flow = flow_of(mk.mean_field_linear(), N=20, record_every=50)
    paths = flow.to_csv(tmp_path)
    assert len(paths) >= flow.times.size
    assert (tmp_path / "cloud_0.csv").read_text().startswith("x0\n")
