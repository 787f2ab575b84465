import math

import numpy as np
import pytest

from flockcert.diagnostics import _pairwise_max, initial_extremes
from flockcert.integrator import (
    HistoryAccessor,
    HistoryGapError,
    PhaseState,
    export_trajectory_csv,
    initial_trajectory,
    integrate,
    query,
    rhs,
    step,
)
from flockcert.model import DomainError, scenario_from_dict
from flockcert.presets import preset_document

from conftest import preset_trajectory


def scenario(name, **over):
    doc = preset_document(name)
    if "T" in over:
        doc.pop("horizon_windows")
        doc["horizon"] = over.pop("T")
    doc.update(over)
    return scenario_from_dict(doc)


def two_agent(tau0=0.0, tau_bar=1.0, v=(1.0, -1.0), dt=0.01, T=1.0):
    doc = preset_document("closed-form-undelayed")
    doc.pop("horizon_windows")
    doc.update(tau_bar=tau_bar, dt=dt, horizon=T)
    doc["delay"] = {"family": "constant", "tau0": tau0}
    doc["history"]["velocity"] = [{"family": "constant", "value": [v[0]]},
                                  {"family": "constant", "value": [v[1]]}]
    return scenario_from_dict(doc)


# ---------------------------------------------------------------- rhs


def test_rhs_equal_velocities_vanish():
    sc = scenario("flocked")
    X, V = sc.history.evaluate(0.0)
    hist = HistoryAccessor(sc, np.zeros(1), X[None], V[None], np.zeros_like(V[None]))
    dX, dV = rhs(1e-9, PhaseState(0.0, X, V), hist, sc)
    assert np.array_equal(dX, V)
    assert np.all(dV == 0)


def test_rhs_two_agents_hand_value():
    sc = two_agent(tau0=0.5, v=(1.0, 0.0))
    X, V = sc.history.evaluate(0.0)
    hist = HistoryAccessor(sc, np.zeros(1), X[None], V[None], np.zeros_like(V[None]))
    _, dV = rhs(0.0, PhaseState(0.0, X, V), hist, sc)
    assert dV[0, 0] == pytest.approx(-1.0, abs=1e-15)


def test_rhs_three_agents_constant_psi():
    doc = preset_document("flocked")
    doc["n_agents"] = 3
    doc["influence"] = {"family": "constant", "c": 0.7}
    doc["history"]["position"] = doc["history"]["position"][:3]
    doc["history"]["velocity"] = doc["history"]["velocity"][:3]
    sc = scenario_from_dict(doc)
    X, V = sc.history.evaluate(0.0)
    hist = HistoryAccessor(sc, np.zeros(1), X[None], V[None], np.zeros_like(V[None]))
    _, dV = rhs(0.2, PhaseState(0.2, X, V), hist, sc)
    assert np.all(dV == 0)


def test_rhs_acceleration_bound():
    traj = preset_trajectory("default-delayed")
    K = traj.scenario.influence.sup
    tau = traj.scenario.delay(traj.mesh)
    _, Vd = traj.states(traj.mesh - tau)
    speed = np.linalg.norm(traj.V[traj.n_hist:], axis=-1)
    bound = K * (speed + np.max(np.linalg.norm(Vd, axis=-1), axis=1)[:, None])
    assert np.all(np.linalg.norm(traj.accel, axis=-1) <= bound * (1 + 1e-12))


def test_history_gap_raises():
    sc = two_agent(tau0=0.5)
    X, V = sc.history.evaluate(0.0)
    hist = HistoryAccessor(sc, np.zeros(1), X[None], V[None], np.zeros_like(V[None]))
    with pytest.raises(HistoryGapError):
        hist(-2.0)
    with pytest.raises(HistoryGapError):
        hist(0.1)


# ---------------------------------------------------------------- step


def test_flocked_step_keeps_velocities():
    traj = initial_trajectory(scenario("flocked"))
    for dt in (0.01, 0.3, 1.0):
        nxt = step(traj, dt)
        assert np.max(np.abs(nxt.V[-1] - traj.V[-1])) <= 1e-15


def test_one_step_against_exponential():
    sc = two_agent(dt=0.1)
    nxt = step(initial_trajectory(sc), 0.1)
    w = nxt.V[-1, 0, 0] - nxt.V[-1, 1, 0]
    assert abs(w - 2 * math.exp(-0.2)) < 1e-5


def test_one_step_error_order():
    # local error of a fourth-order step scales like dt^5 (ratio ~32 per halving)
    errs = []
    for dt in (0.1, 0.05, 0.025):
        nxt = step(initial_trajectory(two_agent(dt=dt)), dt)
        errs.append(abs(nxt.V[-1, 0, 0] - nxt.V[-1, 1, 0] - 2 * math.exp(-2 * dt)))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(r >= 14 for r in ratios)
    assert all(abs(r - 32) < 3 for r in ratios)


def test_step_rejects_long_step():
    with pytest.raises(DomainError):
        step(initial_trajectory(two_agent()), 1.5)


def test_step_matches_integrate():
    sc = scenario("default-delayed", T=0.5)
    full = integrate(sc)
    traj = initial_trajectory(sc)
    for _ in range(50):
        traj = step(traj, sc.dt)
    assert np.max(np.abs(traj.V[-1] - full.V[-1])) < 1e-13


# ---------------------------------------------------------------- integrate


def test_flocked_translates():
    traj = preset_trajectory("flocked")
    assert np.all(_pairwise_max(traj.V) <= 1e-15)
    X0 = traj.X[traj.n_hist]
    t = traj.mesh[-1]
    assert np.max(np.abs(traj.X[-1] - (X0 + t * traj.V[traj.n_hist]))) < 1e-12


def test_closed_form_velocity_gap():
    traj = integrate(two_agent(dt=1e-3, T=5.0))
    dv = _pairwise_max(traj.V[traj.n_hist:])
    ref = 2 * np.exp(-2 * traj.mesh)
    assert np.max(np.abs(dv / ref - 1)) <= 1e-6


def _global_error(dt):
    traj = integrate(two_agent(dt=dt, T=2.0))
    w = traj.V[traj.n_hist:, 0, 0] - traj.V[traj.n_hist:, 1, 0]
    return np.max(np.abs(w - 2 * np.exp(-2 * traj.mesh)))


def test_global_order_slope():
    dts = np.array([1e-2, 5e-3, 2.5e-3])
    errs = np.array([_global_error(dt) for dt in dts])
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert slope >= 3.7


def test_constant_delay_self_convergence():
    sc = scenario("constant-delay-linear")
    coarse = integrate(sc)
    fine = integrate(scenario("constant-delay-linear", dt=sc.dt / 16))
    Xf, Vf = fine.states(coarse.mesh)
    err = max(np.max(np.abs(Xf - coarse.X[coarse.n_hist:])),
              np.max(np.abs(Vf - coarse.V[coarse.n_hist:])))
    assert err <= 1e-5


def test_short_delay_inside_step():
    # tau(t) < dt exercises the provisional interpolant for the current step
    ref = integrate(two_agent(tau0=0.004, dt=0.01 / 64, T=2.0))
    errs = []
    for passes in (0, 1):
        traj = integrate(two_agent(tau0=0.004, dt=0.01, T=2.0), corrector_passes=passes)
        _, Vf = ref.states(traj.mesh)
        errs.append(np.max(np.abs(Vf - traj.V[traj.n_hist:])[5:]))
    assert errs[1] < 1e-5
    assert errs[1] < errs[0]


def test_determinism():
    sc = scenario("default-delayed", T=2.0)
    a, b = integrate(sc), integrate(sc)
    assert a.X.tobytes() == b.X.tobytes()
    assert a.V.tobytes() == b.V.tobytes()


def test_speed_bound_all_presets(core_name):
    traj = preset_trajectory(core_name)
    R = initial_extremes(traj).R_V0
    assert np.max(np.linalg.norm(traj.V, axis=-1)) <= R * (1 + 1e-6) + 1e-9


def test_inner_product_bracket():
    # projections after T - tau_bar stay inside the window's projected range
    traj = preset_trajectory("default-delayed")
    tb, T = traj.tau_bar, traj.horizon
    rng = np.random.default_rng(7)
    D0 = initial_extremes(traj).D0
    for _ in range(100):
        v = rng.normal(size=2)
        v /= np.linalg.norm(v)
        T0 = rng.uniform(0, T - tb)
        _, Vw = traj.states(np.linspace(T0 - tb, T0, 401))
        pw = Vw @ v
        later = traj.times >= T0 - tb
        pl = traj.V[later] @ v
        assert pl.max() <= pw.max() + 1e-6 * D0
        assert pl.min() >= pw.min() - 1e-6 * D0


# ---------------------------------------------------------------- query


def test_query_mesh_points_exact():
    traj = preset_trajectory("default-delayed")
    k = traj.n_hist + 137
    st = query(traj, traj.times[k])
    assert st.X.tobytes() == traj.X[k].tobytes()
    assert st.V.tobytes() == traj.V[k].tobytes()


def test_query_history_delegates():
    traj = preset_trajectory("default-delayed")
    s = -traj.tau_bar / 2
    st = query(traj, s)
    X, V = traj.scenario.history.evaluate(s)
    assert np.array_equal(st.X, X) and np.array_equal(st.V, V)


def test_query_midpoint_accuracy():
    dt = 0.01
    traj = integrate(two_agent(dt=dt, T=1.0))
    t = 0.505
    st = query(traj, t)
    assert abs(st.V[0, 0] - st.V[1, 0] - 2 * math.exp(-2 * t)) < 10 * dt**4


def test_query_outside_range():
    traj = preset_trajectory("flocked")
    with pytest.raises(DomainError):
        query(traj, traj.horizon + 0.5)
    with pytest.raises(DomainError):
        query(traj, -2 * traj.tau_bar)


def test_trajectory_csv(tmp_path):
    traj = preset_trajectory("constant-delay-linear")
    path = tmp_path / "traj.csv"
    export_trajectory_csv(traj, path, stride=10)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x_0_0,x_1_0,v_0_0,v_1_0"
    last = [float(x) for x in lines[-1].split(",")]
    assert last[0] == traj.horizon
    assert last[3] == traj.V[-1, 0, 0]
    assert not list(tmp_path.glob(".*tmp"))
