import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flockcert.model import (
    ConstantDelay,
    ConstantInfluence,
    CuckerSmaleInfluence,
    DomainError,
    HistorySpec,
    LinearLaw,
    OscillatingInfluence,
    PiecewiseLinearDelay,
    SampledLaw,
    ScenarioError,
    SinusoidalDelay,
    TableInfluence,
    eval_delay,
    eval_history,
    eval_influence,
    load_scenario,
    scenario_from_dict,
    validate_scenario,
)
from flockcert.presets import PRESETS, preset, preset_document


# ---------------------------------------------------------------- influence


def test_cucker_smale_values():
    psi = CuckerSmaleInfluence(K0=1.0, beta=0.5)
    assert eval_influence(psi, 0.0) == 1.0
    assert eval_influence(psi, math.sqrt(3.0)) == pytest.approx(0.5, rel=1e-15)


def test_oscillating_at_zero():
    assert eval_influence(OscillatingInfluence(0.5, 0.25, 1.0), 0.0) == 0.5


def test_negative_distance_rejected():
    with pytest.raises(DomainError):
        eval_influence(ConstantInfluence(1.0), -1e-3)


def test_table_extends_last_value():
    psi = TableInfluence(r=(0.0, 1.0, 2.0), psi=(1.0, 0.5, 0.25), diverges=True)
    assert eval_influence(psi, 1.5) == pytest.approx(0.375)
    assert eval_influence(psi, 50.0) == 0.25


influences = st.one_of(
    st.builds(CuckerSmaleInfluence, st.floats(0.01, 10), st.floats(0, 3)),
    st.builds(ConstantInfluence, st.floats(0.01, 10)),
    st.builds(lambda b, f, fr: OscillatingInfluence(b, f * b, fr),
              st.floats(0.01, 5), st.floats(0, 0.99), st.floats(0.01, 10)),
)


@settings(max_examples=60, deadline=None)
@given(influences, st.integers(0, 2**32 - 1))
def test_influence_positive_and_bounded(psi, seed):
    r = np.random.default_rng(seed).uniform(0, 1e3, 10_000)
    vals = psi(r)
    assert np.all(vals > 0)
    assert np.all(vals <= psi.sup * (1 + 1e-15))


@settings(max_examples=60, deadline=None)
@given(influences, st.floats(0, 50))
def test_running_min_matches_dense_grid(psi, r):
    grid = np.linspace(0, r, 20_001)
    brute = np.min(psi(grid))
    # the exact running minimum can only be lower than a grid minimum
    assert psi.running_min(r) <= brute + 1e-15
    assert psi.running_min(r) >= brute - psi.sup * 1e-6


# ---------------------------------------------------------------- delay


def test_delay_examples():
    assert eval_delay(ConstantDelay(0.3, 1.0), 7.0) == 0.3
    sin = SinusoidalDelay(tau_bar=1.0, omega=math.pi / 2, phase=0.0)
    assert eval_delay(sin, 1.0) == pytest.approx(1.0, abs=1e-15)
    assert eval_delay(sin, 0.0) == 0.5


def test_delay_negative_time_rejected():
    with pytest.raises(DomainError):
        eval_delay(ConstantDelay(0.3, 1.0), -0.1)


delays = st.one_of(
    st.builds(lambda tb, f: ConstantDelay(f * tb, tb), st.floats(0.01, 5), st.floats(0, 1)),
    st.builds(SinusoidalDelay, st.floats(0.01, 5), st.floats(0, 10), st.floats(-4, 4)),
    st.builds(lambda tb, fr: PiecewiseLinearDelay((0.0, 1.0, 3.0), tuple(f * tb for f in fr), tb),
              st.floats(0.01, 5), st.tuples(*[st.floats(0, 1)] * 3)),
)


@settings(max_examples=60, deadline=None)
@given(delays, st.floats(0.1, 100), st.integers(0, 2**32 - 1))
def test_delay_within_bound(delay, T, seed):
    t = np.random.default_rng(seed).uniform(0, T, 10_000)
    tau = delay(t)
    assert np.all(tau >= 0)
    assert np.all(tau <= delay.tau_bar * (1 + 1e-15))


# ---------------------------------------------------------------- history


def test_history_examples():
    h = HistorySpec.from_arrays([[1.0, 2.0]], [[3.0, -1.0]])
    x, v = eval_history(h, 0, -0.3, 1.0)
    assert np.array_equal(x, [1.0, 2.0]) and np.array_equal(v, [3.0, -1.0])
    lin = LinearLaw((0.5,), (2.0,))
    assert lin(0.0)[0] == 0.5
    samp = SampledLaw((-1.0, -0.5, 0.0), ((1.0, 2.0), (0.3, 0.7), (0.0, 1.0)))
    assert np.array_equal(samp(-0.5), [0.3, 0.7])


def test_history_domain_errors():
    h = HistorySpec.from_arrays([[0.0]], [[1.0]])
    with pytest.raises(DomainError):
        eval_history(h, 0, 0.1, 1.0)
    with pytest.raises(IndexError):
        eval_history(h, 3, -0.1, 1.0)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_history_continuity(name):
    sc = preset(name)
    s = np.linspace(-sc.tau_bar, 0.0, 4001)
    X, V = sc.history.evaluate(s)
    h = s[1] - s[0]
    # adjacent samples of C^1 laws differ by O(h)
    for A in (X, V):
        jumps = np.max(np.abs(np.diff(A, axis=0)))
        assert jumps <= 10 * h


# ---------------------------------------------------------------- scenarios


def test_single_agent_rejected():
    doc = preset_document("flocked")
    doc["n_agents"] = 1
    with pytest.raises(ScenarioError) as err:
        validate_scenario(scenario_from_dict(doc))
    assert ("n_agents", "N >= 2 required") in err.value.violations


def test_zero_table_sample_rejected():
    doc = preset_document("table-psi")
    doc["influence"]["psi"] = [1.0, 0.0, 0.5, 0.3]
    with pytest.raises(ScenarioError) as err:
        validate_scenario(scenario_from_dict(doc))
    assert any("psi must be positive" in msg for _, msg in err.value.violations)


def test_step_longer_than_delay_window_rejected():
    doc = preset_document("flocked")
    doc["dt"] = 2.0
    with pytest.raises(ScenarioError) as err:
        validate_scenario(scenario_from_dict(doc))
    assert err.value.violations[0][0] == "dt"


def test_history_must_cover_window():
    doc = preset_document("default-delayed")
    doc["tau_bar"] = 5.0
    with pytest.raises(ScenarioError) as err:
        validate_scenario(scenario_from_dict(doc))
    assert any(p.startswith("history.position[3]") for p, _ in err.value.violations)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_validate_unchanged(name):
    sc = preset(name)
    assert validate_scenario(sc) is sc


def test_roundtrip_file(tmp_path):
    import yaml

    doc = preset_document("default-delayed")
    path = tmp_path / "s.yaml"
    path.write_text(yaml.safe_dump(doc))
    a, b = load_scenario(path), preset("default-delayed")
    assert a.fingerprint() == b.fingerprint()


def test_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere.yaml"):
        load_scenario(tmp_path / "nowhere.yaml")
