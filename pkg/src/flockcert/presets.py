"""Named scenarios, each exercising one property of the certified bounds."""
from __future__ import annotations

import copy
import math

from .model import ScenarioSpec, scenario_from_dict


def _const(*v):
    return {"family": "constant", "value": list(v)}


def _linear(at_zero, slope):
    return {"family": "linear", "at_zero": list(at_zero), "slope": list(slope)}


PRESETS: dict[str, dict] = {
    # equal velocities: the flocked invariant manifold
    "flocked": {
        "n_agents": 4, "dim": 2, "tau_bar": 1.0, "dt": 0.01, "horizon_windows": 8,
        "influence": {"family": "cucker-smale", "K0": 1.0, "beta": 0.25},
        "delay": {"family": "constant", "tau0": 0.5},
        "history": {
            "position": [_const(0.0, 0.0), _const(1.0, 0.0), _const(0.0, 1.0), _const(-1.0, 0.5)],
            "velocity": [_const(0.3, 0.1) for _ in range(4)],
        },
    },
    # w' = -2w, so d_V(t) = 2 exp(-2t)
    "closed-form-undelayed": {
        "n_agents": 2, "dim": 1, "tau_bar": 1.0, "dt": 1e-3, "horizon_windows": 8,
        "influence": {"family": "constant", "c": 1.0},
        "delay": {"family": "constant", "tau0": 0.0},
        "history": {"position": [_const(0.0), _const(1.0)],
                    "velocity": [_const(1.0), _const(-1.0)]},
    },
    # linear delay equation w'(t) = -w(t) - w(t - 1/4)
    "constant-delay-linear": {
        "n_agents": 2, "dim": 1, "tau_bar": 0.25, "dt": 0.01, "horizon_windows": 8,
        "influence": {"family": "constant", "c": 1.0},
        "delay": {"family": "constant", "tau0": 0.25},
        "history": {"position": [_const(0.0), _const(1.0)],
                    "velocity": [_const(1.0), _const(-1.0)]},
    },
    "default-delayed": {
        "n_agents": 5, "dim": 2, "tau_bar": 1.0, "dt": 0.01, "horizon_windows": 8,
        "influence": {"family": "cucker-smale", "K0": 0.25, "beta": 0.25},
        "delay": {"family": "sinusoidal", "omega": math.pi / 2, "phase": 0.0},
        "history": {
            "position": [
                _const(0.0, 0.0),
                _linear([1.0, 0.5], [0.2, -0.1]),
                _const(-0.5, 1.0),
                {"family": "sampled", "times": [-4.0, -2.0, -1.0, 0.0],
                 "values": [[0.4, -1.2], [0.5, -1.0], [0.7, -0.9], [0.8, -0.8]]},
                _linear([-1.0, -0.5], [0.0, 0.1]),
            ],
            "velocity": [
                _const(0.6, 0.2),
                _linear([-0.4, 0.3], [0.05, -0.05]),
                _const(0.1, -0.5),
                {"family": "sampled", "times": [-4.0, -2.0, -1.0, 0.0],
                 "values": [[0.0, 0.4], [0.2, 0.5], [0.3, 0.45], [0.35, 0.3]]},
                _linear([-0.2, -0.3], [-0.02, 0.04]),
            ],
        },
    },
    # psi is not monotone; only its running minimum enters the bounds
    "non-monotone-psi": {
        "n_agents": 4, "dim": 2, "tau_bar": 1.0, "dt": 0.01, "horizon_windows": 8,
        "influence": {"family": "oscillating", "base": 0.5, "amp": 0.25, "freq": 1.0},
        "delay": {"family": "piecewise-linear", "t": [0.0, 2.0, 4.0, 8.0],
                  "tau": [0.2, 0.9, 0.4, 0.7]},
        "history": {
            "position": [_const(0.0, 0.0), _const(1.5, 0.0), _const(0.0, 1.5), _const(1.0, 1.0)],
            "velocity": [_const(0.5, 0.0), _const(-0.3, 0.2), _const(0.0, -0.4),
                         _linear([0.1, 0.1], [0.1, 0.0])],
        },
    },
    # long delay, no smallness restriction
    "large-delay": {
        "n_agents": 3, "dim": 2, "tau_bar": 4.0, "dt": 0.02, "horizon_windows": 8,
        "influence": {"family": "constant", "c": 0.25},
        "delay": {"family": "constant", "tau0": 3.0},
        "history": {
            "position": [_const(0.0, 0.0), _const(1.0, 0.0), _const(0.0, 1.0)],
            "velocity": [_const(0.4, 0.0), _linear([-0.2, 0.2], [0.02, 0.0]), _const(0.0, -0.3)],
        },
    },
    # tabulated psi with an explicit divergence attestation
    "table-psi": {
        "n_agents": 3, "dim": 1, "tau_bar": 0.5, "dt": 0.01, "horizon_windows": 8,
        "influence": {"family": "table", "r": [0.0, 1.0, 2.0, 4.0],
                      "psi": [1.0, 0.6, 0.7, 0.3], "diverges": True},
        "delay": {"family": "sinusoidal", "omega": 2.0, "phase": 1.0},
        "history": {"position": [_const(0.0), _const(0.5), _const(1.2)],
                    "velocity": [_const(0.5), _const(-0.5), _linear([0.1], [0.2])]},
    },
}

CORE_PRESETS = ("flocked", "closed-form-undelayed", "constant-delay-linear",
                "default-delayed", "non-monotone-psi", "large-delay")


def preset_document(name: str) -> dict:
    try:
        doc = copy.deepcopy(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    doc["name"] = name
    return doc


def preset(name: str) -> ScenarioSpec:
    return scenario_from_dict(preset_document(name))
