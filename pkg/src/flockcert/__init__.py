"""Delayed Cucker-Smale flocking: simulation and trajectory certificates."""
from .model import (
    DomainError,
    ScenarioError,
    ScenarioSpec,
    eval_delay,
    eval_history,
    eval_influence,
    load_scenario,
    scenario_from_dict,
    validate_scenario,
)
from .integrator import BlowUpError, PhaseState, Trajectory, integrate, query, rhs, step
from .diagnostics import (
    diameter_position,
    diameter_velocity,
    directional_diff,
    initial_extremes,
    phi,
    psi_floor,
    window_diameter,
)
from .certificates import (
    CertificateReport,
    Tolerances,
    check_certificates,
    decay_rate,
    envelope_D,
    lyapunov,
    solve_dstar,
    sup_influence,
)
from .presets import PRESETS, preset

__version__ = "0.1.0"
