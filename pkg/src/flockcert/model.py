"""Model ingredients: influence laws, delay laws, initial histories, scenarios.

Every law is a small frozen dataclass that evaluates vectorised over numpy
arrays. Scenarios are built from plain nested dictionaries (the YAML scenario
document) with :func:`scenario_from_dict` and validated with
:func:`validate_scenario`.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np
import yaml
from scipy.interpolate import CubicSpline


class DomainError(ValueError):
    """An argument lies outside the domain of the evaluated law."""


class ScenarioError(ValueError):
    """A scenario violates one or more invariants.

    ``violations`` holds ``(field_path, message)`` pairs.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(f"{path}: {msg}" for path, msg in self.violations)
        super().__init__(lines or "invalid scenario")


def _nonneg(r, what="r"):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise DomainError(f"{what} must be >= 0")
    return r


# ---------------------------------------------------------------------------
# influence laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CuckerSmaleInfluence:
    """psi(r) = K0 * (1 + r^2)^(-beta)."""

    K0: float = 1.0
    beta: float = 0.5
    family = "cucker-smale"

    def __call__(self, r):
        return self.raw(_nonneg(r))

    def raw(self, r):
        return self.K0 * (1.0 + r * r) ** (-self.beta)

    @property
    def sup(self) -> float:
        return float(self.K0)

    @property
    def diverges(self) -> bool:
        # tail behaves like r^(-2 beta)
        return self.beta <= 0.5

    def running_min(self, r):
        return self(r)

    def kinks(self):
        return ()

    def violations(self, path):
        out = []
        if not self.K0 > 0:
            out.append((f"{path}.K0", f"K0 must be > 0, got {self.K0}"))
        if not self.beta >= 0:
            out.append((f"{path}.beta", f"beta must be >= 0, got {self.beta}"))
        return out

    def to_dict(self):
        return {"family": self.family, "K0": self.K0, "beta": self.beta}


@dataclass(frozen=True)
class ConstantInfluence:
    c: float = 1.0
    family = "constant"

    def __call__(self, r):
        return np.full(np.shape(_nonneg(r)), self.c)

    def raw(self, r):
        # scalar; broadcasts against the distance matrix
        return self.c

    @property
    def sup(self) -> float:
        return float(self.c)

    diverges = True

    def running_min(self, r):
        return self(r)

    def kinks(self):
        return ()

    def violations(self, path):
        if not self.c > 0:
            return [(f"{path}.c", f"psi must be positive, got c={self.c}")]
        return []

    def to_dict(self):
        return {"family": self.family, "c": self.c}


@dataclass(frozen=True)
class OscillatingInfluence:
    """psi(r) = base + amp * sin(freq * r); non-monotone when amp > 0."""

    base: float = 0.5
    amp: float = 0.25
    freq: float = 1.0
    family = "oscillating"

    def __call__(self, r):
        return self.raw(_nonneg(r))

    def raw(self, r):
        return self.base + self.amp * np.sin(self.freq * r)

    @property
    def sup(self) -> float:
        return float(self.base + self.amp)

    diverges = True

    def running_min(self, r):
        # sin rises to 1 then falls; its minimum over [0, x] is min(0, sin x)
        # until x reaches 3*pi/2, after which the global minimum -1 is reached.
        r = _nonneg(r)
        x = self.freq * r
        low = np.where(x >= 1.5 * math.pi, -1.0, np.minimum(0.0, np.sin(x)))
        return self.base + self.amp * low

    def kinks(self):
        return (math.pi / self.freq, 1.5 * math.pi / self.freq)

    def violations(self, path):
        out = []
        if not self.amp >= 0:
            out.append((f"{path}.amp", f"amp must be >= 0, got {self.amp}"))
        if not self.base > self.amp:
            out.append((f"{path}.base", "base must exceed amp so psi stays positive"))
        if not self.freq > 0:
            out.append((f"{path}.freq", f"freq must be > 0, got {self.freq}"))
        return out

    def to_dict(self):
        return {"family": self.family, "base": self.base, "amp": self.amp, "freq": self.freq}


@dataclass(frozen=True, eq=False)
class TableInfluence:
    """Piecewise-linear psi through ``(r, psi)`` knots, held constant past the last knot.

    Divergence of the integral of psi cannot be decided from samples, so the
    table carries an explicit ``diverges`` attestation.
    """

    r: tuple
    psi: tuple
    diverges: bool = False
    family = "table"

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        p = np.asarray(self.psi, dtype=float)
        object.__setattr__(self, "_r", r)
        object.__setattr__(self, "_p", p)
        object.__setattr__(self, "_cummin", np.minimum.accumulate(p) if p.size else p)

    def __call__(self, r):
        return self.raw(_nonneg(r))

    def raw(self, r):
        return np.interp(r, self._r, self._p)

    @property
    def sup(self) -> float:
        # exact for linear interpolation
        return float(np.max(self._p))

    def running_min(self, r):
        r = _nonneg(r)
        k = np.clip(np.searchsorted(self._r, r, side="right") - 1, 0, len(self._r) - 1)
        return np.minimum(self._cummin[k], self(r))

    def kinks(self):
        return tuple(float(x) for x in self._r[1:])

    def violations(self, path):
        out = []
        r, p = self._r, self._p
        if r.ndim != 1 or r.size < 2 or r.shape != p.shape:
            return [(f"{path}.r", "need at least two (r, psi) knots of matching length")]
        if r[0] != 0.0:
            out.append((f"{path}.r", "first knot must be r=0"))
        if np.any(np.diff(r) <= 0):
            out.append((f"{path}.r", "knots must be strictly increasing"))
        bad = np.flatnonzero(~(p > 0))
        if bad.size:
            out.append((f"{path}.psi[{bad[0]}]", f"psi must be positive, got {p[bad[0]]}"))
        return out

    def to_dict(self):
        return {"family": self.family, "r": list(map(float, self.r)),
                "psi": list(map(float, self.psi)), "diverges": bool(self.diverges)}


InfluenceSpec = Union[CuckerSmaleInfluence, ConstantInfluence, OscillatingInfluence, TableInfluence]


def influence_from_dict(doc: dict) -> InfluenceSpec:
    doc = dict(doc)
    family = doc.pop("family", None)
    try:
        if family == "cucker-smale":
            return CuckerSmaleInfluence(**{k: float(v) for k, v in doc.items()})
        if family == "constant":
            return ConstantInfluence(**{k: float(v) for k, v in doc.items()})
        if family == "oscillating":
            return OscillatingInfluence(**{k: float(v) for k, v in doc.items()})
        if family == "table":
            return TableInfluence(r=tuple(map(float, doc["r"])), psi=tuple(map(float, doc["psi"])),
                                  diverges=bool(doc.get("diverges", False)))
    except (TypeError, KeyError) as exc:
        raise ScenarioError([("influence", f"bad parameters for {family!r}: {exc}")]) from None
    raise ScenarioError([("influence.family", f"unknown influence family {family!r}")])


def eval_influence(spec: InfluenceSpec, r):
    """Evaluate psi at ``r >= 0`` (scalar or array)."""
    out = spec(r)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# delay laws
# ---------------------------------------------------------------------------


def _nonneg_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise DomainError("delay is defined for t >= 0 only")
    return t


@dataclass(frozen=True)
class ConstantDelay:
    tau0: float
    tau_bar: float
    family = "constant"

    def __call__(self, t):
        t = _nonneg_time(t)
        return np.full_like(t, self.tau0, dtype=float)

    def scalar(self, t: float) -> float:
        return self.tau0

    def violations(self, path):
        if not 0.0 <= self.tau0 <= self.tau_bar:
            return [(f"{path}.tau0", f"need 0 <= tau0 <= tau_bar, got {self.tau0}")]
        return []

    def to_dict(self):
        return {"family": self.family, "tau0": self.tau0}


@dataclass(frozen=True)
class SinusoidalDelay:
    """tau(t) = tau_bar * (1 + sin(omega t + phase)) / 2."""

    tau_bar: float
    omega: float = 1.0
    phase: float = 0.0
    family = "sinusoidal"

    def __call__(self, t):
        t = _nonneg_time(t)
        return 0.5 * self.tau_bar * (1.0 + np.sin(self.omega * t + self.phase))

    def scalar(self, t: float) -> float:
        return 0.5 * self.tau_bar * (1.0 + math.sin(self.omega * t + self.phase))

    def violations(self, path):
        if not (math.isfinite(self.omega) and math.isfinite(self.phase)):
            return [(path, "omega and phase must be finite")]
        return []

    def to_dict(self):
        return {"family": self.family, "omega": self.omega, "phase": self.phase}


@dataclass(frozen=True, eq=False)
class PiecewiseLinearDelay:
    """Linear interpolation through ``(t, tau)`` knots, constant past the last one."""

    t: tuple
    tau: tuple
    tau_bar: float
    family = "piecewise-linear"

    def __post_init__(self):
        object.__setattr__(self, "_t", np.asarray(self.t, dtype=float))
        object.__setattr__(self, "_v", np.asarray(self.tau, dtype=float))

    def __call__(self, t):
        t = _nonneg_time(t)
        return np.interp(t, self._t, self._v)

    def scalar(self, t: float) -> float:
        return float(np.interp(t, self._t, self._v))

    def violations(self, path):
        t, v = self._t, self._v
        if t.ndim != 1 or t.size < 1 or t.shape != v.shape:
            return [(f"{path}.t", "need matching (t, tau) knot lists")]
        out = []
        if t[0] != 0.0:
            out.append((f"{path}.t", "first knot must be t=0"))
        if np.any(np.diff(t) <= 0):
            out.append((f"{path}.t", "knots must be strictly increasing"))
        bad = np.flatnonzero((v < 0) | (v > self.tau_bar))
        if bad.size:
            out.append((f"{path}.tau[{bad[0]}]", f"need 0 <= tau <= tau_bar, got {v[bad[0]]}"))
        return out

    def to_dict(self):
        return {"family": self.family, "t": list(map(float, self.t)),
                "tau": list(map(float, self.tau))}


DelaySpec = Union[ConstantDelay, SinusoidalDelay, PiecewiseLinearDelay]


def delay_from_dict(doc: dict, tau_bar: float) -> DelaySpec:
    doc = dict(doc)
    family = doc.pop("family", None)
    try:
        if family == "constant":
            return ConstantDelay(tau0=float(doc["tau0"]), tau_bar=tau_bar)
        if family == "sinusoidal":
            return SinusoidalDelay(tau_bar=tau_bar, omega=float(doc.get("omega", 1.0)),
                                   phase=float(doc.get("phase", 0.0)))
        if family == "piecewise-linear":
            return PiecewiseLinearDelay(t=tuple(map(float, doc["t"])),
                                        tau=tuple(map(float, doc["tau"])), tau_bar=tau_bar)
    except (TypeError, KeyError) as exc:
        raise ScenarioError([("delay", f"bad parameters for {family!r}: {exc}")]) from None
    raise ScenarioError([("delay.family", f"unknown delay family {family!r}")])


def eval_delay(spec: DelaySpec, t):
    out = spec(t)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# initial history
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConstantLaw:
    value: tuple
    family = "constant"

    def __post_init__(self):
        object.__setattr__(self, "_a", np.asarray(self.value, dtype=float))

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return np.broadcast_to(self._a, s.shape + self._a.shape).copy()

    @property
    def dim(self):
        return self._a.size

    def to_dict(self):
        return {"family": self.family, "value": list(map(float, self.value))}


@dataclass(frozen=True, eq=False)
class LinearLaw:
    """h(s) = at_zero + s * slope."""

    at_zero: tuple
    slope: tuple
    family = "linear"

    def __post_init__(self):
        object.__setattr__(self, "_a", np.asarray(self.at_zero, dtype=float))
        object.__setattr__(self, "_b", np.asarray(self.slope, dtype=float))

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return self._a + s[..., None] * self._b

    @property
    def dim(self):
        return self._a.size

    def to_dict(self):
        return {"family": self.family, "at_zero": list(map(float, self.at_zero)),
                "slope": list(map(float, self.slope))}


@dataclass(frozen=True, eq=False)
class SampledLaw:
    """Cubic spline through samples ``values[k]`` at times ``times[k]``."""

    times: tuple
    values: tuple
    family = "sampled"

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        object.__setattr__(self, "_t", t)
        object.__setattr__(self, "_v", v)
        spline = None
        if t.ndim == 1 and t.size >= 2 and np.all(np.diff(t) > 0) and v.shape[0] == t.size:
            spline = CubicSpline(t, v, axis=0, bc_type="natural")
        object.__setattr__(self, "_spline", spline)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        out = self._spline(s)
        # knots are reproduced exactly
        hit = np.searchsorted(self._t, s)
        hit = np.clip(hit, 0, self._t.size - 1)
        exact = self._t[hit] == s
        if np.any(exact):
            out = np.array(out, copy=True)
            out[exact] = self._v[hit[exact]]
        return out

    @property
    def dim(self):
        return self._v.shape[1]

    def to_dict(self):
        return {"family": self.family, "times": list(map(float, self.times)),
                "values": np.asarray(self.values, dtype=float).tolist()}


HistoryLaw = Union[ConstantLaw, LinearLaw, SampledLaw]


def law_from_dict(doc: dict, path: str) -> HistoryLaw:
    family = doc.get("family")
    try:
        if family == "constant":
            return ConstantLaw(tuple(np.atleast_1d(np.asarray(doc["value"], dtype=float))))
        if family == "linear":
            return LinearLaw(tuple(np.atleast_1d(np.asarray(doc["at_zero"], dtype=float))),
                             tuple(np.atleast_1d(np.asarray(doc["slope"], dtype=float))))
        if family == "sampled":
            return SampledLaw(tuple(map(float, doc["times"])),
                              tuple(map(tuple, np.asarray(doc["values"], dtype=float).reshape(len(doc["times"]), -1))))
    except (TypeError, KeyError, ValueError) as exc:
        raise ScenarioError([(path, f"bad history law: {exc}")]) from None
    raise ScenarioError([(f"{path}.family", f"unknown history family {family!r}")])


@dataclass(frozen=True, eq=False)
class HistorySpec:
    """Per-agent position and velocity laws on [-tau_bar, 0]."""

    position: tuple
    velocity: tuple

    @property
    def n_agents(self) -> int:
        return len(self.position)

    def evaluate(self, s):
        """Return ``(X, V)`` with shape ``s.shape + (N, d)``."""
        s = np.asarray(s, dtype=float)
        X = np.stack([law(s) for law in self.position], axis=-2)
        V = np.stack([law(s) for law in self.velocity], axis=-2)
        return X, V

    def to_dict(self):
        return {"position": [law.to_dict() for law in self.position],
                "velocity": [law.to_dict() for law in self.velocity]}

    @classmethod
    def from_arrays(cls, X0, V0):
        """Constant history from ``(N, d)`` arrays."""
        return cls(tuple(ConstantLaw(tuple(row)) for row in np.atleast_2d(X0)),
                   tuple(ConstantLaw(tuple(row)) for row in np.atleast_2d(V0)))


def eval_history(spec: HistorySpec, i: int, s: float, tau_bar: float):
    """Position and velocity of agent ``i`` at history time ``s``."""
    if not 0 <= i < spec.n_agents:
        raise IndexError(f"agent index {i} out of range for N={spec.n_agents}")
    if not -tau_bar <= s <= 0:
        raise DomainError(f"history time {s} outside [-{tau_bar}, 0]")
    return spec.position[i](s), spec.velocity[i](s)


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    n_agents: int
    dim: int
    tau_bar: float
    delay: DelaySpec
    influence: InfluenceSpec
    history: HistorySpec
    horizon: float
    dt: float
    stride: int = 1
    name: str = ""
    source: dict = field(default_factory=dict, repr=False)

    def fingerprint(self) -> str:
        doc = self.to_dict()
        doc.pop("name", None)
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return "sha256:" + hashlib.sha256(blob.encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_agents": self.n_agents,
            "dim": self.dim,
            "tau_bar": self.tau_bar,
            "horizon": self.horizon,
            "dt": self.dt,
            "stride": self.stride,
            "influence": self.influence.to_dict(),
            "delay": self.delay.to_dict(),
            "history": self.history.to_dict(),
        }


def scenario_from_dict(doc: dict) -> ScenarioSpec:
    """Build a scenario from its document form.

    ``horizon_windows`` may replace ``horizon``; the horizon is then that many
    multiples of ``tau_bar``.
    """
    doc = copy.deepcopy(doc)
    problems = []
    for key in ("n_agents", "dim", "tau_bar", "dt", "influence", "delay", "history"):
        if key not in doc:
            problems.append((key, "missing"))
    if "horizon" not in doc and "horizon_windows" not in doc:
        problems.append(("horizon", "missing (give horizon or horizon_windows)"))
    if problems:
        raise ScenarioError(problems)
    try:
        tau_bar = float(doc["tau_bar"])
        horizon = (float(doc["horizon"]) if "horizon" in doc
                   else float(doc["horizon_windows"]) * tau_bar)
        hist = doc["history"]
        history = HistorySpec(
            tuple(law_from_dict(d, f"history.position[{i}]") for i, d in enumerate(hist["position"])),
            tuple(law_from_dict(d, f"history.velocity[{i}]") for i, d in enumerate(hist["velocity"])),
        )
        return ScenarioSpec(
            n_agents=int(doc["n_agents"]),
            dim=int(doc["dim"]),
            tau_bar=tau_bar,
            delay=delay_from_dict(doc["delay"], tau_bar),
            influence=influence_from_dict(doc["influence"]),
            history=history,
            horizon=horizon,
            dt=float(doc["dt"]),
            stride=int(doc.get("stride", 1)),
            name=str(doc.get("name", "")),
            source=doc,
        )
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError([("scenario", str(exc))]) from None


def load_scenario(path) -> ScenarioSpec:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scenario file not found: {path}")
    with path.open() as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ScenarioError([("scenario", f"{path} is not a key-value document")])
    return scenario_from_dict(doc)


def dump_scenario(spec: ScenarioSpec, path) -> None:
    with Path(path).open("w") as fh:
        yaml.safe_dump(spec.to_dict(), fh, sort_keys=False)


def scenario_violations(spec: ScenarioSpec, r_max: float = 1e3, n_samples: int = 10_001):
    """List every violated invariant as ``(field_path, message)``."""
    out = []
    if spec.n_agents < 2:
        out.append(("n_agents", "N >= 2 required"))
    if spec.dim < 1:
        out.append(("dim", "d >= 1 required"))
    if not spec.tau_bar > 0:
        out.append(("tau_bar", f"tau_bar must be > 0, got {spec.tau_bar}"))
    if not spec.horizon > 0:
        out.append(("horizon", f"T must be > 0, got {spec.horizon}"))
    if not 0 < spec.dt <= spec.tau_bar:
        out.append(("dt", f"need 0 < dt <= tau_bar, got dt={spec.dt}"))
    if spec.stride < 1:
        out.append(("stride", "stride must be >= 1"))

    out += spec.influence.violations("influence")
    if not any(p.startswith("influence") for p, _ in out):
        r = np.linspace(0.0, r_max, n_samples)
        if isinstance(spec.influence, TableInfluence):
            r = np.union1d(r, spec.influence._r)
        vals = spec.influence(r)
        bad = np.flatnonzero(~(vals > 0) | ~np.isfinite(vals))
        if bad.size:
            out.append(("influence", f"psi must be positive, psi({r[bad[0]]}) = {vals[bad[0]]}"))
        elif np.max(vals) > spec.influence.sup * (1 + 1e-12):
            out.append(("influence", "sampled psi exceeds its supremum"))

    out += spec.delay.violations("delay")
    if spec.tau_bar > 0 and spec.horizon > 0 and not any(p.startswith("delay") for p, _ in out):
        t = np.linspace(0.0, spec.horizon, n_samples)
        tau = spec.delay(t)
        bad = np.flatnonzero((tau < 0) | (tau > spec.tau_bar * (1 + 1e-12)) | ~np.isfinite(tau))
        if bad.size:
            out.append(("delay", f"need 0 <= tau(t) <= tau_bar, tau({t[bad[0]]}) = {tau[bad[0]]}"))

    hist = spec.history
    for comp in ("position", "velocity"):
        laws = getattr(hist, comp)
        if len(laws) != spec.n_agents:
            out.append((f"history.{comp}", f"expected {spec.n_agents} laws, got {len(laws)}"))
        for i, law in enumerate(laws):
            path = f"history.{comp}[{i}]"
            if law.dim != spec.dim:
                out.append((path, f"dimension {law.dim} != d={spec.dim}"))
                continue
            if isinstance(law, SampledLaw):
                t = law._t
                if law._spline is None:
                    out.append((path, "sampled law needs >= 2 strictly increasing times"))
                    continue
                if spec.tau_bar > 0 and (t[0] > -spec.tau_bar or t[-1] < 0):
                    out.append((path, f"samples must cover [-{spec.tau_bar}, 0]"))
                    continue
            if spec.tau_bar > 0:
                vals = law(np.linspace(-spec.tau_bar, 0.0, 257))
                if not np.all(np.isfinite(vals)):
                    out.append((path, "history must be finite on [-tau_bar, 0]"))
    return out


def validate_scenario(spec: ScenarioSpec, **kwargs) -> ScenarioSpec:
    """Return ``spec`` unchanged if it satisfies every invariant, else raise ScenarioError."""
    problems = scenario_violations(spec, **kwargs)
    if problems:
        raise ScenarioError(problems)
    return spec
