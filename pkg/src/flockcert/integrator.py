"""Method-of-steps integration of the delayed Cucker-Smale system.

Classical RK4 on a fixed mesh; delayed states are read from a cubic Hermite
dense output built from mesh states and their derivatives. When a delayed
time falls inside the step being taken (tau(t) < dt), a provisional Hermite
for the current interval is used: a predictor pass extrapolates linearly
from the frontier, then the step is recomputed once with the interpolant
built from the predicted end state.
"""
from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import DomainError, ScenarioSpec, validate_scenario


class HistoryGapError(RuntimeError):
    """A delayed lookup fell before -tau_bar or past the integration frontier."""


class BlowUpError(RuntimeError):
    def __init__(self, message, last_good_time):
        super().__init__(message)
        self.last_good_time = last_good_time


@dataclass(frozen=True)
class PhaseState:
    t: float
    X: np.ndarray
    V: np.ndarray


def _hermite(theta, h, y0, d0, y1, d1):
    """Cubic Hermite on one interval; ``theta`` broadcasts against the leading axis."""
    t2 = theta * theta
    t3 = t2 * theta
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + theta
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    return h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1


def accelerations(X, V, Xd, Vd, influence):
    """dV/dt for every agent given current (X, V) and delayed (Xd, Vd) states."""
    n = X.shape[0]
    diff = X[:, None, :] - Xd[None, :, :]
    dist = np.sqrt(np.add.reduce(diff * diff, axis=-1))
    w = influence.raw(dist) * _offdiag(n)
    # difference form: exactly zero on the flocked manifold
    return np.matmul(w[:, None, :], Vd[None, :, :] - V[:, None, :])[:, 0, :]


_OFFDIAG = {}


def _offdiag(n):
    """(1 - I) / (n - 1), cached per agent count."""
    m = _OFFDIAG.get(n)
    if m is None:
        m = (1.0 - np.eye(n)) / (n - 1)
        m.setflags(write=False)
        _OFFDIAG[n] = m
    return m


def _mesh(scenario: ScenarioSpec):
    """Integration mesh on [0, T] with step dt, last step clipped."""
    dt, T = scenario.dt, scenario.horizon
    n = int(math.ceil(T / dt - 1e-9))
    t = np.arange(n + 1, dtype=float) * dt
    t[-1] = T
    return t


def _history_grid(scenario: ScenarioSpec):
    """Grid on [-tau_bar, 0) with spacing <= dt, aligned so 0 is the next point."""
    n = int(math.ceil(scenario.tau_bar / scenario.dt - 1e-9))
    return np.linspace(-scenario.tau_bar, 0.0, n + 1)[:-1]


class Trajectory:
    """Immutable solution on [-tau_bar, T] with dense output.

    ``times``, ``X`` and ``V`` cover the whole mesh (history grid then the
    integration mesh). ``accel`` holds dV/dt on the integration mesh only.
    """

    def __init__(self, scenario, hist_times, hist_X, hist_V, t, X, V, accel):
        self.scenario = scenario
        self.tau_bar = scenario.tau_bar
        self._t = t
        self._X = X
        self._V = V
        self._A = accel
        self.times = np.concatenate([hist_times, t])
        self.X = np.concatenate([hist_X, X])
        self.V = np.concatenate([hist_V, V])
        self.n_hist = hist_times.size
        for arr in (self.times, self.X, self.V, self._t, self._X, self._V, self._A):
            arr.setflags(write=False)
        self._cache = {}

    @property
    def horizon(self) -> float:
        return float(self._t[-1])

    @property
    def mesh(self):
        return self._t

    @property
    def accel(self):
        return self._A

    def states(self, ts):
        """Hermite-interpolated ``(X, V)`` at times ``ts``; shapes ``ts.shape + (N, d)``."""
        ts = np.asarray(ts, dtype=float)
        scalar = ts.ndim == 0
        ts = np.atleast_1d(ts)
        lo, hi = -self.tau_bar, self.horizon
        if np.any(ts < lo - 1e-12 * max(1.0, abs(lo))) or np.any(ts > hi + 1e-12 * max(1.0, hi)):
            raise DomainError(f"query outside [{lo}, {hi}]")
        ts = np.clip(ts, lo, hi)
        N, d = self._X.shape[1:]
        X = np.empty(ts.shape + (N, d))
        V = np.empty_like(X)
        past = ts <= 0.0
        if np.any(past):
            X[past], V[past] = self.scenario.history.evaluate(ts[past])
        fut = ~past
        if np.any(fut):
            tf = ts[fut]
            t = self._t
            k = np.clip(np.searchsorted(t, tf, side="right") - 1, 0, t.size - 2)
            h = t[k + 1] - t[k]
            theta = ((tf - t[k]) / h)[:, None, None]
            hh = h[:, None, None]
            Xf = _hermite(theta, hh, self._X[k], self._V[k], self._X[k + 1], self._V[k + 1])
            Vf = _hermite(theta, hh, self._V[k], self._A[k], self._V[k + 1], self._A[k + 1])
            on_mesh = t[k] == tf
            Xf[on_mesh] = self._X[k[on_mesh]]
            Vf[on_mesh] = self._V[k[on_mesh]]
            end = t[k + 1] == tf
            Xf[end] = self._X[k[end] + 1]
            Vf[end] = self._V[k[end] + 1]
            X[fut], V[fut] = Xf, Vf
        if scalar:
            return X[0], V[0]
        return X, V

    def query(self, t: float) -> PhaseState:
        X, V = self.states(t)
        return PhaseState(float(t), X, V)

    def replace_states(self, X, V, accel):
        """New trajectory on the same mesh with the integrated part replaced."""
        return Trajectory(self.scenario, self.times[: self.n_hist], self.X[: self.n_hist],
                          self.V[: self.n_hist], self._t.copy(), X, V, accel)


def query(traj: Trajectory, t: float) -> PhaseState:
    return traj.query(t)


class HistoryAccessor:
    """Read access to the solution behind the integration frontier.

    During a step the solver installs a provisional interpolant for the
    current interval; lookups past the frontier use it and raise a flag.
    """

    def __init__(self, scenario, t, X, V, A):
        self.scenario = scenario
        self._t, self._X, self._V, self._A = t, X, V, A
        self.k = 0
        self.provisional = None
        self.touched_future = False

    @property
    def frontier(self) -> float:
        return float(self._t[self.k])

    def __call__(self, s: float):
        tb = self.scenario.tau_bar
        if s < -tb * (1 + 1e-12):
            raise HistoryGapError(f"lookup at {s} before -tau_bar")
        if s <= 0.0:
            return self.scenario.history.evaluate(max(s, -tb))
        t, k = self._t, self.k
        if s <= t[k]:
            j = min(int(s / self.scenario.dt), k - 1)
            while t[j + 1] < s:
                j += 1
            while t[j] > s:
                j -= 1
            if t[j] == s:
                return self._X[j], self._V[j]
            if t[j + 1] == s:
                return self._X[j + 1], self._V[j + 1]
            h = t[j + 1] - t[j]
            theta = (s - t[j]) / h
            return (_hermite(theta, h, self._X[j], self._V[j], self._X[j + 1], self._V[j + 1]),
                    _hermite(theta, h, self._V[j], self._A[j], self._V[j + 1], self._A[j + 1]))
        if self.provisional is None:
            raise HistoryGapError(f"lookup at {s} past frontier {t[k]}")
        self.touched_future = True
        return self.provisional(s)


def rhs(t: float, state: PhaseState, hist: HistoryAccessor, scenario: ScenarioSpec):
    """Time derivative ``(dX, dV)`` of the system at ``(t, state)``."""
    if t < 0:
        raise DomainError("rhs is defined for t >= 0")
    tau = scenario.delay.scalar(t)
    if tau == 0.0:
        Xd, Vd = state.X, state.V
    else:
        Xd, Vd = hist(t - tau)
    return state.V.copy(), accelerations(state.X, state.V, Xd, Vd, scenario.influence)


class _Solver:
    def __init__(self, scenario: ScenarioSpec, t, corrector_passes: int = 1):
        self.sc = scenario
        self.corrector_passes = corrector_passes
        self.t = t
        n, N, d = t.size, scenario.n_agents, scenario.dim
        self.X = np.empty((n, N, d))
        self.V = np.empty((n, N, d))
        self.A = np.empty((n, N, d))
        self.hist = HistoryAccessor(scenario, t, self.X, self.V, self.A)
        self.psi = scenario.influence
        self.delay = scenario.delay

    def start(self):
        self.X[0], self.V[0] = self.sc.history.evaluate(0.0)
        self.A[0] = self._accel_at(0.0, self.X[0], self.V[0])

    def _accel_at(self, t, X, V):
        tau = self.delay.scalar(t)
        if tau == 0.0:
            Xd, Vd = X, V
        else:
            Xd, Vd = self.hist(t - tau)
        return accelerations(X, V, Xd, Vd, self.psi)

    def _rk4(self, t0, h, X0, V0, A0):
        tm = t0 + 0.5 * h
        t1 = t0 + h
        X2 = X0 + 0.5 * h * V0
        V2 = V0 + 0.5 * h * A0
        A2 = self._accel_at(tm, X2, V2)
        X3 = X0 + 0.5 * h * V2
        V3 = V0 + 0.5 * h * A2
        A3 = self._accel_at(tm, X3, V3)
        X4 = X0 + h * V3
        V4 = V0 + h * A3
        A4 = self._accel_at(t1, X4, V4)
        X1 = X0 + h / 6.0 * (V0 + 2 * V2 + 2 * V3 + V4)
        V1 = V0 + h / 6.0 * (A0 + 2 * A2 + 2 * A3 + A4)
        return X1, V1, A4

    def step(self, k):
        """Advance from mesh point ``k`` to ``k + 1``."""
        t0, t1 = self.t[k], self.t[k + 1]
        h = t1 - t0
        X0, V0, A0 = self.X[k], self.V[k], self.A[k]
        hist = self.hist
        hist.touched_future = False
        # predictor: linear extrapolation past the frontier
        hist.provisional = lambda s: (X0 + (s - t0) * V0, V0 + (s - t0) * A0)
        X1, V1, A1 = self._rk4(t0, h, X0, V0, A0)
        passes = 0
        while hist.touched_future and passes < self.corrector_passes:
            hist.touched_future = False
            Xe, Ve, Ae = X1, V1, A1

            def provisional(s, Xe=Xe, Ve=Ve, Ae=Ae):
                theta = (s - t0) / h
                return (_hermite(theta, h, X0, V0, Xe, Ve), _hermite(theta, h, V0, A0, Ve, Ae))

            hist.provisional = provisional
            X1, V1, A1 = self._rk4(t0, h, X0, V0, A0)
            passes += 1
        A1 = self._accel_at(t1, X1, V1)
        hist.provisional = None
        self.X[k + 1], self.V[k + 1], self.A[k + 1] = X1, V1, A1
        hist.k = k + 1
        if not math.isfinite(float(np.add.reduce(V1, axis=None) + np.add.reduce(X1, axis=None))):
            raise BlowUpError(f"non-finite state after t={t0:.6g}", float(t0))

    def trajectory(self):
        sc = self.sc
        hist_t = _history_grid(sc)
        hX, hV = sc.history.evaluate(hist_t)
        return Trajectory(sc, hist_t, hX, hV, self.t, self.X, self.V, self.A)


def _speed_limit(scenario):
    hist_t = np.append(_history_grid(scenario), 0.0)
    _, hV = scenario.history.evaluate(hist_t)
    r_v0 = float(np.max(np.linalg.norm(hV, axis=-1)))
    return 1e3 * max(r_v0, np.finfo(float).tiny)


def integrate(scenario: ScenarioSpec, corrector_passes: int = 1) -> Trajectory:
    """Integrate ``scenario`` on [0, T]; the result also covers the history."""
    validate_scenario(scenario)
    solver = _Solver(scenario, _mesh(scenario), corrector_passes)
    solver.start()
    limit = _speed_limit(scenario)
    for k in range(solver.t.size - 1):
        solver.step(k)
        if np.max(np.abs(solver.V[k + 1])) > limit:
            raise BlowUpError(f"velocity blow-up after t={solver.t[k]:.6g}", float(solver.t[k]))
    return solver.trajectory()


def initial_trajectory(scenario: ScenarioSpec) -> Trajectory:
    """Trajectory holding only the history and the state at t=0."""
    solver = _Solver(scenario, np.zeros(1))
    solver.start()
    return solver.trajectory()


def step(frontier: Trajectory, dt: float) -> Trajectory:
    """Extend a trajectory by one step of length ``dt`` (at most tau_bar)."""
    sc = frontier.scenario
    if not 0 < dt <= sc.tau_bar:
        raise DomainError(f"step needs 0 < dt <= tau_bar, got {dt}")
    t = np.append(frontier.mesh, frontier.horizon + dt)
    solver = _Solver(sc, t)
    solver.X[:-1], solver.V[:-1], solver.A[:-1] = frontier._X, frontier._V, frontier.accel
    solver.hist.k = t.size - 2
    solver.step(t.size - 2)
    return solver.trajectory()


def _fmt(x) -> str:
    return format(float(x), ".17g")


def atomic_write_rows(path, header, rows) -> None:
    """Write a CSV via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trajectory_header(n_agents: int, dim: int):
    return (["t"] + [f"x_{i}_{k}" for i in range(n_agents) for k in range(dim)]
            + [f"v_{i}_{k}" for i in range(n_agents) for k in range(dim)])


def export_trajectory_csv(traj: Trajectory, path, stride: int | None = None) -> None:
    sc = traj.scenario
    stride = stride or sc.stride
    idx = np.arange(0, traj.times.size, stride)
    if idx[-1] != traj.times.size - 1:
        idx = np.append(idx, traj.times.size - 1)
    rows = (np.concatenate([[traj.times[j]], traj.X[j].ravel(), traj.V[j].ravel()]) for j in idx)
    atomic_write_rows(path, trajectory_header(sc.n_agents, sc.dim), rows)
