"""Trajectory-derived quantities: diameters, window extrema, weight floors.

Continuous-time maxima are taken over uniform grids that are doubled until
the value moves by less than a tolerance; the number of grid intervals used
is reported alongside each value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .integrator import PhaseState, Trajectory, atomic_write_rows
from .model import DomainError

DEFAULT_RTOL = 1e-8
MAX_DOUBLINGS = 10


# ---------------------------------------------------------------------------
# diameters
# ---------------------------------------------------------------------------


def cloud_diameter(P) -> float:
    """Largest pairwise distance in a point cloud of shape (M, d)."""
    P = np.asarray(P, dtype=float)
    if P.shape[0] < 2:
        return 0.0
    if P.shape[1] == 1:
        return float(np.ptp(P[:, 0]))
    if P.shape[0] <= 1500:
        return float(np.max(pdist(P)))
    try:
        idx = ConvexHull(P).vertices
    except QhullError:
        idx = _degenerate_extremes(P)
    if idx.size < 2:
        return 0.0
    return float(np.max(pdist(P[idx])))


def _degenerate_extremes(P):
    # the cloud spans a lower-dimensional affine subspace; find extreme
    # points in its principal coordinates
    C = P - P.mean(axis=0)
    _, s, vt = np.linalg.svd(C, full_matrices=False)
    if s[0] == 0:
        return np.array([0])
    rank = int(np.sum(s > s[0] * 1e-10))
    Y = C @ vt[:rank].T
    if rank >= 2:
        try:
            return ConvexHull(Y).vertices
        except QhullError:
            # width at round-off level: joggle to find candidate extremes
            hull = ConvexHull(Y, qhull_options="QJ")
            return np.union1d(hull.vertices, _axis_extremes(Y))
    return np.unique([np.argmin(Y[:, 0]), np.argmax(Y[:, 0])])


def _axis_extremes(Y):
    return np.unique(np.concatenate([np.argmin(Y, axis=0), np.argmax(Y, axis=0)]))


def _pairwise_max(A):
    """max_{i,j} |A[..., i, :] - A[..., j, :]| over the agent axis."""
    A = np.asarray(A, dtype=float)
    lead = A.shape[:-2]
    flat = A.reshape((-1,) + A.shape[-2:])
    n = flat.shape[1]
    out = np.empty(flat.shape[0])
    chunk = max(1, 2_000_000 // max(1, n * n * flat.shape[2]))
    for s in range(0, flat.shape[0], chunk):
        B = flat[s:s + chunk]
        D = B[:, :, None, :] - B[:, None, :, :]
        out[s:s + chunk] = np.sqrt(np.max(np.einsum("tijk,tijk->tij", D, D), axis=(1, 2)))
    return out.reshape(lead) if lead else float(out[0])


def diameter_position(state: PhaseState) -> float:
    return float(_pairwise_max(state.X))


def diameter_velocity(state: PhaseState) -> float:
    return float(_pairwise_max(state.V))


def directional_diff(state: PhaseState, i: int, j: int, v) -> float:
    """<v_i - v_j, v> for a unit direction ``v``."""
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-12:
        raise DomainError("direction must be a unit vector")
    return float(np.dot(state.V[i] - state.V[j], v))


# ---------------------------------------------------------------------------
# window extrema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowExtrema:
    n: int
    start: float
    end: float
    Dn: float
    directions: np.ndarray
    M: np.ndarray
    m: np.ndarray
    intervals: int
    converged: bool


@dataclass(frozen=True)
class InitialExtremes:
    D0: float
    R_V0: float
    M_X0: float
    intervals: int
    converged: bool


def _refine(value_on, a, b, n0, tol, max_doublings=MAX_DOUBLINGS):
    """Double a uniform grid on [a, b] until ``value_on(grid)`` settles within ``tol``."""
    n = max(1, int(n0))
    grid = np.linspace(a, b, n + 1)
    value = value_on(grid)
    for _ in range(max_doublings):
        n *= 2
        grid = np.linspace(a, b, n + 1)
        new = value_on(grid)
        change = abs(new - value)
        value = new
        if change <= tol:
            return value, grid, n, True
    return value, grid, n, False


def _window_bounds(traj: Trajectory, n: int):
    tb = traj.tau_bar
    a, b = (n - 1) * tb, n * tb
    if n < 0 or b > traj.horizon * (1 + 1e-12) + 1e-12:
        raise DomainError(f"window {n} = [{a}, {b}] lies beyond the horizon {traj.horizon}")
    return a, min(b, traj.horizon) if n > 0 else 0.0


def window_diameter(traj: Trajectory, n: int, sample_count: int = 33, directions=None,
                    rtol: float = DEFAULT_RTOL, scale: float | None = None) -> WindowExtrema:
    """Velocity diameter over all agents and all time pairs in window ``n``.

    Window ``n`` is [(n-1) tau_bar, n tau_bar]. The grid starts at the finer
    of ``sample_count`` points and the integration mesh, and is doubled until
    the diameter changes by at most ``rtol * scale`` (``scale`` defaults to
    the diameter itself).
    """
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    key = ("window", n, sample_count, rtol, scale)
    if directions is None and key in traj._cache:
        return traj._cache[key]
    a, b = _window_bounds(traj, n)
    n0 = max(sample_count - 1, int(round((b - a) / traj.scenario.dt)))
    d = traj.scenario.dim

    def value_on(grid):
        _, V = traj.states(grid)
        return cloud_diameter(V.reshape(-1, d))

    if scale is None:
        first = value_on(np.linspace(a, b, n0 + 1))
        scale = first
    tol = rtol * scale
    Dn, grid, intervals, ok = _refine(value_on, a, b, n0, tol)
    if directions is None:
        dirs = np.zeros((0, d))
    else:
        dirs = np.atleast_2d(np.asarray(directions, dtype=float))
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise DomainError("directions must be unit vectors")
    _, V = traj.states(grid)
    proj = V.reshape(-1, d) @ dirs.T
    M = proj.max(axis=0) if dirs.size else np.zeros(0)
    m = proj.min(axis=0) if dirs.size else np.zeros(0)
    out = WindowExtrema(n, a, b, Dn, dirs, M, m, intervals, ok)
    if directions is None:
        traj._cache[key] = out
    return out


def initial_extremes(traj: Trajectory, sample_count: int = 33,
                     rtol: float = DEFAULT_RTOL) -> InitialExtremes:
    """D0, R_V0 and M_X0 as refined grid maxima over the history window."""
    key = ("extremes", sample_count, rtol)
    if key in traj._cache:
        return traj._cache[key]
    w0 = window_diameter(traj, 0, sample_count, rtol=rtol)
    tb = traj.tau_bar
    n0 = max(sample_count - 1, traj.n_hist)

    def max_norm(which):
        def value_on(grid):
            X, V = traj.states(grid)
            A = X if which == "x" else V
            return float(np.max(np.linalg.norm(A, axis=-1)))
        first = value_on(np.linspace(-tb, 0.0, n0 + 1))
        return _refine(value_on, -tb, 0.0, n0, rtol * max(first, np.finfo(float).tiny))

    r_v, _, nv, okv = max_norm("v")
    m_x, _, nx, okx = max_norm("x")
    out = InitialExtremes(w0.Dn, r_v, m_x, max(w0.intervals, nv, nx), w0.converged and okv and okx)
    traj._cache[key] = out
    return out


# ---------------------------------------------------------------------------
# weight floor psi_t and phi(t)
# ---------------------------------------------------------------------------


class WeightFloor:
    """r -> min{exp(-K tau_bar) * min_{[0, r]} psi, exp(-2 K tau_bar) / tau_bar}."""

    def __init__(self, influence, K: float, tau_bar: float):
        self.influence = influence
        self.K = K
        self.tau_bar = tau_bar
        self.decay = math.exp(-K * tau_bar)
        self.cap = math.exp(-2.0 * K * tau_bar) / tau_bar

    def __call__(self, r):
        return np.minimum(self.decay * self.influence.running_min(r), self.cap)

    def cap_crossing(self, r_hi: float = 1e12) -> float:
        """Smallest r where the psi branch drops below the cap (inf if never)."""
        f = lambda r: self.decay * float(self.influence.running_min(r)) - self.cap
        if f(0.0) <= 0:
            return 0.0
        hi = 1.0
        while f(hi) > 0:
            hi *= 2.0
            if hi > r_hi:
                return math.inf
        lo = 0.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if f(mid) > 0:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * hi:
                break
        return hi


class DiagnosticsSeries:
    """d_X, d_V, running max of d_X, psi_t and phi on the trajectory mesh.

    Between mesh points d_X is interpolated linearly; the running maximum of
    that interpolant gives a continuous reach r(t) and phi(t) = floor(r(t)).
    """

    def __init__(self, traj: Trajectory, extremes: InitialExtremes | None = None):
        self.traj = traj
        sc = traj.scenario
        self.extremes = extremes or initial_extremes(traj)
        self.K = sc.influence.sup
        self.tau_bar = sc.tau_bar
        self.floor = WeightFloor(sc.influence, self.K, sc.tau_bar)
        self.times = traj.times
        self.d_X = _pairwise_max(traj.X)
        self.d_V = _pairwise_max(traj.V)
        self.dX_runmax = np.maximum.accumulate(self.d_X)
        self.reach_offset = 2 * sc.tau_bar * self.extremes.R_V0 + 4 * self.extremes.M_X0
        self.reach = self.reach_offset + self.dX_runmax
        self.psi_t = sc.influence.running_min(self.reach)
        self.phi = self.floor(self.reach)
        t, dx, rm = self.times, self.d_X, self.dX_runmax
        h = np.diff(t)
        rise = dx[1:] - rm[:-1]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(rise > 0, (rm[:-1] - dx[:-1]) / (dx[1:] - dx[:-1]), 1.0)
        self._kink = t[:-1] + h * np.clip(frac, 0.0, 1.0)
        pieces = self._piece(np.arange(h.size), t[:-1], t[1:])
        self._cum = np.concatenate([[0.0], np.cumsum(pieces)])

    # continuous-time access -------------------------------------------------

    def _interval(self, s):
        t = self.times
        return np.clip(np.searchsorted(t, s, side="right") - 1, 0, t.size - 2)

    def _reach_in(self, k, s):
        t, dx = self.times, self.d_X
        lin = dx[k] + (s - t[k]) / (t[k + 1] - t[k]) * (dx[k + 1] - dx[k])
        return self.reach_offset + np.maximum(self.dX_runmax[k], lin)

    def _simpson(self, k, u, w):
        mid = 0.5 * (u + w)
        f = self.floor
        return (w - u) / 6.0 * (f(self._reach_in(k, u)) + 4 * f(self._reach_in(k, mid))
                                + f(self._reach_in(k, w)))

    def _piece(self, k, u, w):
        c = np.clip(self._kink[k], u, w)
        return self._simpson(k, u, c) + self._simpson(k, c, w)

    def _check(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < self.times[0] - 1e-12) or np.any(s > self.times[-1] + 1e-12):
            raise DomainError(f"time outside [{self.times[0]}, {self.times[-1]}]")
        return np.clip(s, self.times[0], self.times[-1])

    def reach_at(self, s):
        """2 tau_bar R_V0 + 4 M_X0 + max_{[-tau_bar, s]} d_X."""
        s = self._check(s)
        return self._reach_in(self._interval(s), s)

    def psi_floor_at(self, s):
        return self.traj.scenario.influence.running_min(self.reach_at(s))

    def phi_at(self, s):
        return self.floor(self.reach_at(s))

    def phi_primitive(self, s):
        """Integral of phi from -tau_bar to ``s``."""
        s = self._check(s)
        k = self._interval(s)
        return self._cum[k] + self._piece(k, self.times[k], s)

    def phi_integral(self, a, b):
        return self.phi_primitive(b) - self.phi_primitive(a)

    def export_csv(self, path, stride: int | None = None):
        stride = stride or self.traj.scenario.stride
        idx = np.arange(0, self.times.size, stride)
        if idx[-1] != self.times.size - 1:
            idx = np.append(idx, self.times.size - 1)
        cols = (self.times, self.d_X, self.d_V, self.dX_runmax, self.psi_t, self.phi)
        rows = (tuple(c[j] for c in cols) for j in idx)
        atomic_write_rows(path, ["t", "d_X", "d_V", "dX_runmax", "psi_t", "phi"], rows)


def series(traj: Trajectory) -> DiagnosticsSeries:
    out = traj._cache.get("series")
    if out is None:
        out = traj._cache["series"] = DiagnosticsSeries(traj)
    return out


def psi_floor(traj: Trajectory, t) -> float:
    """min of psi over [0, 2 tau_bar R_V0 + 4 M_X0 + max_{[-tau_bar, t]} d_X]."""
    out = series(traj).psi_floor_at(t)
    return float(out) if np.ndim(out) == 0 else out


def phi(traj: Trajectory, t) -> float:
    out = series(traj).phi_at(t)
    return float(out) if np.ndim(out) == 0 else out
