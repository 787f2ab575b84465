"""Certified constants, the envelope and Lyapunov functionals, and the check report.

The order of computation is fixed: K and the initial extremes first, then
the Lyapunov value at 2 tau_bar, then d_star from the integral relation,
then psi_star, phi_star and the rate C.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.integrate import quad

from .diagnostics import (
    DiagnosticsSeries,
    WeightFloor,
    initial_extremes,
    series,
    window_diameter,
    _pairwise_max,
)
from .integrator import Trajectory, atomic_write_rows
from .model import ConstantDelay, ConstantInfluence, DomainError, InfluenceSpec


class DivergenceError(RuntimeError):
    """No root of the d_star relation below the search ceiling."""


@dataclass(frozen=True)
class Tolerances:
    """Every slack and numerical knob used by the checker."""

    rel: float = 1e-8
    abs_floor: float = 1e-12
    lyapunov_rel: float = 1e-8
    envelope_rel: float = 1e-6
    envelope_abs: float = 1e-9
    window_rtol: float = 1e-8
    sample_count: int = 33
    dstar_rtol: float = 1e-10
    z_max: float = 1e6
    quad_rel: float = 1e-13

    def slack(self, D0: float) -> float:
        return self.rel * D0 + self.abs_floor

    @classmethod
    def from_dict(cls, doc: dict | None) -> "Tolerances":
        doc = dict(doc or {})
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(doc) - set(known)
        if unknown:
            raise ValueError(f"unknown tolerance keys: {sorted(unknown)}")
        out = {}
        for k, v in doc.items():
            out[k] = int(v) if k == "sample_count" else float(v)
            if not out[k] > 0:
                raise ValueError(f"tolerance {k} must be > 0")
        return cls(**out)


def sup_influence(spec: InfluenceSpec) -> float:
    """K = sup psi (closed form for every shipped family)."""
    return float(spec.sup)


# ---------------------------------------------------------------------------
# decay rate
# ---------------------------------------------------------------------------


def decay_rate(K: float, tau_bar: float, phi_star: float) -> float:
    """C = ln(1 / (1 - exp(-K tau_bar) phi_star tau_bar)) / (3 tau_bar)."""
    if not (K > 0 and tau_bar > 0):
        raise DomainError("K and tau_bar must be positive")
    cap = math.exp(-2.0 * K * tau_bar) / tau_bar
    if not 0 < phi_star <= cap * (1 + 1e-12):
        raise DomainError(f"phi_star={phi_star!r} outside (0, {cap!r}]")
    x = math.exp(-K * tau_bar) * phi_star * tau_bar
    return -math.log1p(-x) / (3.0 * tau_bar)


# ---------------------------------------------------------------------------
# integral of the weight floor in r
# ---------------------------------------------------------------------------


class FloorIntegral:
    """G(z) = integral_0^z g(r) dr for the weight floor g, split at its kinks."""

    def __init__(self, floor: WeightFloor, rel: float = 1e-13):
        self.g = floor
        self.rel = rel
        pts = {float(p) for p in floor.influence.kinks() if p > 0}
        rc = floor.cap_crossing()
        if 0 < rc < math.inf:
            pts.add(rc)
        self.breaks = np.array(sorted(pts))

    def _scalar_g(self, r):
        return float(self.g(r))

    def between(self, a: float, b: float) -> float:
        if b <= a:
            return 0.0
        cuts = self.breaks[(self.breaks > a) & (self.breaks < b)]
        edges = np.concatenate([[a], cuts, [b]])
        total = 0.0
        for lo, hi in zip(edges[:-1], edges[1:]):
            val, _ = quad(self._scalar_g, lo, hi, epsabs=0.0, epsrel=self.rel, limit=200)
            total += val
        return total

    def __call__(self, z: float) -> float:
        return self.between(0.0, z)


# ---------------------------------------------------------------------------
# envelope and Lyapunov functional
# ---------------------------------------------------------------------------


class Functionals:
    """Envelope D(t) and Lyapunov L(t) attached to one trajectory."""

    def __init__(self, traj: Trajectory, tol: Tolerances | None = None):
        self.traj = traj
        self.tol = tol or Tolerances()
        self.series: DiagnosticsSeries = series(traj)
        ex = self.series.extremes
        self.D0 = ex.D0
        self.K = self.series.K
        self.tau_bar = traj.tau_bar
        self.decay = math.exp(-self.K * self.tau_bar)
        self.G = FloorIntegral(self.series.floor, self.tol.quad_rel)
        # anchors D(n tau_bar) for n = 2, 3, ... up to the horizon
        tb, T = self.tau_bar, traj.horizon
        n_last = int(math.floor(T / tb + 1e-9))
        anchors = [self.D0]
        for n in range(2, n_last):
            b = min((n + 1) * tb, T)
            anchors.append(anchors[-1] * self._factor(n * tb, b))
        self._anchors = np.array(anchors)
        self._G_cache: dict[float, float] = {}

    def _factor(self, a, b):
        base = 1.0 - self.decay * float(self.series.phi_integral(a, b))
        return max(base, 0.0) ** (1.0 / 3.0)

    def envelope(self, t):
        """D(t): D0 up to 2 tau_bar, then the cube-root recursion."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        tb = self.tau_bar
        if np.any(t < -tb * (1 + 1e-12)) or np.any(t > self.traj.horizon * (1 + 1e-12)):
            raise DomainError("envelope queried outside [-tau_bar, T]")
        out = np.full(t.shape, self.D0)
        late = t > 2 * tb
        if np.any(late):
            tl = t[late]
            n = np.maximum(np.ceil(tl / tb - 1e-12).astype(int) - 1, 2)
            n = np.minimum(n, 1 + self._anchors.size)
            start = n * tb
            integ = self.series.phi_integral(start, np.minimum(tl, self.traj.horizon))
            base = np.maximum(1.0 - self.decay * integ, 0.0)
            out[late] = self._anchors[n - 2] * base ** (1.0 / 3.0)
        return float(out[0]) if scalar else out

    def anchor(self, n: int) -> float:
        """D(n tau_bar)."""
        return self.D0 if n <= 2 else float(self._anchors[n - 2])

    def G_at(self, z: float) -> float:
        """G(z), evaluated incrementally from the largest cached abscissa below z."""
        if z in self._G_cache:
            return self._G_cache[z]
        below = [k for k in self._G_cache if k < z]
        if below:
            a = max(below)
            val = self._G_cache[a] + self.G.between(a, z)
        else:
            val = self.G(z)
        self._G_cache[z] = val
        return val

    def lyapunov(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        reach = np.atleast_1d(self.series.reach_at(t))
        order = np.argsort(reach, kind="stable")
        Gv = np.empty_like(reach)
        for j in order:
            Gv[j] = self.G_at(float(reach[j]))
        out = self.envelope(t) + self.decay / 3.0 * Gv
        return float(out[0]) if scalar else out

    def mesh_lyapunov(self):
        """L on the full trajectory mesh, accumulating G along the reach."""
        key = "mesh_L"
        if key not in self.traj._cache:
            s = self.series
            reach = s.reach
            Gv = np.empty_like(reach)
            acc = self.G_at(float(reach[0]))
            Gv[0] = acc
            for k in range(1, reach.size):
                if reach[k] > reach[k - 1]:
                    acc = acc + self.G.between(float(reach[k - 1]), float(reach[k]))
                Gv[k] = acc
            self.traj._cache[key] = self.envelope(s.times) + self.decay / 3.0 * Gv
        return self.traj._cache[key]


def functionals(traj: Trajectory, tol: Tolerances | None = None) -> Functionals:
    key = ("functionals", tol or Tolerances())
    out = traj._cache.get(key)
    if out is None:
        out = traj._cache[key] = Functionals(traj, tol)
    return out


def envelope_D(traj: Trajectory, t):
    return functionals(traj).envelope(t)


def lyapunov(traj: Trajectory, t):
    return functionals(traj).lyapunov(t)


# ---------------------------------------------------------------------------
# d_star
# ---------------------------------------------------------------------------


def solve_dstar_from(F: Functionals, level: float, rtol: float = 1e-10,
                     z_max: float = 1e6) -> float:
    """Smallest z >= reach(2 tau_bar) with (e^{-K tau_bar}/3) G(z) >= ``level``."""
    c = F.decay / 3.0
    lo = float(F.series.reach_at(min(2 * F.tau_bar, F.traj.horizon)))
    G_lo = F.G_at(lo)
    if c * G_lo >= level:
        return lo
    hi = max(2.0 * lo, 1.0)
    G_hi = G_lo + F.G.between(lo, hi)
    while c * G_hi < level:
        if hi >= z_max:
            raise DivergenceError("divergence condition numerically unattained")
        nxt = min(2.0 * hi, z_max)
        lo, G_lo = hi, G_hi
        hi, G_hi = nxt, G_hi + F.G.between(hi, nxt)
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        G_mid = G_lo + F.G.between(lo, mid)
        if c * G_mid >= level:
            hi = mid
        else:
            lo, G_lo = mid, G_mid
    return hi


def solve_dstar(traj: Trajectory, tol: Tolerances | None = None) -> float:
    tol = tol or Tolerances()
    F = functionals(traj, tol)
    if traj.horizon < 2 * traj.tau_bar:
        raise DomainError("d_star needs the trajectory up to 2 tau_bar")
    level = float(F.lyapunov(2 * traj.tau_bar))
    return solve_dstar_from(F, level, tol.dstar_rtol, tol.z_max)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class TheoryConstants:
    K: float
    tau_bar: float
    D0: float
    R_V0: float
    M_X0: float
    L_2tau: float | None = None
    d_star: float | None = None
    psi_star: float | None = None
    phi_star: float | None = None
    C: float | None = None


@dataclass
class CheckResult:
    key: str
    name: str
    range: list
    margin: float
    slack: float
    passed: bool | None
    samples: int
    note: str = ""

    def to_dict(self):
        return {"key": self.key, "name": self.name, "range": self.range,
                "margin": _finite(self.margin), "slack": self.slack,
                "pass": self.passed, "samples": self.samples, "note": self.note}


def _finite(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


@dataclass
class CertificateReport:
    constants: TheoryConstants
    checks: list
    meta: dict = field(default_factory=dict)
    partial: bool = False

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    @property
    def failed(self):
        return [c.key for c in self.checks if c.passed is False]

    def check(self, key) -> CheckResult:
        for c in self.checks:
            if c.key == key:
                return c
        raise KeyError(key)

    def to_dict(self):
        return {
            "constants": {k: _finite(v) for k, v in asdict(self.constants).items()},
            "checks": [c.to_dict() for c in self.checks],
            "meta": self.meta,
            "partial": self.partial,
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)


def _result(key, name, rng, lhs, rhs, slack, note=""):
    lhs = np.atleast_1d(np.asarray(lhs, dtype=float))
    rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
    if lhs.size == 0:
        return CheckResult(key, name, rng, math.inf, slack, None, 0, note or "no samples")
    margin = float(np.min(rhs - lhs))
    ok = bool(np.isfinite(margin) and margin >= -slack)
    return CheckResult(key, name, rng, margin, slack, ok, int(lhs.size), note)


def _skipped(key, name, note):
    return CheckResult(key, name, [], math.nan, 0.0, None, 0, note)


def _failed(key, name, note):
    return CheckResult(key, name, [], -math.inf, 0.0, False, 0, note)


CHECK_NAMES = {
    "a": "velocity bound |v_i(t)| <= R_V0",
    "b": "window diameters nonincreasing",
    "c": "delayed distance bound",
    "d": "one-window contraction",
    "e": "three-window contraction",
    "f": "window diameter below envelope",
    "g": "Lyapunov functional nonincreasing after 2 tau_bar",
    "h": "position diameter bound sup d_X <= d_star",
    "i": "exponential velocity envelope",
    "j": "envelope anchors below D0 exp(-C (n-2) tau_bar)",
}


def check_certificates(traj: Trajectory, tolerances: Tolerances | None = None) -> CertificateReport:
    """Evaluate every certificate inequality along ``traj``."""
    tol = tolerances or Tolerances()
    sc = traj.scenario
    tb, T = traj.tau_bar, traj.horizon
    ex = initial_extremes(traj, tol.sample_count, tol.window_rtol)
    D0 = ex.D0
    F = functionals(traj, tol)
    s = F.series
    K, decay = F.K, F.decay
    slack = tol.slack(D0)
    n_max = int(math.floor(T / tb + 1e-9))
    windows = [window_diameter(traj, n, tol.sample_count, rtol=tol.window_rtol,
                               scale=max(D0, np.finfo(float).tiny)) for n in range(n_max + 1)]
    Dn = np.array([w.Dn for w in windows])
    consts = TheoryConstants(K=K, tau_bar=tb, D0=D0, R_V0=ex.R_V0, M_X0=ex.M_X0)
    checks = []

    # (a) speed bound on the whole mesh
    speed = np.max(np.linalg.norm(traj.V, axis=-1), axis=-1)
    checks.append(_result("a", CHECK_NAMES["a"], [-tb, T], speed, ex.R_V0, slack))

    # (b) D_{n+1} <= D_n
    checks.append(_result("b", CHECK_NAMES["b"], [0, n_max], Dn[1:], Dn[:-1], slack))

    # (c) |x_i(t - tau(t)) - x_j(t)| <= 2 tau_bar R + 4 M + d_X(t - tau_bar)
    tm = traj.mesh
    Xd, _ = traj.states(tm - sc.delay(tm))
    Xl, _ = traj.states(tm - tb)
    diff = Xd[:, :, None, :] - traj.states(tm)[0][:, None, :, :]
    lhs_c = np.sqrt(np.max(np.einsum("tijk,tijk->tij", diff, diff), axis=(1, 2)))
    rhs_c = s.reach_offset + _pairwise_max(Xl)
    checks.append(_result("c", CHECK_NAMES["c"], [0, T], lhs_c, rhs_c, slack))

    # (d) D_{n+1} <= e^{-K tb} d_V(n tb) + (1 - e^{-K tb}) D_n
    nd = np.arange(n_max)
    dV_n = np.atleast_1d(_pairwise_max(traj.states(nd * tb)[1])) if nd.size else np.zeros(0)
    checks.append(_result("d", CHECK_NAMES["d"], [0, n_max - 1], Dn[1:],
                          decay * dV_n + (1 - decay) * Dn[:-1], slack))

    # (e) n >= 2: D_{n+1} <= (1 - e^{-K tb} int_{(n-2)tb}^{(n-1)tb} phi) D_{n-2}
    ne = np.arange(2, n_max)
    if ne.size:
        integ = s.phi_integral((ne - 2) * tb, (ne - 1) * tb)
        checks.append(_result("e", CHECK_NAMES["e"], [2, n_max - 1], Dn[ne + 1],
                              (1 - decay * integ) * Dn[ne - 2], slack))
    else:
        checks.append(_skipped("e", CHECK_NAMES["e"], "horizon shorter than 3 windows"))

    # (f) D_n <= D(t) for sampled t <= n tb
    env_mesh = F.envelope(s.times)
    env_cummin = np.minimum.accumulate(env_mesh)
    rhs_f = []
    for n in range(n_max + 1):
        k = np.searchsorted(s.times, n * tb, side="right") - 1
        rhs_f.append(min(env_cummin[k], F.envelope(min(n * tb, T))))
    checks.append(_result("f", CHECK_NAMES["f"], [0, n_max], Dn, rhs_f, slack))

    # (g) L nonincreasing on sampled t >= 2 tb
    L_mesh = F.mesh_lyapunov()
    after = s.times >= 2 * tb - 1e-12 * tb
    Lg = L_mesh[after]
    g_slack = tol.lyapunov_rel * (D0 + 1.0)
    if Lg.size >= 2:
        checks.append(_result("g", CHECK_NAMES["g"], [2 * tb, T], Lg[1:], Lg[:-1], g_slack))
    else:
        checks.append(_skipped("g", CHECK_NAMES["g"], "horizon shorter than 2 tau_bar"))

    meta = {
        "scenario": sc.name,
        "fingerprint": sc.fingerprint(),
        "tolerances": asdict(tol),
        "slack": slack,
        "dt": sc.dt,
        "mesh_points": int(s.times.size),
        "window_intervals": [w.intervals for w in windows],
        "windows_converged": bool(all(w.converged for w in windows)),
        "initial_extremes_intervals": ex.intervals,
        "reach_convention": "2*tau_bar*R_V0 + 4*M_X0 used in the reach, the Lyapunov functional and d_star",
        "three_window_form": "D_{n+1} <= (1 - e^{-K tau_bar} int phi) D_{n-2}",
        "divergence_attested": bool(sc.influence.diverges),
        "D_n": Dn.tolist(),
    }

    # (h)-(j) need d_star and C
    dstar_note = ""
    if T < 2 * tb:
        dstar_note = "horizon shorter than 2 tau_bar"
    else:
        try:
            consts.L_2tau = float(F.lyapunov(2 * tb))
            consts.d_star = solve_dstar_from(F, consts.L_2tau, tol.dstar_rtol, tol.z_max)
            consts.psi_star = float(sc.influence.running_min(consts.d_star))
            consts.phi_star = float(min(decay * consts.psi_star, F.series.floor.cap))
            consts.C = decay_rate(K, tb, consts.phi_star)
        except (DivergenceError, DomainError) as exc:
            dstar_note = str(exc)
    if consts.C is None:
        maker = _skipped if T < 2 * tb else _failed
        for key in "hij":
            checks.append(maker(key, CHECK_NAMES[key], dstar_note))
    else:
        C, ds = consts.C, consts.d_star
        checks.append(_result("h", CHECK_NAMES["h"], [-tb, T], np.max(s.d_X), ds, slack))
        rhs_i = D0 * np.exp(-C * (s.times - 2 * tb)) * (1 + tol.envelope_rel) + tol.envelope_abs * D0
        checks.append(_result("i", CHECK_NAMES["i"], [-tb, T], s.d_V, rhs_i, 0.0,
                              "relative and absolute tolerance folded into the bound"))
        nj = np.arange(2, n_max + 1)
        checks.append(_result("j", CHECK_NAMES["j"], [2, n_max],
                              [F.anchor(n) for n in nj], D0 * np.exp(-C * (nj - 2) * tb), slack))
        meta["reach_sup"] = float(s.reach[-1])
        meta["reach_margin_to_dstar"] = float(ds - s.reach[-1])
        meta["phi_star_margin"] = float(np.min(s.phi) - consts.phi_star)
    if dstar_note:
        meta["dstar_error"] = dstar_note
    partial = T < 4 * tb
    meta["partial"] = partial
    return CertificateReport(consts, checks, meta, partial)


def export_envelope_csv(traj: Trajectory, report: CertificateReport, path, stride=None):
    """Columns t, d_V, envelope bound, D(t), L(t)."""
    F = functionals(traj)
    s = F.series
    C = report.constants.C
    bound = (report.constants.D0 * np.exp(-C * (s.times - 2 * traj.tau_bar))
             if C is not None else np.full(s.times.shape, np.nan))
    env = F.envelope(s.times)
    L = F.mesh_lyapunov()
    stride = stride or traj.scenario.stride
    idx = np.arange(0, s.times.size, stride)
    if idx[-1] != s.times.size - 1:
        idx = np.append(idx, s.times.size - 1)
    rows = ((s.times[j], s.d_V[j], bound[j], env[j], L[j]) for j in idx)
    atomic_write_rows(path, ["t", "d_V", "envelope", "D", "L"], rows)


# ---------------------------------------------------------------------------
# negative control and closed-form reference
# ---------------------------------------------------------------------------


def corrupt_trajectory(traj: Trajectory) -> Trajectory:
    """Multiply velocities by e^t for t > 0 and rebuild positions consistently."""
    t = traj.mesh
    g = np.exp(np.maximum(t, 0.0))[:, None, None]
    V = traj._V * g
    A = (traj.accel + traj._V) * g
    A[0] = traj.accel[0]
    X = np.empty_like(traj._X)
    X[0] = traj._X[0]
    h = np.diff(t)[:, None, None]
    # exact for the cubic Hermite position interpolant
    steps = h / 2 * (V[:-1] + V[1:]) + h * h / 12 * (A[:-1] - A[1:])
    X[1:] = X[0] + np.cumsum(steps, axis=0)
    return traj.replace_states(X, V, A)


def closed_form_dv(scenario, t):
    """|w0| exp(-2 c t) for two agents, psi = c, tau = 0 and constant histories; else None."""
    if scenario.n_agents != 2 or not isinstance(scenario.influence, ConstantInfluence):
        return None
    if not (isinstance(scenario.delay, ConstantDelay) and scenario.delay.tau0 == 0.0):
        return None
    laws = scenario.history.velocity + scenario.history.position
    if any(getattr(law, "family", "") != "constant" for law in laws):
        return None
    v = scenario.history.velocity
    w0 = np.linalg.norm(np.asarray(v[0].value) - np.asarray(v[1].value))
    return w0 * np.exp(-2.0 * scenario.influence.c * np.asarray(t, dtype=float))
