"""Command-line front end.

Exit codes: 0 success, 1 a certificate check failed, 2 configuration error,
3 numerical blow-up during integration.
"""
from __future__ import annotations

import argparse
import copy
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .certificates import (
    Tolerances,
    check_certificates,
    closed_form_dv,
    corrupt_trajectory,
    export_envelope_csv,
)
from .diagnostics import series
from .integrator import BlowUpError, _fmt, atomic_write_rows, export_trajectory_csv, integrate
from .model import ScenarioError, scenario_from_dict
from .presets import PRESETS, preset_document

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_BLOWUP = 0, 1, 2, 3
WORKERS_ENV = "FLOCKCERT_WORKERS"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def load_document(ref: str) -> dict:
    """Scenario document from a YAML file or ``preset:NAME``."""
    if ref.startswith("preset:"):
        try:
            return preset_document(ref.split(":", 1)[1])
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
    path = Path(ref)
    if not path.is_file():
        raise ConfigError(f"scenario file not found: {path}")
    try:
        with path.open() as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a key-value document")
    doc.setdefault("name", path.stem)
    return doc


def apply_overrides(doc: dict, dt=None, T=None, stride=None) -> dict:
    doc = copy.deepcopy(doc)
    if dt is not None:
        doc["dt"] = dt
    if T is not None:
        doc.pop("horizon_windows", None)
        doc["horizon"] = T
    if stride is not None:
        doc["stride"] = stride
    return doc


def set_path(doc: dict, path: str, value) -> dict:
    """Copy of ``doc`` with the dotted ``path`` set to ``value``."""
    doc = copy.deepcopy(doc)
    keys = path.split(".")
    node = doc
    for k in keys[:-1]:
        if isinstance(node, list):
            node = node[int(k)]
        elif isinstance(node, dict) and k in node:
            node = node[k]
        else:
            raise ConfigError(f"sweep path {path!r}: no key {k!r}")
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    elif isinstance(node, dict):
        if path == "horizon":
            node.pop("horizon_windows", None)
        node[last] = value
    else:
        raise ConfigError(f"sweep path {path!r} does not name a field")
    return doc


def load_tolerances(path) -> Tolerances:
    if path is None:
        return Tolerances()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"tolerance file not found: {p}")
    with p.open() as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: expected a key-value document")
    try:
        return Tolerances.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{p}: {exc}") from None


def build(doc: dict):
    try:
        return scenario_from_dict(doc)
    except ScenarioError as exc:
        raise ConfigError(f"invalid scenario: {exc}") from None


def run_integration(scenario):
    try:
        return integrate(scenario)
    except ScenarioError as exc:
        raise ConfigError(f"invalid scenario: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def run_simulate(args) -> int:
    doc = apply_overrides(load_document(args.scenario), args.dt, args.T, args.stride)
    sc = build(doc)
    traj = run_integration(sc)
    out = Path(args.out)
    export_trajectory_csv(traj, out / "trajectory.csv")
    series(traj).export_csv(out / "diagnostics.csv")
    print(f"wrote {out / 'trajectory.csv'} and {out / 'diagnostics.csv'}")
    return EXIT_OK


def print_report(report, stream=None):
    stream = stream or sys.stdout
    for c in report.checks:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[c.passed]
        margin = "n/a" if not math.isfinite(c.margin) else f"{c.margin:.3e}"
        note = f"  [{c.note}]" if c.note else ""
        print(f"{status} ({c.key}) {c.name}: margin={margin}{note}", file=stream)
    k = report.constants
    print(f"constants: K={k.K:.6g} D0={k.D0:.6g} R_V0={k.R_V0:.6g} M_X0={k.M_X0:.6g} "
          f"d_star={_show(k.d_star)} phi_star={_show(k.phi_star)} C={_show(k.C)}", file=stream)
    if report.partial:
        print("partial: horizon shorter than 4 tau_bar", file=stream)
    failed = report.failed
    print("certified" if not failed else f"FAILED checks: {', '.join(failed)}", file=stream)


def _show(x):
    return "n/a" if x is None else f"{x:.6g}"


def run_certify(args) -> int:
    tol = load_tolerances(args.tol_block)
    doc = apply_overrides(load_document(args.scenario), args.dt, args.T, args.stride)
    sc = build(doc)
    traj = run_integration(sc)
    if args.corrupt:
        traj = corrupt_trajectory(traj)
    report = check_certificates(traj, tol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_text(out / "report.json", report.to_json() + "\n")
    export_envelope_csv(traj, report, out / "envelope.csv")
    if args.svg:
        write_svg(traj, report, out / "envelope.svg")
    print_report(report)
    return EXIT_OK if report.passed else EXIT_FAIL


def _atomic_text(path: Path, text: str):
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_svg(traj, report, path):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; skipping SVG", file=sys.stderr)
        return
    s = series(traj)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(s.times, np.maximum(s.d_V, 1e-300), label="d_V(t)")
    C = report.constants.C
    if C is not None and report.constants.D0 > 0:
        ax.semilogy(s.times, report.constants.D0 * np.exp(-C * (s.times - 2 * traj.tau_bar)),
                    "--", label="D0 exp(-C (t - 2 tau_bar))")
    ax.set_xlabel("t")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def fitted_rate(times, d_V, t0):
    """Least-squares decay rate of log d_V on [t0, T]; nan if d_V vanishes there."""
    m = (times >= t0) & (d_V > 0)
    if m.sum() < 2:
        return math.nan
    slope = np.polyfit(times[m], np.log(d_V[m]), 1)[0]
    return float(-slope)


SWEEP_COLUMNS = ["value", "D0", "K", "C", "d_star", "sup_dX", "fit_rate", "all_pass",
                 "dv_error", "error"]


def sweep_row(doc: dict, param: str, value, tol: Tolerances) -> dict:
    """One sweep run; failures are captured in the ``error`` field."""
    row = {k: None for k in SWEEP_COLUMNS}
    row["value"] = value
    try:
        sc = scenario_from_dict(set_path(doc, param, value))
        traj = integrate(sc)
        rep = check_certificates(traj, tol)
        s = series(traj)
        k = rep.constants
        row.update(D0=k.D0, K=k.K, C=k.C, d_star=k.d_star, sup_dX=float(np.max(s.d_X)),
                   fit_rate=fitted_rate(s.times, s.d_V, 2 * sc.tau_bar), all_pass=rep.passed)
        ref = closed_form_dv(sc, traj.mesh)
        if ref is not None:
            row["dv_error"] = float(np.max(np.abs(s.d_V[traj.n_hist:] - ref)))
        if not rep.passed:
            row["error"] = "failed checks: " + " ".join(rep.failed)
    except (ScenarioError, ConfigError, BlowUpError, ValueError, RuntimeError) as exc:
        row["all_pass"] = False
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return _fmt(v)
    return str(v)


def parse_values(text: str) -> list:
    vals = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            raise ConfigError(f"empty entry in value list {text!r}")
        v = yaml.safe_load(part)
        if isinstance(v, str):
            # YAML 1.1 reads exponent-only literals such as 1e-2 as strings
            try:
                v = float(v)
            except ValueError:
                pass
        vals.append(v)
    return vals


def run_sweep(args) -> int:
    tol = load_tolerances(args.tol_block)
    doc = apply_overrides(load_document(args.scenario), args.dt, args.T, args.stride)
    values = parse_values(args.values)
    set_path(doc, args.param, values[0])  # path check before spawning work
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        values = sorted(values)
    workers = _workers()
    if workers > 1 and len(values) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(sweep_row, [doc] * len(values), [args.param] * len(values),
                                 values, [tol] * len(values)))
    else:
        rows = [sweep_row(doc, args.param, v, tol) for v in values]
    out = Path(args.out)
    atomic_write_rows(out / "sweep.csv", SWEEP_COLUMNS,
                      ([_cell(r[c]) for c in SWEEP_COLUMNS] for r in rows))
    for r in rows:
        flag = "PASS" if r["all_pass"] else "FAIL"
        extra = f"  [{r['error']}]" if r["error"] else ""
        print(f"{flag} {args.param}={r['value']}: C={_show(r['C'])} d_star={_show(r['d_star'])}"
              f" fit_rate={_show(r['fit_rate'])}{extra}")
    print(f"wrote {out / 'sweep.csv'}")
    return EXIT_OK if all(r["all_pass"] for r in rows) else EXIT_FAIL


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def run_selftest(args) -> int:
    """Quick end-to-end sanity run: oracle match, a passing and a failing certificate."""
    ok = True

    def report(name, cond, detail=""):
        nonlocal ok
        ok &= bool(cond)
        print(f"{'PASS' if cond else 'FAIL'} {name}{': ' + detail if detail else ''}")

    sc = scenario_from_dict(apply_overrides(preset_document("closed-form-undelayed"), T=5.0))
    traj = integrate(sc)
    s = series(traj)
    ref = closed_form_dv(sc, traj.mesh)
    err = float(np.max(np.abs(s.d_V[traj.n_hist:] / ref - 1)))
    report("closed-form velocity gap", err <= 1e-6, f"max relative error {err:.2e}")

    flocked = check_certificates(integrate(scenario_from_dict(preset_document("flocked"))))
    report("flocked preset certifies", flocked.passed)

    base = integrate(scenario_from_dict(preset_document("default-delayed")))
    good = check_certificates(base)
    report("default-delayed preset certifies", good.passed)
    bad = check_certificates(corrupt_trajectory(base))
    detected = all(bad.check(k).passed is False and bad.check(k).margin < 0 for k in "bgi")
    report("corrupted trajectory rejected", detected and not bad.passed,
           "failing checks " + ",".join(bad.failed))
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0: {text!r}")
    return v


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {text!r}")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flockcert", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    scen_help = f"scenario YAML file or preset:NAME ({', '.join(sorted(PRESETS))})"

    def common(sp, out_default):
        sp.add_argument("scenario", help=scen_help)
        sp.add_argument("--dt", type=_positive_float, help="override the step size")
        sp.add_argument("--T", type=_positive_float, help="override the horizon")
        sp.add_argument("--stride", type=_positive_int, help="output stride in mesh points")
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("simulate", help="integrate and write trajectory/diagnostics CSV")
    common(sp, "flockcert-out")
    sp.set_defaults(func=run_simulate)

    sp = sub.add_parser("certify", help="check every certificate inequality")
    common(sp, "flockcert-out")
    sp.add_argument("--tol-block", help="YAML file overriding tolerance fields")
    sp.add_argument("--corrupt", action="store_true",
                    help="negative control: multiply velocities by e^t before checking")
    sp.add_argument("--svg", action="store_true", help="also write envelope.svg")
    sp.set_defaults(func=run_certify)

    sp = sub.add_parser("sweep", help="certify over a list of parameter values")
    common(sp, "flockcert-out")
    sp.add_argument("--param", required=True, help="dotted path into the scenario, e.g. tau_bar")
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--tol-block", help="YAML file overriding tolerance fields")
    sp.set_defaults(func=run_sweep)

    sp = sub.add_parser("selftest", help="run built-in sanity checks")
    sp.set_defaults(func=run_selftest)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BlowUpError as exc:
        print(f"blow-up: {exc}; last good time {exc.last_good_time:.17g}", file=sys.stderr)
        return EXIT_BLOWUP
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
