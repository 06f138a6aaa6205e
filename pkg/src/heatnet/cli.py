"""Command-line front end.

    heatnet run SCENARIO [--mode direct|gle|both|analyze-only] [--out DIR] [-v]
    heatnet presets
    heatnet show PRESET

``SCENARIO`` is a YAML file or the name of a bundled preset.  Without
``--out`` artifacts go to the scenario's ``output_dir``, else to
``$HEATNET_OUTPUT_ROOT/<name>``, else to ``./runs/<name>``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import GuardViolation, convergence_report, equilibrium_defect, find_critical_points
from .dynamics import CoupledSystem, FullState, GuardError, IntegratorError, Trajectory, simulate
from .io import sha256_file, write_json
from .kernel import KernelTailError, build_kernel, integrate_gle
from .network import validate_assumptions
from .scenario import PRESETS, Scenario, ScenarioError, parse_scenario, preset_text
from .thermostat import QuadratureError, init_bath

log = logging.getLogger("heatnet")

MODES = ("direct", "gle", "both", "analyze-only")
ENV_OUTPUT_ROOT = "HEATNET_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

TRAJECTORY_FILES = {
    "direct": "trajectory.csv",
    "direct_backward": "trajectory_backward.csv",
    "gle": "trajectory_gle.csv",
}


def build_system(sc: Scenario) -> tuple[CoupledSystem, FullState]:
    sys_ = CoupledSystem(sc.net, sc.grid)
    baths = {t.name: init_bath(sc.bath_inits[t.name], t.coupling, sc.grid) for t in sc.net.thermostats}
    return sys_, FullState(sc.q0.copy(), sc.p0.copy(), baths)


def build_kernels(sc: Scenario) -> dict:
    """One tabulated kernel per distinct coupling, keyed by thermostat name."""
    cache, out = {}, {}
    for t in sc.net.thermostats:
        if t.coupling not in cache:
            cache[t.coupling] = build_kernel(t.coupling, sc.integrator.dt, sc.analysis.kernel_tau_max)
        out[t.name] = cache[t.coupling]
    return out


def write_kernels(path, names, kernels) -> None:
    from .io import fmt

    tau = kernels[names[0]].tau
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["tau"] + [f"w_{n}" for n in names]) + "\n")
        for k in range(len(tau)):
            fh.write(",".join([fmt(tau[k])] + [fmt(kernels[n].w[k]) for n in names]) + "\n")


def resolve_output_dir(sc: Scenario, override=None) -> Path:
    if override:
        return Path(override)
    if sc.output_dir:
        return Path(sc.output_dir)
    return Path(os.environ.get(ENV_OUTPUT_ROOT, "runs")) / sc.name


def analyze(sc: Scenario, out: Path) -> dict:
    """Build ``report.json`` from the trajectory CSVs present in ``out``."""
    sys_, init = build_system(sc)
    Kv = sc.net.vertex_K(sys_.K)
    cs = find_critical_points(sc.net, Kv, box=sc.analysis.box, n_starts=sc.analysis.n_starts, seed=sc.seed)
    assumptions = validate_assumptions(sc.net, Kv, box=sc.analysis.box, seed=sc.seed)
    report = {
        "scenario": sc.name,
        "K": dict(sys_.K),
        "recurrence_horizon": sys_.recurrence,
        "assumptions": assumptions.to_dict(),
        "critical_set": cs.to_dict(),
        "negative_fixture": sc.negative_fixture,
        "warnings": list(sc.warnings),
        "runs": {},
    }
    found = False
    for role, fname in TRAJECTORY_FILES.items():
        path = out / fname
        if not path.exists():
            continue
        found = True
        traj = Trajectory.from_csv(path, sc.net, sys_.recurrence, {"backward": role.endswith("backward")})
        entry = {"samples": len(traj.times), "energy_drift": traj.drift() if np.all(np.isfinite(traj.energy)) else None}
        if len(traj.times) >= 32 and cs.points:
            entry["convergence"] = convergence_report(
                traj, cs, sc.net, sys_.K, tail_fraction=sc.analysis.tail_fraction,
                eps_fraction=sc.analysis.eps_fraction,
            ).to_dict()
        if sc.two_bath() and role == "direct":
            entry["two_bath"] = equilibrium_defect(sys_, init, traj, sc.analysis.truncation, cs).to_dict()
        report["runs"][role] = entry
    if not found:
        raise ScenarioError(f"{out}: no trajectory files to analyze")
    return report


def oracle_diff(direct: Trajectory, gle: Trajectory) -> dict:
    return {
        "horizon": float(direct.times[-1]),
        "sup_abs_dq": float(np.abs(direct.q - gle.q).max()),
        "sup_abs_dp": float(np.abs(direct.p - gle.p).max()),
        "sup_abs_dphi": float(np.abs(direct.coupling_force - gle.coupling_force).max()),
        "sup_abs_dE_bath": float(np.nanmax(np.abs(direct.bath_energy - gle.bath_energy))),
    }


def run(sc: Scenario, mode: str = "direct", out=None) -> int:
    """Run a scenario and write its artifacts; returns the process exit code."""
    if mode not in MODES:
        log.error("unknown mode %r", mode)
        return EXIT_CONFIG
    out = resolve_output_dir(sc, out)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def emit(name, writer):
        path = out / name
        writer(path)
        written.append(path)

    try:
        if mode != "analyze-only":
            sys_, init = build_system(sc)
            trajs = {}
            if mode in ("direct", "both"):
                log.info("direct run: %d steps", sc.integrator.steps)
                trajs["direct"] = simulate(sys_, init, sc.integrator)
                if sc.analysis.backward:
                    trajs["direct_backward"] = simulate(sys_, init, sc.integrator, backward=True)
            if mode in ("gle", "both"):
                log.info("tabulating memory kernels")
                kernels = build_kernels(sc)
                emit("kernel.csv", lambda p: write_kernels(p, sys_.names, kernels))
                trajs["gle"] = integrate_gle(sys_, init, sc.integrator, kernels)
            for role, traj in trajs.items():
                emit(TRAJECTORY_FILES[role], traj.to_csv)
            if mode == "both":
                emit("oracle_diff.json", lambda p: write_json(p, oracle_diff(trajs["direct"], trajs["gle"])))
        report = analyze(sc, out)
        emit("report.json", lambda p: write_json(p, report))
        files = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
        manifest = {
            "scenario": sc.name,
            "mode": mode,
            "config_hash": sc.config_hash(),
            "version": __version__,
            "files": {f: sha256_file(out / f) for f in files},
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        }
        write_json(out / "manifest.json", manifest)
    except (ScenarioError, GuardError) as exc:
        _cleanup(written)
        log.error("%s", exc)
        return EXIT_CONFIG
    except (IntegratorError, KernelTailError, QuadratureError, GuardViolation, FloatingPointError) as exc:
        _cleanup(written)
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    for w in sc.warnings:
        log.warning("%s", w)
    log.info("artifacts in %s", out)
    return EXIT_OK


def _cleanup(paths) -> None:
    for p in paths:
        try:
            p.unlink()
        except FileNotFoundError:
            pass


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="heatnet", description="Oscillator networks coupled to continuum thermostats")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more detail")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario")
    p_run.add_argument("scenario", help="YAML scenario file or bundled preset name")
    p_run.add_argument("--mode", choices=MODES, default="direct")
    p_run.add_argument("--out", help="output directory (overrides scenario and environment)")
    p_run.add_argument("-v", "--verbose", action="count", default=0, dest="verbose_run")
    sub.add_parser("presets", help="list bundled presets")
    p_show = sub.add_parser("show", help="print a bundled preset")
    p_show.add_argument("name")
    args = parser.parse_args(argv)

    level = args.verbose + getattr(args, "verbose_run", 0)
    logging.basicConfig(
        level=logging.WARNING if level == 0 else logging.INFO if level == 1 else logging.DEBUG,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "presets":
        print("\n".join(PRESETS))
        return EXIT_OK
    try:
        if args.command == "show":
            sys.stdout.write(preset_text(args.name))
            return EXIT_OK
        sc = parse_scenario(args.scenario)
    except ScenarioError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    return run(sc, args.mode, args.out)


if __name__ == "__main__":
    sys.exit(main())
