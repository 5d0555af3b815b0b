"""Command-line entry point: ``tubewave <command> [options]``.

Every run writes its files under ``--out`` (default ./out/<command>-<timestamp>)
together with manifest.json, which lists every file written and the derived
numbers.  Options may also come from ``--config`` (flat ``key = value`` lines,
keys named like the long flags); flags given on the command line win.

Exit codes: 0 success, 1 numerical failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import shlex
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import (
    DEFAULT_ETA_FRACTION,
    INIT_KINDS,
    compact_convergence,
    compare_growth_models,
    contact_profile,
    fit_front_law,
    front_history,
    linear_case_run,
    outer_vanishing,
    simulate,
    superlevel_components,
)
from .core import CrossSection, Params, TubeGrid, field_from_csv, field_to_csv
from .eigen import StationaryProfile, phi_via_rescaled_flow, phi_via_shooting, profile_agreement
from .pde import SteadyStateCriterion
from .phaseplane import ORBIT_TOL, darcy_theory, fast_orbit, reconstruct_profile
from .wavefront import DEFAULT_TOL_C, critical_speed, refine_truncation

COMMANDS = ("eigen", "phaseplane", "wave", "simulate", "frontfit", "linear", "sweep")
DEFAULT_DZ = 1.0 / 16


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


@dataclass
class RunManifest:
    command: str
    parameters: dict
    git_or_version: str
    wall_time: float = 0.0
    outputs: list = dc_field(default_factory=list)
    derived_numbers: dict = dc_field(default_factory=dict)

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(_jsonable(asdict(self)), indent=2))
        return path


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, Path):
        return str(x)
    return x


# ---------------------------------------------------------------------------
# argument handling


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _build_parser():
    parser = argparse.ArgumentParser(prog="tubewave", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    defaults = {}

    def add(name, help_text, **dflt):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="flat key = value file; flags override it")
        sp.add_argument("--out", help="output directory")
        defaults[name] = {"out": None, **dflt}
        return sp

    sp = add("eigen", "cross-sectional profile Phi by flow and/or shooting",
             p=4.0, length=1.0, dz=DEFAULT_DZ, method="both")
    sp.add_argument("--p", type=float)
    sp.add_argument("--length", type=_positive)
    sp.add_argument("--dz", type=_positive)
    sp.add_argument("--method", choices=("flow", "shooting", "both"))

    sp = add("phaseplane", "Neumann wave orbits and their profiles", p=4.0, c=[1.0], tol=ORBIT_TOL)
    sp.add_argument("--p", type=float)
    sp.add_argument("--c", type=_positive, action="append")
    sp.add_argument("--tol", type=_positive)

    sp = add("wave", "Dirichlet travelling wave and its critical speed",
             p=4.0, length=1.0, dz=DEFAULT_DZ, truncation=[4.0, 8.0, 16.0], tol_c=DEFAULT_TOL_C,
             residual_tol=1e-7)
    sp.add_argument("--p", type=float)
    sp.add_argument("--length", type=_positive)
    sp.add_argument("--dz", type=_positive)
    sp.add_argument("--truncation", type=_positive, action="append")
    sp.add_argument("--tol-c", type=_positive)
    sp.add_argument("--residual-tol", type=_positive)

    sp = add("simulate", "direct simulation of the renormalized problem",
             p=4.0, length=1.0, dz=DEFAULT_DZ, tube_halfwidth=8.0, tau_final=40.0,
             snapshot_every=0.25, init="bump", amplitude=None, truncation=8.0, shift=2.0)
    sp.add_argument("--p", type=float)
    sp.add_argument("--length", type=_positive)
    sp.add_argument("--dz", type=_positive)
    sp.add_argument("--tube-halfwidth", type=_positive)
    sp.add_argument("--tau-final", type=_positive)
    sp.add_argument("--snapshot-every", type=_positive)
    sp.add_argument("--init", choices=INIT_KINDS)
    sp.add_argument("--amplitude", type=_positive)
    sp.add_argument("--truncation", type=_positive, help="wave truncation for --init sandwich")
    sp.add_argument("--shift", type=float, help="wave shift for --init sandwich")

    sp = add("frontfit", "front extraction and front-law fit on a simulate directory",
             snapshots=None, eta_fraction=DEFAULT_ETA_FRACTION, tail_fraction=0.5)
    sp.add_argument("--snapshots", help="output directory of a simulate run")
    sp.add_argument("--eta-fraction", type=_positive)
    sp.add_argument("--tail-fraction", type=_positive)

    sp = add("linear", "p = 2 contrast: square-root level sets and eigenvalue decay",
             length=1.0, dz=DEFAULT_DZ, tube_halfwidth=6.0, t_final=1.0, compare=None)
    sp.add_argument("--length", type=_positive)
    sp.add_argument("--dz", type=_positive)
    sp.add_argument("--tube-halfwidth", type=_positive)
    sp.add_argument("--t-final", type=_positive)
    sp.add_argument("--compare", help="simulate directory of a p > 2 run for the model comparison")

    sp = add("sweep", "run a list of jobs and index their derived numbers", spec=None, workers=1)
    sp.add_argument("--spec", help="one job per line: <command> key=value ...")
    sp.add_argument("--workers", type=int)
    return parser, sub, defaults


def read_config(path):
    """Flat ``key = value`` file; '#' starts a comment; keys may use - or _."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _convert(action, text):
    conv = action.type or str
    try:
        if isinstance(action, argparse._AppendAction):
            return [conv(s.strip()) for s in str(text).split(",") if s.strip()]
        value = conv(str(text).strip())
    except (ValueError, TypeError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"config value {text!r} for {action.dest} has the wrong type: {exc}")
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"config value {text!r} for {action.dest} not in {list(action.choices)}")
    return value


def resolve_options(argv):
    """Parse argv; returns (command, options dict).  Raises SystemExit(2) on usage errors."""
    parser, sub, defaults = _build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        raise SystemExit(2)
    ns = parser.parse_args(argv)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        raise SystemExit(2)
    subparser = sub.choices[ns.command]
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    opts = dict(defaults[ns.command])
    if ns.config:
        try:
            cfg = read_config(ns.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}")
        for key, text in cfg.items():
            if key not in actions:
                raise UsageError(f"unknown config key {key!r} for {ns.command}")
            opts[key] = _convert(actions[key], text)
    for dest in actions:
        value = getattr(ns, dest)
        if value is not None:
            opts[dest] = value
    return ns.command, opts


def _out_dir(command, out):
    if out is None:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        out = Path("out") / f"{command}-{stamp}"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _section(length, dz):
    n = int(round(length / dz)) + 1
    if n % 2 == 0:
        n += 1  # keep a node at the midpoint
    return CrossSection(float(length), n)


# ---------------------------------------------------------------------------
# commands; each returns (outputs, derived_numbers)


def cmd_eigen(opts, out):
    params = Params(opts["p"])
    section = _section(opts["length"], opts["dz"])
    method = opts["method"]
    outputs, derived = [], {"n_z": section.n_z}
    profiles = {}
    if method in ("flow", "both"):
        profiles["flow"] = phi_via_rescaled_flow(section, params)
    if method in ("shooting", "both"):
        profiles["shooting"] = phi_via_shooting(section, params)
    for tag, prof in profiles.items():
        outputs += prof.save(out / f"phi_{tag}")
        derived[f"sup_{tag}"] = prof.sup
        derived[f"residual_sup_{tag}"] = prof.residual_sup
        if prof.slope is not None:
            derived[f"wall_slope_{tag}"] = prof.slope
    if len(profiles) == 2:
        derived["agreement"] = profile_agreement(profiles["flow"], profiles["shooting"])
    return outputs, derived


def cmd_phaseplane(opts, out):
    params = Params(opts["p"])
    cs = opts["c"]
    outputs, derived = [], {}
    for c in cs:
        orbit = reconstruct_profile(fast_orbit(c, params, opts["tol"]), params)
        suffix = "" if len(cs) == 1 else f"(c={c:g})"
        outputs += orbit.to_csv(out / f"orbit_c{c:g}")
        derived.update({
            f"M_c{suffix}": orbit.M_c,
            f"X_c{suffix}": orbit.vertex[0],
            f"Z_c{suffix}": orbit.vertex[1],
            f"xi0{suffix}": orbit.xi0,
            f"darcy_slope{suffix}": orbit.darcy_slope,
            f"darcy_theory{suffix}": darcy_theory(c, params),
            f"launch_residual{suffix}": orbit.launch_residual,
        })
    return outputs, derived


def cmd_wave(opts, out):
    params = Params(opts["p"])
    section = _section(opts["length"], opts["dz"])
    phi = phi_via_rescaled_flow(section, params)
    outputs = phi.save(out / "phi")
    criterion = SteadyStateCriterion(opts["residual_tol"])
    js = sorted(opts["truncation"])
    if len(js) == 1:
        res = critical_speed(js[0], phi, tol_c=opts["tol_c"], criterion=criterion)
        c_ext, per_j, report = res.c_star, [res], {"refined": False, "converged": False,
                                                    "increments": []}
    else:
        c_ext, per_j, report = refine_truncation(js, phi, opts["tol_c"], criterion=criterion)
    derived = {"c_star": c_ext, "refined": report["refined"],
               "converged": report["converged"], "n_z": section.n_z}
    for res in per_j:
        outputs += res.save(out, stem=f"wave_j{res.j:g}")
        derived[f"c_star(j={res.j:g})"] = res.c_star
        derived[f"c_anchor(j={res.j:g})"] = res.c_anchor
    for a, b in zip(js, js[1:]):
        derived[f"increment(j={a:g}->{b:g})"] = report["increments"][js.index(a)]
    return outputs, derived


def cmd_simulate(opts, out):
    params = Params(opts["p"])
    section = _section(opts["length"], opts["dz"])
    grid = TubeGrid.symmetric(section, opts["tube_halfwidth"])
    phi = phi_via_rescaled_flow(section, params)
    outputs = phi.save(out / "phi")
    init_opts = {} if opts["amplitude"] is None else {"amplitude": opts["amplitude"]}
    wave = None
    if opts["init"] == "sandwich":
        wave = critical_speed(opts["truncation"], phi)
        outputs += wave.save(out, stem="wave")
    run = simulate(params, grid, opts["tau_final"], opts["snapshot_every"], init=opts["init"],
                   phi=phi, wave=wave, shift=opts["shift"], **init_opts)
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    for n, s in enumerate(run.snapshots):
        path = snap_dir / f"v_{n:05d}.csv"
        field_to_csv(s, path)
        outputs.append(path)
    eta = DEFAULT_ETA_FRACTION * phi.sup
    final = run.final
    derived = {
        "snapshots": len(run.snapshots),
        "final_sup": final.sup,
        "phi_sup": phi.sup,
        "final_components": superlevel_components(final, eta),
    }
    if wave is not None:
        derived["wave_c_star"] = wave.c_star
    return outputs, derived


def _load_run(directory):
    directory = Path(directory)
    man = json.loads((directory / "manifest.json").read_text())
    params = Params(float(man["parameters"]["p"]))
    phi_field = field_from_csv(directory / "phi.csv")
    side = json.loads((directory / "phi.json").read_text())
    phi = StationaryProfile(phi_field.grid, params, phi_field.values, side["residual_sup"],
                            side["method_tag"])
    snaps = [field_from_csv(f) for f in sorted((directory / "snapshots").glob("v_*.csv"))]
    if not snaps:
        raise UsageError(f"no snapshots under {directory}")
    return params, phi, snaps


def cmd_frontfit(opts, out):
    if not opts["snapshots"]:
        raise UsageError("frontfit needs --snapshots <simulate directory>")
    _, phi, snaps = _load_run(opts["snapshots"])
    eta = opts["eta_fraction"] * phi.sup
    hist = front_history(snaps, eta)
    half = front_history(snaps[-1:], 0.5 * eta)
    plus = fit_front_law(hist, opts["tail_fraction"], "plus")
    minus = fit_front_law(hist, opts["tail_fraction"], "minus")
    slope = plus.slope
    cc = compact_convergence(snaps, phi, 0.5 * slope)
    ov, tau_c = outer_vanishing(snaps, 1.2 * slope, eta)
    tail = hist.taus >= hist.taus[-1] * (1 - opts["tail_fraction"])
    best, _ = compare_growth_models(np.exp(hist.taus[tail]), hist.s_plus[tail, hist.mid_index])
    outputs = [hist.to_csv(out / "fronts.csv")]
    contact_profile(snaps, eta, path=out / "contact_profile.csv")
    outputs.append(out / "contact_profile.csv")
    k = hist.mid_index
    derived = {
        "slope_plus": plus.slope, "intercept_plus": plus.intercept, "r2_plus": plus.r_squared,
        "slope_minus": minus.slope, "r2_minus": minus.r_squared,
        "waiting_time": hist.waiting_time(),
        "eta": eta,
        "halving_shift": float(half.s_plus[0, k] - hist.s_plus[-1, k]),
        "compact_error_half_slope": cc.final_error / phi.sup,
        "compact_pass_half_slope": cc.passes(0.05 * phi.sup),
        "outer_vanishing_1p2_slope": ov,
        "tau_c_1p2_slope": tau_c,
        "preferred_model": best,
    }
    return outputs, derived


def cmd_linear(opts, out):
    section = _section(opts["length"], opts["dz"])
    rep = linear_case_run(section, opts["tube_halfwidth"], opts["t_final"])
    outputs = [out / "level_set.csv"]
    np.savetxt(outputs[0], np.column_stack([rep.times, rep.positions]), delimiter=",",
               fmt="%.15e", header="t,y_level", comments="# ")
    derived = rep.derived()
    if opts["compare"]:
        _, phi, snaps = _load_run(opts["compare"])
        hist = front_history(snaps, DEFAULT_ETA_FRACTION * phi.sup)
        tail = hist.taus >= 0.5 * hist.taus[-1]
        best, fits = compare_growth_models(np.exp(hist.taus[tail]),
                                           hist.s_plus[tail, hist.mid_index])
        derived["compare_preferred_model"] = best
        derived.update({f"compare_r2_{k}": f.r_squared for k, f in fits.items()})
    return outputs, derived


def _parse_job(line):
    words = shlex.split(line)
    if not words or words[0] not in COMMANDS or words[0] == "sweep":
        raise UsageError(f"bad sweep line: {line!r}")
    argv = [words[0]]
    for w in words[1:]:
        if "=" not in w:
            raise UsageError(f"bad sweep token {w!r}; expected key=value")
        key, value = w.split("=", 1)
        flag = "--" + key.replace("_", "-")
        values = value.split(",")
        if key in ("c", "truncation"):
            for v in values:
                argv += [flag, v]
        else:
            argv += [flag, value]
    return argv


def _run_job(argv):
    code = run(argv)
    man_path = Path(argv[argv.index("--out") + 1]) / "manifest.json"
    derived = json.loads(man_path.read_text())["derived_numbers"] if man_path.exists() else {}
    return code, derived


def cmd_sweep(opts, out):
    if not opts["spec"]:
        raise UsageError("sweep needs --spec <file>")
    try:
        lines = [ln.split("#", 1)[0].strip() for ln in Path(opts["spec"]).read_text().splitlines()]
    except OSError as exc:
        raise UsageError(f"cannot read spec: {exc}")
    jobs = [_parse_job(ln) for ln in lines if ln]
    argvs = [job + ["--out", str(out / f"job-{n:03d}")] for n, job in enumerate(jobs)]
    workers = max(1, int(opts["workers"]))
    if workers == 1 or len(argvs) <= 1:
        results = [_run_job(a) for a in argvs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_job, argvs))
    keys = sorted({k for _, d in results for k in d})
    index = out / "index.csv"
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["job", "command", "status", "args"] + keys)
        for n, ((code, d), job) in enumerate(zip(results, jobs)):
            status = "ok" if code == 0 else f"failed({code})"
            w.writerow([n, job[0], status, " ".join(job[1:])] + [d.get(k, "") for k in keys])
    failed = sum(1 for code, _ in results if code != 0)
    derived = {"jobs": len(jobs), "failed": failed}
    return [index], derived


HANDLERS = {
    "eigen": cmd_eigen,
    "phaseplane": cmd_phaseplane,
    "wave": cmd_wave,
    "simulate": cmd_simulate,
    "frontfit": cmd_frontfit,
    "linear": cmd_linear,
    "sweep": cmd_sweep,
}


def run(argv):
    """Execute one command; returns the exit code."""
    try:
        command, opts = resolve_options(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"tubewave: {exc}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    try:
        out = _out_dir(command, opts.get("out"))
        outputs, derived = HANDLERS[command](opts, out)
    except UsageError as exc:
        print(f"tubewave: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"tubewave: invalid input: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"tubewave: numerical failure: {exc}", file=sys.stderr)
        return 1
    params = {k: v for k, v in opts.items() if k != "out"}
    manifest = RunManifest(
        command=command, parameters=params, git_or_version=__version__,
        wall_time=time.perf_counter() - t0,
        outputs=sorted(str(Path(p).relative_to(out)) for p in outputs),
        derived_numbers=derived,
    )
    manifest.write(out)
    print(json.dumps(_jsonable(derived), indent=2))
    if command == "sweep" and derived["failed"]:
        return 1
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
