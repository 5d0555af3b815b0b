"""Acceptance criteria 1-11, each printing one PASS/FAIL line before asserting.

Run alone with ``pytest tests/test_acceptance.py -s`` (the lines are printed
even without -s).
"""

import json
import math
import time

import numpy as np
import pytest

from tubewave import cli
from tubewave.asymptotics import (
    compact_convergence,
    compare_growth_models,
    default_eta,
    fit_front_law,
    front_history,
    linear_case_run,
    middle_window_error,
    outer_vanishing,
    simulate,
    superlevel_components,
)
from tubewave.core import CrossSection, Field, Params, TubeGrid
from tubewave.eigen import phi_via_rescaled_flow, phi_via_shooting, profile_agreement
from tubewave.pde import StepControl, stable_dt, step_rescaled
from tubewave.phaseplane import darcy_theory, fast_orbit, isocline_vertex, reconstruct_profile
from tubewave.wavefront import SpeedBracket, critical_speed, sandwich_check

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, seconds):
        with capsys.disabled():
            print(f"\ncriterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f} s]")
        return ok
    return emit


@pytest.fixture(scope="module")
def central(phi4):
    """Criterion 5/6 inputs: the j = 16 wave at h = 1/32 and a p = 4 run at h = 1/16."""
    t0 = time.perf_counter()
    fine = phi_via_rescaled_flow(CrossSection(1.0, 33), Params(4.0))
    wave = critical_speed(16.0, fine, tol_c=1e-3)
    t_wave = time.perf_counter() - t0
    grid = TubeGrid.symmetric(phi4.cross_section, 8.0)
    run = simulate(Params(4.0), grid, 40.0, 0.25, init="bump", phi=phi4)
    hist = front_history(run.snapshots, default_eta(phi4))
    plus = fit_front_law(hist, 0.5, "plus")
    minus = fit_front_law(hist, 0.5, "minus")
    return {"wave": wave, "run": run, "hist": hist, "plus": plus, "minus": minus,
            "t_wave": t_wave, "seconds": time.perf_counter() - t0}


def test_criterion_01_vertex(report):
    t0 = time.perf_counter()
    cases = {(4.0, 1.0): (0.918559, 0.472470), (3.0, 2.0): (1.185185, 1.088662)}
    errs = []
    for (p, c), ref in cases.items():
        got = isocline_vertex(c, Params(p))
        errs += [abs(g - r) / r for g, r in zip(got, ref)]
    dt = time.perf_counter() - t0
    ok = max(errs) < 1e-6 and dt < 1.0
    report(1, ok, f"max rel error {max(errs):.2e}", dt)
    assert ok


def test_criterion_02_mc_bound_monotone(report):
    t0 = time.perf_counter()
    margins, mono = [], True
    for p in (3.0, 4.0):
        ms = []
        for c in (0.5, 1.0, 2.0, 4.0):
            o = fast_orbit(c, Params(p))
            margins.append(o.M_c - o.vertex[0])
            ms.append(o.M_c)
        mono &= all(a <= b for a, b in zip(ms, ms[1:]))
    dt = time.perf_counter() - t0
    ok = min(margins) >= -1e-9 and mono and dt < 10.0
    report(2, ok, f"min M_c - X_c = {min(margins):.4g}, monotone = {mono}", dt)
    assert ok


def test_criterion_03_darcy(report):
    t0 = time.perf_counter()
    errs = []
    for p, c in ((4.0, 1.0), (3.0, 2.0)):
        params = Params(p)
        orb = reconstruct_profile(fast_orbit(c, params), params)
        errs.append(abs(orb.darcy_slope / darcy_theory(c, params) - 1.0))
    dt = time.perf_counter() - t0
    ok = max(errs) <= 0.02 and dt < 10.0
    report(3, ok, f"Darcy slope rel errors {errs[0]:.2e}, {errs[1]:.2e}", dt)
    assert ok


def test_criterion_04_eigen_oracles(report):
    t0 = time.perf_counter()
    agree, resid = [], []
    for p in (3.0, 4.0):
        for L in (1.0, 2.0):
            sec = CrossSection(L, 129)
            a = phi_via_rescaled_flow(sec, Params(p))
            b = phi_via_shooting(sec, Params(p))
            agree.append(profile_agreement(a, b))
            resid += [a.residual_sup / a.sup, b.residual_sup / b.sup]
    dt = time.perf_counter() - t0
    ok = max(agree) < 0.01 and max(resid) < 1e-5 and dt < 60.0
    report(4, ok, f"max disagreement {max(agree):.2e}, max residual/sup {max(resid):.2e}", dt)
    assert ok


def test_criterion_05_central_cross_validation(central, report):
    c_star = central["wave"].c_star
    sp, sm = central["plus"].slope, -central["minus"].slope
    gap = abs(c_star - sp) / sp
    sym = abs(sp - sm) / sp
    ok = gap <= 0.10 and sym <= 0.10 and central["seconds"] <= 900.0
    report(5, ok, f"c* = {c_star:.5f} (j=16, h=1/32), slope s+ = {sp:.5f}, s- = {sm:.5f}, "
                  f"gap {gap:.1%}, symmetry {sym:.1%}", central["seconds"])
    assert ok


def test_criterion_06_windows(central, phi4, report):
    t0 = time.perf_counter()
    snaps = central["run"].snapshots
    slope = central["plus"].slope
    eta = default_eta(phi4)
    cc = compact_convergence(snaps, phi4, 0.5 * slope)
    ov, tau_c = outer_vanishing(snaps, 1.2 * slope, eta)
    neg_cc = compact_convergence(snaps, phi4, 1.5 * slope).passes(0.05 * phi4.sup)
    neg_ov, _ = outer_vanishing(snaps, 0.8 * slope, eta)
    dt = time.perf_counter() - t0
    ok = (cc.final_error < 0.05 * phi4.sup and ov and math.isfinite(tau_c)
          and not neg_cc and not neg_ov)
    report(6, ok, f"compact error {cc.final_error / phi4.sup:.2e} sup Phi, tau_c = {tau_c}, "
                  f"negative controls fail = {not neg_cc and not neg_ov}", dt)
    assert ok


def test_criterion_07_monotonicity(bump_run, phi4, rng, report):
    t0 = time.perf_counter()
    vals = np.array([s.values for s in bump_run.snapshots])
    min_dtau = float(np.min(np.diff(vals, axis=0)))
    bound_ok = vals.max() <= max(vals[0].max(), phi4.sup) * (1 + 1e-6)
    params, ctl = Params(4.0), StepControl()
    g = TubeGrid.symmetric(CrossSection(1.0, 9), 0.5)
    Y, Z = np.meshgrid(g.y, g.z, indexing="ij")
    base = 0.2 * np.sin(np.pi * Z) * np.cos(0.5 * np.pi * Y / g.y_max) ** 2
    base[[0, -1]] = 0.0
    base[:, [0, -1]] = 0.0
    ordered = True
    for _ in range(20):
        lo = base * rng.random(g.shape)
        a, b = Field(g, lo), Field(g, lo + base * rng.random(g.shape))
        for _ in range(10):
            dt = min(stable_dt(a, params, ctl), stable_dt(b, params, ctl))
            a, b = step_rescaled(a, params, ctl, dt), step_rescaled(b, params, ctl, dt)
            ordered &= bool(np.all(a.values <= b.values + 1e-15))
    dt = time.perf_counter() - t0
    ok = min_dtau >= -1e-9 and bound_ok and ordered and dt < 120.0
    report(7, ok, f"min d_tau v {min_dtau:.2e}, sup bound {bound_ok}, comparison {ordered}", dt)
    assert ok


def test_criterion_08_uniqueness_sandwich(phi4, report):
    t0 = time.perf_counter()
    w1 = critical_speed(8.0, phi4)
    w2 = critical_speed(8.0, phi4, bracket=SpeedBracket(0.07, 0.3), anchor_fraction=0.25)
    l1, l2 = sandwich_check(w1.profile, w2.profile, inlet=phi4.values)
    dy = w1.profile.grid.dy
    dt = time.perf_counter() - t0
    ok = l2 - l1 <= 4 * dy + 1e-12 and dt < 600.0
    report(8, ok, f"l1 = {l1:.4f}, l2 = {l2:.4f}, l2 - l1 = {(l2 - l1) / dy:.0f} dy", dt)
    assert ok


def test_criterion_09_speed_monotone_in_domain(tmp_path, report):
    t0 = time.perf_counter()
    spec = tmp_path / "jobs.txt"
    spec.write_text("".join(f"wave p=4 length={L} truncation=8\n" for L in (1.0, 1.5, 2.0)))
    code = cli.run(["sweep", "--spec", str(spec), "--out", str(tmp_path / "sweep")])
    speeds = [json.loads((tmp_path / "sweep" / f"job-{n:03d}" / "manifest.json").read_text())
              ["derived_numbers"]["c_star"] for n in range(3)]
    dt = time.perf_counter() - t0
    ok = code == 0 and all(a <= b + 1e-3 for a, b in zip(speeds, speeds[1:])) and dt < 1800.0
    report(9, ok, "c*(L = 1, 1.5, 2) = " + ", ".join(f"{c:.5f}" for c in speeds), dt)
    assert ok


def test_criterion_10_linear_contrast(bump_run, phi4, report):
    t0 = time.perf_counter()
    rep = linear_case_run(CrossSection(1.0, 17))
    hist = front_history(bump_run.snapshots, default_eta(phi4))
    tail = hist.taus >= 0.5 * hist.taus[-1]
    best_p4, _ = compare_growth_models(np.exp(hist.taus[tail]), hist.s_plus[tail, hist.mid_index])
    dt = time.perf_counter() - t0
    ok = (rep.fit.r_squared > 0.99 and rep.decay_rel_error < 0.05
          and rep.preferred_model == "sqrt_in_t" and best_p4 == "linear_in_log_t" and dt < 300.0)
    report(10, ok, f"sqrt fit r2 {rep.fit.r_squared:.5f}, decay error {rep.decay_rel_error:.2%}, "
                   f"p=2 prefers {rep.preferred_model}, p=4 prefers {best_p4}", dt)
    assert ok


def test_criterion_11_two_bumps(phi4, report):
    t0 = time.perf_counter()
    grid = TubeGrid.symmetric(phi4.cross_section, 6.0)
    run = simulate(Params(4.0), grid, 20.0, 1.0, init="two-bumps", phi=phi4)
    eta = default_eta(phi4)
    start = superlevel_components(run.snapshots[0], eta)
    end = superlevel_components(run.final, eta)
    err = middle_window_error(run.final, phi4, 0.5)
    dt = time.perf_counter() - t0
    ok = start == 2 and end == 1 and err < 0.05 and dt < 600.0
    report(11, ok, f"components {start} -> {end}, middle-window error {err:.2e} sup Phi", dt)
    assert ok
