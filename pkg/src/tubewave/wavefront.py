"""Dirichlet travelling waves on the truncated tube and their critical speed.

For a speed c the moving-frame problem is marched from w = 0 to its steady
state phi_{j,c}.  Starting from zero the iterates increase in tau, so the
centre value can only grow: once it exceeds Phi(z_mid)/2 the speed is known
to be subcritical and the run stops early.  Bisection on c brackets the speed
c_{j*} at which the centre value equals Phi(z_mid)/2.  The transition is
sharp in j, so the normalized wave itself is computed by a pinned solve in
which c is an unknown and the centre value is held at Phi(z_mid)/2.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from .core import Field, field_to_csv
from .pde import (
    BandedJacobian,
    MovingFrameProblem,
    SteadyStateCriterion,
    StepControl,
    evolve_to_steady,
    moving_frame_residual,
    steady_checks,
    upwind_drift,
)

DEFAULT_TOL_C = 1e-3
DEFAULT_C_LO = 0.05
HIGH_CUTOFF = 0.05  # c_hi must push the centre value below this fraction of Phi
CERT_MARGIN = 1e-6  # speeds this close to the pinned speed get no certificate seed


class BracketError(RuntimeError):
    """The supplied speeds do not straddle the normalization."""


class UniquenessViolation(RuntimeError):
    """No pair of shifts sandwiches one wave between translates of the other."""


@dataclass(frozen=True)
class SpeedBracket:
    c_lo: float
    c_hi: float
    center_lo: float = math.nan
    center_hi: float = math.nan

    def check(self, half):
        if not self.c_lo < self.c_hi:
            raise BracketError(f"c_lo={self.c_lo} must be below c_hi={self.c_hi}")
        if not (self.center_lo > half > self.center_hi):
            raise BracketError(
                f"bracket does not straddle the anchor level {half:.6g}: "
                f"center({self.c_lo:.6g})={self.center_lo:.6g}, "
                f"center({self.c_hi:.6g})={self.center_hi:.6g}")


@dataclass(eq=False)
class WaveResult:
    """Normalized travelling wave at truncation j with its speed estimate."""

    params: object
    cross_section: object
    j: float
    c_star: float
    profile: Field
    anchor: tuple
    bracket: tuple
    c_anchor: float = math.nan
    trace: list = dc_field(default_factory=list)
    direction: int = 1
    monotone_centers: bool = True
    checks: dict = dc_field(default_factory=dict)
    wall_time: float = 0.0

    def derived(self):
        return {
            "p": self.params.p,
            "L": self.cross_section.length,
            "j": self.j,
            "c_star": self.c_star,
            "c_anchor": self.c_anchor,
            "c_lo": self.bracket[0],
            "c_hi": self.bracket[1],
            "anchor_value": self.anchor[2],
            "monotone_centers": self.monotone_centers,
            "direction": self.direction,
            **{k: bool(v) for k, v in self.checks.items()},
        }

    def save(self, out_dir, stem="wave"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        prof = out / f"{stem}_profile.csv"
        trace = out / f"{stem}_bisection.csv"
        manifest = out / f"{stem}_result.json"
        field_to_csv(self.profile, prof)
        rows = np.array([[t["c"], t["center"], float(t["early"])] for t in self.trace]) \
            if self.trace else np.zeros((0, 3))
        np.savetxt(trace, rows, delimiter=",", fmt="%.15e", header="c,center_value,early_exit",
                   comments="# ")
        manifest.write_text(json.dumps({**self.derived(), "trace": self.trace}, indent=2))
        return [prof, trace, manifest]


def center_index(grid):
    k = grid.index_of_y(0.0)
    if k is None:
        raise ValueError("grid has no node at xi = 0")
    return k, grid.cross_section.mid_index


def center_value(profile):
    """phi at the section midpoint and xi = 0."""
    i, k = center_index(profile.grid)
    return float(profile.values[i, k])


def _problem(phi, c, j, direction=1):
    return MovingFrameProblem.build(phi.params, phi, c, j, direction)


def steady_profile_for_speed(c, j, phi, control=StepControl(), criterion=SteadyStateCriterion(),
                             method="implicit", direction=1):
    """phi_{j,c}: steady state of the moving-frame problem started from zero."""
    res = evolve_to_steady(_problem(phi, c, j, direction), criterion, control, method)
    if not res.converged:
        raise RuntimeError(f"no steady state at c={c}: residual {res.residual:.3e} "
                           f"after {res.steps} steps")
    return res.field


class _Prober:
    """Evaluates centre values, deciding early where monotonicity allows.

    Runs start from the maximum of earlier subsolutions at speeds c' >= c.
    Once a steady state w_a with centre value exactly at the anchor is known at
    speed c_a (``certificate``), it seeds every later run: for c < c_a it is a
    subsolution below phi_{j,c}, for c > c_a a supersolution above it, so the
    first crossing of the anchor level decides the comparison.
    """

    def __init__(self, phi, j, control, criterion, direction, anchor_fraction=0.5):
        self.phi = phi
        self.j = j
        self.control = control
        self.criterion = criterion
        self.direction = direction
        self.half = anchor_fraction * phi.mid_value
        self.trace = []
        self.crossing = {}
        self.subsolutions = {}
        self.certificate = None

    def _certified(self, c):
        return self.certificate is not None and abs(c - self.certificate[1]) > CERT_MARGIN

    def _seed(self, c):
        # iterates from below at c' >= c that decrease in xi are subsolutions at c,
        # and so is their maximum
        above = [w for k, w in self.subsolutions.items() if k >= c]
        if self._certified(c) and c < self.certificate[1]:
            above.append(self.certificate[0])
        return np.maximum.reduce(above) if above else None

    def __call__(self, c):
        prob = _problem(self.phi, c, self.j, self.direction)
        i, k = center_index(prob.grid)
        half = self.half
        from_above = self._certified(c) and c > self.certificate[1]
        seen = {}

        def stop(w):
            if from_above:
                return w[i, k] < half
            if w[i, k] > half:
                seen["w"] = w.copy()
                return True
            return False

        t0 = time.perf_counter()
        seed = self.certificate[0] if from_above else self._seed(c)
        initial = None if seed is None else Field(prob.grid, seed, 0.0)
        res = evolve_to_steady(prob, self.criterion, self.control, initial=initial,
                               stop_when=stop)
        center = float(res.field.values[i, k])
        if not (res.converged or res.stopped_early):
            raise RuntimeError(f"no steady state at c={c}: residual {res.residual:.3e}")
        if "w" in seen:
            self.crossing[c] = seen["w"]
        w = res.field.values
        if not from_above and steady_checks(w, prob.inlet, self.direction)["monotone_in_xi"]:
            self.subsolutions[float(c)] = w.copy()
        self.trace.append({"c": float(c), "center": center, "early": bool(res.stopped_early),
                           "seed": "above" if from_above else ("below" if seed is not None else "zero"),
                           "steps": res.steps, "tau": res.tau,
                           "seconds": time.perf_counter() - t0})
        return center


def find_bracket(j, phi, control=StepControl(), criterion=SteadyStateCriterion(),
                 c_lo=DEFAULT_C_LO, direction=1, max_doublings=12, _prober=None):
    """Bracket with lower end c_lo; the upper speed doubles from 2 c_lo until the
    centre value drops below HIGH_CUTOFF * Phi(z_mid).

    c_lo is probed last so that it can start from the iterates of the faster runs.
    """
    probe = _prober or _Prober(phi, j, control, criterion, direction)
    cut = HIGH_CUTOFF * phi.mid_value
    seen = []
    c = c_lo
    for _ in range(max_doublings + 1):
        c *= 2.0
        seen.append((c, probe(c)))
        if seen[-1][1] < cut:
            break
    else:
        raise BracketError("doubling did not reach a speed with a vanishing centre value")
    center_lo = probe(c_lo)
    if not center_lo > probe.half:
        raise BracketError(f"centre value {center_lo:.6g} at c_lo={c_lo} is not above the anchor level {probe.half:.6g}")
    seen.append((c_lo, center_lo))
    lo, center_lo = max((s for s in seen if s[1] > probe.half), key=lambda s: s[0])
    hi, center_hi = min((s for s in seen if s[1] <= probe.half), key=lambda s: s[0])
    return SpeedBracket(lo, hi, center_lo, center_hi)


def critical_speed(j, phi, bracket=None, tol_c=DEFAULT_TOL_C, control=StepControl(),
                   criterion=SteadyStateCriterion(), direction=1, anchor=True,
                   anchor_fraction=0.5, warm=True):
    """Bisect on c until the bracket is narrower than tol_c.

    The normalization is phi(z_mid, 0) = anchor_fraction * Phi(z_mid); other
    fractions give translates of the same wave in the long-tube limit.  With
    ``warm`` the pinned wave is solved right after bracketing and certifies the
    bisection runs (see _Prober); otherwise every run starts below, from zero
    or from earlier iterates.
    """
    if not 0 < anchor_fraction < 1:
        raise ValueError("anchor_fraction must lie in (0, 1)")
    t0 = time.perf_counter()
    probe = _Prober(phi, j, control, criterion, direction, anchor_fraction)
    if bracket is None:
        bracket = find_bracket(j, phi, control, criterion, direction=direction, _prober=probe)
    else:
        # re-verify supplied endpoints
        bracket = SpeedBracket(bracket.c_lo, bracket.c_hi, probe(bracket.c_lo), probe(bracket.c_hi))
    bracket.check(probe.half)
    lo, hi = bracket.c_lo, bracket.c_hi
    pinned = None
    if anchor and warm:
        pinned = _pinned(probe, lo)
        inlet = _problem(phi, lo, j, direction).inlet
        if lo < pinned[1] < hi and steady_checks(pinned[0], inlet, direction)["monotone_in_xi"]:
            probe.certificate = pinned
    while hi - lo >= tol_c:
        mid = 0.5 * (lo + hi)
        if probe(mid) > probe.half:
            lo = mid
        else:
            hi = mid
    c_star = 0.5 * (lo + hi)
    # converged centre values must not increase with c
    done = sorted((t["c"], t["center"]) for t in probe.trace if not t["early"])
    monotone = all(b[1] <= a[1] + 1e-6 for a, b in zip(done, done[1:]))
    prob = _problem(phi, c_star, j, direction)
    if anchor:
        w, c_anchor = pinned if pinned is not None else _pinned(probe, lo)
    else:
        w = evolve_to_steady(prob, criterion, control).field.values
        c_anchor = math.nan
    profile = Field(prob.grid, w, 0.0)
    return WaveResult(
        params=phi.params, cross_section=phi.cross_section, j=float(j), c_star=float(c_star),
        profile=profile, anchor=(phi.cross_section.length / 2, 0.0, probe.half),
        bracket=(float(lo), float(hi)), c_anchor=float(c_anchor), trace=probe.trace,
        direction=direction, monotone_centers=monotone,
        checks=steady_checks(w, prob.inlet, direction), wall_time=time.perf_counter() - t0,
    )


def _pinned(probe, c_lo):
    """Pinned wave seeded from the run at c_lo that crossed the anchor level."""
    prob = _problem(probe.phi, c_lo, probe.j, probe.direction)
    seed = probe.crossing.get(c_lo)
    if seed is None:
        seed = _steady_seed(probe, prob, c_lo)
    return anchored_wave(prob, seed, c_lo, probe.half, probe.criterion)


def _steady_seed(probe, prob, c):
    # a run that converged before crossing leaves no snapshot; use its steady state
    w = steady_profile_for_speed(c, probe.j, probe.phi, probe.control, probe.criterion,
                                 direction=probe.direction).values
    return prob.apply_boundary(np.array(w))


def anchored_wave(problem, seed, c0, anchor_value, criterion=SteadyStateCriterion(),
                  dt0=1e-1, dt_cap=1e6, newton_max=12, max_steps=2000):
    """Steady moving-frame state with the centre node pinned to anchor_value.

    The speed is the extra unknown.  Each pseudo time step solves
    (w - w_old)/dt = R(w; c) on the interior together with w[centre] = anchor
    by Newton on the bordered system.  Returns (w, c).
    """
    base = moving_frame_residual(problem, StepControl())
    direction = problem.direction
    dy = problem.grid.dy
    c_shift = problem.c

    def residual(u, c):
        # base includes c_shift * drift; correct to the requested speed
        return base(u) + (c - c_shift) * upwind_drift(u, dy, direction)

    w = problem.apply_boundary(np.array(seed, dtype=float))
    mask = np.zeros(w.shape, dtype=bool)
    mask[1:-1, 1:-1] = True
    jac = BandedJacobian(mask)
    n = int(mask.sum())
    i, k = center_index(problem.grid)
    order = -np.ones(w.shape, dtype=np.int64)
    order[mask] = np.arange(n)
    a = order[i, k]
    band = jac.band
    c = float(c0)
    dt = dt0
    for _ in range(max_steps):
        w_old = w.copy()
        wn, cn = w.copy(), c
        ok = False
        last = math.inf
        with np.errstate(all="ignore"):
            for it in range(1, newton_max + 1):
                F = (wn[mask] - w_old[mask]) / dt - residual(wn, cn)[mask]
                norm = float(np.max(np.abs(F)))
                if not np.isfinite(norm) or (it > 2 and norm > 0.5 * last):
                    break
                if it > 1 and norm <= 0.05 * criterion.residual_tol:
                    ok = True
                    break
                last = norm
                ab = -jac(lambda u: residual(u, cn), wn)
                ab[band] += 1.0 / dt
                rhs = np.column_stack([-F, upwind_drift(wn, dy, direction)[mask]])
                try:
                    y = solve_banded((band, band), ab, rhs, check_finite=False)
                except (np.linalg.LinAlgError, ValueError):
                    break
                if not np.all(np.isfinite(y)) or y[a, 1] == 0.0:
                    break
                dc = (anchor_value - wn[i, k] - y[a, 0]) / y[a, 1]
                dx = y[:, 0] + dc * y[:, 1]
                wn[mask] = np.maximum(wn[mask] + dx, 0.0)
                wn[i, k] = anchor_value
                cn += dc
                if np.max(np.abs(dx)) <= 64 * np.finfo(float).eps * max(np.max(wn), 1e-300):
                    ok = True
                    break
        if not ok:
            dt /= 4.0
            if dt < 1e-10:
                raise RuntimeError("pinned wave solve failed to converge")
            continue
        rate = float(np.max(np.abs(wn - w_old))) / dt
        w, c = wn, cn
        if rate < criterion.residual_tol:
            return w, c
        dt = min(2.0 * dt, dt_cap)
    raise RuntimeError("pinned wave solve exhausted its step budget")


def refine_truncation(j_list, phi, tol_c=DEFAULT_TOL_C, control=StepControl(),
                      criterion=SteadyStateCriterion(), reuse_bracket=True):
    """critical_speed along an increasing ladder of truncations.

    Returns (c_extrapolated, per_j, report).  The extrapolated value is the last
    entry; report['converged'] is False when the last Cauchy increment exceeds
    2% relative, report['refined'] is False for a single truncation.
    """
    j_list = list(j_list)
    if not j_list:
        raise ValueError("empty truncation list")
    if any(b <= a for a, b in zip(j_list, j_list[1:])):
        raise ValueError("truncations must be increasing")
    per_j = []
    bracket = None
    for j in j_list:
        res = critical_speed(j, phi, bracket, tol_c, control, criterion)
        per_j.append(res)
        if reuse_bracket:
            # larger truncations have speeds at least as large
            bracket = SpeedBracket(max(res.bracket[0] - tol_c, DEFAULT_C_LO * 0.5),
                                   res.bracket[1] * 2.0)
    speeds = [r.c_star for r in per_j]
    increments = [abs(b - a) for a, b in zip(speeds, speeds[1:])]
    report = {
        "speeds": speeds,
        "increments": increments,
        "refined": len(per_j) > 1,
        "converged": (increments[-1] <= 0.02 * speeds[-1]) if increments else False,
    }
    return speeds[-1], per_j, report


def _extend_rows(values, inlet, shift, direction=1):
    """values(xi + shift*dy) with the inlet beyond the inlet edge and 0 beyond the far edge."""
    n = values.shape[0]
    src = np.arange(n) + shift * direction
    out = np.empty_like(values)
    inside = (src >= 0) & (src < n)
    out[inside] = values[src[inside]]
    out[src < 0] = inlet
    out[src >= n] = 0.0
    if direction == -1:
        out[src < 0], out[src >= n] = 0.0, inlet
    return out


def sandwich_check(phi1, phi2, slack=1e-6, inlet=None):
    """Integer shifts l1 <= l2 (returned in xi units) with
    phi1(xi + l2) <= phi2(xi) <= phi1(xi + l1) nodewise up to ``slack``."""
    g1, g2 = phi1.grid, phi2.grid
    if g1.shape != g2.shape or abs(g1.dy - g2.dy) > 1e-12 or abs(g1.dz - g2.dz) > 1e-12:
        raise ValueError("profiles live on incompatible grids")
    a = np.asarray(phi1.values)
    b = np.asarray(phi2.values)
    inlet = a[0] if inlet is None else np.asarray(inlet)
    n = a.shape[0]
    shifts = range(-n, n + 1)
    upper_ok = [l for l in shifts if np.all(b <= _extend_rows(a, inlet, l) + slack)]
    lower_ok = [l for l in shifts if np.all(_extend_rows(a, inlet, l) <= b + slack)]
    if not upper_ok or not lower_ok:
        raise UniquenessViolation("no shift realizes the sandwich within the grid extent")
    l1, l2 = max(upper_ok), min(lower_ok)
    return l1 * g1.dy, l2 * g1.dy


def relative_error_tail(profile, phi, band):
    """sup |phi(z, xi)/Phi(z) - 1| over interior z and xi in [xi_min, xi_min + band]."""
    grid = profile.grid
    ref = np.asarray(phi.values)
    if np.any(ref[1:-1] <= 0):
        raise ValueError("Phi vanishes at an interior node")
    rows = grid.y <= grid.y_min + band + 1e-12
    vals = np.asarray(profile.values)[rows][:, 1:-1]
    return float(np.max(np.abs(vals / ref[None, 1:-1] - 1.0)))


def reflect_wave(result):
    """The mirrored wave xi -> -xi, moving towards -infinity."""
    prof = result.profile
    flipped = Field(prof.grid, np.asarray(prof.values)[::-1], prof.time_tag)
    return WaveResult(
        params=result.params, cross_section=result.cross_section, j=result.j,
        c_star=result.c_star, profile=flipped, anchor=result.anchor, bracket=result.bracket,
        c_anchor=result.c_anchor, trace=list(result.trace), direction=-result.direction,
        monotone_centers=result.monotone_centers, checks=dict(result.checks),
    )
