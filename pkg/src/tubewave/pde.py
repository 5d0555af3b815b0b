"""Time steppers for the original, renormalized and moving-frame equations.

Explicit steps are forward Euler under the monotonicity bound of ``stable_dt``.
Steady states of the moving-frame problem are reached either by marching the
explicit scheme or, by default, with backward Euler and a growing pseudo time
step (pseudo-transient continuation), which reaches the same fixed point in a
few hundred Newton solves instead of millions of explicit steps.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.linalg import solve_banded

from .core import (
    DEFAULT_EPS_REG,
    Field,
    Params,
    TubeGrid,
    apply_operator,
    max_gradient,
    resolve_stencil,
    stiffness_factor,
)


@dataclass(frozen=True)
class StepControl:
    """Step-size policy shared by all explicit steppers."""

    dt_safety: float = 0.4
    max_steps: int = 1_000_000
    eps_reg: float = DEFAULT_EPS_REG
    dt_max: float = 1e-2
    dt_floor: float = 1e-12
    stencil: str = "auto"

    def __post_init__(self):
        if not 0 < self.dt_safety <= 1:
            raise ValueError("dt_safety must lie in (0, 1]")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.eps_reg < 0:
            raise ValueError("eps_reg must be nonnegative")


@dataclass(frozen=True)
class SteadyStateCriterion:
    """Stop once sup|dw/dtau| falls below residual_tol."""

    residual_tol: float = 1e-7
    check_interval: int = 200

    def __post_init__(self):
        if not self.residual_tol > 0:
            raise ValueError("residual_tol must be positive")
        if self.check_interval < 1:
            raise ValueError("check_interval must be positive")


@dataclass(frozen=True, eq=False)
class MovingFrameProblem:
    """dw/dtau = Lap_p w + c dw/dxi + w/(p-2) on (0, L) x (-j, j).

    The inlet profile is imposed on the xi = -j row, zero on every other edge.
    ``direction = -1`` is the mirrored problem for waves moving towards -xi:
    dw/dtau = Lap_p w - c dw/dxi + w/(p-2) with the inlet on the xi = +j row.
    """

    params: Params
    grid: TubeGrid
    c: float
    inlet_profile: object
    j: float
    direction: int = 1

    def __post_init__(self):
        self.params.require_nonlinear()
        if self.c < 0:
            raise ValueError("speed must be nonnegative (reflect for left-moving waves)")
        if not self.j > 0:
            raise ValueError("truncation j must be positive")
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")
        inlet = np.asarray(self.inlet_profile.values, dtype=float)
        if inlet.shape != (self.grid.cross_section.n_z,):
            raise ValueError("inlet profile does not match the cross-section grid")

    @classmethod
    def build(cls, params, inlet_profile, c, j, direction=1):
        """Square-cell tube over (-j, j) on the inlet's cross-section grid."""
        grid = TubeGrid.symmetric(inlet_profile.cross_section, j)
        return cls(params, grid, float(c), inlet_profile, float(j), direction)

    @property
    def inlet(self):
        return np.asarray(self.inlet_profile.values, dtype=float)

    def apply_boundary(self, w):
        inlet_row, far_row = (0, -1) if self.direction == 1 else (-1, 0)
        w[far_row, :] = 0.0
        w[inlet_row, :] = self.inlet
        w[:, 0] = 0.0
        w[:, -1] = 0.0
        return w

    def initial_field(self):
        return Field(self.grid, self.apply_boundary(np.zeros(self.grid.shape)), 0.0)


# ---------------------------------------------------------------------------
# right-hand sides


def upwind_drift(u, dy, direction=1):
    """Upwind difference of direction * dw/dxi (information flows against it)."""
    adv = np.zeros_like(u)
    if direction == 1:
        adv[:-1] = (u[1:] - u[:-1]) / dy
    else:
        adv[1:] = (u[:-1] - u[1:]) / dy
    return adv


def _rhs(u, grid, p, eps, stencil, reaction=None, c=0.0, direction=1):
    r = apply_operator(u, grid, p, eps, stencil)
    if reaction is not None:
        r = r + reaction * u
    if c != 0.0:
        r = r + c * upwind_drift(u, grid.dy, direction)
    return r


def stable_dt(field, params, control, c=0.0):
    """Largest forward-Euler step keeping the scheme monotone, times dt_safety."""
    grid = field.grid
    if min(grid.shape) < 3:
        raise ValueError("grid too small")
    if not np.all(np.isfinite(field.values)):
        raise ValueError("field values must be finite")
    p = params.p
    h = grid.min_spacing
    g = max_gradient(field.values, grid, p, control.eps_reg, control.stencil)
    A = stiffness_factor(grid, p, control.stencil)
    dt = control.dt_safety * h * h / (2.0 * A * (p - 1.0) * g ** (p - 2.0) + control.dt_floor)
    dt = min(dt, control.dt_max)
    if c > 0:
        dt = min(dt, control.dt_safety * grid.dy / c)
    return dt


def _resolve_dt(field, params, control, dt, c=0.0):
    if dt is None:
        return stable_dt(field, params, control, c)
    hard = stable_dt(field, params, StepControl(1.0, control.max_steps, control.eps_reg,
                                                math.inf, control.dt_floor, control.stencil), c)
    if not 0 < dt <= hard * (1 + 1e-12):
        raise ValueError(f"dt={dt:.3e} violates the stability bound {hard:.3e}")
    return dt


def _advance(field, rhs, dt):
    u = field.values
    new = np.maximum(u + dt * rhs, 0.0)
    # boundary nodes hold Dirichlet data
    if new.ndim == 1:
        new[0], new[-1] = u[0], u[-1]
    else:
        new[0, :], new[-1, :] = u[0, :], u[-1, :]
        new[:, 0], new[:, -1] = u[:, 0], u[:, -1]
    return field.with_values(new, field.time_tag + dt)


def step_original(u, params, control, dt=None):
    """One forward-Euler step of du/dt = Lap_p u."""
    dt = _resolve_dt(u, params, control, dt)
    r = _rhs(u.values, u.grid, params.p, control.eps_reg, control.stencil)
    return _advance(u, r, dt)


def step_rescaled(v, params, control, dt=None):
    """One forward-Euler step of dv/dtau = Lap_p v + v/(p-2)."""
    k = params.require_nonlinear()
    dt = _resolve_dt(v, params, control, dt)
    r = _rhs(v.values, v.grid, params.p, control.eps_reg, control.stencil, reaction=k)
    return _advance(v, r, dt)


def step_moving_frame(w, problem, control, dt=None):
    """One forward-Euler step in the moving frame, upwind in xi."""
    params = problem.params
    dt = _resolve_dt(w, params, control, dt, problem.c)
    r = _rhs(w.values, w.grid, params.p, control.eps_reg, control.stencil,
             reaction=params.reaction_coefficient, c=problem.c, direction=problem.direction)
    out = _advance(w, r, dt)
    return out.with_values(problem.apply_boundary(np.array(out.values)))


def march(field, params, control, t_final, snapshot_every, rescaled=True, observer=None):
    """Explicit run from field.time_tag to t_final with evenly spaced snapshots.

    Returns the list of snapshots, including the initial one.  ``observer`` is
    called with every snapshot as it is taken.
    """
    stepper = step_rescaled if rescaled else step_original
    snaps = [field]
    if observer is not None:
        observer(field)
    t0 = field.time_tag
    next_tag = t0 + snapshot_every
    cur = field
    steps = 0
    while cur.time_tag < t_final - 1e-12:
        target = min(next_tag, t_final)
        dt = min(stable_dt(cur, params, control), target - cur.time_tag)
        cur = stepper(cur, params, control, dt)
        steps += 1
        if steps > control.max_steps:
            raise RuntimeError(f"max_steps={control.max_steps} exhausted at t={cur.time_tag:.4g}")
        if cur.time_tag >= target - 1e-12:
            cur = cur.with_values(cur.values, target)
            snaps.append(cur)
            if observer is not None:
                observer(cur)
            next_tag += snapshot_every
    return snaps


# ---------------------------------------------------------------------------
# steady states


@dataclass(eq=False)
class SteadyResult:
    """Outcome of evolve_to_steady."""

    field: Field
    converged: bool
    residual: float
    tau: float
    steps: int
    method: str
    stopped_early: bool = False
    newton_failures: int = 0
    dt_min: float = math.nan
    dt_max: float = math.nan
    wall_time: float = 0.0
    checks: dict = dc_field(default_factory=dict)

    def manifest(self):
        return {
            "converged": bool(self.converged),
            "residual": float(self.residual),
            "tau": float(self.tau),
            "steps": int(self.steps),
            "method": self.method,
            "stopped_early": bool(self.stopped_early),
            "newton_failures": int(self.newton_failures),
            "dt_min": float(self.dt_min),
            "dt_max": float(self.dt_max),
            "wall_time": float(self.wall_time),
            "checks": {k: bool(v) for k, v in self.checks.items()},
        }


def steady_checks(w, inlet, direction=1):
    """0 <= w <= inlet(z) (1 + 1e-6) and w nonincreasing away from the inlet."""
    ok_low = bool(np.all(w >= 0.0))
    ok_high = bool(np.all(w <= inlet[None, :] * (1 + 1e-6) + 1e-300))
    # d/dxi w <= 1e-8/dy, i.e. increments of at most 1e-8 between rows
    ok_mono = bool(np.all(direction * np.diff(w[:, 1:-1], axis=0) <= 1e-8))
    return {"nonnegative": ok_low, "below_inlet": ok_high, "monotone_in_xi": ok_mono}


def _interior_mask(shape):
    mask = np.zeros(shape, dtype=bool)
    if len(shape) == 1:
        mask[1:-1] = True
    else:
        mask[1:-1, 1:-1] = True
    return mask


class BandedJacobian:
    """Jacobian of a local residual over the masked nodes, in LAPACK band form.

    The residual at a node may depend on its 3 (1-D) or 3x3 (2-D) neighbourhood,
    so 3 or 9 complex-step probes cover every column.  Unknowns are the masked
    nodes in row-major order; the interior of a grid is a rectangle, so a
    neighbour offset (di, dk) is a fixed band offset di*m + dk with m the
    interior row width.  The probe pattern depends only on the mask and is
    built once.
    """

    def __init__(self, mask, eps_step=1e-30):
        shape = mask.shape
        self.mask = mask
        self.eps_step = eps_step
        if mask.ndim == 1:
            m = 1
            colors = [(a,) for a in range(3)]
            offsets = [(d,) for d in (-1, 0, 1)]
        else:
            m = shape[1] - 2
            colors = [(a, b) for a in range(3) for b in range(3)]
            offsets = [(di, dk) for di in (-1, 0, 1) for dk in (-1, 0, 1)]
        self.band = m + 1 if mask.ndim == 2 else 1
        self.n = int(mask.sum())
        order = -np.ones(shape, dtype=np.int64)
        order[mask] = np.arange(self.n)
        self.plan = []
        for col in colors:
            sel = np.zeros(shape, dtype=bool)
            sel[tuple(slice(c, None, 3) for c in col)] = True
            sel &= mask
            if not sel.any():
                continue
            src = np.nonzero(sel)
            pieces = []
            for off in offsets:
                tgt = tuple(s + o for s, o in zip(src, off))
                ok = np.ones(len(src[0]), dtype=bool)
                for t, size in zip(tgt, shape):
                    ok &= (t >= 0) & (t < size)
                tgt_ok = tuple(t[ok] for t in tgt)
                keep = mask[tgt_ok]
                tgt_flat = np.ravel_multi_index(tuple(t[keep] for t in tgt_ok), shape)
                src_ok = tuple(s[ok][keep] for s in src)
                row = self.band + (off[0] * m + off[1] if mask.ndim == 2 else off[0])
                pieces.append((row, order[src_ok], tgt_flat))
            self.plan.append((sel, pieces))

    def __call__(self, residual, u):
        ab = np.zeros((2 * self.band + 1, self.n))
        uc = u.astype(complex)
        for sel, pieces in self.plan:
            probe = uc.copy()
            probe[sel] += 1j * self.eps_step
            dr = (residual(probe).imag / self.eps_step).ravel()
            for row, cols, tgt in pieces:
                ab[row, cols] = dr[tgt]
        return ab


class PseudoTransient:
    """Backward Euler with adaptive pseudo time step for dw/dtau = R(w).

    ``residual`` maps a full array (real or complex) to R on the full array;
    boundary entries are ignored.  Each step solves (w - w_old)/dt = R(w) by
    Newton until the step equation holds to max(newton_tol, forcing * rate) in
    rate units, rate being that of the previous step; the reported rate
    |w - w_old|/dt therefore equals sup|R(w)| to within a fraction ``forcing``
    of itself, and to ``newton_tol`` near steady state.
    """

    def __init__(self, residual, shape, dt0=1e-2, dt_cap=1e4, newton_max=10,
                 newton_tol=1e-9, eps_step=1e-30, forcing=1e-2):
        self.residual = residual
        self.mask = _interior_mask(shape)
        self.jacobian = BandedJacobian(self.mask, eps_step)
        self.dt0 = dt0
        self.dt_cap = dt_cap
        self.newton_max = newton_max
        self.newton_tol = newton_tol
        self.forcing = forcing

    def newton_step(self, w_old, dt, tol=None):
        """Solve (w - w_old)/dt = R(w); returns (array, iterations) or (None, it)."""
        tol = self.newton_tol if tol is None else tol
        m = self.mask
        w = w_old.copy()
        x_old = w_old[m]
        band = self.jacobian.band
        last = math.inf
        with np.errstate(all="ignore"):
            for it in range(1, self.newton_max + 1):
                F = (w[m] - x_old) / dt - self.residual(w)[m]
                norm = float(np.max(np.abs(F))) if F.size else 0.0
                if not np.isfinite(norm) or (it > 2 and norm > 0.5 * last):
                    return None, it
                # w_old itself is accepted only at the absolute tolerance
                if norm <= (tol if it > 1 else min(tol, self.newton_tol)):
                    return w, it
                last = norm
                ab = -self.jacobian(self.residual, w)
                ab[band] += 1.0 / dt
                try:
                    dx = solve_banded((band, band), ab, -F, overwrite_ab=True,
                                      check_finite=False)
                except (np.linalg.LinAlgError, ValueError):
                    return None, it
                if not np.all(np.isfinite(dx)):
                    return None, it
                w[m] = np.maximum(w[m] + dx, 0.0)
                if np.max(np.abs(dx)) <= 64 * np.finfo(float).eps * max(np.max(np.abs(w)), 1e-300):
                    # update at roundoff level: the step equation is solved as well as it can be
                    return w, it
        return None, self.newton_max

    def run(self, w0, residual_tol, max_steps, stop_when=None, tau0=0.0, observer=None):
        w = w0.copy()
        dt = self.dt0
        tau = tau0
        steps = 0
        failures = 0
        dts = []
        rate = math.inf
        stopped = False
        dt_fail = math.inf
        while steps < max_steps:
            steps += 1
            # inexact solves while far from steady: error small against the current rate
            new, its = self.newton_step(w, dt, max(self.newton_tol, self.forcing * rate) if math.isfinite(rate) else None)
            if new is None:
                failures += 1
                dt_fail = dt
                dt /= 4.0
                if dt < 1e-12:
                    break
                continue
            rate = float(np.max(np.abs(new - w))) / dt
            w = new
            tau += dt
            dts.append(dt)
            if observer is not None:
                observer(w, tau)
            if rate < residual_tol:
                break
            if stop_when is not None and stop_when(w):
                stopped = True
                break
            growth = 2.0 if its <= 4 else (1.25 if its <= 6 else 0.8)
            # stay below the last failed step; the ceiling relaxes 10% per success
            dt_fail *= 1.1
            dt = min(dt * growth, 0.9 * dt_fail, self.dt_cap)
        return w, tau, steps, failures, rate, dts, stopped


def moving_frame_residual(problem, control):
    p = problem.params.p
    k = problem.params.reaction_coefficient
    grid = problem.grid
    eps = control.eps_reg
    stencil = resolve_stencil(grid, p, control.stencil)
    c, direction = problem.c, problem.direction
    return lambda u: _rhs(u, grid, p, eps, stencil, reaction=k, c=c, direction=direction)


def evolve_to_steady(problem, criterion, control, method="implicit", initial=None,
                     stop_when=None, observer=None):
    """March the moving-frame problem from w = 0 (or ``initial``) to steady state.

    ``stop_when(w)`` may end the run early (used by bisection once the answer is
    decided); such runs are reported as not converged with stopped_early set.
    Returns a SteadyResult; non-convergence is reported, not raised.
    """
    t0 = time.perf_counter()
    w = problem.initial_field().values.copy() if initial is None else \
        problem.apply_boundary(np.array(initial.values, dtype=float))
    tau0 = 0.0 if initial is None else initial.time_tag
    if method == "implicit":
        solver = PseudoTransient(moving_frame_residual(problem, control), w.shape,
                                 newton_tol=0.05 * criterion.residual_tol)
        obs = None if observer is None else (lambda arr, t: observer(Field(problem.grid, arr, t)))
        w, tau, steps, failures, rate, dts, stopped = solver.run(
            w, criterion.residual_tol, control.max_steps, stop_when, tau0, obs)
        dt_min = min(dts) if dts else math.nan
        dt_max = max(dts) if dts else math.nan
    elif method == "explicit":
        cur = Field(problem.grid, w, tau0)
        steps, failures, stopped = 0, 0, False
        rate = math.inf
        last = cur
        dt_min, dt_max = math.inf, 0.0
        while steps < control.max_steps:
            dt = stable_dt(cur, problem.params, control, problem.c)
            dt_min, dt_max = min(dt_min, dt), max(dt_max, dt)
            cur = step_moving_frame(cur, problem, control, dt)
            steps += 1
            if steps % criterion.check_interval == 0:
                span = cur.time_tag - last.time_tag
                rate = float(np.max(np.abs(cur.values - last.values))) / span
                last = cur
                if observer is not None:
                    observer(cur)
                if rate < criterion.residual_tol:
                    break
                if stop_when is not None and stop_when(cur.values):
                    stopped = True
                    break
        w, tau = np.array(cur.values), cur.time_tag
    else:
        raise ValueError(f"unknown method {method!r}")
    converged = rate < criterion.residual_tol
    field = Field(problem.grid, w, tau)
    return SteadyResult(
        field=field, converged=bool(converged), residual=float(rate), tau=float(tau),
        steps=int(steps), method=method, stopped_early=bool(stopped and not converged),
        newton_failures=int(failures), dt_min=float(dt_min), dt_max=float(dt_max),
        wall_time=time.perf_counter() - t0,
        checks=steady_checks(w, problem.inlet, problem.direction),
    )


def cross_section_flow_residual(section, params, control):
    """R(V) = Lap_p V + V/(p-2) on a cross-section, for steady-state solves."""
    p = params.p
    k = params.require_nonlinear()
    return lambda u: _rhs(u, section, p, control.eps_reg, "auto", reaction=k)
