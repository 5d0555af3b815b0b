"""Cross-sectional profile: -(p-2) Lap_p Phi = Phi on (0, L), Phi = 0 at the ends.

Two independent routes: the steady state of the renormalized cross-section
flow dV/dtau = Lap_p V + V/(p-2) on the discrete grid, and shooting on the ODE
in the variables (Phi, q) with q = |Phi'|^(p-2) Phi'.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .core import CrossSection, Field, Params, apply_operator, field_to_csv
from .pde import (
    PseudoTransient,
    SteadyStateCriterion,
    StepControl,
    cross_section_flow_residual,
    step_rescaled,
    stable_dt,
)

FLOW_CRITERION = SteadyStateCriterion(residual_tol=1e-11)


@dataclass(frozen=True, eq=False)
class StationaryProfile:
    """Samples of Phi with the residual certificate of the method that made them."""

    cross_section: CrossSection
    params: Params
    values: np.ndarray
    residual_sup: float
    method_tag: str
    slope: Optional[float] = None

    def __post_init__(self):
        if self.method_tag not in ("flow", "shooting"):
            raise ValueError(f"unknown method tag {self.method_tag!r}")
        arr = np.array(self.values, dtype=float, copy=True)
        if arr.shape != self.cross_section.shape:
            raise ValueError("profile does not match the cross-section grid")
        if arr[0] != 0.0 or arr[-1] != 0.0:
            raise ValueError("profile must vanish at the boundary nodes")
        if not np.all(arr[1:-1] > 0):
            raise ValueError("profile must be positive at interior nodes")
        sup = arr.max()
        if np.max(np.abs(arr - arr[::-1])) > 1e-6 * sup:
            raise ValueError("profile is not symmetric about the midpoint")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def sup(self):
        return float(self.values.max())

    @property
    def mid_value(self):
        return float(self.values[self.cross_section.mid_index])

    def as_field(self):
        return Field(self.cross_section, self.values, 0.0)

    def sidecar(self):
        return {
            "p": self.params.p,
            "L": self.cross_section.length,
            "n_z": self.cross_section.n_z,
            "residual_sup": self.residual_sup,
            "method_tag": self.method_tag,
            "sup": self.sup,
        }

    def save(self, stem):
        """Write <stem>.csv and <stem>.json; returns both paths."""
        stem = Path(stem)
        csv_path = stem.with_suffix(".csv")
        json_path = stem.with_suffix(".json")
        field_to_csv(self.as_field(), csv_path)
        json_path.write_text(json.dumps(self.sidecar(), indent=2))
        return [csv_path, json_path]


def _symmetrize(values):
    return 0.5 * (values + values[::-1])


def verify_eigen_residual(profile, params, eps_reg=1e-8):
    """sup over interior nodes of |(p-2) Lap_p Phi + Phi| on the profile's grid.

    The unregularized operator is used except within two cells of the maximum,
    where the regularized one is used.
    """
    phi = np.asarray(profile.values, dtype=float)
    section = profile.cross_section
    p = params.p
    plain = apply_operator(phi, section, p, 0.0)
    reg = apply_operator(phi, section, p, eps_reg)
    k_max = int(np.argmax(phi))
    near = np.abs(np.arange(phi.size) - k_max) <= 2
    lap = np.where(near, reg, plain)
    r = (p - 2.0) * lap[1:-1] + phi[1:-1]
    return float(np.max(np.abs(r))) if r.size else 0.0


def phi_via_rescaled_flow(cross_section, params, control=StepControl(),
                          criterion=FLOW_CRITERION, amplitude=1.0, method="implicit",
                          initial=None):
    """Steady state of the discrete renormalized flow on the cross-section.

    Starts from amplitude * sin(pi z / L) unless ``initial`` is given.  The
    implicit method takes backward-Euler steps of growing size; ``explicit``
    marches forward Euler and is only practical on coarse grids.
    """
    params.require_nonlinear()
    z = cross_section.z
    v0 = amplitude * np.sin(np.pi * z / cross_section.length) if initial is None \
        else np.array(initial, dtype=float)
    v0[0] = v0[-1] = 0.0
    if not np.all(v0[1:-1] > 0):
        raise ValueError("initial data must be positive at interior nodes")
    if method == "implicit":
        solver = PseudoTransient(cross_section_flow_residual(cross_section, params, control),
                                 v0.shape, newton_tol=0.05 * criterion.residual_tol)
        v, _, steps, _, rate, _, _ = solver.run(v0, criterion.residual_tol, control.max_steps)
    elif method == "explicit":
        cur = Field(cross_section, v0, 0.0)
        last = cur
        rate = math.inf
        steps = 0
        while steps < control.max_steps:
            cur = step_rescaled(cur, params, control, stable_dt(cur, params, control))
            steps += 1
            if steps % criterion.check_interval == 0:
                rate = float(np.max(np.abs(cur.values - last.values))) / (cur.time_tag - last.time_tag)
                last = cur
                if rate < criterion.residual_tol:
                    break
        v = np.array(cur.values)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not rate < criterion.residual_tol:
        raise RuntimeError(f"cross-section flow did not converge in {steps} steps (rate {rate:.3e})")
    v = _symmetrize(v)
    v[0] = v[-1] = 0.0
    prof = StationaryProfile(cross_section, params, v, math.nan, "flow")
    res = verify_eigen_residual(prof, params, control.eps_reg)
    return StationaryProfile(cross_section, params, v, res, "flow")


def _flux_ode(p):
    def rhs(z, y):
        phi, q, _ = y
        return [math.copysign(abs(q) ** (1.0 / (p - 1.0)), q), -phi / (p - 2.0), phi]
    return rhs


def _shoot(s, length, p, tol, dense=False, stop_at_max=False):
    events = None
    if stop_at_max:
        events = lambda z, y: y[1]
        events.terminal = True
        events.direction = -1
    return solve_ivp(_flux_ode(p), (0.0, length), [0.0, s ** (p - 1.0), 0.0],
                     method="DOP853", rtol=tol, atol=tol * 1e-3, dense_output=dense,
                     events=events)


def _max_offset(logs, length, p, tol):
    """Position of the first maximum minus L/2 (L/2 if q never vanishes)."""
    sol = _shoot(math.exp(logs), length, p, tol, stop_at_max=True)
    hits = sol.t_events[0]
    return (hits[0] if hits.size else length) - 0.5 * length


def phi_via_shooting(cross_section, params, tol=1e-10):
    """Shoot from z = 0 with Phi(0) = 0, Phi'(0) = s and solve Phi(L; s) = 0 for s.

    The ODE is reflection symmetric about its maximum, so Phi(L) = 0 with a
    single interior maximum is the same as the flux q vanishing first at L/2;
    that condition is monotone in s and is what the root finder brackets.  The
    flux q is the smooth unknown, so the maximum is not singular.

    The residual certificate is the finite-volume balance of the integrated
    solution, (p-2)(q(z+) - q(z-)) + integral of Phi over the cell, per cell
    width, at the cell faces of the grid.
    """
    p = params.p
    params.require_nonlinear()
    L = cross_section.length
    lo, hi = math.log(1e-6), math.log(1e6)
    if not (_max_offset(lo, L, p, tol) < 0 < _max_offset(hi, L, p, tol)):
        raise ValueError("no wall slope in [1e-6, 1e6] puts the maximum at L/2")
    logs = brentq(_max_offset, lo, hi, args=(L, p, tol), xtol=1e-15,
                  rtol=4 * np.finfo(float).eps, maxiter=400)
    s = math.exp(logs)
    sol = _shoot(s, L, p, tol, dense=True)
    z = cross_section.z
    phi = sol.sol(z)[0]
    phi[0] = phi[-1] = 0.0
    if not np.all(phi[1:-1] > 0):
        raise RuntimeError("shooting produced a sign-changing profile")
    phi = _symmetrize(phi)
    faces = np.concatenate([[0.0], 0.5 * (z[1:] + z[:-1]), [L]])
    yf = sol.sol(faces)
    cell = (p - 2.0) * np.diff(yf[1]) + np.diff(yf[2])
    widths = np.diff(faces)
    res = float(np.max(np.abs(cell[1:-1] / widths[1:-1])))
    return StationaryProfile(cross_section, params, phi, res, "shooting", slope=s)


def profile_agreement(a, b):
    """Sup-relative difference between two profiles on the same grid."""
    va, vb = np.asarray(a.values), np.asarray(b.values)
    return float(np.max(np.abs(va - vb)) / max(va.max(), vb.max()))
