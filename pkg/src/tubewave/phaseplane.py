"""Phase plane of the z-independent waves.

With X = phi and Z = -X^(-1/(p-1)) X', a profile of
(|phi'|^(p-2) phi')' + c phi' + phi/(p-2) = 0 becomes an orbit of

    dX/ds = (p-1) X |Z|^(p-2) Z
    dZ/ds = c Z - |Z|^p - X^((p-2)/(p-1)) / (p-2)

whose slope dZ/dX is the trajectory function H.  Orbits are integrated in
(ln X, Z) so that relative accuracy holds down to the saddle at X = 0, and the
arc parameter is rescaled by 1/(1 + |Z|^p) so the Z < 0 branch stays bounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .core import Params

ORBIT_TOL = 1e-10
LAUNCH_FACTOR = 1e-6
DARCY_WINDOW = (1e-5, 1e-4)  # fit window for phi / M_c near the free boundary


class OrbitError(RuntimeError):
    """Integration left the admissible region; carries the last samples."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True, eq=False)
class PhaseTrajectory:
    """Samples (X, Z) of one orbit, ordered by the integration parameter."""

    c: float
    params: Params
    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError("samples must be an (n, 2) array of (X, Z)")
        if np.any(arr[:, 0] < 0):
            raise ValueError("X must stay nonnegative")
        object.__setattr__(self, "samples", arr)

    @property
    def X(self):
        return self.samples[:, 0]

    @property
    def Z(self):
        return self.samples[:, 1]


@dataclass(frozen=True, eq=False)
class FastOrbitSummary:
    """The orbit leaving the saddle (0, c^(1/(p-1))) and its profile."""

    c: float
    p: float
    M_c: float
    vertex: tuple
    trajectory: PhaseTrajectory
    behind: Optional[PhaseTrajectory] = None
    xi0: float = math.nan
    profile: Optional[np.ndarray] = None
    darcy_slope: float = math.nan
    launch_X: float = math.nan
    launch_Z: float = math.nan
    launch_residual: float = math.nan
    direction: int = 1
    xi_samples: Optional[np.ndarray] = None

    def profile_at(self, xi):
        """phi(xi) by interpolation; 0 beyond the free boundary."""
        if self.profile is None:
            raise ValueError("profile not reconstructed")
        xi = np.asarray(xi, dtype=float)
        xs, ph = self.profile[:, 0], self.profile[:, 1]
        order = np.argsort(xs)
        out = np.interp(xi, xs[order], ph[order])
        beyond = xi * self.direction >= self.xi0 * self.direction
        return np.where(beyond, 0.0, out)

    def Z_at(self, X):
        """Z on the fast branch as a function of X in (0, M_c], interpolated in ln X."""
        Xs, Zs = self.trajectory.X, self.trajectory.Z
        if np.any(np.diff(Xs) <= 0):
            raise RuntimeError("X is not increasing along the fast branch")
        X = np.asarray(X, dtype=float)
        if np.any(X < Xs[0]) or np.any(X > Xs[-1]):
            raise ValueError("X outside the sampled range of the orbit")
        return np.interp(np.log(X), np.log(Xs), Zs)

    def to_csv(self, stem):
        """Write <stem>_orbit.csv (X, Z) and, if present, <stem>_profile.csv."""
        stem = Path(stem)
        paths = [stem.parent / f"{stem.name}_orbit.csv"]
        np.savetxt(paths[0], self.trajectory.samples, delimiter=",", fmt="%.15e",
                   header="X,Z", comments="# ")
        if self.profile is not None:
            paths.append(stem.parent / f"{stem.name}_profile.csv")
            np.savetxt(paths[1], self.profile, delimiter=",", fmt="%.15e",
                       header="xi,phi", comments="# ")
        return paths


def trajectory_rhs(X, Z, c, params):
    """H(X, Z; c) = dZ/dX along orbits."""
    p = params.p
    params.require_nonlinear()
    if not X > 0:
        raise ValueError("H is singular for X <= 0")
    if Z == 0:
        raise ValueError("H is singular on Z = 0")
    num = (p - 2.0) * (c * Z - abs(Z) ** p) - X ** ((p - 2.0) / (p - 1.0))
    den = (p - 1.0) * (p - 2.0) * X * abs(Z) ** (p - 2.0) * Z
    return num / den


def dH_dc(X, Z, params):
    """Closed form of the derivative of H with respect to c."""
    p = params.p
    return 1.0 / ((p - 1.0) * X * abs(Z) ** (p - 2.0))


def isocline_vertex(c, params):
    """Vertex data (X_c, Z_c) of the null isocline of Z.

    X_c is the largest X on the isocline X^((p-2)/(p-1)) = (p-2)(cZ - Z^p),
    reached at Z = (c/p)^(1/(p-1)); Z_c is the value of cZ - Z^p there.
    """
    p = params.p
    params.require_nonlinear()
    if not c > 0:
        raise ValueError("c must be positive")
    X_c = ((p - 1.0) * (p - 2.0)) ** ((p - 1.0) / (p - 2.0)) * (c / p) ** (p / (p - 2.0))
    Z_c = (p - 1.0) * (c / p) ** (p / (p - 1.0))
    return X_c, Z_c


def saddle_height(c, params):
    return c ** (1.0 / (params.p - 1.0))


def launch_coefficient(c, params):
    """k in Z = c^(1/(p-1)) - k X^((p-2)/(p-1)), the saddle orbit near X = 0.

    Substituting the ansatz into dZ/dX = H and matching the leading power of X
    gives k = 1 / ((p-2)(2p-3) c).
    """
    p = params.p
    return 1.0 / ((p - 2.0) * (2.0 * p - 3.0) * c)


def launch_state(c, params, delta):
    """First-order expansion of the saddle orbit at X = delta."""
    p = params.p
    Z = saddle_height(c, params) - launch_coefficient(c, params) * delta ** ((p - 2.0) / (p - 1.0))
    return delta, Z


def _launch_residual(c, params, delta):
    # relative mismatch between the expansion's slope and H at the launch point
    p = params.p
    a = (p - 2.0) / (p - 1.0)
    X, Z = launch_state(c, params, delta)
    slope = -a * launch_coefficient(c, params) * delta ** (a - 1.0)
    H = trajectory_rhs(X, Z, c, params)
    return abs(slope - H) / abs(H)


def _log_system(c, p):
    a = (p - 2.0) / (p - 1.0)

    def rhs(s, y):
        ell, Z, _ = y
        w = 1.0 / (1.0 + abs(Z) ** p)
        zp = abs(Z) ** (p - 2.0)
        x_pow = math.exp(a * ell)
        return [w * (p - 1.0) * zp * Z,
                w * (c * Z - abs(Z) ** p - x_pow / (p - 2.0)),
                -w * (p - 1.0) * x_pow * zp]
    return rhs


def _integrate_fast(c, params, delta, tol):
    p = params.p
    X0, Z0 = launch_state(c, params, delta)
    top = saddle_height(c, params)

    def crest(s, y):
        return y[1]
    crest.terminal = True
    crest.direction = -1

    def escape(s, y):
        return top * (1 + 1e-9) - y[1]
    escape.terminal = True

    s_scale = 1.0 / ((p - 1.0) * c)
    sol = solve_ivp(_log_system(c, p), (0.0, 1e4 * s_scale * (1 + abs(math.log(delta)))),
                    [math.log(X0), Z0, 0.0], method="DOP853", rtol=tol, atol=tol,
                    events=[crest, escape], dense_output=True)
    if sol.t_events[1].size:
        trace = np.column_stack([np.exp(sol.y[0][-5:]), sol.y[1][-5:]])
        raise OrbitError("orbit rose above the saddle height", trace)
    if not sol.t_events[0].size:
        trace = np.column_stack([np.exp(sol.y[0][-5:]), sol.y[1][-5:]])
        raise OrbitError(f"no Z = 0 crossing (status {sol.status}: {sol.message})", trace)
    return sol


def fast_orbit(c, params, tol=ORBIT_TOL, launch_factor=LAUNCH_FACTOR, n_samples=4000):
    """Integrate the saddle orbit up to its Z = 0 crossing, the height M_c."""
    params.require_nonlinear()
    if not c > 0:
        raise ValueError("c must be positive")
    p = params.p
    vertex = isocline_vertex(c, params)
    delta = launch_factor * vertex[0]
    sol = _integrate_fast(c, params, delta, tol)
    s_end = float(sol.t_events[0][0])
    ell_end, _, xi_end = sol.y_events[0][0]
    M_c = math.exp(ell_end)
    s = np.linspace(0.0, s_end, n_samples)
    y = sol.sol(s)
    y[:, -1] = sol.y_events[0][0]
    y[1, -1] = 0.0
    samples = np.column_stack([np.exp(y[0]), y[1]])
    traj = PhaseTrajectory(float(c), params, samples)
    behind = _behind_branch(c, params, sol.y_events[0][0], M_c, tol)
    X0, Z0 = launch_state(c, params, delta)
    return FastOrbitSummary(
        c=float(c), p=p, M_c=M_c, vertex=vertex, trajectory=traj, behind=behind,
        launch_X=X0, launch_Z=Z0, launch_residual=_launch_residual(c, params, delta),
        xi_samples=y[2] - xi_end,
    )


def _behind_branch(c, params, state, M_c, tol, floor=1e-8):
    """Continue past the maximum on Z < 0 until X = floor * M_c."""
    p = params.p
    ell, Z, xi = state
    target = math.log(floor * M_c)

    def bottom(s, y):
        return y[0] - target
    bottom.terminal = True
    bottom.direction = -1
    sol = solve_ivp(_log_system(c, p), (0.0, 1e8), [ell, -1e-12, xi], method="DOP853",
                    rtol=tol, atol=tol, events=[bottom], dense_output=True)
    if not sol.t_events[0].size:
        return None
    s = np.linspace(0.0, sol.t_events[0][0], 2000)
    y = sol.sol(s)
    return PhaseTrajectory(float(c), params, np.column_stack([np.exp(y[0]), y[1]]))


def launch_consistency(c, params, tol=ORBIT_TOL):
    """Relative change of M_c when the launch offset is divided by 10."""
    a = fast_orbit(c, params, tol, LAUNCH_FACTOR).M_c
    b = fast_orbit(c, params, tol, LAUNCH_FACTOR / 10).M_c
    return abs(a - b) / a


def darcy_theory(c, params):
    p = params.p
    return (p - 2.0) / (p - 1.0) * c ** (1.0 / (p - 1.0))


def reconstruct_profile(orbit, params):
    """Fill in phi(xi) with xi = 0 at the maximum and the free boundary xi0.

    xi comes from the quadrature dxi = -dX / (X^(1/(p-1)) Z) carried along the
    orbit; the stretch between X = 0 and the launch point is added from the
    leading-order saddle behaviour.  The Darcy slope is the least-squares slope
    of phi^((p-2)/(p-1)) against xi0 - xi for phi/M_c in DARCY_WINDOW.
    """
    if orbit.xi_samples is None:
        raise ValueError("orbit carries no xi samples")
    p = params.p
    a = (p - 2.0) / (p - 1.0)
    X = orbit.trajectory.X
    xi = np.asarray(orbit.xi_samples, dtype=float)
    if not np.all(np.isfinite(xi)) or xi[0] <= 0:
        raise RuntimeError("xi quadrature did not produce a finite free boundary")
    tail = X[0] ** a / darcy_theory(orbit.c, params)
    xi0 = float(xi[0] + tail)
    if not np.isfinite(xi0) or xi0 > 1e12:
        raise RuntimeError("free boundary not finite: the orbit is not the fast one")
    profile = np.column_stack([np.concatenate([[xi0], xi]), np.concatenate([[0.0], X])])
    profile = profile[::-1]  # increasing xi: maximum first, front last
    lo, hi = DARCY_WINDOW
    sel = (X >= lo * orbit.M_c) & (X <= hi * orbit.M_c)
    if sel.sum() < 5:
        raise RuntimeError("too few samples near the free boundary for the Darcy fit")
    slope = -np.polyfit(xi[sel], X[sel] ** a, 1)[0]
    return replace(orbit, xi0=xi0, profile=profile, darcy_slope=float(slope))


def max_speed_map(c_list, params, tol=ORBIT_TOL):
    """[(c, M_c)] for each c; the map must be nondecreasing in c."""
    out = []
    for c in c_list:
        if not c > 0:
            raise ValueError("all speeds must be positive")
        out.append((float(c), fast_orbit(c, params, tol).M_c))
    ordered = sorted(out)
    if any(b[1] < a[1] for a, b in zip(ordered, ordered[1:])):
        raise RuntimeError("M_c is not monotone in c: integration tolerance too loose")
    return out


def reflect_left_moving(orbit):
    """Mirror xi -> -xi: the same profile travelling towards -infinity."""
    profile = None
    if orbit.profile is not None:
        profile = orbit.profile.copy()
        profile[:, 0] *= -1.0
    xi_s = None if orbit.xi_samples is None else -np.asarray(orbit.xi_samples)
    return replace(orbit, xi0=-orbit.xi0, profile=profile, xi_samples=xi_s,
                   direction=-orbit.direction)
