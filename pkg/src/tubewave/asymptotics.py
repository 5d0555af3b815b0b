"""Direct simulations of the renormalized problem and their front diagnostics.

Fronts are threshold crossings of v(z, ., tau) at level eta.  Their growth is
fitted linearly in tau (logarithmic in original time) and compared with the
travelling-wave speed; the p = 2 heat equation is the square-root contrast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy import ndimage, stats
from scipy.integrate import trapezoid

from .core import Field, Params, TubeGrid
from .pde import StepControl, march, stable_dt, step_original

DEFAULT_ETA_FRACTION = 1e-4
MIN_FIT_SAMPLES = 10
INIT_KINDS = ("bump", "two-bumps", "sandwich")


# ---------------------------------------------------------------------------
# result types


@dataclass(eq=False)
class FrontHistory:
    """Per-snapshot front positions; NaN marks a missing crossing."""

    taus: np.ndarray
    z: np.ndarray
    s_plus: np.ndarray
    s_minus: np.ndarray
    eta: float

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=float)
        self.s_plus = np.asarray(self.s_plus, dtype=float).reshape(len(self.taus), -1)
        self.s_minus = np.asarray(self.s_minus, dtype=float).reshape(len(self.taus), -1)
        if np.any(np.diff(self.taus) <= 0):
            raise ValueError("taus must be increasing")
        both = np.isfinite(self.s_plus) & np.isfinite(self.s_minus)
        if np.any(self.s_minus[both] > self.s_plus[both]):
            raise ValueError("s_minus exceeds s_plus")

    @property
    def mid_index(self):
        return (len(self.z) - 1) // 2

    def waiting_time(self):
        """First tau at which the support reaches the rows next to both walls."""
        if len(self.z) < 3:
            return math.nan
        ok = np.isfinite(self.s_plus[:, 1]) & np.isfinite(self.s_plus[:, -2])
        hits = np.nonzero(ok)[0]
        return float(self.taus[hits[0]]) if hits.size else math.nan

    def to_csv(self, path):
        rows = [(t, z, sp, sm) for t, sps, sms in zip(self.taus, self.s_plus, self.s_minus)
                for z, sp, sm in zip(self.z, sps, sms)]
        np.savetxt(path, np.array(rows).reshape(-1, 4), delimiter=",", fmt="%.15e",
                   header=f"tau,z,s_plus,s_minus (eta={self.eta:.6e})", comments="# ")
        return Path(path)


@dataclass(frozen=True)
class FrontFit:
    slope: float
    intercept: float
    r_squared: float
    model_tag: str
    n_samples: int = 0

    def __post_init__(self):
        if self.model_tag not in ("linear_in_tau", "sqrt_in_t", "linear_in_log_t"):
            raise ValueError(f"unknown model tag {self.model_tag!r}")
        if not 0.0 <= self.r_squared <= 1.0 + 1e-12:
            raise ValueError("r_squared outside [0, 1]")


@dataclass(eq=False)
class CompactConvergenceReport:
    c: float
    taus: np.ndarray
    errors: np.ndarray
    final_error: float
    clamped: bool

    def decreasing_tail(self, fraction=0.5):
        """Errors over the last fraction of snapshots end no higher than they start."""
        n = len(self.errors)
        tail = self.errors[int(n * (1 - fraction)):]
        return bool(tail.size >= 2 and tail[-1] <= tail[0] + 1e-12)

    def passes(self, threshold):
        return bool(self.final_error < threshold and self.decreasing_tail())


@dataclass(eq=False)
class SimulationRun:
    """Snapshots of a rescaled run together with what is needed to read them."""

    params: Params
    grid: TubeGrid
    snapshots: list
    init: str
    phi: object = None
    meta: dict = dc_field(default_factory=dict)

    @property
    def taus(self):
        return np.array([s.time_tag for s in self.snapshots])

    @property
    def final(self):
        return self.snapshots[-1]


# ---------------------------------------------------------------------------
# initial data


def bump_initial(grid, amplitude=0.02, radius=1.0, center=0.0):
    """amplitude * sin(pi z/L) * cos^2(pi (y-center) / (2 radius)) on |y-center| < radius.

    For small amplitude this is a discrete subsolution of the renormalized
    problem at p > 2, so the run is nondecreasing in tau.
    """
    L = grid.cross_section.length
    y = grid.y[:, None] - center
    prof = np.where(np.abs(y) < radius, np.cos(0.5 * np.pi * y / radius) ** 2, 0.0)
    v = amplitude * np.sin(np.pi * grid.z / L)[None, :] * prof
    return _zero_edges(v)


def two_bumps_initial(grid, amplitude=0.08, radius=0.3, separation=2.0):
    """Constant discs of the given radius centred at (L/2, +-separation/2)."""
    L = grid.cross_section.length
    zz = grid.z[None, :] - 0.5 * L
    v = np.zeros(grid.shape)
    for yc in (-0.5 * separation, 0.5 * separation):
        yy = grid.y[:, None] - yc
        v[(zz ** 2 + yy ** 2) < radius ** 2] = amplitude
    return _zero_edges(v)


def _zero_edges(v):
    v[0, :] = v[-1, :] = 0.0
    v[:, 0] = v[:, -1] = 0.0
    return v


def shifted_wave(wave_values, wave_grid, inlet, y, shift):
    """phi(z, y + shift), linear in xi, extended by the inlet below and 0 above."""
    xi = np.asarray(y, dtype=float) + shift
    w = np.asarray(wave_values)
    xs = wave_grid.y
    pos = (xi - xs[0]) / wave_grid.dy
    k = np.clip(np.floor(pos).astype(int), 0, len(xs) - 2)
    t = np.clip(pos - k, 0.0, 1.0)[:, None]
    out = (1 - t) * w[k] + t * w[k + 1]
    out[xi <= xs[0]] = inlet
    out[xi >= xs[-1]] = 0.0
    return out


def sandwich_initial(grid, wave, shift, inlet):
    """phi(z, y + shift) on the simulation grid; row 0 holds the inlet profile."""
    v = shifted_wave(wave.profile.values, wave.profile.grid, inlet, grid.y, shift)
    v[0, :] = inlet
    v[-1, :] = 0.0
    v[:, 0] = v[:, -1] = 0.0
    return v


# ---------------------------------------------------------------------------
# simulation


def simulate(params, grid, tau_final, snapshot_every, init="bump", control=StepControl(),
             phi=None, initial=None, wave=None, shift=0.0, **init_options):
    """Explicit run of the renormalized problem from tau = 0.

    Boundary rows keep their initial values, so the ``sandwich`` start holds
    the inlet profile at the lower end of the tube.
    """
    params.require_nonlinear()
    if initial is not None:
        v0 = np.array(initial, dtype=float)
    elif init == "bump":
        v0 = bump_initial(grid, **init_options)
    elif init == "two-bumps":
        v0 = two_bumps_initial(grid, **init_options)
    elif init == "sandwich":
        if wave is None or phi is None:
            raise ValueError("sandwich start needs a wave and the profile Phi")
        v0 = sandwich_initial(grid, wave, shift, np.asarray(phi.values))
    else:
        raise ValueError(f"unknown init {init!r}; expected one of {INIT_KINDS}")
    start = Field(grid, v0, 0.0)
    snaps = march(start, params, control, tau_final, snapshot_every, rescaled=True)
    return SimulationRun(params, grid, snaps, init, phi,
                         {"tau_final": tau_final, "snapshot_every": snapshot_every, "shift": shift})


# ---------------------------------------------------------------------------
# fronts


def default_eta(phi):
    return DEFAULT_ETA_FRACTION * float(np.max(phi.values))


def _support_center(v):
    mass = v.sum(axis=1)
    return int(np.argmax(mass)) if mass.max() > 0 else None


def extract_fronts(v, eta):
    """Outermost eta-crossings per interior z, linearly interpolated.

    Returns (s_plus, s_minus) over all z nodes; wall nodes and columns with no
    value above eta are NaN.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    vals = np.asarray(v.values)
    y = v.grid.y
    n_y, n_z = vals.shape
    s_plus = np.full(n_z, np.nan)
    s_minus = np.full(n_z, np.nan)
    if _support_center(vals) is None:
        return s_plus, s_minus
    for k in range(1, n_z - 1):
        col = vals[:, k]
        above = np.nonzero(col > eta)[0]
        if not above.size:
            continue
        hi, lo = above[-1], above[0]
        if hi + 1 < n_y:
            a, b = col[hi], col[hi + 1]
            s_plus[k] = y[hi] + (a - eta) / (a - b) * (y[hi + 1] - y[hi])
        else:
            s_plus[k] = y[hi]
        if lo > 0:
            a, b = col[lo], col[lo - 1]
            s_minus[k] = y[lo] - (a - eta) / (a - b) * (y[lo] - y[lo - 1])
        else:
            s_minus[k] = y[lo]
    return s_plus, s_minus


def front_history(snapshots, eta):
    sp, sm = zip(*(extract_fronts(s, eta) for s in snapshots))
    return FrontHistory([s.time_tag for s in snapshots], snapshots[0].grid.z, sp, sm, eta)


def _linfit(x, y, tag):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if x.size < MIN_FIT_SAMPLES:
        raise ValueError(f"need at least {MIN_FIT_SAMPLES} samples, got {x.size}")
    res = stats.linregress(x, y)
    r2 = min(max(res.rvalue ** 2, 0.0), 1.0) if np.ptp(y) > 0 else 1.0
    return FrontFit(float(res.slope), float(res.intercept), float(r2), tag, int(x.size))


def fit_front_law(history, tail_fraction=0.5, side="plus", z_index=None):
    """Least squares s(z, tau) = slope * tau + intercept over the last tail_fraction of tau."""
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must lie in (0, 1]")
    k = history.mid_index if z_index is None else z_index
    s = (history.s_plus if side == "plus" else history.s_minus)[:, k]
    t = history.taus
    start = t[0] + (1 - tail_fraction) * (t[-1] - t[0])
    sel = t >= start - 1e-12
    return _linfit(t[sel], s[sel], "linear_in_tau")


def compare_growth_models(t, y):
    """r^2 of y against sqrt(t) and against ln t; the better model wins."""
    t = np.asarray(t, dtype=float)
    fits = {
        "sqrt_in_t": _linfit(np.sqrt(t), y, "sqrt_in_t"),
        "linear_in_log_t": _linfit(np.log(t), y, "linear_in_log_t"),
    }
    best = max(fits, key=lambda k: fits[k].r_squared)
    return best, fits


def shift_drift(history, c_star):
    """s_plus(z_mid, tau) - c_star * tau; a diagnostic with no pass/fail."""
    return history.s_plus[:, history.mid_index] - c_star * history.taus


# ---------------------------------------------------------------------------
# windows


def compact_convergence(snapshots, phi, c):
    """Per snapshot, sup over |y| <= c tau of |v - Phi(z)|."""
    if not c > 0:
        raise ValueError("window speed must be positive")
    ref = np.asarray(phi.values)
    taus, errs = [], []
    clamped = False
    for s in snapshots:
        y = s.grid.y
        half = c * s.time_tag
        if half > max(abs(y[0]), abs(y[-1])):
            clamped = True
        sel = np.abs(y) <= half + 1e-12
        err = float(np.max(np.abs(np.asarray(s.values)[sel] - ref[None, :]))) if sel.any() else 0.0
        taus.append(s.time_tag)
        errs.append(err)
    errs = np.array(errs)
    return CompactConvergenceReport(float(c), np.array(taus), errs, float(errs[-1]), clamped)


def outer_vanishing(snapshots, c, eta):
    """(flag, tau_c): v <= eta on |y| >= c tau for every snapshot from tau_c on.

    The flag needs the vanishing stretch to cover at least two snapshots when
    more than one is supplied; tau_c is NaN when the flag is false.
    """
    ok = []
    for s in snapshots:
        sel = np.abs(s.grid.y) >= c * s.time_tag - 1e-12
        ok.append(bool(not sel.any() or np.max(np.asarray(s.values)[sel]) <= eta))
    n = len(ok)
    k = n
    while k > 0 and ok[k - 1]:
        k -= 1
    stretch = n - k
    if stretch == 0 or (n > 1 and stretch < 2):
        return False, math.nan
    return True, float(snapshots[k].time_tag)


def one_sided_check(run, wave, shifts, slack_fraction=1e-3, speed=None):
    """Nodewise phi(y - c tau + l_low) <= v <= phi(y - c tau + l_up) at every snapshot.

    ``shifts`` is an unordered pair; the profile decreases in xi, so the larger
    shift gives the lower barrier.  Returns (flag, worst violation per snapshot).
    Raises ValueError when the initial state already violates the barriers.
    """
    l_up, l_low = sorted(shifts)
    c = wave.c_star if speed is None else speed
    inlet = np.asarray(wave.profile.values)[0]
    slack = slack_fraction * float(np.max(inlet))
    worst = []
    for n, s in enumerate(run.snapshots):
        y = s.grid.y - c * s.time_tag
        lower = shifted_wave(wave.profile.values, wave.profile.grid, inlet, y, l_low)
        upper = shifted_wave(wave.profile.values, wave.profile.grid, inlet, y, l_up)
        v = np.asarray(s.values)
        viol = max(float(np.max(lower - v)), float(np.max(v - upper)), 0.0)
        if n == 0 and viol > slack:
            raise ValueError(f"initial state violates the barriers by {viol:.3e}")
        worst.append(viol)
    worst = np.array(worst)
    return bool(np.all(worst <= slack)), worst


def superlevel_components(v, eta):
    """Number of 4-connected components of {v > eta}."""
    _, n = ndimage.label(np.asarray(v.values) > eta)
    return int(n)


def middle_window_error(v, phi, halfwidth):
    """sup over |y| <= halfwidth of |v - Phi|, relative to sup Phi."""
    ref = np.asarray(phi.values)
    sel = np.abs(v.grid.y) <= halfwidth + 1e-12
    return float(np.max(np.abs(np.asarray(v.values)[sel] - ref[None, :])) / ref.max())


def contact_profile(snapshots, eta, cells=10, path=None):
    """Rows (tau, z, distance to nearest wall, s_plus) for z within ``cells`` of a wall."""
    rows = []
    for s in snapshots:
        sp, _ = extract_fronts(s, eta)
        z = s.grid.z
        L = s.grid.cross_section.length
        n = len(z)
        near = [k for k in range(n) if min(k, n - 1 - k) <= cells]
        for k in near:
            rows.append((s.time_tag, z[k], min(z[k], L - z[k]), sp[k]))
    rows = np.array(rows).reshape(-1, 4)
    if path is not None:
        np.savetxt(path, rows, delimiter=",", fmt="%.15e", header="tau,z,wall_distance,s_plus",
                   comments="# ")
    return rows


# ---------------------------------------------------------------------------
# linear contrast


@dataclass(eq=False)
class LinearCaseReport:
    fit: FrontFit
    decay_rate: float
    lambda_1: float
    decay_rel_error: float
    sqrt_coefficient_theory: float
    times: np.ndarray
    positions: np.ndarray
    preferred_model: str
    model_r2: dict

    def derived(self):
        return {
            "sqrt_slope": self.fit.slope,
            "sqrt_r_squared": self.fit.r_squared,
            "sqrt_coefficient_theory": self.sqrt_coefficient_theory,
            "decay_rate": self.decay_rate,
            "lambda_1": self.lambda_1,
            "decay_rel_error": self.decay_rel_error,
            "preferred_model": self.preferred_model,
            **{f"r2_{k}": v for k, v in self.model_r2.items()},
        }


def linear_case_run(cross_section, halfwidth=6.0, t_final=1.0, params=Params(2.0),
                    amplitude=1.0, radius=0.5, t_start=0.1, level_fraction=0.1,
                    samples=60, control=None):
    """Heat equation u_t = Lap u in the tube from a compact bump.

    The midline level set of u e^{lambda_1 t} sqrt(t) at level_fraction of its
    Gaussian peak sits at y = 2 sqrt(ln(1/level_fraction) t); its positions are
    fitted against sqrt(t), and the centre value against e^{-lambda_1 t} t^{-1/2}.
    """
    if params.p != 2.0:
        raise ValueError("linear_case_run needs p = 2")
    control = control or StepControl(eps_reg=0.0, dt_max=math.inf)
    grid = TubeGrid.symmetric(cross_section, halfwidth)
    L = cross_section.length
    lam = (math.pi / L) ** 2
    u = Field(grid, bump_initial(grid, amplitude, radius), 0.0)
    # projection on the first mode fixes the Gaussian's mass
    weight = np.sin(np.pi * grid.z / L)[None, :]
    mass = float(trapezoid(trapezoid(u.values * weight, grid.z, axis=1), grid.y))
    peak = (2.0 / L) * mass / math.sqrt(4.0 * math.pi)
    level = level_fraction * peak
    k_mid = cross_section.mid_index
    i0 = grid.index_of_y(0.0)
    times = np.linspace(t_start, t_final, samples)
    pos, centre = [], []
    for t_next in times:
        while u.time_tag < t_next - 1e-14:
            dt = min(stable_dt(u, params, control), t_next - u.time_tag)
            u = step_original(u, params, control, dt)
        t = u.time_tag
        col = np.asarray(u.values)[:, k_mid] * math.exp(lam * t) * math.sqrt(t)
        centre.append(float(u.values[i0, k_mid]))
        above = np.nonzero(col[i0:] > level)[0]
        if above.size and i0 + above[-1] + 1 < grid.n_y:
            h = i0 + above[-1]
            a, b = col[h], col[h + 1]
            pos.append(grid.y[h] + (a - level) / (a - b) * grid.dy)
        else:
            pos.append(math.nan)
    pos = np.array(pos)
    fit = _linfit(np.sqrt(times), pos, "sqrt_in_t")
    # ln(u sqrt t) = -lambda t + b over the second half of the record
    tail = times >= 0.5 * (times[0] + times[-1])
    rate = -stats.linregress(times[tail], np.log(np.array(centre)[tail]) + 0.5 * np.log(times[tail])).slope
    best, fits = compare_growth_models(times, pos)
    return LinearCaseReport(
        fit=fit, decay_rate=float(rate), lambda_1=lam, decay_rel_error=float(abs(rate - lam) / lam),
        sqrt_coefficient_theory=2.0 * math.sqrt(math.log(1.0 / level_fraction)),
        times=times, positions=pos, preferred_model=best,
        model_r2={k: f.r_squared for k, f in fits.items()},
    )

