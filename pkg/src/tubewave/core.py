"""Grids, fields, the discrete p-Laplacian and the log-time renormalization.

Geometry is a tube D x R with D = (0, L).  Tube fields are stored as arrays of
shape (n_y, n_z): rows run along the tube axis y, columns across the section z.
Cross-section fields are 1-D arrays of length n_z.

Two flux-form stencils are provided for tube fields:

``lattice``
    Two-point fluxes along the four lattice lines through a node (both axes and
    both diagonals), normalised so that the operator is consistent.  Every flux
    depends on the two end values only, which makes the explicit scheme and the
    implicit Jacobian monotone.  The flux sum is rotation invariant for
    p in {2, 4, 6}; for other p it carries a small anisotropy.  Needs dy == dz.

``face``
    Face-centred normal differences with tangential derivatives averaged onto
    the face.  Consistent for every p but not monotone.

``auto`` picks ``lattice`` whenever it is both monotone and isotropic.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

DEFAULT_EPS_REG = 1e-8
LATTICE_ISOTROPIC_P = (2.0, 4.0, 6.0)
STENCILS = ("auto", "lattice", "face")

_SQRT2 = math.sqrt(2.0)
# (row offset, column offset, length factor) for the four lattice lines
_LATTICE_EDGES = ((0, 1, 1.0), (1, 0, 1.0), (1, 1, _SQRT2), (1, -1, _SQRT2))


@dataclass(frozen=True)
class Params:
    """Exponent of the p-Laplacian; p = 2 is the heat equation."""

    p: float

    def __post_init__(self):
        if not np.isfinite(self.p) or self.p < 2.0:
            raise ValueError(f"p must be a finite number >= 2, got {self.p}")

    @property
    def reaction_coefficient(self):
        """1/(p-2) for the renormalized problem, None in the linear case."""
        if self.p == 2.0:
            return None
        return 1.0 / (self.p - 2.0)

    def require_nonlinear(self):
        if self.reaction_coefficient is None:
            raise ValueError("this operation needs p > 2")
        return self.reaction_coefficient


@dataclass(frozen=True)
class CrossSection:
    """Uniform grid on (0, L) with Dirichlet nodes at both ends."""

    length: float
    n_z: int

    def __post_init__(self):
        if not (np.isfinite(self.length) and self.length > 0):
            raise ValueError("cross-section length must be positive")
        if int(self.n_z) != self.n_z or self.n_z < 3:
            raise ValueError("n_z must be an integer >= 3")

    @classmethod
    def from_spacing(cls, length, dz):
        n = int(round(length / dz)) + 1
        return cls(float(length), max(n, 3))

    @property
    def dz(self):
        return self.length / (self.n_z - 1)

    @property
    def z(self):
        return np.linspace(0.0, self.length, self.n_z)

    @property
    def mid_index(self):
        if self.n_z % 2 == 0:
            raise ValueError("the section midpoint is a node only for odd n_z")
        return self.n_z // 2

    @property
    def shape(self):
        return (self.n_z,)

    axis_count = 1
    min_spacing = property(lambda self: self.dz)


@dataclass(frozen=True)
class TubeGrid:
    """Truncated tube (0, L) x (y_min, y_max)."""

    cross_section: CrossSection
    y_min: float
    y_max: float
    n_y: int

    def __post_init__(self):
        if not self.y_min < self.y_max:
            raise ValueError("y_min must be smaller than y_max")
        if int(self.n_y) != self.n_y or self.n_y < 3:
            raise ValueError("n_y must be an integer >= 3")

    @classmethod
    def square(cls, cross_section, y_min, y_max):
        """Grid whose longitudinal spacing equals dz (y_max is adjusted)."""
        h = cross_section.dz
        n = int(round((y_max - y_min) / h)) + 1
        n = max(n, 3)
        return cls(cross_section, float(y_min), float(y_min + (n - 1) * h), n)

    @classmethod
    def symmetric(cls, cross_section, halfwidth):
        """Square-cell grid on (-a, a) containing the node y = 0."""
        h = cross_section.dz
        half = max(int(round(halfwidth / h)), 1)
        return cls(cross_section, -half * h, half * h, 2 * half + 1)

    @property
    def dy(self):
        return (self.y_max - self.y_min) / (self.n_y - 1)

    @property
    def dz(self):
        return self.cross_section.dz

    @property
    def y(self):
        return np.linspace(self.y_min, self.y_max, self.n_y)

    @property
    def z(self):
        return self.cross_section.z

    @property
    def shape(self):
        return (self.n_y, self.cross_section.n_z)

    @property
    def square_cells(self):
        return abs(self.dy - self.dz) <= 1e-12 * self.dz

    def index_of_y(self, y):
        """Index of the node at longitudinal position y, or None."""
        k = int(round((y - self.y_min) / self.dy))
        if 0 <= k < self.n_y and abs(self.y_min + k * self.dy - y) <= 1e-9 * self.dy:
            return k
        return None

    axis_count = 2
    min_spacing = property(lambda self: min(self.dy, self.dz))


Grid = Union[CrossSection, TubeGrid]


@dataclass(frozen=True, eq=False)
class Field:
    """Read-only snapshot of sampled values on a grid."""

    grid: Grid
    values: np.ndarray
    time_tag: float = 0.0

    def __post_init__(self):
        arr = np.array(self.values, dtype=float, copy=True)
        if arr.shape != self.grid.shape:
            raise ValueError(f"values shape {arr.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def with_values(self, values, time_tag=None):
        return Field(self.grid, values, self.time_tag if time_tag is None else time_tag)

    @property
    def sup(self):
        return float(np.max(np.abs(self.values)))


# ---------------------------------------------------------------------------
# discrete p-Laplacian


def _flux(d, p, eps):
    # (d^2 + eps^2)^((p-2)/2) d, written without abs so complex steps pass through
    if p == 2.0:
        return d
    return (d * d + eps * eps) ** ((p - 2.0) / 2.0) * d


def lattice_norm(p):
    """Normalisation of the four-line lattice sum."""
    return 1.0 + 2.0 * 2.0 ** (-p / 2.0)


def resolve_stencil(grid, p, stencil="auto"):
    """Name of the stencil actually used for a grid and exponent."""
    if stencil not in STENCILS:
        raise ValueError(f"unknown stencil {stencil!r}")
    if grid.axis_count == 1:
        return "line"
    if stencil == "auto":
        return "lattice" if grid.square_cells and p in LATTICE_ISOTROPIC_P else "face"
    if stencil == "lattice" and not grid.square_cells:
        raise ValueError("the lattice stencil needs dy == dz")
    return stencil


def _apply_line(u, h, p, eps):
    F = _flux((u[1:] - u[:-1]) / h, p, eps)
    out = np.zeros_like(u)
    out[1:-1] = (F[1:] - F[:-1]) / h
    return out


def _apply_lattice(u, h, p, eps):
    ny, nz = u.shape
    out = np.zeros_like(u)
    for di, dk, f in _LATTICE_EDGES:
        d = h * f
        k0, k1 = max(0, -dk), nz - max(0, dk)
        a = u[0:ny - di, k0:k1]
        b = u[di:ny, k0 + dk:k1 + dk]
        F = _flux((b - a) / d, p, eps) / d
        out[0:ny - di, k0:k1] += F
        out[di:ny, k0 + dk:k1 + dk] -= F
    out /= lattice_norm(p)
    out[0, :] = out[-1, :] = 0.0
    out[:, 0] = out[:, -1] = 0.0
    return out


def _apply_face(u, dy, dz, p, eps):
    out = np.zeros_like(u)
    # faces normal to z, rows 1..ny-2
    gn = (u[1:-1, 1:] - u[1:-1, :-1]) / dz
    cy = (u[2:, :] - u[:-2, :]) / (2.0 * dy)
    gt = 0.5 * (cy[:, 1:] + cy[:, :-1])
    Fz = (gn * gn + gt * gt + eps * eps) ** ((p - 2.0) / 2.0) * gn if p != 2.0 else gn
    out[1:-1, 1:-1] += (Fz[:, 1:] - Fz[:, :-1]) / dz
    # faces normal to y, columns 1..nz-2
    gn = (u[1:, 1:-1] - u[:-1, 1:-1]) / dy
    cz = (u[:, 2:] - u[:, :-2]) / (2.0 * dz)
    gt = 0.5 * (cz[1:, :] + cz[:-1, :])
    Fy = (gn * gn + gt * gt + eps * eps) ** ((p - 2.0) / 2.0) * gn if p != 2.0 else gn
    out[1:-1, 1:-1] += (Fy[1:, :] - Fy[:-1, :]) / dy
    return out


def apply_operator(u, grid, p, eps_reg=DEFAULT_EPS_REG, stencil="auto"):
    """Array-level p-Laplacian; accepts real or complex arrays."""
    kind = resolve_stencil(grid, p, stencil)
    if kind == "line":
        return _apply_line(u, grid.dz, p, eps_reg)
    if kind == "lattice":
        return _apply_lattice(u, grid.dz, p, eps_reg)
    return _apply_face(u, grid.dy, grid.dz, p, eps_reg)


def p_laplacian_apply(field, params, eps_reg=DEFAULT_EPS_REG, stencil="auto"):
    """Discrete div((|grad u|^2 + eps^2)^((p-2)/2) grad u) in flux form.

    Boundary nodes carry the Dirichlet data and receive the value 0.
    """
    if eps_reg < 0:
        raise ValueError("eps_reg must be nonnegative")
    if min(field.grid.shape) < 3:
        raise ValueError("grid needs at least 3 nodes per axis")
    out = apply_operator(field.values, field.grid, params.p, eps_reg, stencil)
    return field.with_values(out)


def max_gradient(u, grid, p, eps_reg=DEFAULT_EPS_REG, stencil="auto"):
    """Largest regularized difference quotient seen by the stencil."""
    kind = resolve_stencil(grid, p, stencil)
    if kind == "line":
        g = np.max(np.abs(np.diff(u))) / grid.dz
    else:
        gz = np.max(np.abs(np.diff(u, axis=1))) / grid.dz
        gy = np.max(np.abs(np.diff(u, axis=0))) / grid.dy
        if kind == "lattice":
            g = max(gz, gy)
        else:
            g = math.hypot(gz, gy)
    return math.sqrt(g * g + eps_reg * eps_reg)


def stiffness_factor(grid, p, stencil="auto"):
    """Effective axis count A in the explicit step bound.

    For the lattice stencil the diagonal lines add weight, giving 3/C_p when
    that exceeds the axis count.
    """
    kind = resolve_stencil(grid, p, stencil)
    if kind == "line":
        return 1.0
    if kind == "lattice":
        return max(2.0, 3.0 / lattice_norm(p))
    return 2.0


# ---------------------------------------------------------------------------
# log-time renormalization


def _check_finite(*xs):
    for x in xs:
        if not np.isfinite(x):
            raise ValueError("non-finite input")


def rescale_forward(u_value, t, params, shifted=False):
    """(u, t) -> (v, tau) with v = s^(1/(p-2)) u, tau = ln s, s = t or t + 1."""
    params.require_nonlinear()
    _check_finite(u_value, t)
    if shifted:
        if t < 0:
            raise ValueError("shifted renormalization needs t >= 0")
        s = t + 1.0
    else:
        if t <= 0:
            raise ValueError("unshifted renormalization needs t > 0")
        s = t
    return s ** (1.0 / (params.p - 2.0)) * u_value, math.log(s)


def rescale_inverse(v_value, tau, params, shifted=False):
    """Inverse of rescale_forward."""
    params.require_nonlinear()
    _check_finite(v_value, tau)
    s = math.exp(tau)
    u = v_value * math.exp(-tau / (params.p - 2.0))
    return u, (s - 1.0 if shifted else s)


# ---------------------------------------------------------------------------
# CSV round trip


def field_to_csv(field, path=None):
    """Write the field with a one-line grid header; returns the text."""
    g = field.grid
    if isinstance(g, TubeGrid):
        head = f"# grid: {g.cross_section.n_z},{g.n_y},{g.dz!r},{g.dy!r},{field.time_tag!r}\n"
        head += f"# y_range: {g.y_min!r},{g.y_max!r}\n"
        rows = np.atleast_2d(field.values)
    else:
        head = f"# grid: {g.n_z},1,{g.dz!r},0.0,{field.time_tag!r}\n"
        rows = field.values[None, :]
    buf = io.StringIO()
    buf.write(head)
    np.savetxt(buf, rows, delimiter=",", fmt="%.17g")
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def field_from_csv(path):
    """Read a field written by field_to_csv."""
    text = Path(path).read_text()
    lines = text.splitlines()
    n_z, n_y, dz, dy, tag = lines[0].split(":", 1)[1].split(",")
    n_z, n_y, dz, dy, tag = int(n_z), int(n_y), float(dz), float(dy), float(tag)
    data = np.loadtxt(io.StringIO(text), delimiter=",", comments="#", ndmin=2)
    section = CrossSection(dz * (n_z - 1), n_z)
    if n_y == 1:
        return Field(section, data[0], tag)
    y_min, y_max = (float(s) for s in lines[1].split(":", 1)[1].split(","))
    return Field(TubeGrid(section, y_min, y_max, n_y), data, tag)
