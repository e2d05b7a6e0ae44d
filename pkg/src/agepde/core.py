"""Grids, sampled fields, norms and restriction operators.

The computational box is (0,T) x (0,A) x (0,1): time, age, space. Time and
age nodes sit on the step edges m*dt and j*da (including the endpoints), so
the marching scheme, the terminal/initial pairings and the renewal trace at
a = 0 land exactly on stored values, and the characteristic a - t = const
is an integer index shift. Space nodes are finite-volume cell centers: the
Dirichlet walls x = 0, 1 and the interior degeneracy point x0 are never
sampled directly, and diffusive fluxes are evaluated at cell edges.

Quadrature convention: midpoint rule (uniform weight dx) along the
cell-centered x axis, composite trapezoid along the edge-noded t and a
axes. Both are second order. The "scheme" inner products used by duality
and control synthesis are the uniform rectangle products dt*da*dx, matching
the marching scheme's own algebra exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import DomainError, ParameterError, ShapeError

# A cell edge may not coincide with the degeneracy abscissa closer than this
# fraction of dx: the flux coefficient would vanish there and artificially
# decouple the two halves of the domain.
EDGE_SNAP_TOL = 1e-12

_RANKS = ("x", "ax", "tax")


@dataclass(frozen=True)
class Grid:
    """Tensor-product discretization of (0,T) x (0,A) x (0,1).

    Invariants enforced by :meth:`build`:

    * ``T, A > 0`` and ``Nt, Na, Nx >= 4``, ``0 < x0 < 1``;
    * ``dt == da`` (the builder refines the coarser of the two directions
      when the requested counts disagree, and rejects incommensurable
      requests);
    * no x cell edge falls within ``EDGE_SNAP_TOL * dx`` of ``x0`` (the
      builder bumps Nx until clear).
    """

    T: float
    A: float
    Nt: int
    Na: int
    Nx: int
    x0: float

    @classmethod
    def build(cls, T: float, A: float, Nt: int, Na: int, Nx: int, x0: float) -> "Grid":
        if not (T > 0 and A > 0):
            raise ParameterError(f"T and A must be positive, got T={T}, A={A}")
        if min(Nt, Na, Nx) < 4:
            raise ParameterError(f"Nt, Na, Nx must all be >= 4, got {Nt}, {Na}, {Nx}")
        if not (0.0 < x0 < 1.0):
            raise ParameterError(f"x0 must lie in (0,1), got {x0}")

        Nt, Na = cls._reconcile_steps(T, A, int(Nt), int(Na))
        Nx = cls._snap_edges(int(Nx), x0)
        return cls(float(T), float(A), Nt, Na, Nx, float(x0))

    @staticmethod
    def _reconcile_steps(T: float, A: float, Nt: int, Na: int) -> tuple[int, int]:
        dt, da = T / Nt, A / Na
        if math.isclose(dt, da, rel_tol=1e-12):
            return Nt, Na
        step = min(dt, da)
        nt, na = T / step, A / step
        if abs(nt - round(nt)) > 1e-9 or abs(na - round(na)) > 1e-9:
            raise ParameterError(
                "time and age steps are incommensurable: need T/Nt == A/Na "
                f"(requested dt={dt}, da={da}); pick counts with Nt/T == Na/A"
            )
        return int(round(nt)), int(round(na))

    @staticmethod
    def _snap_edges(Nx: int, x0: float, max_bumps: int = 64) -> int:
        for _ in range(max_bumps):
            dx = 1.0 / Nx
            edges = np.arange(Nx + 1) * dx
            if np.min(np.abs(edges - x0)) > EDGE_SNAP_TOL * dx:
                return Nx
            Nx += 1
        raise ParameterError(f"could not place x0={x0} away from cell edges")

    @property
    def dt(self) -> float:
        return self.T / self.Nt

    @property
    def da(self) -> float:
        return self.A / self.Na

    @property
    def dx(self) -> float:
        return 1.0 / self.Nx

    @cached_property
    def t_nodes(self) -> np.ndarray:
        v = np.arange(self.Nt + 1) * self.dt
        v.flags.writeable = False
        return v

    @cached_property
    def a_nodes(self) -> np.ndarray:
        v = np.arange(self.Na + 1) * self.da
        v.flags.writeable = False
        return v

    @cached_property
    def x_nodes(self) -> np.ndarray:
        v = (np.arange(self.Nx) + 0.5) * self.dx
        v.flags.writeable = False
        return v

    @cached_property
    def x_edges(self) -> np.ndarray:
        v = np.arange(self.Nx + 1) * self.dx
        v.flags.writeable = False
        return v

    @cached_property
    def a_weights(self) -> np.ndarray:
        """Trapezoid weights over the age layers (used by the renewal rule)."""
        w = np.full(self.Na + 1, self.da)
        w[0] = w[-1] = 0.5 * self.da
        w.flags.writeable = False
        return w

    def shape(self, rank: str) -> tuple[int, ...]:
        if rank == "x":
            return (self.Nx,)
        if rank == "ax":
            return (self.Na + 1, self.Nx)
        if rank == "tax":
            return (self.Nt + 1, self.Na + 1, self.Nx)
        raise ParameterError(f"unknown field rank {rank!r}")

    def summary(self) -> str:
        return f"T={self.T:g},A={self.A:g},Nt={self.Nt},Na={self.Na},Nx={self.Nx},x0={self.x0:g}"

    def refined(self, factor: int = 2) -> "Grid":
        """Grid with every step halved (factor 2) or divided by `factor`."""
        return Grid.build(self.T, self.A, self.Nt * factor, self.Na * factor,
                          self.Nx * factor, self.x0)


@dataclass(frozen=True)
class Field:
    """A scalar field sampled on a grid.

    rank "x": profile over x; "ax": slice over (a, x); "tax": full
    trajectory over (t, a, x), C-ordered. Values are copied and frozen at
    construction; fields are safe to share across threads.
    """

    grid: Grid
    rank: str
    values: np.ndarray

    def __post_init__(self):
        if self.rank not in _RANKS:
            raise ParameterError(f"unknown field rank {self.rank!r}")
        arr = np.array(self.values, dtype=float)
        expected = self.grid.shape(self.rank)
        if arr.shape != expected:
            raise ShapeError(f"rank {self.rank!r} expects shape {expected}, got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @classmethod
    def zeros(cls, grid: Grid, rank: str) -> "Field":
        return cls(grid, rank, np.zeros(grid.shape(rank)))

    @classmethod
    def from_function(cls, grid: Grid, rank: str, fn: Callable) -> "Field":
        """Sample fn on the grid nodes. fn must broadcast over numpy arrays:
        fn(x), fn(a, x) or fn(t, a, x) depending on rank."""
        x = grid.x_nodes
        if rank == "x":
            vals = np.broadcast_to(fn(x), grid.shape(rank))
        elif rank == "ax":
            vals = np.broadcast_to(fn(grid.a_nodes[:, None], x[None, :]), grid.shape(rank))
        elif rank == "tax":
            vals = np.broadcast_to(
                fn(grid.t_nodes[:, None, None], grid.a_nodes[None, :, None], x[None, None, :]),
                grid.shape(rank))
        else:
            raise ParameterError(f"unknown field rank {rank!r}")
        return cls(grid, rank, vals)

    def with_values(self, values: np.ndarray) -> "Field":
        return Field(self.grid, self.rank, values)

    def require_finite(self) -> "Field":
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("field contains non-finite values")
        return self

    def axes(self) -> str:
        return self.rank


@dataclass(frozen=True)
class Box:
    """A sub-box of the computational domain. None means the full extent of
    that axis; (lo, hi) with lo == hi means point evaluation at that node
    (the axis is not integrated over)."""

    t: tuple[float, float] | None = None
    a: tuple[float, float] | None = None
    x: tuple[float, float] | None = None

    def interval(self, axis: str):
        return getattr(self, axis)


def _axis_quadrature(nodes: np.ndarray, spacing: float, interval, centered: bool) -> np.ndarray:
    """Quadrature weight vector for one axis restricted to `interval`.

    Edge-noded axes get trapezoid weights, cell-centered axes midpoint
    weights. A degenerate interval (lo == hi) selects the matching node with
    unit weight (point evaluation)."""
    if interval is None:
        w = np.full(nodes.size, spacing)
        if not centered:
            w[0] *= 0.5
            w[-1] *= 0.5
        return w
    lo, hi = float(interval[0]), float(interval[1])
    if lo > hi:
        raise DomainError(f"empty interval ({lo}, {hi})")
    if lo == hi:
        j = int(np.argmin(np.abs(nodes - lo)))
        if abs(nodes[j] - lo) > 1e-9 * max(spacing, 1.0):
            raise DomainError(f"point {lo} is not a grid node on this axis")
        w = np.zeros(nodes.size)
        w[j] = 1.0
        return w
    tol = 1e-12 * max(spacing, 1.0)
    inside = (nodes >= lo - tol) & (nodes <= hi + tol)
    n = int(inside.sum())
    if n == 0:
        raise DomainError(f"no nodes inside ({lo}, {hi})")
    w = np.zeros(nodes.size)
    if centered:
        w[inside] = spacing
    else:
        if n == 1:
            raise DomainError(f"interval ({lo}, {hi}) is thinner than one step")
        sub = np.full(n, spacing)
        sub[0] *= 0.5
        sub[-1] *= 0.5
        w[inside] = sub
    return w


def _axis_vectors(field: Field, box: Box | None) -> list[np.ndarray]:
    g = field.grid
    box = box or Box()
    vecs = []
    if field.rank == "tax":
        vecs.append(_axis_quadrature(g.t_nodes, g.dt, box.t, centered=False))
    if field.rank in ("ax", "tax"):
        vecs.append(_axis_quadrature(g.a_nodes, g.da, box.a, centered=False))
    vecs.append(_axis_quadrature(g.x_nodes, g.dx, box.x, centered=True))
    return vecs


def _weight_array(field: Field, weight) -> np.ndarray | float:
    if weight is None:
        return 1.0
    if isinstance(weight, (int, float)):
        return float(weight)
    if isinstance(weight, Field):
        if weight.grid != field.grid:
            raise ShapeError("field and weight live on different grids")
        if weight.rank == field.rank:
            return weight.values
        # lower-rank weights broadcast from the trailing axes
        if field.rank.endswith(weight.rank):
            extra = len(field.values.shape) - len(weight.values.shape)
            return weight.values[(None,) * extra]
        raise ShapeError(f"cannot broadcast weight rank {weight.rank!r} onto {field.rank!r}")
    arr = np.asarray(weight, dtype=float)
    if arr.shape != field.values.shape:
        raise ShapeError("raw weight array must match the field shape")
    return arr


def weighted_norm(field: Field, weight=None, box: Box | None = None) -> float:
    """Quadrature of weight * field**2 over a sub-box.

    `weight` may be None (1), a scalar, a Field of equal or lower rank on
    the same grid, or a raw array of matching shape. Nonnegative whenever
    the weight is. Axes given a degenerate (lo == hi) interval in `box` are
    point-evaluated instead of integrated.
    """
    w = _weight_array(field, weight)
    integrand = w * field.values**2
    for axis, vec in enumerate(_axis_vectors(field, box)):
        shape = [1] * integrand.ndim
        shape[axis] = vec.size
        integrand = integrand * vec.reshape(shape)
        # collapse as we go to keep temporaries small
    return float(integrand.sum())


def restrict(field: Field, box: Box) -> Field:
    """Sharp restriction: zero outside the box, unchanged inside."""
    g = field.grid
    masks = []
    axis_nodes = {"t": (g.t_nodes, g.dt), "a": (g.a_nodes, g.da), "x": (g.x_nodes, g.dx)}
    names = {"x": ("x",), "ax": ("a", "x"), "tax": ("t", "a", "x")}[field.rank]
    for name in names:
        nodes, spacing = axis_nodes[name]
        interval = (box.interval(name) if box else None)
        if interval is None:
            masks.append(np.ones(nodes.size, dtype=bool))
            continue
        lo, hi = float(interval[0]), float(interval[1])
        if lo > hi:
            raise DomainError(f"empty interval ({lo}, {hi}) on axis {name}")
        tol = 1e-12 * max(spacing, 1.0)
        m = (nodes >= lo - tol) & (nodes <= hi + tol)
        if not m.any():
            raise DomainError(f"restriction box misses every node on axis {name}")
        masks.append(m)
    full = masks[0]
    for m in masks[1:]:
        full = full[..., None] & m
    return field.with_values(np.where(full, field.values, 0.0))


def scheme_inner(u: Field, v: Field) -> float:
    """Uniform rectangle inner product matching the marching scheme."""
    if u.grid != v.grid or u.rank != v.rank:
        raise ShapeError("scheme_inner needs two fields of the same rank on one grid")
    g = u.grid
    cell = {"x": g.dx, "ax": g.da * g.dx, "tax": g.dt * g.da * g.dx}[u.rank]
    return cell * float(np.vdot(u.values, v.values).real)


def scheme_norm(u: Field) -> float:
    return math.sqrt(max(scheme_inner(u, u), 0.0))


def slice_norm_sq(values: np.ndarray, grid: Grid) -> float:
    """Squared uniform L2 norm of an (a, x) state array."""
    return grid.da * grid.dx * float(np.sum(values * values))


@dataclass(frozen=True)
class ControlRegion:
    """Open control region omega in (0,1): one interval straddling x0, or a
    pair of intervals on opposite sides of it."""

    intervals: tuple[tuple[float, float], ...]

    @classmethod
    def single(cls, alpha: float, rho: float, x0: float) -> "ControlRegion":
        if not (0.0 < alpha < x0 < rho < 1.0):
            raise ParameterError(
                f"single region needs 0 < alpha < x0 < rho < 1, got ({alpha}, {rho}) with x0={x0}")
        return cls(((float(alpha), float(rho)),))

    @classmethod
    def pair(cls, left: tuple[float, float], right: tuple[float, float], x0: float) -> "ControlRegion":
        l1, r1 = left
        l2, r2 = right
        if not (0.0 < l1 < r1 < x0 < l2 < r2 < 1.0):
            raise ParameterError(
                "pair region needs 0 < l1 < r1 < x0 < l2 < r2 < 1, got "
                f"({l1},{r1}) and ({l2},{r2}) with x0={x0}")
        return cls(((float(l1), float(r1)), (float(l2), float(r2))))

    @property
    def is_pair(self) -> bool:
        return len(self.intervals) == 2

    def validate_against(self, x0: float) -> None:
        if self.is_pair:
            (l1, r1), (l2, r2) = self.intervals
            if not (0.0 < l1 < r1 < x0 < l2 < r2 < 1.0):
                raise ParameterError(f"pair region {self.intervals} does not straddle x0={x0}")
        else:
            (a, r), = self.intervals
            if not (0.0 < a < x0 < r < 1.0):
                raise ParameterError(f"single region {self.intervals} does not contain x0={x0}")

    def mask(self, grid: Grid) -> np.ndarray:
        """Sharp 0/1 indicator on the x nodes (open intervals)."""
        x = grid.x_nodes
        m = np.zeros(grid.Nx, dtype=bool)
        for lo, hi in self.intervals:
            m |= (x > lo) & (x < hi)
        return m

    def measure(self) -> float:
        return sum(hi - lo for lo, hi in self.intervals)
