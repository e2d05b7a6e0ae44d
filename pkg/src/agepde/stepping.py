"""Split time stepping shared by the forward and backward solvers.

One forward step from level m to m+1 is the composition

    state  ->  age shift  ->  Crank-Nicolson diffusion per age layer
           ->  renewal fill of the newborn layer,

with the age shift exact (dt == da) and the diffusion operator the
symmetric finite-volume form (k u_x)_x - mu u on cell centers, fluxes at
cell edges, Dirichlet walls through ghost values. The backward march is the
algebraic transpose of the forward one, step by step: reversed renewal
(spreading the newborn trace into the fertile layers), the same symmetric
Crank-Nicolson solve, reversed age shift with a zero layer entering at
a = A. That exact transposition is what makes the discrete duality pairing
and the control Gramian symmetric to machine precision.

All layer solves for one step are stacked into a single banded SPD system
and solved with a banded Cholesky factorization (factored once when the
death rate does not depend on time).
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .coefficients import DiffusionCoefficient, RateSpec
from .core import ControlRegion, Grid
from .errors import SolverError

STEP_RESIDUAL_TOL = 1e-10


def edge_conductances(grid: Grid, coeff: DiffusionCoefficient) -> np.ndarray:
    """k at the cell edges divided by dx^2, with the wall entries doubled
    (the ghost value sits half a cell outside the first/last center)."""
    g = coeff.k_at(grid.x_edges) / grid.dx**2
    g = np.array(g, dtype=float)
    g[0] *= 2.0
    g[-1] *= 2.0
    return g


class SpatialOperator:
    """(k u_x)_x - mu u on a stack of independent age layers, plus its
    Crank-Nicolson half-step solve (I - (dt/2) L)^{-1}."""

    def __init__(self, grid: Grid, cond: np.ndarray, mu_rows: np.ndarray, dt: float):
        self.grid = grid
        self.cond = cond
        self.mu = np.asarray(mu_rows, dtype=float)
        self.layers, self.nx = self.mu.shape
        self.c = 0.5 * dt
        self.dt = dt
        n = self.layers * self.nx
        diag = 1.0 + self.c * (cond[:-1] + cond[1:])[None, :] + self.c * self.mu
        ab = np.zeros((2, n))
        ab[1] = diag.reshape(-1)
        sup = np.tile(-self.c * cond[1:-1], (self.layers, 1))
        sup = np.concatenate([np.zeros((self.layers, 1)), sup], axis=1).reshape(-1)
        ab[0] = sup  # ab[0, 0] unused by the banded storage convention
        try:
            self._cho = cholesky_banded(ab, lower=False)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
            raise SolverError(f"implicit step matrix is not positive definite: {exc}")

    def apply(self, u: np.ndarray) -> np.ndarray:
        """L u for u of shape (layers, nx)."""
        out = -(self.cond[:-1] + self.cond[1:])[None, :] * u - self.mu * u
        out[:, :-1] += self.cond[1:-1] * u[:, 1:]
        out[:, 1:] += self.cond[1:-1] * u[:, :-1]
        return out

    def implicit_solve(self, rhs: np.ndarray) -> np.ndarray:
        """(I - (dt/2) L)^{-1} rhs."""
        sol = cho_solve_banded((self._cho, False), rhs.reshape(-1))
        return sol.reshape(self.layers, self.nx)

    def cn_step(self, u: np.ndarray, src: np.ndarray | None = None):
        """One Crank-Nicolson step. Returns (z, h) where z is the stepped
        state and h = (I - (dt/2) L)^{-1}(u + (dt/2) src) is the half-step
        solve (the dual source trace when src is None)."""
        rhs = u if src is None else u + self.c * src
        h = self.implicit_solve(rhs)
        return 2.0 * h - u, h

    def residual(self, h: np.ndarray, rhs: np.ndarray) -> float:
        r = h - self.c * self.apply(h) - rhs
        denom = float(np.linalg.norm(rhs))
        return float(np.linalg.norm(r)) / denom if denom > 0 else float(np.linalg.norm(r))


class Stepper:
    """Marching engine bound to one (grid, coefficient, rates) triple."""

    def __init__(self, grid: Grid, coeff: DiffusionCoefficient, rates: RateSpec,
                 region: ControlRegion | None = None):
        self.grid = grid
        self.coeff = coeff
        self.rates = rates
        self.cond = edge_conductances(grid, coeff)
        self.mask = region.mask(grid).astype(float) if region is not None else None

        w = grid.a_weights
        beta = rates.beta_at(grid.a_nodes[:, None], grid.x_nodes[None, :])
        den = 1.0 - w[0] * beta[0]
        if np.any(den < 0.1):
            raise SolverError("renewal too stiff: fertility at age zero close to 1/weight")
        self.renewal_coeff = (w[:, None] * beta) / den[None, :]
        self.renewal_coeff[0] = 0.0
        self.has_renewal = bool(np.any(self.renewal_coeff != 0.0))

        self._op_cache: SpatialOperator | None = None

    # -- operators -------------------------------------------------------

    def _mu_rows(self, m: int) -> np.ndarray:
        tc = (m + 0.5) * self.grid.dt
        a = self.grid.a_nodes[1:, None]
        x = self.grid.x_nodes[None, :]
        return np.broadcast_to(self.rates.mu_at(tc, a, x), (self.grid.Na, self.grid.Nx)).copy()

    def operator_for_step(self, m: int) -> SpatialOperator:
        if not self.rates.mu_time_dependent:
            if self._op_cache is None:
                self._op_cache = SpatialOperator(self.grid, self.cond, self._mu_rows(0),
                                                 self.grid.dt)
            return self._op_cache
        return SpatialOperator(self.grid, self.cond, self._mu_rows(m), self.grid.dt)

    # -- elementary maps ---------------------------------------------------

    def shift(self, state: np.ndarray) -> np.ndarray:
        """Exact age advance: layer j receives layer j-1; layer 0 empties;
        the oldest layer flows out."""
        out = np.empty_like(state)
        out[0] = 0.0
        out[1:] = state[:-1]
        return out

    def renewal_fill(self, state: np.ndarray) -> None:
        """Newborn layer from the trapezoid quadrature of beta * state over
        age, at the same time level (the age-zero self term is solved for)."""
        state[0] = np.einsum("jx,jx->x", self.renewal_coeff[1:], state[1:])

    def renewal_transpose(self, v: np.ndarray, nonlocal_term: bool) -> np.ndarray:
        """Transpose of the renewal fill, restricted to layers 1..Na: the
        newborn-trace value spreads into the fertile layers."""
        if nonlocal_term and self.has_renewal:
            return v[1:] + self.renewal_coeff[1:] * v[0]
        return v[1:].copy()

    def masked(self, arr: np.ndarray) -> np.ndarray:
        return arr if self.mask is None else arr * self.mask

    # -- full steps --------------------------------------------------------

    def forward_step(self, m: int, state: np.ndarray,
                     f_next: np.ndarray | None = None) -> tuple[np.ndarray, float]:
        """Advance one level. `f_next` is the control sample at level m+1,
        already shaped (Na+1, Nx); it is masked to the control region and
        acts on layers 1..Na only. Returns (new state, step residual)."""
        op = self.operator_for_step(m)
        u = self.shift(state)
        src = None
        if f_next is not None:
            src = self.masked(f_next[1:])
        rhs = u[1:] if src is None else u[1:] + op.c * src
        h = op.implicit_solve(rhs)
        z = 2.0 * h - u[1:]
        if not np.all(np.isfinite(z)):
            raise SolverError("non-finite state after implicit solve", step=m)
        res = op.residual(h, rhs)
        if res > STEP_RESIDUAL_TOL:
            raise SolverError(f"time-step linear residual {res:.2e} above tolerance", step=m)
        new = np.empty_like(state)
        new[1:] = z
        new[0] = 0.0
        self.renewal_fill(new)
        return new, res

    def backward_step(self, m: int, v_next: np.ndarray, nonlocal_term: bool,
                      source_level: np.ndarray | None = None,
                      want_trace: bool = False):
        """Transpose of forward_step: from level m+1 down to level m.

        When `source_level` is given (the general adjoint system with a
        right-hand side) the trace is unavailable. Returns (v, trace, res).
        """
        op = self.operator_for_step(m)
        q = self.renewal_transpose(v_next, nonlocal_term)
        rhs = q if source_level is None else q + op.c * source_level[1:]
        h = op.implicit_solve(rhs)
        z = 2.0 * h - q
        if not np.all(np.isfinite(z)):
            raise SolverError("non-finite state after implicit solve", step=m)
        res = op.residual(h, rhs)
        if res > STEP_RESIDUAL_TOL:
            raise SolverError(f"time-step linear residual {res:.2e} above tolerance", step=m)
        trace = None
        if want_trace:
            if source_level is not None:
                raise SolverError("dual source trace undefined for a sourced backward solve")
            trace = np.zeros_like(v_next)
            trace[1:] = self.masked(h)
        v = np.empty_like(v_next)
        v[:-1] = z
        v[-1] = 0.0
        return v, trace, res

    # -- energies ----------------------------------------------------------

    def dirichlet_form(self, state: np.ndarray) -> np.ndarray:
        """Integral of k u_x^2 over (0,1) for each age layer (ghost walls),
        shape (Na+1,)."""
        d = np.diff(state, axis=-1)
        interior = np.sum(self.cond[1:-1] * d * d, axis=-1)
        walls = self.cond[0] * state[..., 0] ** 2 + self.cond[-1] * state[..., -1] ** 2
        return (interior + walls) * self.grid.dx
