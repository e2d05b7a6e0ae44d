"""Backward-in-time dual solver and the characteristic-line representation.

The backward march is, step by step, the algebraic transpose of the forward
scheme: the terminal slice flows back with the age shift reversed (a zero
layer enters at a = A), the renewal rule transposes into the nonlocal term
that spreads the newborn trace into the fertile ages, and the symmetric
Crank-Nicolson diffusion solve is its own transpose. With the nonlocal term
switched off and a right-hand side supplied, the same march solves the
plain dual system.

Along a characteristic t - a = const the dual solution with no fertility is
a pure diffusion-absorption evolution of the terminal datum; this module
also provides that evolution (``semigroup_apply``) and the closed
characteristic evaluation built on it, including the newborn trace at
a = 0 and a depth-one expansion of the fertility contribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import DiffusionCoefficient, RateSpec
from .core import Field, Grid, scheme_inner
from .errors import ParameterError, ShapeError
from .forward import ForwardProblem
from .stepping import SpatialOperator, Stepper, edge_conductances


@dataclass(frozen=True)
class AdjointProblem:
    """Backward problem data. The terminal slice is projected so that its
    oldest layer vanishes; with ``nonlocal_term`` the renewal-dual coupling
    is active, without it (and with an optional ``source``) the plain dual
    system is solved."""

    coeff: DiffusionCoefficient
    rates: RateSpec
    grid: Grid
    vT: Field
    source: Field | None = None
    nonlocal_term: bool = True

    def __post_init__(self):
        if self.vT.grid != self.grid or self.vT.rank != "ax":
            raise ShapeError("vT must be an (a, x) slice on the problem grid")
        self.vT.require_finite()
        projected = np.array(self.vT.values)
        projected[-1] = 0.0
        object.__setattr__(self, "vT", Field(self.grid, "ax", projected))
        if self.source is not None:
            if self.source.grid != self.grid or self.source.rank != "tax":
                raise ShapeError("source must be a trajectory on the problem grid")
            self.source.require_finite()


@dataclass(frozen=True)
class BackwardSolution:
    trajectory: Field
    trace: Field | None
    max_step_residual: float


def solve_backward(problem: AdjointProblem, region=None,
                   want_trace: bool = False) -> BackwardSolution:
    """March the dual state from the terminal slice down to t = 0.

    ``want_trace`` additionally returns the dual source trace: the states
    that pair exactly with a forward control in the discrete duality
    identity, masked to ``region``. It is only available for the unsourced
    system.
    """
    g = problem.grid
    stepper = Stepper(g, problem.coeff, problem.rates, region)
    v = np.empty(g.shape("tax"))
    v[g.Nt] = problem.vT.values
    trace = np.zeros(g.shape("tax")) if want_trace else None
    src = problem.source.values if problem.source is not None else None
    max_res = 0.0
    for m in range(g.Nt - 1, -1, -1):
        lvl, tr, res = stepper.backward_step(
            m, v[m + 1], problem.nonlocal_term,
            source_level=(src[m] if src is not None else None),
            want_trace=want_trace)
        v[m] = lvl
        if want_trace:
            trace[m + 1] = tr
        max_res = max(max_res, res)
    return BackwardSolution(
        trajectory=Field(g, "tax", v),
        trace=Field(g, "tax", trace) if want_trace else None,
        max_step_residual=max_res)


def _profile_operator(grid: Grid, coeff: DiffusionCoefficient, mu_profile) -> SpatialOperator:
    cond = edge_conductances(grid, coeff)
    mu_row = np.broadcast_to(np.asarray(mu_profile(grid.x_nodes), dtype=float),
                             (1, grid.Nx)).copy()
    return SpatialOperator(grid, cond, mu_row, grid.dt)


def steps_for_duration(tau: float, grid: Grid) -> int:
    if tau < 0:
        raise ParameterError(f"evolution duration must be nonnegative, got {tau}")
    steps = int(round(tau / grid.dt))
    if abs(tau - steps * grid.dt) > 1e-9 * max(grid.dt, 1.0):
        raise ParameterError(
            f"duration {tau} is not an integer number of steps (dt={grid.dt})")
    return steps


def semigroup_apply(profile: Field, tau: float, coeff: DiffusionCoefficient,
                    mu_frozen) -> Field:
    """Pure diffusion-absorption evolution of an x profile for duration tau.

    tau must be an integer number of time steps. The one-step map is the
    same Crank-Nicolson solve the marching schemes use, so compositions
    agree with the solvers exactly.
    """
    if profile.rank != "x":
        raise ShapeError("semigroup_apply expects an x profile")
    g = profile.grid
    steps = steps_for_duration(tau, g)
    if steps == 0:
        return profile
    op = _profile_operator(g, coeff, mu_frozen)
    u = profile.values[None, :].copy()
    for _ in range(steps):
        u, _ = op.cn_step(u)
    return Field(g, "x", u[0])


def _node_index(value: float, nodes: np.ndarray, spacing: float, what: str) -> int:
    j = int(np.argmin(np.abs(nodes - value)))
    if abs(nodes[j] - value) > 1e-9 * max(spacing, 1.0):
        raise ParameterError(f"{what}={value} does not lie on a grid node")
    return j


def characteristic_eval(vT: Field, t: float, a: float, coeff: DiffusionCoefficient,
                        rates: RateSpec) -> Field:
    """Dual solution at (t, a) by the characteristic-line representation.

    Without fertility this is the evolved terminal datum
    S(T - t) vT(T + a - t, .) when the characteristic meets t = T inside the
    age span, and zero otherwise (the datum extends by the vanishing oldest
    layer). At a = 0 the newborn-trace formula S(T - t) vT(T - t, .) is used
    as is; it is exact whenever the fertility window is not reached along
    the characteristic. With fertility present, a depth-one expansion adds
    the quadrature of the evolved newborn trace against beta.

    The death rate is frozen to its x profile at the characteristic
    midpoint, which is exact when it does not depend on (t, a).
    """
    g = vT.grid
    if vT.rank != "ax":
        raise ShapeError("vT must be an (a, x) slice")
    m = _node_index(t, g.t_nodes, g.dt, "t")
    j = _node_index(a, g.a_nodes, g.da, "a")
    p = g.Nt - m
    t_mid = 0.5 * (t + g.T)
    a_mid = min(a + 0.5 * (g.T - t), g.A)

    def mu_frozen(x):
        return rates.mu_at(t_mid, a_mid, x)

    op = _profile_operator(g, coeff, mu_frozen)

    def evolve(values: np.ndarray, steps: int) -> np.ndarray:
        u = values[None, :].copy()
        for _ in range(steps):
            u, _ = op.cn_step(u)
        return u[0]

    if j + p <= g.Na:
        base = evolve(vT.values[j + p], p)
    else:
        base = np.zeros(g.Nx)
    if j == 0:
        return Field(g, "x", base)

    stepper = Stepper(g, coeff, rates)
    if not stepper.has_renewal:
        return Field(g, "x", base)

    # depth-one fertility term: trapezoid over the ages s crossed by the
    # characteristic, each contribution beta(s) times the newborn trace
    # evolved from its own terminal slice.
    j_up = min(j + p, g.Na)
    idx = np.arange(j, j_up + 1)
    if idx.size >= 2:
        w = np.full(idx.size, g.da)
        w[0] *= 0.5
        w[-1] *= 0.5
        beta = rates.beta_at(g.a_nodes[idx][:, None], g.x_nodes[None, :])
        extra = np.zeros(g.Nx)
        for pos, s_idx in enumerate(idx):
            q1 = int(s_idx - j)
            trace_idx = g.Nt - m - q1
            if trace_idx < 0 or trace_idx > g.Na:
                continue
            newborn = evolve(vT.values[trace_idx], p - q1)
            extra += w[pos] * evolve(beta[pos] * newborn, q1)
        base = base + extra
    return Field(g, "x", base)


def dual_source_trace(v_traj: Field, problem: ForwardProblem) -> Field:
    """Recompute the dual source trace from a stored backward trajectory,
    using the forward problem's stepping operators and control mask."""
    g = v_traj.grid
    stepper = Stepper(g, problem.coeff, problem.rates, problem.region)
    out = np.zeros(g.shape("tax"))
    for m in range(1, g.Nt + 1):
        q = stepper.renewal_transpose(v_traj.values[m], nonlocal_term=True)
        h = stepper.operator_for_step(m - 1).implicit_solve(q)
        out[m, 1:] = stepper.masked(h)
    return Field(g, "tax", out)


def duality_residual(y_traj: Field, v_traj: Field, f: Field | None,
                     problem: ForwardProblem) -> float:
    """|<y(T), vT> - <y0, v(0)> - <f, v>_omega| in the scheme's pairing.

    y_traj must come from the forward solve with control f and the
    problem's initial slice; v_traj from the unsourced backward solve with
    the nonlocal term on. The control pairing uses the dual source trace,
    which is what makes the identity hold to rounding error.
    """
    g = y_traj.grid
    if v_traj.grid != g or y_traj.rank != "tax" or v_traj.rank != "tax":
        raise ShapeError("trajectories must share the grid")
    cell = g.da * g.dx
    terminal = cell * float(np.vdot(y_traj.values[g.Nt], v_traj.values[g.Nt]))
    initial = cell * float(np.vdot(y_traj.values[0], v_traj.values[0]))
    pairing = 0.0
    if f is not None:
        if f.grid != g or f.rank != "tax":
            raise ShapeError("control must be a trajectory on the same grid")
        trace = dual_source_trace(v_traj, problem)
        mask = problem.region.mask(g).astype(float)
        fm = f.values * mask[None, None, :]
        pairing = g.dt * cell * float(np.sum(fm[1:] * trace.values[1:]))
    return abs(terminal - initial - pairing)


def full_duality_terms(y_traj: Field, v_traj: Field) -> tuple[float, float]:
    """(terminal, initial) scheme pairings, mostly for diagnostics."""
    g = y_traj.grid
    yT = Field(g, "ax", y_traj.values[g.Nt])
    vT = Field(g, "ax", v_traj.values[g.Nt])
    y0 = Field(g, "ax", y_traj.values[0])
    v0 = Field(g, "ax", v_traj.values[0])
    return scheme_inner(yT, vT), scheme_inner(y0, v0)
