"""Weight families for the weighted energy (Carleman-type) machinery.

Degenerate family on the full interval:

    theta(t, a) = 1 / ([t (T - t)]^4 a^4)
    psi(x)      = c1 * (moment(x) - c2),   moment(x) = int_{x0}^{x} (y - x0)/k(y) dy
    phi         = theta * psi  (negative everywhere)

The moment integrand is nonnegative and integrable for degeneracy orders
below two; it is integrated with a dyadic subdivision graded toward x0 and
a local power-law tail model that is exact for |x - x0|**alpha
coefficients. c2 defaults to 1.5 times the largest moment so psi stays
negative with margin.

Non-degenerate family on a subinterval [B1, B2] where k is positive:

    sigma(x) = dfrak * int_x^{B2} 1/k,  dfrak = sup |k'| on the subinterval
    phat = theta * exp(kappa * sigma)
    Phi  = theta * (exp(kappa * sigma) - exp(2 * kappa * max sigma))  < 0

All exponential factors are handled in log space; products with the
singular theta powers are evaluated with the t in {0, T}, a = 0 faces
forced to zero, which is their correct limit (the exponential beats every
power of theta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coefficients import DiffusionCoefficient
from .core import Field, Grid
from .errors import DomainError, ParameterError, ShapeError, SingularityError

_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(8)
_GRADING_LEVELS = 40
DFRAK_FLOOR = 1e-6


def _gauss_piece(fn, lo: float, hi: float) -> float:
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return half * float(np.dot(_GAUSS_WEIGHTS, fn(mid + half * _GAUSS_NODES)))


def degenerate_moment_integral(coeff: DiffusionCoefficient, x: float) -> float:
    """int_{x0}^{x} (y - x0)/k(y) dy, always nonnegative.

    Dyadic pieces [d 2^-l-1, d 2^-l] graded toward x0, Gauss quadrature on
    each; the innermost sliver uses a local power model k ~ k(eta) (u/eta)^p
    with p estimated from two samples, exact for pure power laws.
    """
    x0 = coeff.x0
    d = float(x) - x0
    if d == 0.0:
        return 0.0
    s = 1.0 if d > 0 else -1.0
    dist = abs(d)

    def integrand(u):
        return u / coeff.k_at(x0 + s * u)

    eta = dist * 2.0 ** (-_GRADING_LEVELS)
    k_eta = float(coeff.k_at(x0 + s * eta))
    k_half = float(coeff.k_at(x0 + s * 0.5 * eta))
    if k_eta > 0.0 and k_half > 0.0:
        p = math.log2(k_eta / k_half)
        p = min(max(p, -0.5), 1.99)
        total = eta * eta / ((2.0 - p) * k_eta)
    else:
        total = 0.0
    lo = eta
    for _ in range(_GRADING_LEVELS):
        hi = min(2.0 * lo, dist)
        total += _gauss_piece(integrand, lo, hi)
        lo = hi
    return total


def _positive_inverse_integral(coeff: DiffusionCoefficient, lo: float, hi: float,
                               pieces: int = 64) -> float:
    """int_lo^hi 1/k on an interval where k stays positive."""
    if hi <= lo:
        return 0.0
    bounds = np.linspace(lo, hi, pieces + 1)
    return sum(_gauss_piece(lambda y: 1.0 / coeff.k_at(y), bounds[i], bounds[i + 1])
               for i in range(pieces))


@dataclass(frozen=True)
class WeightSet:
    """Evaluated weight family bound to one (coefficient, grid) pair."""

    coeff: DiffusionCoefficient
    grid: Grid
    c1: float
    c2: float
    s: float
    kappa: float
    dfrak: float
    psi_nodes: np.ndarray      # psi at the x cell centers
    psi_walls: tuple[float, float]
    moment_max: float

    @classmethod
    def build(cls, coeff: DiffusionCoefficient, grid: Grid, s: float,
              c1: float = 1.0, c2: float | None = None, kappa: float = 1.0) -> "WeightSet":
        if s <= 0 or c1 <= 0 or kappa <= 0:
            raise ParameterError("s, c1 and kappa must be positive")
        moments = np.array([degenerate_moment_integral(coeff, x) for x in grid.x_nodes])
        wall0 = degenerate_moment_integral(coeff, 0.0)
        wall1 = degenerate_moment_integral(coeff, 1.0)
        m_max = max(float(np.max(moments)), wall0, wall1)
        if c2 is None:
            c2 = 1.5 * m_max if m_max > 0 else 1.0
        if c2 <= m_max:
            raise ParameterError(
                f"c2={c2} must exceed the largest moment integral {m_max:.6g} so psi < 0")
        psi = c1 * (moments - c2)
        kp = np.abs(coeff.kprime_at(grid.x_nodes, grid.dx))
        dfrak = float(np.max(kp[np.isfinite(kp)], initial=0.0))
        psi.flags.writeable = False
        return cls(coeff=coeff, grid=grid, c1=float(c1), c2=float(c2), s=float(s),
                   kappa=float(kappa), dfrak=dfrak, psi_nodes=psi,
                   psi_walls=(c1 * (wall0 - c2), c1 * (wall1 - c2)), moment_max=m_max)

    def with_s(self, s: float) -> "WeightSet":
        if s <= 0:
            raise ParameterError("s must be positive")
        return WeightSet(coeff=self.coeff, grid=self.grid, c1=self.c1, c2=self.c2,
                         s=float(s), kappa=self.kappa, dfrak=self.dfrak,
                         psi_nodes=self.psi_nodes, psi_walls=self.psi_walls,
                         moment_max=self.moment_max)

    # -- pointwise evaluators ------------------------------------------------

    def theta(self, t: float, a: float) -> float:
        T = self.grid.T
        if t <= 0.0 or t >= T or a <= 0.0:
            raise SingularityError(f"theta is singular at t={t}, a={a}")
        if a > self.grid.A + 1e-12:
            raise ParameterError(f"age {a} outside (0, A]")
        return 1.0 / ((t * (T - t)) ** 4 * a**4)

    def psi(self, x: float) -> float:
        return self.c1 * (degenerate_moment_integral(self.coeff, x) - self.c2)

    # -- grid evaluators (certification internals) ----------------------------

    def theta_grid(self) -> np.ndarray:
        """theta on the (t, a) nodes, with the singular faces set to +inf."""
        g = self.grid
        t = g.t_nodes
        a = g.a_nodes
        with np.errstate(divide="ignore"):
            tt = (t * (g.T - t)) ** 4
            out = 1.0 / (tt[:, None] * (a**4)[None, :])
        return out

    def masked_theta_grid(self) -> np.ndarray:
        th = self.theta_grid()
        th[0] = 0.0
        th[-1] = 0.0
        th[:, 0] = 0.0
        return th

    def exp_factor_grid(self, psi_values: np.ndarray | None = None) -> np.ndarray:
        """exp(2 s theta psi) on the full (t, a, x) grid; exact zeros on the
        singular faces and on underflow."""
        psi_v = self.psi_nodes if psi_values is None else psi_values
        th = self.theta_grid()
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            logE = (2.0 * self.s) * th[:, :, None] * psi_v[None, None, :]
            E = np.exp(logE)
        E[~np.isfinite(E)] = 0.0
        return E

    def wall_exp_factors(self) -> tuple[np.ndarray, np.ndarray]:
        """exp(2 s theta psi(0)) and exp(2 s theta psi(1)) on the (t, a) nodes."""
        th = self.theta_grid()
        out = []
        for pw in self.psi_walls:
            with np.errstate(over="ignore", under="ignore", invalid="ignore"):
                e = np.exp(2.0 * self.s * th * pw)
            e[~np.isfinite(e)] = 0.0
            out.append(e)
        return out[0], out[1]


def theta_shifted(t, a, t1: float, t2: float, delta: float):
    """Window-shifted singular factor 1/((t-t1)^4 (t2-t)^4 (a-delta)^4)."""
    t = np.asarray(t, dtype=float)
    a = np.asarray(a, dtype=float)
    with np.errstate(divide="ignore"):
        return 1.0 / (((t - t1) * (t2 - t)) ** 4 * (a - delta) ** 4)


@dataclass(frozen=True)
class WeightPoint:
    theta: float
    psi: float
    phi: float
    log_exp_factor: float


def eval_weights(ws: WeightSet, t: float, a: float, x: float) -> WeightPoint:
    """Degenerate weight family at one interior point. The exponential
    factor exp(2 s phi) is returned in log space (it underflows long before
    the weights stop mattering)."""
    th = ws.theta(t, a)
    psi = ws.psi(x)
    phi = th * psi
    return WeightPoint(theta=th, psi=psi, phi=phi, log_exp_factor=2.0 * ws.s * phi)


@dataclass(frozen=True)
class NondegFamily:
    """sigma and its derived weights on one positive subinterval."""

    coeff: DiffusionCoefficient
    kappa: float
    interval: tuple[float, float]
    dfrak: float
    dfrak_floored: bool
    sigma_max: float

    def sigma(self, x: float) -> float:
        lo, hi = self.interval
        if not (lo - 1e-12 <= x <= hi + 1e-12):
            raise DomainError(f"x={x} outside the interval {self.interval}")
        return self.dfrak * _positive_inverse_integral(self.coeff, x, hi)


def nondeg_family(ws: WeightSet, interval: tuple[float, float]) -> NondegFamily:
    lo, hi = float(interval[0]), float(interval[1])
    if not lo < hi:
        raise DomainError(f"empty interval {interval}")
    samples = np.linspace(lo, hi, 513)
    kv = ws.coeff.k_at(samples)
    if np.min(kv) <= 0.0:
        raise DomainError(f"k is not strictly positive on {interval}")
    kp = np.abs(ws.coeff.kprime_at(samples, (hi - lo) / 512.0))
    dfrak = float(np.max(kp[np.isfinite(kp)], initial=0.0))
    floored = dfrak < DFRAK_FLOOR
    if floored:
        dfrak = DFRAK_FLOOR
    sigma_max = dfrak * _positive_inverse_integral(ws.coeff, lo, hi)
    return NondegFamily(coeff=ws.coeff, kappa=ws.kappa, interval=(lo, hi),
                        dfrak=dfrak, dfrak_floored=floored, sigma_max=sigma_max)


@dataclass(frozen=True)
class NondegWeightPoint:
    phat: float
    Phi: float
    sigma: float
    dfrak: float
    dfrak_floored: bool


def eval_nondeg_weights(ws: WeightSet, t: float, a: float, x: float,
                        interval: tuple[float, float]) -> NondegWeightPoint:
    """Non-degenerate weight family at one point of a positive subinterval."""
    fam = nondeg_family(ws, interval)
    th = ws.theta(t, a)
    sig = fam.sigma(x)
    phat = th * math.exp(ws.kappa * sig)
    Phi = th * (math.exp(ws.kappa * sig) - math.exp(2.0 * ws.kappa * fam.sigma_max))
    return NondegWeightPoint(phat=phat, Phi=Phi, sigma=sig, dfrak=fam.dfrak,
                             dfrak_floored=fam.dfrak_floored)


def profile_gradient(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Centered x derivative on cell centers with odd-reflection ghosts (the
    Dirichlet-consistent choice)."""
    v = np.asarray(values, dtype=float)
    out = np.empty_like(v)
    out[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / (2.0 * grid.dx)
    out[..., 0] = (v[..., 1] + v[..., 0]) / (2.0 * grid.dx)
    out[..., -1] = -(v[..., -1] + v[..., -2]) / (2.0 * grid.dx)
    return out


def degeneracy_cell_index(grid: Grid, x0: float) -> int:
    return min(int(x0 / grid.dx), grid.Nx - 1)


HARDY_WEIGHT_CHOICES = ("power_4_3", "k_scaled")


def hardy_poincare_ratio(p_choice: str, v: Field, coeff: DiffusionCoefficient,
                         grid: Grid) -> float:
    """[int p/(x-x0)^2 v^2] / [int p v_x^2] with the singular cell excluded.

    p is |x-x0|**(4/3) or (k |x-x0|**4)**(1/3). Scale invariant in v; zero
    by convention for the zero profile.
    """
    if p_choice not in HARDY_WEIGHT_CHOICES:
        raise ParameterError(f"unknown weight choice {p_choice!r}; use one of {HARDY_WEIGHT_CHOICES}")
    if v.rank != "x" or v.grid != grid:
        raise ShapeError("v must be an x profile on the given grid")
    vals = v.values
    if not np.any(vals):
        return 0.0
    x = grid.x_nodes
    d = x - coeff.x0
    if p_choice == "power_4_3":
        p = np.abs(d) ** (4.0 / 3.0)
    else:
        p = (coeff.k_at(x) * d**4) ** (1.0 / 3.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        sing = p / d**2
    i0 = degeneracy_cell_index(grid, coeff.x0)
    sing[i0] = 0.0
    sing[~np.isfinite(sing)] = 0.0
    num = grid.dx * float(np.sum(sing * vals**2))
    vx = profile_gradient(vals, grid)
    den = grid.dx * float(np.sum(p * vx**2))
    if den == 0.0:
        return 0.0
    return num / den
