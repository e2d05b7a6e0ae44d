"""Diffusion coefficients and demographic rates, with validity checks.

The dispersion coefficient k vanishes at an interior point x0. Its order of
degeneracy is measured by the smallest M with (x - x0) k' <= M k almost
everywhere: sub-linear orders (M < 1) keep the two halves of the domain
coupled, orders in [1, 2) do not. ``classify`` estimates M on grid samples;
``make_power_law`` builds the canonical |x - x0|**alpha family analytically.

All checks here are report-generating: the solvers accept any coefficient,
only the certification machinery needs the hypotheses to hold.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import Grid
from .errors import ParameterError

# Nodes closer to x0 than max(2*dx, this floor) are excluded from the
# finite-difference estimate of M: the quotient (x-x0)k'/k is numerically
# indeterminate at the degeneracy, and a window proportional to dx alone
# would freeze the nearest-node stencil error instead of letting it vanish
# under refinement.
M_ESTIMATE_WINDOW_FLOOR = 0.02


class Classification(str, enum.Enum):
    WEAKLY_DEGENERATE = "weakly_degenerate"
    STRONGLY_DEGENERATE = "strongly_degenerate"
    NON_DEGENERATE = "non_degenerate"
    INVALID = "invalid"


@dataclass(frozen=True)
class DiffusionCoefficient:
    """A dispersion coefficient on [0,1] with its degeneracy metadata.

    ``k`` (and optionally its derivative ``kprime``) must be pure,
    numpy-broadcastable callables. ``m_estimate`` is the estimated (or
    analytically known) degeneracy order M.
    """

    k: Callable[[np.ndarray], np.ndarray]
    x0: float
    kprime: Callable[[np.ndarray], np.ndarray] | None
    classification: Classification
    m_estimate: float
    theta: float | None = None
    gamma: float | None = None
    note: str = ""

    def k_at(self, x) -> np.ndarray:
        return np.asarray(self.k(np.asarray(x, dtype=float)), dtype=float)

    def kprime_at(self, x, h: float) -> np.ndarray:
        """Derivative of k: analytic when available, else second-order
        differences with step h (one-sided at the walls)."""
        x = np.asarray(x, dtype=float)
        if self.kprime is not None:
            return np.asarray(self.kprime(x), dtype=float)
        lo = np.clip(x - h, 0.0, 1.0)
        hi = np.clip(x + h, 0.0, 1.0)
        return (self.k_at(hi) - self.k_at(lo)) / (hi - lo)


@dataclass(frozen=True)
class ClassifyResult:
    classification: Classification
    m_hat: float
    detail: str = ""


def _m_window(grid: Grid) -> float:
    return max(2.0 * grid.dx, M_ESTIMATE_WINDOW_FLOOR)


def classify(k: Callable, x0: float, grid: Grid,
             kprime: Callable | None = None) -> ClassifyResult:
    """Estimate the degeneracy order M and tag the coefficient.

    M_hat is the maximum of (x - x0) k'(x) / k(x) over the x nodes outside a
    window around x0. Tags: weakly degenerate for M_hat in (0,1), strongly
    degenerate for [1,2), non-degenerate when k is strictly positive
    everywhere (including x0), invalid otherwise.
    """
    x = grid.x_nodes
    kv = np.asarray(k(x), dtype=float)
    if not np.all(np.isfinite(kv)):
        return ClassifyResult(Classification.INVALID, np.nan, "k is non-finite at a node")
    scale = float(np.max(np.abs(kv))) or 1.0
    if np.min(kv) < -1e-12 * scale:
        return ClassifyResult(Classification.INVALID, np.nan,
                              f"k negative at a node (min {np.min(kv):.3e})")
    k_at_x0 = float(k(np.asarray(x0)))
    if k_at_x0 > 1e-8 * scale and np.min(kv) > 1e-8 * scale:
        return ClassifyResult(Classification.NON_DEGENERATE, 0.0, "k strictly positive")
    if k_at_x0 > 1e-8 * scale:
        return ClassifyResult(Classification.INVALID, np.nan,
                              "k vanishes away from x0 but not at it")

    window = _m_window(grid)
    sel = np.abs(x - x0) >= window
    if np.min(kv[sel]) <= 0.0:
        return ClassifyResult(Classification.INVALID, np.nan,
                              "k vanishes away from the degeneracy point")
    if kprime is not None:
        kp = np.asarray(kprime(x[sel]), dtype=float)
    else:
        h = grid.dx
        kp = (np.asarray(k(np.clip(x[sel] + h, 0, 1)), dtype=float)
              - np.asarray(k(np.clip(x[sel] - h, 0, 1)), dtype=float))
        kp /= (np.clip(x[sel] + h, 0, 1) - np.clip(x[sel] - h, 0, 1))
    ratio = (x[sel] - x0) * kp / kv[sel]
    m_hat = float(np.max(ratio))
    if 0.0 < m_hat < 1.0:
        tag = Classification.WEAKLY_DEGENERATE
    elif 1.0 <= m_hat < 2.0:
        tag = Classification.STRONGLY_DEGENERATE
    else:
        return ClassifyResult(Classification.INVALID, m_hat,
                              f"estimated order {m_hat:.4f} outside (0, 2)")
    return ClassifyResult(tag, m_hat)


def coefficient_from_callable(k: Callable, x0: float, grid: Grid,
                              kprime: Callable | None = None) -> DiffusionCoefficient:
    res = classify(k, x0, grid, kprime)
    return DiffusionCoefficient(k=k, x0=x0, kprime=kprime,
                                classification=res.classification,
                                m_estimate=res.m_hat, note=res.detail)


def make_power_law(alpha: float, x0: float) -> DiffusionCoefficient:
    """k(x) = |x - x0|**alpha with its analytic derivative.

    alpha < 1 is weakly degenerate, alpha in [1,2) strongly degenerate;
    alpha >= 2 is flagged invalid for the certification theory but remains
    usable by the solvers.
    """
    if alpha <= 0:
        raise ParameterError(f"power-law exponent must be positive, got {alpha}")
    if not (0.0 < x0 < 1.0):
        raise ParameterError(f"x0 must lie in (0,1), got {x0}")
    a = float(alpha)

    def k(x):
        return np.abs(np.asarray(x, dtype=float) - x0) ** a

    def kprime(x):
        d = np.asarray(x, dtype=float) - x0
        ad = np.abs(d)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a * np.sign(d) * ad ** (a - 1.0)
        return np.where(ad > 0, out, 0.0)

    if a < 1.0:
        tag, note = Classification.WEAKLY_DEGENERATE, ""
    elif a < 2.0:
        tag, note = Classification.STRONGLY_DEGENERATE, ""
    else:
        tag, note = Classification.INVALID, "degeneracy order >= 2: outside the certified range"
    return DiffusionCoefficient(k=k, x0=float(x0), kprime=kprime,
                                classification=tag, m_estimate=a, note=note)


def make_constant(value: float) -> DiffusionCoefficient:
    if value <= 0:
        raise ParameterError(f"constant coefficient must be positive, got {value}")

    def k(x):
        return np.full_like(np.asarray(x, dtype=float), float(value))

    def kprime(x):
        return np.zeros_like(np.asarray(x, dtype=float))

    return DiffusionCoefficient(k=k, x0=0.5, kprime=kprime,
                                classification=Classification.NON_DEGENERATE,
                                m_estimate=0.0)


@dataclass(frozen=True)
class ConditionCheck:
    required: bool
    passed: bool
    value: float
    detail: str = ""


@dataclass(frozen=True)
class DegeneracyConditionsReport:
    """Checks needed by the certification theory at higher degeneracy orders.

    side_monotonicity: k / |x-x0|**theta non-increasing left of x0 and
    non-decreasing right of it (required when M > 4/3).
    lower_bound: the same quotient bounded away from zero (required when
    M > 3/2).
    derivative_growth: |k'| <= gamma * |x-x0|**(2*theta - 3) (required when
    M > 3/2).
    Checks not required at the given M are still evaluated and reported
    with required=False.
    """

    m: float
    theta: float
    gamma: float
    side_monotonicity: ConditionCheck
    lower_bound: ConditionCheck
    derivative_growth: ConditionCheck

    @property
    def all_required_pass(self) -> bool:
        checks = (self.side_monotonicity, self.lower_bound, self.derivative_growth)
        return all(c.passed for c in checks if c.required)


def check_strong_degeneracy_conditions(coeff: DiffusionCoefficient, theta: float,
                                       gamma: float, grid: Grid) -> DegeneracyConditionsReport:
    """Evaluate the side-monotonicity, lower-bound and derivative-growth
    conditions on grid samples outside the degeneracy window."""
    m = coeff.m_estimate
    if coeff.classification not in (Classification.WEAKLY_DEGENERATE,
                                    Classification.STRONGLY_DEGENERATE):
        raise ParameterError("conditions only apply to degenerate coefficients")
    if not (0.0 < theta <= m + 1e-12):
        raise ParameterError(f"theta must lie in (0, M] = (0, {m:g}], got {theta}")

    x = grid.x_nodes
    window = _m_window(grid)
    d = x - coeff.x0
    left = d <= -window
    right = d >= window
    kv = coeff.k_at(x)
    with np.errstate(divide="ignore"):
        quot = kv / np.abs(d) ** theta

    slack = 1e-10 * max(float(np.max(quot[left | right])), 1.0)
    mono_left = bool(np.all(np.diff(quot[left]) <= slack))
    mono_right = bool(np.all(np.diff(quot[right]) >= -slack))
    dev = 0.0
    if left.any():
        dev = max(dev, float(np.max(np.maximum(np.diff(quot[left]), 0.0), initial=0.0)))
    if right.any():
        dev = max(dev, float(np.max(np.maximum(-np.diff(quot[right]), 0.0), initial=0.0)))
    side = ConditionCheck(required=m > 4.0 / 3.0, passed=mono_left and mono_right,
                          value=dev, detail="max monotonicity violation")

    qmin = float(np.min(quot[left | right]))
    qmax = float(np.max(quot[left | right]))
    lower = ConditionCheck(required=m > 1.5, passed=qmin > 1e-8 * max(qmax, 1.0),
                           value=qmin, detail="min of k/|x-x0|^theta off the window")

    sel = left | right
    kp = np.abs(coeff.kprime_at(x[sel], grid.dx))
    bound = gamma * np.abs(d[sel]) ** (2.0 * theta - 3.0)
    margin = float(np.max(kp / np.maximum(bound, 1e-300)))
    growth = ConditionCheck(required=m > 1.5, passed=margin <= 1.0 + 1e-9,
                            value=margin, detail="max |k'| / (gamma |x-x0|^(2 theta-3))")

    return DegeneracyConditionsReport(m=m, theta=float(theta), gamma=float(gamma),
                                      side_monotonicity=side, lower_bound=lower,
                                      derivative_growth=growth)


@dataclass(frozen=True)
class RateSpec:
    """Death rate mu(t, a, x) and fertility rate beta(a, x), both
    numpy-broadcastable, with the fertility onset age abar.

    mu_time_dependent=False lets the solvers factor the implicit step once.
    """

    mu: Callable
    beta: Callable
    abar: float
    mu_time_dependent: bool = False

    def mu_at(self, t, a, x) -> np.ndarray:
        return np.asarray(self.mu(t, a, x), dtype=float)

    def beta_at(self, a, x) -> np.ndarray:
        return np.asarray(self.beta(a, x), dtype=float)


@dataclass(frozen=True)
class RatesReport:
    mu_nonnegative: bool
    beta_nonnegative: bool
    beta_vanishes_before_onset: bool
    max_mu_violation: float
    max_beta_violation: float
    max_onset_violation: float

    @property
    def all_pass(self) -> bool:
        return self.mu_nonnegative and self.beta_nonnegative and self.beta_vanishes_before_onset


def check_rates(rates: RateSpec, grid: Grid) -> RatesReport:
    """Sample-based nonnegativity and fertility-onset support checks."""
    t_sub = grid.t_nodes[:: max(1, grid.Nt // 16)]
    mu = rates.mu_at(t_sub[:, None, None], grid.a_nodes[None, :, None],
                     grid.x_nodes[None, None, :])
    beta = rates.beta_at(grid.a_nodes[:, None], grid.x_nodes[None, :])
    mu_viol = float(max(0.0, -np.min(mu)))
    beta_viol = float(max(0.0, -np.min(beta)))
    before = grid.a_nodes <= rates.abar + 1e-12
    onset_viol = float(np.max(np.abs(beta[before]))) if before.any() else 0.0
    return RatesReport(mu_nonnegative=mu_viol == 0.0,
                       beta_nonnegative=beta_viol == 0.0,
                       beta_vanishes_before_onset=onset_viol == 0.0,
                       max_mu_violation=mu_viol,
                       max_beta_violation=beta_viol,
                       max_onset_violation=onset_viol)


# --- presets used by the service/CLI configuration layer ---------------------

def mu_zero() -> Callable:
    return lambda t, a, x: np.zeros(np.broadcast(t, a, x).shape)


def mu_constant(value: float) -> Callable:
    return lambda t, a, x: np.full(np.broadcast(t, a, x).shape, float(value))


def mu_gaussian_bump(amplitude: float, center: float, width: float) -> Callable:
    """Space-only mortality bump (time independent)."""
    def mu(t, a, x):
        prof = amplitude * np.exp(-(((np.asarray(x) - center) / width) ** 2))
        return np.broadcast_to(prof, np.broadcast(t, a, x).shape).copy()
    return mu


def beta_zero() -> Callable:
    return lambda a, x: np.zeros(np.broadcast(a, x).shape)


def beta_ramp(rate: float, abar: float) -> Callable:
    """Fertility growing linearly past the onset age."""
    return lambda a, x: rate * np.maximum(np.asarray(a) - abar, 0.0) * np.ones_like(np.asarray(x, dtype=float))


def beta_bump(rate: float, abar: float, center: float, width: float) -> Callable:
    """Smooth fertility window past the onset age (C1 at the onset)."""
    def beta(a, x):
        a = np.asarray(a, dtype=float)
        gate = np.maximum(a - abar, 0.0) ** 2
        prof = rate * gate * np.exp(-(((a - center) / width) ** 2))
        return np.broadcast_to(prof, np.broadcast(a, x).shape).copy()
    return beta


def zero_rates(abar: float) -> RateSpec:
    return RateSpec(mu=mu_zero(), beta=beta_zero(), abar=abar, mu_time_dependent=False)


# --- optional witness record for the weak-regularity weight variant ----------

@dataclass(frozen=True)
class RegularityWitness:
    """User-supplied witness pair (g, h) with floors g0, h0 > 0 for the
    weak-regularity variant of the non-degenerate weight construction. The
    toolkit never constructs these; it only verifies the defining identity
    pointwise when a witness is supplied."""

    g: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, float], np.ndarray]
    g0: float
    h0: float


@dataclass(frozen=True)
class WitnessReport:
    max_identity_residual: float
    g_floor_ok: bool
    samples: int


def check_regularity_witness(coeff: DiffusionCoefficient, witness: RegularityWitness,
                             grid: Grid, n_b: int = 5) -> WitnessReport:
    """Check -k'/(2 sqrt k) (int_x^B g + h0) + sqrt(k) g = h(x, B) on sample
    pairs (x, B) with x and B on the same side of x0."""
    if witness.g0 <= 0 or witness.h0 <= 0:
        raise ParameterError("witness floors g0, h0 must be positive")
    x = grid.x_nodes
    window = _m_window(grid)
    gvals = np.asarray(witness.g(x), dtype=float)
    floor_ok = bool(np.all(gvals >= witness.g0 - 1e-12))
    kv = coeff.k_at(x)
    kp = coeff.kprime_at(x, grid.dx)
    resid = 0.0
    count = 0
    for side in (-1.0, 1.0):
        sel = side * (x - coeff.x0) >= window
        if not sel.any():
            continue
        xs = x[sel]
        bs = np.linspace(xs.min(), xs.max(), n_b + 2)[1:-1]
        for B in bs:
            # both side constraints (x < B < x0 and x0 < x < B) reduce to x < B
            pts = xs[xs < B]
            if pts.size == 0:
                continue
            msel = np.isin(x, pts)
            # cumulative trapezoid of g from x to B along the sample nodes
            integ = np.array([np.trapezoid(gvals[(x >= p) & (x <= B)], x[(x >= p) & (x <= B)])
                              for p in pts])
            lhs = (-kp[msel] / (2.0 * np.sqrt(kv[msel])) * (integ + witness.h0)
                   + np.sqrt(kv[msel]) * gvals[msel])
            rhs = np.asarray(witness.h(pts, float(B)), dtype=float)
            resid = max(resid, float(np.max(np.abs(lhs - rhs))))
            count += pts.size
    return WitnessReport(max_identity_residual=resid, g_floor_ok=floor_ok, samples=count)
