"""Fixed conformal background data and curvature operators.

A Background holds the base scalar curvature field, an optional torsion
1-form theta (zero means balanced) and the cached total curvature
lambda = integral of the base curvature.  The drift Laplacian is
L f = Delta f - (df, theta); admissible torsion must be divergence free so
that L has exact zero mean, the discrete analog of working with a standard
(Gauduchon) background.
"""

from __future__ import annotations

import numpy as np

from . import fields
from .errors import (DivergenceError, IncompatibleTorsionError,
                     NonZeroMeanError, NoConvergenceError)
from .fields import (CovectorField, ScalarField, gradient, integrate,
                     laplacian, pairing)

# exp(2f/n) overflows well before this; beyond it the state is declared blown up
DIVERGENCE_EXPONENT = 500.0

_TORSION_DIV_TOL = 1e-8


class Background:
    """Immutable background data: base curvature, torsion and lambda."""

    def __init__(self, grid, s_base: ScalarField, torsion: CovectorField | None = None):
        if s_base.grid != grid:
            raise ValueError("s_base grid mismatch")
        if not np.all(np.isfinite(s_base.values)):
            raise ValueError("s_base must be finite")
        if torsion is not None and torsion.grid != grid:
            raise ValueError("torsion grid mismatch")
        if torsion is not None and torsion.is_zero():
            torsion = None
        if torsion is not None:
            div = fields.divergence(torsion)
            if div.max_abs() > _TORSION_DIV_TOL * (1.0 + torsion.max_abs()):
                raise IncompatibleTorsionError(
                    "torsion 1-form is not divergence free "
                    f"(max |div theta| = {div.max_abs():.3e})")
        self.grid = grid
        self.s_base = s_base
        self.torsion = torsion
        self.lambda_total = integrate(s_base)

    @property
    def balanced(self):
        return self.torsion is None

    @classmethod
    def constant(cls, grid, value):
        """Balanced background with spatially constant base curvature."""
        return cls(grid, fields.constant_field(grid, value))

    def __repr__(self):
        kind = "balanced" if self.balanced else "torsion"
        return (f"Background({self.grid!r}, lambda={self.lambda_total:.6g}, "
                f"{kind})")


def _check_divergence(f: ScalarField):
    n = f.grid.complex_dim
    if (2.0 / n) * f.max_abs() > DIVERGENCE_EXPONENT:
        raise DivergenceError(
            f"conformal exponent exceeds {DIVERGENCE_EXPONENT}")


def chern_laplacian(f: ScalarField, bg: Background) -> ScalarField:
    """Drift Laplacian: Delta f - (df, theta).  Equals Delta f when balanced."""
    if f.grid != bg.grid:
        raise ValueError("field grid does not match background")
    lap = laplacian(f)
    if bg.balanced:
        return lap
    drift = pairing(gradient(f), bg.torsion)
    return ScalarField(f.grid, lap.values - drift.values)


def chern_scalar(f: ScalarField, bg: Background) -> ScalarField:
    """Scalar curvature of the conformal metric exp(2f/n) * (flat):

    S(f) = exp(-2f/n) * (s_base - (Delta f - (df, theta))).
    """
    _check_divergence(f)
    n = bg.grid.complex_dim
    lap = chern_laplacian(f, bg)
    return ScalarField(f.grid, np.exp((-2.0 / n) * f.values)
                       * (bg.s_base.values - lap.values))


def total_scalar(bg: Background) -> float:
    """Total base curvature lambda (cached on the background)."""
    return bg.lambda_total


def normalize_conformal(f: ScalarField) -> ScalarField:
    """Shift f by the constant making integral(exp(2f/n)) exactly 1."""
    _check_divergence(f)
    n = f.grid.complex_dim
    mass = integrate(ScalarField(f.grid, np.exp((2.0 / n) * f.values)))
    c = -(n / 2.0) * np.log(mass)
    return ScalarField(f.grid, f.values + c)


def solve_poisson(rhs: ScalarField, bg: Background, tol: float = 1e-10,
                  max_iter: int = 200) -> ScalarField:
    """Solve (Delta - (d., theta)) u = rhs with mean-zero u.

    Balanced case: exact spectral division (zero mode dropped).  With
    torsion: iterative refinement preconditioned by the balanced solve,
    until the sup-norm residual is at most `tol`.
    """
    if rhs.grid != bg.grid:
        raise ValueError("rhs grid does not match background")
    mean = integrate(rhs)
    if abs(mean) > 1e-10:
        raise NonZeroMeanError(
            f"Poisson right-hand side has mean {mean:.3e} (must be <= 1e-10)")
    g = rhs.grid

    def balanced_solve(values):
        fh = fields._rfftn(values)
        k2 = g.k_squared
        with np.errstate(divide="ignore", invalid="ignore"):
            fh = np.where(k2 > 0.0, fh / (-k2), 0.0)
        return fields._irfftn(fh, g.shape)

    u = balanced_solve(rhs.values)
    if bg.balanced:
        return ScalarField(g, u - u.mean())

    best = np.inf
    for _ in range(max_iter):
        residual = rhs.values - chern_laplacian(ScalarField(g, u), bg).values
        res_norm = float(np.max(np.abs(residual)))
        if res_norm <= tol:
            return ScalarField(g, u - u.mean())
        if res_norm >= best:   # stalled
            break
        best = res_norm
        u = u + balanced_solve(residual)
    raise NoConvergenceError(
        f"Poisson refinement stalled at residual {best:.3e} > tol {tol:.1e}")


def canonical_initial(bg: Background) -> ScalarField:
    """Initial factor h with (Delta - (d., theta)) h = s_base - lambda and
    unit conformal mass.  For lambda > 0 its curvature lambda*exp(-2h/n)
    is strictly positive (asserted)."""
    lam = bg.lambda_total
    rhs = ScalarField(bg.grid, bg.s_base.values - lam)
    h = normalize_conformal(solve_poisson(rhs, bg))
    if lam > 0.0:
        s_min = chern_scalar(h, bg).min()
        if s_min <= 0.0:
            raise AssertionError(
                f"canonical initial curvature not positive (min {s_min:.3e})")
    return h
