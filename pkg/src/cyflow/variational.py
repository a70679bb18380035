"""Balanced-case energy functional, its variations and Hessian spectrum.

E(f) = (1/2) * integral |df|^2 + integral s_base * f, restricted to the
constraint surface integral exp(2f/n) = 1.  The flow decreases E; its
dissipation rate is -integral (S - lambda)^2 exp(2f/n).  The second
variation at f in tangent directions u, v (weighted means zero) is
integral (du, dv) - (2 lambda / n) integral exp(2f/n) u v, whose smallest
eigenvalue classifies critical points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NoConvergenceError, NotBalancedError, NotTangentError
from .fields import ScalarField, gradient, integrate, pairing, _rfftn, _irfftn
from .geometry import Background, chern_scalar

TOL_DEGENERATE = 1e-8


def _require_balanced(bg: Background, what: str):
    if not bg.balanced:
        raise NotBalancedError(f"{what} is defined only for balanced "
                               "(zero torsion) backgrounds")


def energy(f: ScalarField, bg: Background) -> float:
    """E(f) = (1/2) integral |df|^2 + integral s_base f."""
    _require_balanced(bg, "energy")
    df = gradient(f)
    grad_sq = pairing(df, df)
    return 0.5 * integrate(grad_sq) + float(
        (bg.s_base.values * f.values).mean())


def _dissipation_values(S_values, weight_values, lam) -> float:
    diff = S_values - lam
    return -float((diff * diff * weight_values).mean())


def dissipation(f: ScalarField, bg: Background) -> float:
    """dE/dt along the flow: -integral (S - lambda)^2 exp(2f/n) <= 0."""
    _require_balanced(bg, "dissipation")
    n = bg.grid.complex_dim
    S = chern_scalar(f, bg)
    weight = np.exp((2.0 / n) * f.values)
    return _dissipation_values(S.values, weight, bg.lambda_total)


def augmented_energy(f: ScalarField, bg: Background) -> float:
    """Unconstrained functional E(f) - (n lambda / 2)(mass - 1)."""
    _require_balanced(bg, "augmented_energy")
    n = bg.grid.complex_dim
    mass = float(np.exp((2.0 / n) * f.values).mean())
    return energy(f, bg) - 0.5 * n * bg.lambda_total * (mass - 1.0)


def _weighted_mean(u_values, weight_values):
    return float((weight_values * u_values).mean())


def _check_tangent(u: ScalarField, weight, label):
    scale = max(1.0, math.sqrt(float((u.values ** 2).mean())))
    wm = _weighted_mean(u.values, weight)
    if abs(wm) > 1e-10 * scale:
        raise NotTangentError(
            f"direction {label} has weighted mean {wm:.3e}; "
            "tangent directions must have weighted mean <= 1e-10")


def second_variation(f: ScalarField, u: ScalarField, v: ScalarField,
                     bg: Background) -> float:
    """Bilinear form integral (du, dv) - (2 lambda / n) integral e^{2f/n} u v."""
    _require_balanced(bg, "second_variation")
    n = bg.grid.complex_dim
    weight = np.exp((2.0 / n) * f.values)
    _check_tangent(u, weight, "u")
    _check_tangent(v, weight, "v")
    grad_term = integrate(pairing(gradient(u), gradient(v)))
    mass_term = float((weight * u.values * v.values).mean())
    return grad_term - (2.0 * bg.lambda_total / n) * mass_term


@dataclass
class HessianReport:
    f_at: ScalarField
    min_eigenvalue: float
    eigenvector: ScalarField   # unit L2 norm, tangent at f_at
    iterations: int
    classification: str        # local-min-candidate | saddle | degenerate


def _classify(eig: float) -> str:
    if eig < -TOL_DEGENERATE:
        return "saddle"
    if eig > TOL_DEGENERATE:
        return "local-min-candidate"
    return "degenerate"


def hessian_min_eigen(f: ScalarField, bg: Background, tol: float = 1e-10,
                      max_iter: int = 2000, seed: int = 0) -> HessianReport:
    """Smallest eigenvalue of u -> -Delta u - (2 lambda / n) e^{2f/n} u on the
    tangent space {integral e^{2f/n} u = 0}.

    Matrix-free projected Rayleigh-Ritz iteration: each sweep preconditions
    the residual with (-Delta + gamma)^(-1), re-projects onto the tangent
    space, and minimizes the Rayleigh quotient (plain L2 denominator) over
    the 2-dimensional span.  Stops when successive eigenvalue estimates
    differ by at most `tol`.
    """
    _require_balanced(bg, "hessian_min_eigen")
    g = f.grid
    n = g.complex_dim
    lam = bg.lambda_total
    weight = np.exp((2.0 / n) * f.values)
    coeff = 2.0 * lam / n
    k2 = g.k_squared
    gamma = max(1.0, abs(coeff) * float(weight.max()))
    w_norm2 = float((weight * weight).mean())

    def project(u):
        return u - (_weighted_mean(u, weight) / w_norm2) * weight

    def apply_op(u):
        lap = _irfftn(_rfftn(u) * (-k2), g.shape)
        return -lap - coeff * weight * u

    def precondition(r):
        return _irfftn(_rfftn(r) / (k2 + gamma), g.shape)

    def inner(a, b):
        return float((a * b).mean())

    rng = np.random.default_rng(seed)
    u = project(rng.standard_normal(g.shape))
    u /= math.sqrt(inner(u, u))
    Au = apply_op(u)
    rho = inner(u, Au)

    for it in range(1, max_iter + 1):
        resid = Au - rho * u
        w = project(precondition(resid))
        w -= inner(w, u) * u
        w_len = math.sqrt(inner(w, w))
        if w_len < 1e-14:
            break
        w /= w_len
        Aw = apply_op(w)
        # Rayleigh-Ritz on the orthonormal pair (u, w)
        a11, a12, a22 = rho, inner(u, Aw), inner(w, Aw)
        half_tr = 0.5 * (a11 + a22)
        disc = math.sqrt(max(0.0, (0.5 * (a11 - a22)) ** 2 + a12 * a12))
        mu = half_tr - disc
        # eigenvector of the 2x2 pencil for the smaller root
        if abs(a12) > 1e-300:
            alpha, beta = a12, mu - a11
        else:
            alpha, beta = (1.0, 0.0) if a11 <= a22 else (0.0, 1.0)
        norm = math.hypot(alpha, beta)
        alpha, beta = alpha / norm, beta / norm
        u = alpha * u + beta * w
        u = project(u)
        u /= math.sqrt(inner(u, u))
        Au = apply_op(u)
        rho_new = inner(u, Au)
        if abs(rho_new - rho) <= tol:
            rho = rho_new
            break
        rho = rho_new
    else:
        raise NoConvergenceError(
            f"eigen iteration did not converge in {max_iter} sweeps "
            f"(last estimate {rho:.6e})")

    vec = ScalarField(g, u)
    return HessianReport(f_at=f, min_eigenvalue=rho, eigenvector=vec,
                         iterations=it, classification=_classify(rho))
