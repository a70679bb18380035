"""Scripted experiment drivers.

Four constructions sit on top of the core modules: the normalized bump
family showing the energy is unbounded below in complex dimension >= 2, the
saddle/instability run at a constant-curvature critical point, a sup-norm
certificate for the conformal factor built from co-evolved auxiliary fields,
and extraction of low-dissipation time slices from a recorded run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .errors import (BumpDoesNotFitError, CertificateFailedError,
                     EmptyReportError, NotBalancedError, NotUnstableError,
                     ResolutionTooCoarseError, StepTooSmallError)
from .fields import ScalarField, integrate
from .flow import (FlowState, StepperConfig, Trajectory, _FlowOps, run)
from .geometry import (Background, canonical_initial,
                       normalize_conformal, solve_poisson)
from .variational import hessian_min_eigen


def unit_ball_volume(real_dim: int) -> float:
    """Volume of the unit ball in R^d: pi^(d/2) / Gamma(d/2 + 1)."""
    return math.pi ** (real_dim / 2.0) / math.gamma(real_dim / 2.0 + 1.0)


# -- bump family --------------------------------------------------------------

@dataclass
class BumpProfile:
    """Radial Lipschitz profile: plateau c_r inside radius r, linear on the
    annulus [r, 2r], constant log(r) outside."""

    r: float
    c_r: float
    center: tuple
    n: int

    @property
    def outer_value(self):
        return math.log(self.r)

    def __post_init__(self):
        bound = -self.n ** 2 * math.log(self.r) \
            - 0.5 * self.n * math.log(unit_ball_volume(2 * self.n))
        if self.c_r > bound + 1e-9:
            raise ValueError(
                f"plateau c_r = {self.c_r:.6g} exceeds the volume bound "
                f"{bound:.6g}")

    def values_at(self, rho):
        """Profile as a function of the distance to the center."""
        rho = np.asarray(rho, dtype=float)
        log_r = self.outer_value
        ann = (log_r - self.c_r) * (rho / self.r - 1.0) + self.c_r
        return np.where(rho <= self.r, self.c_r,
                        np.where(rho >= 2.0 * self.r, log_r, ann))

    @property
    def annulus_slope(self):
        """Constant gradient magnitude on the annulus."""
        return (self.c_r - self.outer_value) / self.r


def _check_fits(r, grid):
    if not (0.0 < 2.0 * r < min(grid.periods) / 2.0):
        raise BumpDoesNotFitError(
            f"outer radius 2r = {2 * r:.6g} must be below "
            f"min period / 2 = {min(grid.periods) / 2:.6g}")


def periodic_distance(grid, center):
    """Euclidean distance to `center` under per-axis periodic wrapping."""
    coords = grid.coordinates()
    dist2 = np.zeros(grid.shape)
    for x, c, L in zip(coords, center, grid.periods):
        delta = np.abs(x - c)
        delta = np.minimum(delta, L - delta)
        dist2 = dist2 + delta * delta
    return np.sqrt(dist2)


def _radial_mass(c, r, n):
    """integral exp(2 f_{r,c} / n) over the flat torus, radial closed form
    plus 1D quadrature on the annulus."""
    d = 2 * n
    C = unit_ball_volume(d)
    area = d * C
    log_r = math.log(r)

    def annulus_integrand(rho):
        f = (log_r - c) * (rho / r - 1.0) + c
        return math.exp(2.0 * f / n) * area * rho ** (d - 1)

    ball = math.exp(2.0 * c / n) * C * r ** d
    ann, _ = quad(annulus_integrand, r, 2.0 * r, epsabs=1e-15, epsrel=1e-13)
    outside = math.exp(2.0 * log_r / n) * (1.0 - C * (2.0 * r) ** d)
    return ball + ann + outside


def _bisect_mass(mass_fn, r, n, tol):
    """Bisection on the strictly increasing map c -> mass."""
    lo = math.log(r)
    hi = -n ** 2 * math.log(r) + 20.0
    if not (mass_fn(lo) < 1.0 < mass_fn(hi)):
        raise ValueError("mass bracket failed; radius out of range")
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        m = mass_fn(mid)
        if abs(m - 1.0) <= tol:
            return mid
        if m < 1.0:
            lo = mid
        else:
            hi = mid
    raise ValueError(f"bisection did not reach |mass - 1| <= {tol}")


def bump_profile_radial(r: float, n: int, tol: float = 1e-10,
                        center=()) -> BumpProfile:
    """Normalized profile via the exact radial mass (no grid involved)."""
    c = _bisect_mass(lambda c: _radial_mass(c, r, n), r, n, tol)
    return BumpProfile(r=r, c_r=c, center=tuple(center), n=n)


def bump_family(r: float, center, bg: Background, tol: float = 1e-10):
    """Materialized normalized bump on the background's grid.

    Returns (BumpProfile, ScalarField) with the plateau value found by
    bisection on the grid quadrature of exp(2 f / n).
    """
    grid = bg.grid
    _check_fits(r, grid)
    # annulus width r must span at least 4 cells
    cells = r / max(L / N for L, N in zip(grid.periods, grid.resolution))
    if cells < 4.0:
        raise ResolutionTooCoarseError(
            f"annulus spans {cells:.2f} cells; need at least 4")
    n = grid.complex_dim
    rho = periodic_distance(grid, center)
    log_r = math.log(r)

    def field_values(c):
        ann = (log_r - c) * (rho / r - 1.0) + c
        return np.where(rho <= r, c, np.where(rho >= 2.0 * r, log_r, ann))

    def grid_mass(c):
        return float(np.exp((2.0 / n) * field_values(c)).mean())

    c = _bisect_mass(grid_mass, r, n, tol)
    profile = BumpProfile(r=r, c_r=c, center=tuple(center), n=n)
    return profile, ScalarField(grid, field_values(c))


def bump_energy_grid(profile: BumpProfile, bump: ScalarField,
                     bg: Background) -> float:
    """Grid-quadrature energy of a materialized bump.

    The profile's gradient magnitude is known exactly (constant
    (c_r - log r)/r on the annulus, zero elsewhere), so the Dirichlet term
    is the quadrature of that piecewise-constant square over the annulus
    cells; differentiating the sampled kink numerically would smear it.
    The curvature term integrates s_base * f by grid quadrature and works
    for any (not necessarily constant) base curvature.
    """
    grid = bg.grid
    rho = periodic_distance(grid, profile.center)
    slope = profile.annulus_slope
    in_annulus = (rho > profile.r) & (rho < 2.0 * profile.r)
    grad_sq = float(np.mean(np.where(in_annulus, slope * slope, 0.0)))
    curv = float(np.mean(bg.s_base.values * bump.values))
    return 0.5 * grad_sq + curv


def _radial_energy(profile: BumpProfile, lam: float) -> float:
    """Exact energy of the radial profile against constant base curvature."""
    r, c, n = profile.r, profile.c_r, profile.n
    d = 2 * n
    C = unit_ball_volume(d)
    area = d * C
    log_r = profile.outer_value
    slope = profile.annulus_slope
    grad_term = 0.5 * slope ** 2 * C * r ** d * (2.0 ** d - 1.0)

    def f_integrand(rho):
        f = (log_r - c) * (rho / r - 1.0) + c
        return f * area * rho ** (d - 1)

    ann, _ = quad(f_integrand, r, 2.0 * r, epsabs=1e-14, epsrel=1e-13)
    f_integral = c * C * r ** d + ann + log_r * (1.0 - C * (2.0 * r) ** d)
    return grad_term + lam * f_integral


@dataclass
class SweepRow:
    r: float
    c_r: float
    c_r_bound: float
    energy_radial: float
    energy_grid: float       # nan when the grid path is unavailable
    reference: float         # (lam/2) log r
    ratio: float             # energy_radial / reference


@dataclass
class SweepTable:
    rows: list
    lam: float
    n: int


def unboundedness_sweep(r_list, bg: Background, grid_max_cells=None,
                        threads: int = 1) -> SweepTable:
    """Energy of the normalized bump family over a radius sweep.

    Each radius gets the exact radial-oracle energy; radii the grid can
    resolve also get the grid-quadrature energy for cross-validation.
    Requires a balanced background with constant positive base curvature
    (the oracle's closed form) and complex dimension at least 2.
    """
    if not bg.balanced:
        raise NotBalancedError("sweep requires a balanced background")
    n = bg.grid.complex_dim
    if n < 2:
        raise ValueError("sweep requires complex dimension n >= 2")
    lam = bg.lambda_total
    if lam <= 0:
        raise ValueError("sweep requires positive total curvature")
    if float(np.ptp(bg.s_base.values)) > 1e-12 * max(1.0, abs(lam)):
        raise ValueError("radial oracle requires constant base curvature")

    bound = lambda r: -n ** 2 * math.log(r) \
        - 0.5 * n * math.log(unit_ball_volume(2 * n))

    def one(r):
        # the profile must fit a fundamental domain even on the radial path
        _check_fits(r, bg.grid)
        profile = bump_profile_radial(r, n)
        e_radial = _radial_energy(profile, lam)
        try:
            prof_g, bump = bump_family(
                r, tuple(0.5 * L for L in bg.grid.periods), bg)
            e_grid = bump_energy_grid(prof_g, bump, bg)
        except ResolutionTooCoarseError:
            e_grid = float("nan")
        ref = 0.5 * lam * math.log(r)
        return SweepRow(r=r, c_r=profile.c_r, c_r_bound=bound(r),
                        energy_radial=e_radial, energy_grid=e_grid,
                        reference=ref, ratio=e_radial / ref)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, r_list))
    else:
        rows = [one(r) for r in r_list]
    return SweepTable(rows=rows, lam=lam, n=n)


# -- saddle / instability run -------------------------------------------------

@dataclass
class SaddleReport:
    min_eigenvalue: float
    eigenvector: ScalarField
    amplitude: float
    trajectory: Trajectory
    final_energy: float
    distances: np.ndarray     # sup norm of f per snapshot
    diverged_at: float | None


def saddle_experiment(bg: Background, amplitude: float,
                      t_end: float = 1.0, snapshot_every: float = 0.01,
                      stop_energy: float = -0.2,
                      eigen_tol: float = 1e-10) -> SaddleReport:
    """Push the flow off an unstable constant-curvature critical point.

    Requires balanced bg with constant s_base = lam and 2 lam / n above the
    first nonzero Laplacian eigenvalue; confirms the negative Hessian
    direction, then runs the flow from a small multiple of it.  Stops once
    the energy falls below `stop_energy` (or on divergence, which is
    recorded).
    """
    if not bg.balanced:
        raise NotBalancedError("saddle experiment requires balanced bg")
    grid = bg.grid
    n = grid.complex_dim
    lam = bg.lambda_total
    if float(np.ptp(bg.s_base.values)) > 1e-12 * max(1.0, abs(lam)):
        raise ValueError("saddle experiment requires constant base curvature")
    lam1 = min((2.0 * math.pi / L) ** 2 for L in grid.periods)
    if 2.0 * lam / n <= lam1:
        raise NotUnstableError(
            f"2 lam / n = {2 * lam / n:.6g} does not exceed lambda_1 = "
            f"{lam1:.6g}; the critical point is not unstable")
    zero = ScalarField(grid, np.zeros(grid.shape))
    report = hessian_min_eigen(zero, bg, tol=eigen_tol)
    if report.min_eigenvalue >= 0:
        raise NotUnstableError(
            f"minimum Hessian eigenvalue {report.min_eigenvalue:.6g} is "
            "not negative")
    f0 = normalize_conformal(ScalarField(
        grid, amplitude * report.eigenvector.values))
    state0 = FlowState.create(f0, 0.0, bg)
    cfg = StepperConfig(t_end=t_end, snapshot_every=snapshot_every)
    traj = run(state0, bg, cfg,
               stop_condition=lambda row: row.energy <= stop_energy)
    return SaddleReport(min_eigenvalue=report.min_eigenvalue,
                        eigenvector=report.eigenvector,
                        amplitude=amplitude, trajectory=traj,
                        final_energy=traj.rows[-1].energy,
                        distances=traj.aux["f_sup"],
                        diverged_at=traj.diverged_at)


# -- sup-norm certificate ------------------------------------------------------

@dataclass
class C0Row:
    t: float
    w_sup: float
    bound: float          # K exp(lam t)
    reconstruction: float  # sup |f - (w + h - lam v)|
    poisson_residual: float


@dataclass
class C0Certificate:
    h: ScalarField
    v0: ScalarField
    K: float
    rows: list
    lam: float


def c0_certificate(f0: ScalarField, bg: Background, cfg: StepperConfig,
                   bound_slack: float = 1e-6,
                   reconstruction_tol: float = 1e-5) -> C0Certificate:
    """Co-evolve (f, w, v) and certify the decay bound on w.

    h solves the canonical elliptic problem, v starts from the mean-zero
    potential of exp(2 f0/n) - 1, w = dv/dt starts at f0 - h + lam v0 and
    obeys dw/dt = (n/2) e^{-2f/n} L w + lam w.  Per snapshot the certificate
    records sup|w|, the bound K e^{lam t}, the reconstruction defect
    sup|f - (w + h - lam v)| and the potential's Poisson residual.  Raises
    CertificateFailedError on the first row violating the bound or the
    reconstruction tolerance.
    """
    if cfg.scheme != "explicit-rk4":
        raise ValueError("certificate co-evolution supports explicit-rk4 only")
    grid = bg.grid
    n = grid.complex_dim
    lam = bg.lambda_total
    mass0 = float(np.exp((2.0 / n) * f0.values).mean())
    if abs(mass0 - 1.0) > 1e-9:
        raise ValueError("initial factor must be normalized")

    h = canonical_initial(bg)
    rhs_v0 = ScalarField(grid, np.exp((2.0 / n) * f0.values) - 1.0)
    v0 = solve_poisson(rhs_v0, bg, tol=1e-11)
    w0 = f0.values - h.values + lam * v0.values
    K = float(np.max(np.abs(w0)))

    ops = _FlowOps(bg)

    def coupled_rhs(Y):
        f, w, v = Y
        e = np.exp((-ops.two_over_n) * f)
        Lf = ops.drift_laplacian(f)
        Lw = ops.drift_laplacian(w)
        out = np.empty_like(Y)
        out[0] = ops.half_n * (lam - e * (ops.sb - Lf))
        out[1] = ops.half_n * e * Lw + lam * w
        out[2] = w
        return out

    def rk4(Y, dt):
        k1 = coupled_rhs(Y)
        k2 = coupled_rhs(Y + (0.5 * dt) * k1)
        k3 = coupled_rhs(Y + (0.5 * dt) * k2)
        k4 = coupled_rhs(Y + dt * k3)
        return Y + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)

    Y = np.stack([f0.values, w0, v0.values])
    t = 0.0
    rows = []

    def emit(Y, t):
        f, w, v = Y
        recon = float(np.max(np.abs(f - (w + h.values - lam * v))))
        pois = float(np.max(np.abs(
            ops.drift_laplacian(v) - (np.exp(ops.two_over_n * f) - 1.0))))
        rows.append(C0Row(t=t, w_sup=float(np.max(np.abs(w))),
                          bound=K * math.exp(lam * t),
                          reconstruction=recon, poisson_residual=pois))

    emit(Y, 0.0)
    n_intervals = max(1, math.ceil(cfg.t_end / cfg.snapshot_every - 1e-9))
    for k in range(1, n_intervals + 1):
        t_target = min(k * cfg.snapshot_every, cfg.t_end)
        length = t_target - t
        if length <= 0:
            break
        stable = ops.cfl_dt(Y[0], cfg.cfl_safety)
        steps = max(1, math.ceil(length / stable - 1e-12))
        dt = length / steps
        if dt < 1e-12:
            raise StepTooSmallError(f"stability rule drove dt to {dt:.3e}")
        for _ in range(steps):
            Y = rk4(Y, dt)
        ops.check_divergence(Y[0], t_target, cfg.divergence_threshold)
        t = t_target
        emit(Y, t)

    cert = C0Certificate(h=h, v0=v0, K=K, rows=rows, lam=lam)
    for row in rows:
        if row.w_sup > row.bound * (1.0 + bound_slack):
            raise CertificateFailedError(
                f"sup|w| = {row.w_sup:.6e} exceeds bound {row.bound:.6e} "
                f"at t = {row.t:.6g}", row=row)
        if row.reconstruction > reconstruction_tol:
            raise CertificateFailedError(
                f"reconstruction defect {row.reconstruction:.3e} exceeds "
                f"{reconstruction_tol:.1e} at t = {row.t:.6g}", row=row)
    return cert


# -- low-dissipation slice extraction -----------------------------------------

@dataclass
class SliceRow:
    t: float
    energy: float
    dissipation: float
    mass: float
    s_min: float
    s_max: float
    s2_weighted: float


@dataclass
class SliceReport:
    slices: list
    tol: float
    energy_bounded_below_observed: bool
    final_energy: float
    sup_scalar: float        # max over the whole run of max_x S
    lam: float


def palais_smale_extract(traj: Trajectory, tol: float) -> SliceReport:
    """Pick out snapshots where the dissipation has (nearly) vanished.

    Each qualifying slice carries the constraint mass, the weighted square
    curvature (to compare against lam^2 + |dissipation|), the curvature
    range, and the run-wide sup-curvature monitor.  Whether the energy
    stayed bounded below is reported as observed/not observed (energy
    flattening over the last quarter of the run), never assumed.
    """
    if any(math.isnan(r.energy) for r in traj.rows):
        raise NotBalancedError("slice extraction requires a balanced run")
    rows = traj.rows
    s2w = traj.aux["s2_weighted"]
    slices = [SliceRow(t=r.t, energy=r.energy, dissipation=r.dissipation,
                       mass=r.mass, s_min=r.s_min, s_max=r.s_max,
                       s2_weighted=s2)
              for r, s2 in zip(rows, s2w) if abs(r.dissipation) <= tol]
    if not slices:
        raise EmptyReportError(
            f"no snapshot has |dissipation| <= {tol:.3e}")
    q3 = rows[(3 * (len(rows) - 1)) // 4]
    final = rows[-1]
    flattened = abs(final.energy - q3.energy) <= max(
        1e-8, 1e-6 * abs(final.energy))
    return SliceReport(slices=slices, tol=tol,
                       energy_bounded_below_observed=flattened,
                       final_energy=final.energy,
                       sup_scalar=max(r.s_max for r in rows),
                       lam=traj.lam)
