"""Time integration of the conformal curvature-normalizing flow.

The flow integrates df/dt = (n/2)(lambda - S(f)) with either classic rk4
under a diffusive stability rule, or an unconditionally stable first-order
semi-implicit split.  A run records time-series diagnostics at a fixed
cadence: the conserved conformal mass and weighted total curvature, the
curvature range (for the maximum-principle bounds), and in the balanced
case the energy and its dissipation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import variational
from .errors import DivergenceError, StepTooSmallError, LowerBoundViolationError
from .fields import ScalarField, integrate
from .geometry import Background, chern_laplacian, chern_scalar

DT_FLOOR = 1e-12

SCHEMES = ("explicit-rk4", "semi-implicit")


@dataclass
class FlowState:
    """Flow snapshot: conformal factor f at time t plus cached diagnostics."""

    f: ScalarField
    t: float
    S: ScalarField
    mass: float
    weighted_scalar: float

    @classmethod
    def create(cls, f: ScalarField, t: float, bg: Background) -> "FlowState":
        n = bg.grid.complex_dim
        S = chern_scalar(f, bg)
        weight = np.exp((2.0 / n) * f.values)
        mass = float(weight.mean())
        weighted = float((S.values * weight).mean())
        return cls(f=f, t=float(t), S=S, mass=mass, weighted_scalar=weighted)


@dataclass
class StepperConfig:
    scheme: str = "explicit-rk4"
    dt_init: float = 1e-3
    cfl_safety: float = 0.5
    renormalize_mass: bool = False
    t_end: float = 1.0
    snapshot_every: float = 0.05
    divergence_threshold: float = 500.0
    dealias: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; "
                             f"expected one of {SCHEMES}")
        if self.dt_init <= 0 or self.t_end <= 0:
            raise ValueError("dt_init and t_end must be positive")
        if not (0.0 < self.cfl_safety <= 1.0):
            raise ValueError("cfl_safety must lie in (0, 1]")
        if self.snapshot_every <= 0:
            raise ValueError("snapshot_every must be positive")


@dataclass
class TrajectoryRow:
    """One emitted diagnostics row (the CSV column set)."""

    t: float
    mass: float
    weighted_scalar: float
    s_min: float
    s_max: float
    energy: float        # nan when the background is not balanced
    dissipation: float   # nan when the background is not balanced
    dt: float


@dataclass
class Trajectory:
    rows: list
    aux: dict
    lam: float
    final_state: FlowState
    diverged_at: float | None = None

    @property
    def s0_min(self):
        return self.rows[0].s_min

    @property
    def s0_sup(self):
        return max(abs(self.rows[0].s_min), abs(self.rows[0].s_max))

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])


# -- stepping core -----------------------------------------------------------

class _FlowOps:
    """Precomputed arrays and raw-array kernels for one background."""

    def __init__(self, bg: Background):
        g = bg.grid
        self.grid = g
        self.n = g.complex_dim
        self.lam = bg.lambda_total
        self.sb = bg.s_base.values
        self.neg_k2 = -g.k_squared
        self.axes = tuple(range(g.real_dim))
        self.shape = g.shape
        self.balanced = bg.balanced
        if not self.balanced:
            self.theta = bg.torsion.components
            self.dmult = g.derivative_multipliers
        self.two_over_n = 2.0 / self.n
        self.half_n = 0.5 * self.n

    def drift_laplacian(self, fv):
        """(Delta f - (df, theta)) as a raw array."""
        fh = np.fft.rfftn(fv)
        lap = np.fft.irfftn(fh * self.neg_k2, s=self.shape, axes=self.axes)
        if not self.balanced:
            for m, th in zip(self.dmult, self.theta):
                lap -= np.fft.irfftn(m * fh, s=self.shape, axes=self.axes) * th
        return lap

    def curvature(self, fv):
        """S(f) as a raw array."""
        bracket = self.sb - self.drift_laplacian(fv)
        bracket *= np.exp((-self.two_over_n) * fv)
        return bracket

    def rhs(self, fv):
        out = self.curvature(fv)
        np.subtract(self.lam, out, out=out)
        out *= self.half_n
        return out

    def max_diffusion(self, fv):
        """max over x of D(x) = (n/2) exp(-2f/n)."""
        return self.half_n * math.exp(self.two_over_n * float(-fv.min()))

    def cfl_dt(self, fv, cfl_safety):
        g = self.grid
        h2 = g.min_spacing() ** 2
        return cfl_safety * h2 / (2.0 * g.real_dim * self.max_diffusion(fv))

    def rk4_step(self, fv, dt):
        k1 = self.rhs(fv)
        k2 = self.rhs(fv + (0.5 * dt) * k1)
        k3 = self.rhs(fv + (0.5 * dt) * k2)
        k4 = self.rhs(fv + dt * k3)
        k2 += k3
        k1 += k4
        k1 += 2.0 * k2
        return fv + (dt / 6.0) * k1

    def semi_implicit_step(self, fv, dt):
        # implicit constant-coefficient diffusion c = max_x D, explicit rest
        c = self.max_diffusion(fv)
        fh = np.fft.rfftn(fv)
        lap = np.fft.irfftn(fh * self.neg_k2, s=self.shape, axes=self.axes)
        if not self.balanced:
            drift = np.zeros(self.shape)
            for m, th in zip(self.dmult, self.theta):
                drift += np.fft.irfftn(m * fh, s=self.shape, axes=self.axes) * th
            bracket = self.sb - lap + drift
        else:
            bracket = self.sb - lap
        S = np.exp((-self.two_over_n) * fv) * bracket
        rhs = self.half_n * (self.lam - S)
        num = np.fft.rfftn(fv + dt * (rhs - c * lap))
        num /= 1.0 - (dt * c) * self.neg_k2
        return np.fft.irfftn(num, s=self.shape, axes=self.axes)

    def advance(self, fv, dt, cfg):
        if cfg.scheme == "explicit-rk4":
            out = self.rk4_step(fv, dt)
        else:
            out = self.semi_implicit_step(fv, dt)
        if cfg.dealias:
            from .fields import dealias
            out = dealias(ScalarField(self.grid, out)).values
        if cfg.renormalize_mass:
            mass = np.exp(self.two_over_n * out).mean()
            out += -(self.n / 2.0) * math.log(mass)
        return out

    def check_divergence(self, fv, t, threshold):
        m = self.two_over_n * float(np.max(np.abs(fv)))
        if not (m <= threshold):   # also trips on NaN
            raise DivergenceError(
                f"conformal exponent {m:.3g} exceeded {threshold} at t={t:.6g}",
                t=t)


def cfl_dt(f: ScalarField, bg: Background, cfl_safety: float = 0.5) -> float:
    """Explicit step bound: cfl * min_i(L_i/N_i)^2 / (2*(2n)*max_x D(x))."""
    return _FlowOps(bg).cfl_dt(f.values, cfl_safety)


def rhs(state: FlowState, bg: Background) -> ScalarField:
    """Flow velocity (n/2)(lambda - S), from the cached curvature."""
    n = bg.grid.complex_dim
    return ScalarField(state.f.grid,
                       (n / 2.0) * (bg.lambda_total - state.S.values))


def rhs_expanded(state: FlowState, bg: Background) -> ScalarField:
    """Algebraically identical expanded form (test oracle):

    (n/2) exp(-2f/n) (Delta^dr f - s_base + lambda exp(2f/n)).
    """
    n = bg.grid.complex_dim
    fv = state.f.values
    lap = chern_laplacian(state.f, bg).values
    e = np.exp((2.0 / n) * fv)
    vals = (n / 2.0) * np.exp((-2.0 / n) * fv) * (
        lap - bg.s_base.values + bg.lambda_total * e)
    return ScalarField(state.f.grid, vals)


def step(state: FlowState, bg: Background, cfg: StepperConfig) -> FlowState:
    """Advance one step; dt from the stability rule (explicit) or dt_init."""
    ops = _FlowOps(bg)
    if cfg.scheme == "explicit-rk4":
        dt = ops.cfl_dt(state.f.values, cfg.cfl_safety)
        if dt < DT_FLOOR:
            raise StepTooSmallError(f"stability rule drove dt to {dt:.3e}")
    else:
        dt = cfg.dt_init
    fv = ops.advance(state.f.values, dt, cfg)
    t_new = state.t + dt
    ops.check_divergence(fv, t_new, cfg.divergence_threshold)
    return FlowState.create(ScalarField(state.f.grid, fv), t_new, bg)


def _row_diagnostics(ops, fv, t, dt, bg):
    S = ops.curvature(fv)
    weight = np.exp(ops.two_over_n * fv)
    mass = float(weight.mean())
    weighted = float((S * weight).mean())
    if ops.balanced:
        f_field = ScalarField(ops.grid, fv)
        energy = variational.energy(f_field, bg)
        diss = variational._dissipation_values(S, weight, ops.lam)
        s2w = float((S * S * weight).mean())
    else:
        energy = diss = s2w = float("nan")
    row = TrajectoryRow(t=t, mass=mass, weighted_scalar=weighted,
                        s_min=float(S.min()), s_max=float(S.max()),
                        energy=energy, dissipation=diss, dt=dt)
    return row, s2w


def run(state0: FlowState, bg: Background, cfg: StepperConfig,
        sinks=None, stop_condition=None) -> Trajectory:
    """Integrate to t_end, emitting diagnostics at the snapshot cadence.

    The step size is re-chosen at snapshot boundaries so that every interval
    divides evenly; a divergence stops the run and is recorded on the
    returned trajectory rather than raised.  An optional `stop_condition`
    receives each emitted row and ends the run early when it returns true
    (used for convergence detection and experiment cutoffs).
    """
    if abs(state0.mass - 1.0) > 1e-9:
        raise ValueError(f"initial state not normalized: mass = {state0.mass!r}")
    ops = _FlowOps(bg)
    sinks = list(sinks or [])
    n_intervals = max(1, math.ceil(cfg.t_end / cfg.snapshot_every - 1e-9))

    def energy_of(fv):
        return variational.energy(ScalarField(ops.grid, fv), bg)

    fv = state0.f.values.copy()
    t = 0.0
    rows = []
    aux = {"s2_weighted": [], "dFdt_central": [], "f_sup": []}
    diverged_at = None
    last_fv = fv

    def emit(fv, fv_prev, t, dt_prev, dt_next):
        row, s2w = _row_diagnostics(ops, fv, t, dt_prev, bg)
        if ops.balanced:
            # centered dF/dt probe at the run's own micro step
            if fv_prev is None:
                dt = dt_next
                f1 = ops.advance(fv, dt, cfg)
                f2 = ops.advance(f1, dt, cfg)
                dfdt = (-3.0 * row.energy + 4.0 * energy_of(f1)
                        - energy_of(f2)) / (2.0 * dt)
            else:
                dt = dt_prev
                f_plus = ops.advance(fv, dt, cfg)
                dfdt = (energy_of(f_plus) - energy_of(fv_prev)) / (2.0 * dt)
        else:
            dfdt = float("nan")
        aux["s2_weighted"].append(s2w)
        aux["dFdt_central"].append(dfdt)
        aux["f_sup"].append(float(np.max(np.abs(fv))))
        rows.append(row)
        state = None
        for sink in sinks:
            if state is None:
                state = FlowState.create(ScalarField(ops.grid, fv.copy()), t, bg)
            sink(row, state)

    # initial dt for the first interval
    def interval_dt(fv, length):
        if cfg.scheme == "explicit-rk4":
            stable = ops.cfl_dt(fv, cfg.cfl_safety)
        else:
            stable = cfg.dt_init
        steps = max(1, math.ceil(length / stable - 1e-12))
        dt = length / steps
        if dt < DT_FLOOR:
            raise StepTooSmallError(f"stability rule drove dt to {dt:.3e}")
        return dt, steps

    first_len = min(cfg.snapshot_every, cfg.t_end)
    dt0, _ = interval_dt(fv, first_len)
    emit(fv, None, 0.0, dt0, dt0)

    if not (stop_condition and stop_condition(rows[-1])):
        for k in range(1, n_intervals + 1):
            t_target = min(k * cfg.snapshot_every, cfg.t_end)
            length = t_target - t
            if length <= 0:
                break
            dt, steps = interval_dt(fv, length)
            try:
                for j in range(steps):
                    if j == steps - 1:
                        last_fv = fv
                    fv_new = ops.advance(fv, dt, cfg)
                    ops.check_divergence(fv_new, t + (j + 1) * dt,
                                         cfg.divergence_threshold)
                    fv = fv_new
            except DivergenceError as err:
                diverged_at = err.t
                break
            t = t_target
            emit(fv, last_fv, t, dt, dt)
            if stop_condition and stop_condition(rows[-1]):
                break

    final = FlowState.create(ScalarField(ops.grid, fv), t, bg)
    return Trajectory(rows=rows, aux={k: np.array(v) for k, v in aux.items()},
                      lam=ops.lam, final_state=final, diverged_at=diverged_at)


def scalar_evolution_residual(state: FlowState, bg: Background,
                              dt_probe: float) -> float:
    """Sup-norm defect of the curvature evolution law at a probed state.

    Two forward probe legs of length dt_probe are integrated with rk4
    substeps under the stability rule; the centered time difference of S is
    compared with (n/2) exp(-2f/n) Delta^dr S + S(S - lambda) at the middle
    state.  Decays as dt_probe^2.
    """
    ops = _FlowOps(bg)
    n = ops.n
    lam = ops.lam
    fv0 = state.f.values
    stable = ops.cfl_dt(fv0, 0.5)
    substeps = max(1, math.ceil(dt_probe / stable))
    dt = dt_probe / substeps

    def probe(fv):
        for _ in range(substeps):
            fv = ops.rk4_step(fv, dt)
        return fv

    fv1 = probe(fv0)
    fv2 = probe(fv1)
    S0 = ops.curvature(fv0)
    S1 = ops.curvature(fv1)
    S2 = ops.curvature(fv2)
    dSdt = (S2 - S0) / (2.0 * dt_probe)
    lapS = chern_laplacian(ScalarField(ops.grid, S1), bg).values
    pde = (n / 2.0) * np.exp((-2.0 / n) * fv1) * lapS + S1 * (S1 - lam)
    return float(np.max(np.abs(dSdt - pde)))


@dataclass
class LowerBoundReport:
    ok: bool
    tol: float
    basic_margin: float    # min over rows of s_min - min(s0_min, 0)
    refined_margin: float  # min over rows of s_min - s0_min * exp(-lam t)
    violations: list = field(default_factory=list)


def lower_bound_check(traj: Trajectory, tol: float | None = None) -> LowerBoundReport:
    """Verify the curvature floor along a recorded trajectory.

    Checks, per snapshot, min_x S >= min(S0_min, 0) - tol and the refined
    decay bound min_x S >= S0_min * exp(-lambda t) - tol.  Raises
    LowerBoundViolationError listing the offending (t, min S) pairs.
    """
    if tol is None:
        tol = 1e-8 * (1.0 + traj.s0_sup)
    s0_min = traj.s0_min
    lam = traj.lam
    floor = min(s0_min, 0.0)
    violations = []
    basic_margin = math.inf
    refined_margin = math.inf
    for row in traj.rows:
        refined = s0_min * math.exp(-lam * row.t)
        basic_margin = min(basic_margin, row.s_min - floor)
        refined_margin = min(refined_margin, row.s_min - refined)
        if row.s_min < floor - tol or row.s_min < refined - tol:
            violations.append((row.t, row.s_min))
    if violations:
        raise LowerBoundViolationError(
            f"curvature lower bound violated at {len(violations)} snapshots",
            violations=violations)
    return LowerBoundReport(ok=True, tol=tol, basic_margin=basic_margin,
                            refined_margin=refined_margin)


def write_series_csv(path, traj: Trajectory):
    """Time series CSV: t, mass, weighted_scalar, S_min, S_max, F, dissipation, dt."""
    with open(path, "w") as fh:
        fh.write("t,mass,weighted_scalar,S_min,S_max,F,dissipation,dt\n")
        for r in traj.rows:
            fh.write(",".join(format(v, ".17g") for v in (
                r.t, r.mass, r.weighted_scalar, r.s_min, r.s_max,
                r.energy, r.dissipation, r.dt)) + "\n")
