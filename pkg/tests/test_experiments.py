"""Experiment drivers: bump family, sweep, saddle run, certificate, slices."""

import math

import numpy as np
import pytest

from cyflow import (Background, FlowState, ScalarField, StepperConfig,
                    TorusGrid, bump_family, bump_profile_radial,
                    c0_certificate, canonical_initial, constant_field,
                    integrate, normalize_conformal, palais_smale_extract,
                    run, saddle_experiment, unboundedness_sweep,
                    unit_ball_volume)
from cyflow.errors import (BumpDoesNotFitError, CertificateFailedError,
                           EmptyReportError, NotBalancedError,
                           NotUnstableError, ResolutionTooCoarseError)
from cyflow.experiments import (BumpProfile, _radial_mass,
                                periodic_distance)

from test_geometry import divfree_torsion


def unit_grid(N=32):
    return TorusGrid(1, (1.0, 1.0), (N, N))


def neg_curvature_bg(N=16):
    g = unit_grid(N)
    x1, x2 = g.coordinates()
    sb = ScalarField(g, -1.0 + 0.5 * np.sin(2 * np.pi * x1)
                     * np.cos(2 * np.pi * x2))
    return Background(g, sb)


def sine_initial(grid, amplitude=0.3):
    x1, _ = grid.coordinates()
    vals = amplitude * np.broadcast_to(np.sin(2 * np.pi * x1),
                                       grid.shape).copy()
    return normalize_conformal(ScalarField(grid, vals))


class TestUnitBallVolume:
    def test_low_dimensions(self):
        assert unit_ball_volume(2) == pytest.approx(np.pi, rel=1e-14)
        assert unit_ball_volume(3) == pytest.approx(4 * np.pi / 3, rel=1e-14)
        assert unit_ball_volume(4) == pytest.approx(np.pi ** 2 / 2, rel=1e-14)


class TestBumpProfile:
    def test_piecewise_values(self):
        p = BumpProfile(r=0.1, c_r=3.0, center=(0.5, 0.5, 0.5, 0.5), n=2)
        assert p.values_at(0.05) == 3.0
        assert p.values_at(0.3) == pytest.approx(math.log(0.1))
        # linear midpoint of the annulus
        mid = p.values_at(0.15)
        assert mid == pytest.approx(0.5 * (3.0 + math.log(0.1)))
        assert p.annulus_slope == pytest.approx((3.0 - math.log(0.1)) / 0.1)

    def test_plateau_bound_enforced(self):
        bound = -4 * math.log(0.1) - math.log(np.pi ** 2 / 2)
        with pytest.raises(ValueError):
            BumpProfile(r=0.1, c_r=bound + 1.0, center=(0,) * 4, n=2)


class TestRadialOracle:
    def test_mass_postcondition(self):
        for r in (0.125, 2 ** -6, 2 ** -10):
            p = bump_profile_radial(r, 2)
            assert abs(_radial_mass(p.c_r, r, 2) - 1.0) <= 1e-10

    def test_mass_matches_independent_midpoint_rule(self):
        # independent oracle: fine midpoint rule in the radial variable
        r, n = 0.125, 2
        p = bump_profile_radial(r, n)
        d = 2 * n
        C = unit_ball_volume(d)
        rho = np.linspace(0, 2 * r, 200001)[1:] - r / 200001
        f = p.values_at(rho)
        shell = d * C * rho ** (d - 1)
        inner = np.trapezoid(np.exp(2 * f / n) * shell, rho)
        outside = math.exp(2 * math.log(r) / n) * (1 - C * (2 * r) ** d)
        assert inner + outside == pytest.approx(1.0, abs=1e-6)

    def test_plateau_bound_example(self):
        # n=2, unit 4-torus, r=1/8: c_r <= -4 log(1/8) - log(pi^2/2)
        p = bump_profile_radial(0.125, 2)
        assert p.c_r <= -4 * math.log(0.125) - math.log(np.pi ** 2 / 2)

    def test_plateau_decreases_with_radius(self):
        cs = [bump_profile_radial(r, 2).c_r for r in (0.05, 0.1, 0.2)]
        assert cs[0] > cs[1] > cs[2]

    def test_mass_map_strictly_increasing(self):
        r = 0.1
        cs = np.linspace(2.0, 12.0, 6)
        masses = [_radial_mass(c, r, 2) for c in cs]
        assert all(a < b for a, b in zip(masses, masses[1:]))


class TestBumpFamilyGrid:
    def test_does_not_fit_raises(self, grid4d):
        bg = Background.constant(grid4d, 1.0)
        with pytest.raises(BumpDoesNotFitError):
            bump_family(0.3, (0.5,) * 4, bg)   # 2r = 0.6 > 1/2

    def test_resolution_too_coarse(self, grid4d):
        bg = Background.constant(grid4d, 1.0)   # 8^4: 0.12*8 < 4 cells
        with pytest.raises(ResolutionTooCoarseError):
            bump_family(0.12, (0.5,) * 4, bg)

    def test_mass_postcondition_on_grid(self):
        g = TorusGrid(2, (1.0,) * 4, (24,) * 4)
        bg = Background.constant(g, 1.0)
        prof, bump = bump_family(0.2, (0.5,) * 4, bg, tol=1e-10)
        mass = integrate(ScalarField(g, np.exp(bump.values)))
        assert abs(mass - 1.0) <= 1e-10
        assert bump.max() == pytest.approx(prof.c_r)
        assert bump.min() == pytest.approx(math.log(0.2))

    def test_periodic_distance_wraps(self):
        g = unit_grid(8)
        rho = periodic_distance(g, (0.0, 0.0))
        # farthest point of the unit 2-torus from the origin is (.5, .5)
        assert rho.max() == pytest.approx(math.sqrt(0.5))
        assert rho[0, 0] == 0.0


@pytest.fixture(scope="module")
def bg4():
    g = TorusGrid(2, (1.0,) * 4, (32,) * 4)
    return Background.constant(g, 1.0)


class TestUnboundednessSweep:
    def test_preconditions(self, grid2d, grid4d):
        with pytest.raises(ValueError):
            unboundedness_sweep([0.1], Background.constant(grid2d, 1.0))
        with pytest.raises(ValueError):
            unboundedness_sweep([0.1], Background.constant(grid4d, -1.0))
        bg_t = Background(grid4d, constant_field(grid4d, 1.0),
                          divfree_torsion(grid4d))
        with pytest.raises(NotBalancedError):
            unboundedness_sweep([0.1], bg_t)
        x = grid4d.coordinates()[0]
        sb = ScalarField(grid4d, 1.0 + 0.1 * np.sin(2 * np.pi * x)
                         + 0 * sum(grid4d.coordinates()))
        with pytest.raises(ValueError):
            unboundedness_sweep([0.1], Background(grid4d, sb))

    def test_energy_decreasing_and_ratio_limit(self, bg4):
        r_list = [2.0 ** -k for k in range(3, 11)]
        table = unboundedness_sweep(r_list, bg4)
        F = [row.energy_radial for row in table.rows]
        assert all(a > b for a, b in zip(F, F[1:]))
        assert F[-1] < -2.0
        # the c_r bound holds on the whole sweep
        assert all(row.c_r <= row.c_r_bound for row in table.rows)
        # ratios approach the oracle limit 2 monotonically from r = 2^-6 on
        # (the displayed (lam/2) log r reference is a one-sided bound, so the
        # sharp constant-s_base limit of F / ((lam/2) log r) is 2, not 1)
        ratios = [row.ratio for row in table.rows[3:]]
        assert all(a < b for a, b in zip(ratios, ratios[1:]))
        assert ratios[-1] == pytest.approx(2.0, abs=0.02)

    def test_grid_cross_validation(self, bg4):
        table = unboundedness_sweep([0.125, 2 ** -5], bg4)
        row = table.rows[0]
        assert abs(row.energy_grid - row.energy_radial) <= 0.01 * abs(
            row.energy_radial)
        # 2^-5 spans exactly one cell on a 32-point axis: no grid value
        assert math.isnan(table.rows[1].energy_grid)

    def test_threads_match_sequential(self, bg4):
        r_list = [2.0 ** -k for k in range(4, 7)]
        seq = unboundedness_sweep(r_list, bg4, threads=1)
        par = unboundedness_sweep(r_list, bg4, threads=2)
        for a, b in zip(seq.rows, par.rows):
            assert a.energy_radial == b.energy_radial
            assert a.c_r == b.c_r


class TestSaddleExperiment:
    def test_not_unstable_raises(self):
        g = unit_grid()
        # 2 lam / n = 2 pi^2 below lambda_1 = 4 pi^2
        bg = Background.constant(g, np.pi ** 2)
        with pytest.raises(NotUnstableError):
            saddle_experiment(bg, 1e-3)

    def test_unstable_run(self):
        g = unit_grid()
        bg = Background.constant(g, 4 * np.pi ** 2)
        rep = saddle_experiment(bg, 1e-3, t_end=1.0, snapshot_every=0.01,
                                stop_energy=-0.2)
        assert rep.min_eigenvalue == pytest.approx(-4 * np.pi ** 2, rel=0.01)
        F = rep.trajectory.column("energy")
        assert np.all(np.diff(F) < 0)
        assert rep.final_energy < -0.1
        assert np.all(np.diff(rep.distances) > 0)

    def test_zero_amplitude_control(self):
        g = unit_grid()
        bg = Background.constant(g, 4 * np.pi ** 2)
        rep = saddle_experiment(bg, 0.0, t_end=0.05, snapshot_every=0.01)
        assert rep.distances.max() < 1e-12
        assert rep.diverged_at is None

    def test_requires_constant_curvature(self):
        g = unit_grid()
        x1, _ = g.coordinates()
        sb = ScalarField(g, 4 * np.pi ** 2 + np.broadcast_to(
            np.sin(2 * np.pi * x1), g.shape).copy())
        with pytest.raises(ValueError):
            saddle_experiment(Background(g, sb), 1e-3)


class TestC0Certificate:
    def test_decaying_bound_and_reconstruction(self):
        bg = neg_curvature_bg(32)
        f0 = sine_initial(bg.grid)
        cert = c0_certificate(f0, bg, StepperConfig(t_end=2.0,
                                                    snapshot_every=0.1))
        assert cert.K > 0
        for row in cert.rows:
            assert row.w_sup <= row.bound * (1 + 1e-6)
            assert row.reconstruction <= 1e-5
            assert row.poisson_residual <= 1e-5

    def test_initial_identity_when_started_at_h(self):
        bg = neg_curvature_bg(32)
        h = canonical_initial(bg)
        cert = c0_certificate(h, bg, StepperConfig(t_end=0.2,
                                                   snapshot_every=0.1))
        w0 = h.values - cert.h.values + cert.lam * cert.v0.values
        np.testing.assert_allclose(w0, cert.lam * cert.v0.values, atol=1e-12)

    def test_stationary_run_scales_w_exactly(self):
        # converge first, then certify: w stays spatially constant and the
        # reconstruction is exact to integrator accuracy
        bg = neg_curvature_bg(16)
        traj = run(FlowState.create(sine_initial(bg.grid, 0.2), 0.0, bg), bg,
                   StepperConfig(t_end=8.0, snapshot_every=0.5))
        f_star = normalize_conformal(traj.final_state.f)
        cert = c0_certificate(f_star, bg, StepperConfig(t_end=1.0,
                                                        snapshot_every=0.25))
        w_range = cert.rows[-1]
        assert w_range.reconstruction <= 1e-10
        # w(t) = w(0) exp(lam t): compare the recorded sup norms
        for row in cert.rows:
            assert row.w_sup == pytest.approx(
                cert.rows[0].w_sup * math.exp(cert.lam * row.t), rel=1e-5)

    def test_failure_carries_first_row(self):
        bg = neg_curvature_bg(16)
        f0 = sine_initial(bg.grid)
        with pytest.raises(CertificateFailedError) as err:
            c0_certificate(f0, bg, StepperConfig(t_end=0.2,
                                                 snapshot_every=0.1),
                           reconstruction_tol=1e-18)
        assert err.value.row is not None

    def test_requires_normalized_initial(self):
        bg = neg_curvature_bg(16)
        with pytest.raises(ValueError):
            c0_certificate(constant_field(bg.grid, 0.2), bg, StepperConfig())

    def test_reconstruction_shrinks_at_scheme_order(self):
        """Halving dt divides the reconstruction defect by ~2^4 (rk4)."""
        bg = neg_curvature_bg(16)
        f0 = sine_initial(bg.grid, amplitude=1.0)
        recon = []
        for safety in (0.5, 0.25, 0.125):
            cfg = StepperConfig(t_end=0.5, snapshot_every=0.25,
                                cfl_safety=safety)
            cert = c0_certificate(f0, bg, cfg)
            recon.append(cert.rows[-1].reconstruction)
        assert recon[0] / recon[1] == pytest.approx(16.0, rel=0.4)
        assert recon[1] / recon[2] == pytest.approx(16.0, rel=0.4)


class TestPalaisSmaleExtract:
    def test_stationary_run_all_slices_qualify(self):
        g = unit_grid(16)
        bg = Background.constant(g, -1.0)
        st = FlowState.create(constant_field(g, 0.0), 0.0, bg)
        traj = run(st, bg, StepperConfig(t_end=0.3, snapshot_every=0.1))
        report = palais_smale_extract(traj, tol=1e-12)
        assert len(report.slices) == len(traj.rows)
        assert all(abs(s.dissipation) <= 1e-12 for s in report.slices)

    def test_convergent_run_late_slices(self):
        bg = neg_curvature_bg(16)
        st = FlowState.create(sine_initial(bg.grid, 0.3), 0.0, bg)
        traj = run(st, bg, StepperConfig(t_end=8.0, snapshot_every=0.5))
        report = palais_smale_extract(traj, tol=1e-8)
        assert report.slices, "late slices must qualify"
        last = report.slices[-1]
        lam = bg.lambda_total
        assert abs(last.s2_weighted - lam ** 2) <= 1e-6
        assert abs(last.mass - 1.0) <= 1e-6
        assert report.energy_bounded_below_observed
        # weighted square curvature vs lam^2 + |dissipation| per slice
        for s in report.slices:
            assert abs(s.s2_weighted - lam ** 2) <= abs(s.dissipation) + 1e-8

    def test_identity_every_snapshot(self):
        bg = neg_curvature_bg(16)
        st = FlowState.create(sine_initial(bg.grid, 0.3), 0.0, bg)
        traj = run(st, bg, StepperConfig(t_end=0.5, snapshot_every=0.05))
        lam = bg.lambda_total
        for row, s2w in zip(traj.rows, traj.aux["s2_weighted"]):
            assert abs(s2w - (lam ** 2 - row.dissipation)) <= 1e-8

    def test_active_run_has_no_qualifying_slice(self):
        g = unit_grid()
        bg = Background.constant(g, 4 * np.pi ** 2)
        rep = saddle_experiment(bg, 1e-3, t_end=0.3, snapshot_every=0.01,
                                stop_energy=-0.2)
        with pytest.raises(EmptyReportError):
            palais_smale_extract(rep.trajectory, tol=1e-10)

    def test_requires_balanced_run(self):
        g = unit_grid(16)
        x1, x2 = g.coordinates()
        sb = ScalarField(g, -1.0 + 0.3 * np.sin(2 * np.pi * x1) + 0 * x2)
        bg = Background(g, sb, divfree_torsion(g, amplitude=0.3))
        st = FlowState.create(sine_initial(g, 0.1), 0.0, bg)
        traj = run(st, bg, StepperConfig(t_end=0.1, snapshot_every=0.05))
        with pytest.raises(NotBalancedError):
            palais_smale_extract(traj, tol=1e-3)
