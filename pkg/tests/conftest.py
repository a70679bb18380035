"""Shared fixtures and helpers for the test suite."""

import hashlib
import os
from pathlib import Path

import numpy as np
import pytest

from cyflow import FlowState, ScalarField, TorusGrid
from cyflow.flow import Trajectory, TrajectoryRow

# Opt-in development cache for the heavy acceptance trajectories: set
# CYFLOW_TEST_CACHE=<dir> to reuse runs across pytest invocations.  Unset
# (the default) everything is computed fresh.
_CACHE_DIR = os.environ.get("CYFLOW_TEST_CACHE")
_CACHE_VERSION = "v3"

_ROW_FIELDS = ("t", "mass", "weighted_scalar", "s_min", "s_max", "energy",
               "dissipation", "dt")


def _cache_path(key):
    digest = hashlib.sha256(f"{_CACHE_VERSION}:{key}".encode()).hexdigest()[:16]
    return Path(_CACHE_DIR) / f"{digest}.npz"


def cached_trajectory(key, bg, builder):
    """Build (or reload) a Trajectory; cache only when the env var is set."""
    if not _CACHE_DIR:
        return builder()
    path = _cache_path(key)
    if path.exists():
        data = np.load(path, allow_pickle=False)
        rows = [TrajectoryRow(**{f: float(v) for f, v in zip(_ROW_FIELDS, rec)})
                for rec in data["rows"]]
        aux = {k[4:]: data[k] for k in data.files if k.startswith("aux_")}
        final = FlowState.create(
            ScalarField(bg.grid, data["final_f"]), float(data["final_t"]), bg)
        diverged = float(data["diverged_at"]) if data["has_diverged"] else None
        return Trajectory(rows=rows, aux=aux, lam=float(data["lam"]),
                          final_state=final, diverged_at=diverged)
    traj = builder()
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        rows=np.array([[getattr(r, f) for f in _ROW_FIELDS]
                       for r in traj.rows]),
        final_f=traj.final_state.f.values,
        final_t=traj.final_state.t,
        lam=traj.lam,
        has_diverged=traj.diverged_at is not None,
        diverged_at=traj.diverged_at if traj.diverged_at is not None else 0.0,
        **{f"aux_{k}": np.asarray(v) for k, v in traj.aux.items()})
    return traj


def cached_certificate(key, bg, builder):
    from cyflow.experiments import C0Certificate, C0Row
    if not _CACHE_DIR:
        return builder()
    path = _cache_path(key)
    fields = ("t", "w_sup", "bound", "reconstruction", "poisson_residual")
    if path.exists():
        data = np.load(path, allow_pickle=False)
        rows = [C0Row(**{f: float(v) for f, v in zip(fields, rec)})
                for rec in data["rows"]]
        return C0Certificate(h=ScalarField(bg.grid, data["h"]),
                             v0=ScalarField(bg.grid, data["v0"]),
                             K=float(data["K"]), rows=rows,
                             lam=float(data["lam"]))
    cert = builder()
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        rows=np.array([[getattr(r, f) for f in fields] for r in cert.rows]),
        h=cert.h.values, v0=cert.v0.values, K=cert.K, lam=cert.lam)
    return cert


def band_limited(grid, rng, kmax=5, modes=12, amplitude=1.0):
    """Random real field with wavenumbers at most kmax per axis.

    Built as a sum of random plane waves, so it is exactly resolved by any
    grid with N_i > 2*kmax (no aliasing, no Nyquist content).
    """
    coords = grid.coordinates()
    values = np.zeros(grid.shape)
    d = grid.real_dim
    for _ in range(modes):
        k = rng.integers(-kmax, kmax + 1, size=d)
        if not k.any():
            continue
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.normal()
        wave = np.zeros(grid.shape)
        for i in range(d):
            wave = wave + (2.0 * np.pi * k[i] / grid.periods[i]) * coords[i]
        values += amp * np.cos(wave + phase)
    peak = np.max(np.abs(values))
    if peak > 0:
        values *= amplitude / peak
    return ScalarField(grid, values)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid2d():
    """Unit 2-torus (n=1), modest resolution."""
    return TorusGrid(1, (1.0, 1.0), (64, 64))


@pytest.fixture
def grid2d_aniso():
    """Anisotropic 2-torus to exercise per-axis wavenumbers."""
    return TorusGrid(1, (2.0, 0.5), (64, 32))


@pytest.fixture
def grid4d():
    """Small 4-torus (n=2)."""
    return TorusGrid(2, (1.0, 1.0, 1.0, 1.0), (8, 8, 8, 8))
