"""Periodic grids, scalar/covector fields and spectral operators on flat tori.

The torus has real dimension 2n with coordinate periods L_1..L_{2n}.  All
integrals use the normalized measure (total volume exactly 1), so
``integrate`` is the plain grid mean.  Differential operators act through
real FFTs with per-axis wavenumbers xi_i = 2*pi*k_i/L_i; the Laplacian has
Fourier multiplier -|xi|^2 (negative semidefinite), which makes the heat-type
flows in this package forward parabolic.

All operations are pure: fields are never mutated, and read-only fields can
be shared freely across threads.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import SnapshotFormatError

SNAPSHOT_MAGIC = b"CYF1"


class TorusGrid:
    """Uniform grid on a flat complex n-torus with unit total measure.

    Parameters
    ----------
    complex_dim : complex dimension n; the grid has 2n real axes.
    periods     : 2n positive coordinate periods L_i.
    resolution  : 2n even point counts N_i (>= 4).
    """

    def __init__(self, complex_dim, periods, resolution):
        n = int(complex_dim)
        periods = tuple(float(L) for L in periods)
        resolution = tuple(int(N) for N in resolution)
        if n < 1:
            raise ValueError("complex_dim must be a positive integer")
        if len(periods) != 2 * n or len(resolution) != 2 * n:
            raise ValueError(f"need {2*n} periods and resolutions, "
                             f"got {len(periods)} and {len(resolution)}")
        if any(L <= 0 for L in periods):
            raise ValueError("all periods must be positive")
        if any(N < 4 or N % 2 for N in resolution):
            raise ValueError("all resolutions must be even and >= 4")
        self.complex_dim = n
        self.real_dim = 2 * n
        self.periods = periods
        self.resolution = resolution
        self.shape = resolution
        self.size = math.prod(resolution)
        # product(L_i/N_i) / product(L_i): total measure is exactly 1
        self.cell_volume = 1.0 / self.size
        self._k2 = None
        self._deriv_mult = None

    def axis_spacing(self, axis):
        return self.periods[axis] / self.resolution[axis]

    def min_spacing(self):
        return min(L / N for L, N in zip(self.periods, self.resolution))

    def coordinates(self):
        """Open-mesh coordinate arrays, broadcastable to the grid shape."""
        out = []
        d = self.real_dim
        for i, (L, N) in enumerate(zip(self.periods, self.resolution)):
            x = np.arange(N) * (L / N)
            shape = [1] * d
            shape[i] = N
            out.append(x.reshape(shape))
        return out

    # -- spectral caches ---------------------------------------------------

    def _wavenumbers(self):
        """Per-axis angular wavenumbers in rfftn layout (last axis halved)."""
        d = self.real_dim
        xs = []
        for i, (L, N) in enumerate(zip(self.periods, self.resolution)):
            if i == d - 1:
                xi = 2.0 * np.pi * np.fft.rfftfreq(N, d=L / N)
            else:
                xi = 2.0 * np.pi * np.fft.fftfreq(N, d=L / N)
            shape = [1] * d
            shape[i] = xi.size
            xs.append(xi.reshape(shape))
        return xs

    @property
    def k_squared(self):
        """|xi|^2 on the rfftn coefficient layout."""
        if self._k2 is None:
            k2 = np.zeros(self.spectral_shape)
            for xi in self._wavenumbers():
                k2 = k2 + xi * xi
            self._k2 = k2
        return self._k2

    @property
    def derivative_multipliers(self):
        """Per-axis i*xi multipliers with Nyquist modes zeroed."""
        if self._deriv_mult is None:
            mults = []
            for i, xi in enumerate(self._wavenumbers()):
                m = 1j * xi.astype(complex)
                N = self.resolution[i]
                nyq = N // 2
                idx = [slice(None)] * self.real_dim
                # fftfreq puts Nyquist at index N//2; rfftfreq at the end
                idx[i] = -1 if i == self.real_dim - 1 else nyq
                m[tuple(idx)] = 0.0
                mults.append(m)
            self._deriv_mult = mults
        return self._deriv_mult

    @property
    def spectral_shape(self):
        shape = list(self.resolution)
        shape[-1] = shape[-1] // 2 + 1
        return tuple(shape)

    # -- value semantics ---------------------------------------------------

    def __eq__(self, other):
        if not isinstance(other, TorusGrid):
            return NotImplemented
        return (self.complex_dim == other.complex_dim
                and self.periods == other.periods
                and self.resolution == other.resolution)

    def __hash__(self):
        return hash((self.complex_dim, self.periods, self.resolution))

    def __repr__(self):
        return (f"TorusGrid(n={self.complex_dim}, periods={self.periods}, "
                f"resolution={self.resolution})")


def _check_same_grid(a, b):
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")


@dataclass
class ScalarField:
    """Real-valued grid function on a TorusGrid."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid "
                             f"shape {self.grid.shape}")
        self.values = v

    def copy(self):
        return ScalarField(self.grid, self.values.copy())

    # light arithmetic sugar; scalars broadcast
    def _coerce(self, other):
        if isinstance(other, ScalarField):
            _check_same_grid(self, other)
            return other.values
        return other

    def __add__(self, other):
        return ScalarField(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - self._coerce(other))

    def __rsub__(self, other):
        return ScalarField(self.grid, self._coerce(other) - self.values)

    def __mul__(self, other):
        return ScalarField(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.values)

    def min(self):
        return float(self.values.min())

    def max(self):
        return float(self.values.max())

    def max_abs(self):
        return float(np.max(np.abs(self.values)))


@dataclass
class CovectorField:
    """Covector (1-form) on a TorusGrid, one component array per axis."""

    grid: TorusGrid
    components: tuple

    def __post_init__(self):
        comps = tuple(np.asarray(c, dtype=np.float64) for c in self.components)
        if len(comps) != self.grid.real_dim:
            raise ValueError(f"need {self.grid.real_dim} components, "
                             f"got {len(comps)}")
        for c in comps:
            if c.shape != self.grid.shape:
                raise ValueError("component shape does not match grid")
        self.components = comps

    def is_zero(self):
        return all(not c.any() for c in self.components)

    def max_abs(self):
        return max(float(np.max(np.abs(c))) for c in self.components)


def constant_field(grid, value):
    return ScalarField(grid, np.full(grid.shape, float(value)))


def zero_covector(grid):
    return CovectorField(grid, tuple(np.zeros(grid.shape)
                                     for _ in range(grid.real_dim)))


# -- transforms -------------------------------------------------------------

def _rfftn(values):
    return np.fft.rfftn(values)


def _irfftn(coeffs, shape):
    return np.fft.irfftn(coeffs, s=shape, axes=range(len(shape)))


# -- operators --------------------------------------------------------------

def integrate(phi: ScalarField) -> float:
    """Integral against the unit-volume measure (periodic trapezoid rule).

    Exact for trigonometric polynomials resolved by the grid.
    """
    return float(np.sum(phi.values) * phi.grid.cell_volume)


def laplacian(phi: ScalarField) -> ScalarField:
    """Flat Laplacian, Fourier multiplier -|xi|^2 (negative semidefinite)."""
    g = phi.grid
    fh = _rfftn(phi.values)
    fh *= -g.k_squared
    return ScalarField(g, _irfftn(fh, g.shape))


def gradient(phi: ScalarField) -> CovectorField:
    """Spectral first derivatives per coordinate."""
    g = phi.grid
    fh = _rfftn(phi.values)
    comps = tuple(_irfftn(m * fh, g.shape) for m in g.derivative_multipliers)
    return CovectorField(g, comps)


def pairing(a: CovectorField, b: CovectorField) -> ScalarField:
    """Pointwise Euclidean inner product of two covector fields."""
    _check_same_grid(a, b)
    out = a.components[0] * b.components[0]
    for ca, cb in zip(a.components[1:], b.components[1:]):
        out += ca * cb
    return ScalarField(a.grid, out)


def divergence(theta: CovectorField) -> ScalarField:
    """Spectral divergence of a covector field."""
    g = theta.grid
    out = np.zeros(g.shape)
    for m, c in zip(g.derivative_multipliers, theta.components):
        out += _irfftn(m * _rfftn(c), g.shape)
    return ScalarField(g, out)


def dealias(phi: ScalarField) -> ScalarField:
    """Project out modes above 2/3 of the per-axis Nyquist (2/3 rule)."""
    g = phi.grid
    fh = _rfftn(phi.values)
    d = g.real_dim
    for i, (L, N) in enumerate(zip(g.periods, g.resolution)):
        if i == d - 1:
            k = np.fft.rfftfreq(N, d=1.0 / N)
        else:
            k = np.fft.fftfreq(N, d=1.0 / N)
        keep = np.abs(k) <= N / 3.0
        shape = [1] * d
        shape[i] = k.size
        fh *= keep.reshape(shape)
    return ScalarField(g, _irfftn(fh, g.shape))


# -- binary snapshot format --------------------------------------------------
#
# header: magic "CYF1", u32 LE 2n, 2n x u32 N_i, 2n x f64 L_i;
# payload: N_1*...*N_{2n} f64 LE values, row-major, axis 1 outermost.

def write_snapshot(path, phi: ScalarField):
    g = phi.grid
    d = g.real_dim
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", d))
        fh.write(struct.pack(f"<{d}I", *g.resolution))
        fh.write(struct.pack(f"<{d}d", *g.periods))
        fh.write(np.ascontiguousarray(phi.values, dtype="<f8").tobytes())


def read_snapshot(path, grid: TorusGrid | None = None) -> ScalarField:
    """Read a snapshot; if `grid` is given, the header must match it."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise SnapshotFormatError(f"{path}: bad magic {magic!r}")

        def take(nbytes, what):
            blob = fh.read(nbytes)
            if len(blob) != nbytes:
                raise SnapshotFormatError(f"{path}: truncated {what}")
            return blob

        (d,) = struct.unpack("<I", take(4, "header"))
        if not 2 <= d <= 64 or d % 2:
            raise SnapshotFormatError(f"{path}: bad real dimension {d}")
        resolution = struct.unpack(f"<{d}I", take(4 * d, "header"))
        periods = struct.unpack(f"<{d}d", take(8 * d, "header"))
        if any(N < 4 or N % 2 for N in resolution) or any(L <= 0
                                                          for L in periods):
            raise SnapshotFormatError(f"{path}: invalid grid header")
        count = math.prod(resolution)
        payload = take(8 * count, "payload")
        values = np.frombuffer(payload, dtype="<f8").reshape(resolution)
    if grid is None:
        grid = TorusGrid(d // 2, periods, resolution)
    else:
        if (grid.resolution != resolution
                or any(abs(a - b) > 1e-12 * max(1.0, abs(a))
                       for a, b in zip(grid.periods, periods))):
            raise SnapshotFormatError(
                f"{path}: header does not match expected grid {grid!r}")
    return ScalarField(grid, values.copy())
