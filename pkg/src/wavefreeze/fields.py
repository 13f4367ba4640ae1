"""Discretized function space over the truncated cylinder.

The longitudinal axis is [-L, L) with N grid points and periodic boundary
conditions (applied to perturbation fields, which decay at both ends); each
transverse axis is a torus of circumference T_perp with N_perp points.
Derivatives, translations and Sobolev norms are realized as Fourier
multipliers; inner products are rectangle-rule quadrature, which is exact
for the periodic pairings used throughout.

Field values may carry leading batch dimensions: shape (*batch, c, *spatial).
All kernels act on the trailing axes, so every operation here is transparent
to replica batching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on [-L, L) x torus^(d-1)."""

    d: int = 1
    L: float = 64.0
    N: int = 512
    T_perp: float = 2.0 * np.pi
    N_perp: int = 1

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("grid.d: spatial dimension must be >= 1")
        if self.d > 2:
            raise ValueError("grid.d: only d in {1, 2} is supported")
        if self.N < 16 or (self.N & (self.N - 1)) != 0:
            raise ValueError("grid.N: must be a power of two >= 16")
        if self.N_perp < 1:
            raise ValueError("grid.N_perp: must be >= 1")
        if self.d == 1 and self.N_perp != 1:
            raise ValueError("grid.N_perp: must be 1 when d == 1")

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.N

    @property
    def dx_perp(self) -> float:
        return self.T_perp / self.N_perp

    @property
    def x(self) -> np.ndarray:
        return -self.L + self.dx * np.arange(self.N)

    @property
    def x_perp(self) -> np.ndarray:
        return self.dx_perp * np.arange(self.N_perp)

    @property
    def xi(self) -> np.ndarray:
        """Longitudinal wavenumbers in FFT order."""
        return 2.0 * np.pi * np.fft.fftfreq(self.N, d=self.dx)

    @property
    def xi_perp(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.N_perp, d=self.dx_perp)

    @property
    def lambda1(self) -> float:
        """First nonzero transverse Laplacian eigenvalue; +inf when d=1."""
        if self.d == 1:
            return np.inf
        return 4.0 * np.pi**2 / self.T_perp**2

    @property
    def torus_measure(self) -> float:
        """|T|^(d-1): measure of the transverse torus."""
        return self.T_perp ** (self.d - 1)

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return (self.N,) if self.d == 1 else (self.N, self.N_perp)

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dx_perp ** (self.d - 1)

    @property
    def spatial_axes(self) -> tuple[int, ...]:
        return (-1,) if self.d == 1 else (-2, -1)

    @property
    def x_axis(self) -> int:
        return -self.d

    def sobolev_multiplier(self, k: int) -> np.ndarray:
        """(1 + |xi|^2)^k on the full mode lattice."""
        if self.d == 1:
            xi2 = self.xi**2
        else:
            xi2 = self.xi[:, None] ** 2 + self.xi_perp[None, :] ** 2
        return (1.0 + xi2) ** k


@dataclass
class Field:
    """Componentwise real field on a Grid, with optional batch dimensions."""

    grid: Grid
    values: np.ndarray
    components: int = field(default=0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        tail = self.grid.spatial_shape
        if self.components == 0:
            # infer: values shaped (c, *spatial)
            if self.values.shape[-self.grid.d:] != tail:
                raise ValueError("field shape inconsistent with grid")
            self.components = self.values.shape[-self.grid.d - 1]
        expected = (self.components,) + tail
        if self.values.shape[-len(expected):] != expected:
            raise ValueError("field shape inconsistent with grid/components")

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.values.shape[: -self.grid.d - 1]

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy(), self.components)

    def check_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def zero_field(grid: Grid, components: int, batch: tuple[int, ...] = ()) -> Field:
    return Field(grid, np.zeros(batch + (components,) + grid.spatial_shape), components)


# ---------------------------------------------------------------------------
# spectral kernels on raw arrays (trailing axes = spatial)
# ---------------------------------------------------------------------------

def _fft(grid: Grid, values: np.ndarray) -> np.ndarray:
    return np.fft.fftn(values, axes=grid.spatial_axes)

def _ifft(grid: Grid, values: np.ndarray) -> np.ndarray:
    return np.fft.ifftn(values, axes=grid.spatial_axes)


def deriv_values(grid: Grid, values: np.ndarray, axis: int = 0, order: int = 1) -> np.ndarray:
    """Fourier-multiplier derivative along the given spatial axis (0 = x)."""
    if axis < 0 or axis >= grid.d:
        raise ValueError(f"axis {axis} out of range for d={grid.d}")
    if order == 0:
        return np.array(values, copy=True)
    xi = grid.xi if axis == 0 else grid.xi_perp
    mult = (1j * xi) ** order
    if order % 2 == 1:
        # zero the (unpaired) Nyquist mode for odd derivatives of real data;
        # keeps the differentiation matrix exactly skew-symmetric
        mult = mult.copy()
        n = xi.shape[0]
        if n % 2 == 0:
            mult[n // 2] = 0.0
    np_axis = grid.spatial_axes[axis]
    shape = [1] * values.ndim
    shape[np_axis] = xi.shape[0]
    vhat = np.fft.fft(values, axis=np_axis) * mult.reshape(shape)
    out = np.fft.ifft(vhat, axis=np_axis)
    return out.real if np.isrealobj(values) else out


def translate_values(grid: Grid, values: np.ndarray, gamma: float) -> np.ndarray:
    """Shift right by gamma along the longitudinal axis: out(x) = in(x - gamma)."""
    if gamma == 0.0:
        return np.array(values, copy=True)
    phase = np.exp(-1j * grid.xi * gamma)
    np_axis = grid.x_axis
    shape = [1] * values.ndim
    shape[np_axis] = grid.N
    vhat = np.fft.fft(values, axis=np_axis) * phase.reshape(shape)
    out = np.fft.ifft(vhat, axis=np_axis)
    return out.real if np.isrealobj(values) else out


def inner_values(grid: Grid, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Quadrature of sum_components a.b over the domain. Batched on leading axes."""
    axes = tuple(range(-grid.d - 1, 0))
    return np.sum(a * b, axis=axes) * grid.cell_volume


def l2_norm_sq_values(grid: Grid, a: np.ndarray) -> np.ndarray:
    axes = tuple(range(-grid.d - 1, 0))
    if np.iscomplexobj(a):
        return np.sum(a.real**2 + a.imag**2, axis=axes) * grid.cell_volume
    return np.sum(a * a, axis=axes) * grid.cell_volume


def sobolev_norm_sq_values(grid: Grid, values: np.ndarray, k: int) -> np.ndarray:
    """Squared H^k norm via the isotropic multiplier (1+|xi|^2)^k.

    Normalized so that k=0 coincides with the quadrature L^2 norm.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    vhat = _fft(grid, values)
    mult = grid.sobolev_multiplier(k)
    weight = grid.cell_volume / np.prod(grid.spatial_shape)
    axes = tuple(range(-grid.d - 1, 0))
    return np.sum((vhat.real**2 + vhat.imag**2) * mult, axis=axes) * weight


def sobolev_norm_sq_multi(grid: Grid, values: np.ndarray,
                          ks: tuple[int, ...]) -> list[np.ndarray]:
    """Squared H^k norms for several k from a single transform."""
    vhat = _fft(grid, values)
    power = vhat.real**2 + vhat.imag**2
    weight = grid.cell_volume / np.prod(grid.spatial_shape)
    axes = tuple(range(-grid.d - 1, 0))
    return [np.sum(power * grid.sobolev_multiplier(k), axis=axes) * weight
            for k in ks]


def tail_mass_values(grid: Grid, values: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    """Fraction of the squared L^2 mass carried by the outer part of the x-axis."""
    outer = np.abs(grid.x) >= (1.0 - fraction) * grid.L
    shape = [1] * values.ndim
    shape[grid.x_axis] = grid.N
    total = l2_norm_sq_values(grid, values)
    out = l2_norm_sq_values(grid, values * outer.reshape(shape))
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(total > 0, out / np.maximum(total, 1e-300), 0.0)
    return frac


# ---------------------------------------------------------------------------
# Field-level wrappers
# ---------------------------------------------------------------------------

def spectral_derivative(f: Field, axis: int = 0, order: int = 1) -> Field:
    return Field(f.grid, deriv_values(f.grid, f.values, axis, order), f.components)


def translate(f: Field, gamma: float) -> Field:
    return Field(f.grid, translate_values(f.grid, f.values, gamma), f.components)


def inner_product(a: Field, b: Field) -> float | np.ndarray:
    if a.grid is not b.grid and a.grid != b.grid:
        raise ValueError("fields live on different grids")
    if a.components != b.components:
        raise ValueError("component mismatch")
    return inner_values(a.grid, a.values, b.values)


def sobolev_norm(f: Field, k: int) -> float | np.ndarray:
    return np.sqrt(sobolev_norm_sq_values(f.grid, f.values, k))


def l2_norm(f: Field) -> float | np.ndarray:
    return np.sqrt(l2_norm_sq_values(f.grid, f.values))


def tail_mass(f: Field, fraction: float = 0.1) -> float | np.ndarray:
    return tail_mass_values(f.grid, f.values, fraction)


def fourier_mode(grid: Grid, k_index: int, p_index: int = 0) -> np.ndarray:
    """Complex exponential mode normalized to unit quadrature L^2 norm."""
    x = grid.x
    xi = grid.xi[k_index]
    mode = np.exp(1j * xi * x)
    if grid.d == 2:
        xp = grid.x_perp
        eta = grid.xi_perp[p_index]
        mode = mode[:, None] * np.exp(1j * eta * xp)[None, :]
    vol = 2.0 * grid.L * grid.torus_measure
    return mode / np.sqrt(vol)
