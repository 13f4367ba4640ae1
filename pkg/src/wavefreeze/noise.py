"""Translationally invariant Q-Wiener noise on the grid.

The covariance operator Q acts by convolution with a symmetric kernel q, so
it is diagonal in Fourier space with matrix symbol q_hat(mode). Increments
are synthesized spectrally (exact on the grid); replica streams use the
counter-based Philox generator keyed by (seed, stream_id) with the counter
advanced to a fixed per-step offset, which makes ensembles reproducible
under any scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fields import Grid, sobolev_norm_sq_values

Q_MODE_SKIP = 1e-14  # relative symbol threshold below which HS modes are skipped


@dataclass
class NoiseModel:
    """Convolution covariance: kernel q, spectrum q_hat, derived factors."""

    grid: Grid
    m: int
    kernel: Callable[[np.ndarray], np.ndarray]
    q_hat: np.ndarray        # (*spatial, m, m), real symmetric PSD per mode
    sqrt_q_hat: np.ndarray   # (*spatial, m, m)
    q_L1: float
    params: dict = field(default_factory=dict)

    @property
    def live_modes(self) -> np.ndarray:
        """Flat indices of modes whose symbol is not negligibly small."""
        tr = np.einsum("...ii->...", self.q_hat).reshape(-1)
        return np.nonzero(tr >= Q_MODE_SKIP * max(tr.max(), 1e-300))[0]


def gaussian_kernel_model(grid: Grid, m: int = 1, q0: float = 0.25,
                          ell: float = 2.0) -> NoiseModel:
    """Diagonal Gaussian kernel q(x) = q0 exp(-|x|^2 / (2 ell^2)) per component."""
    if q0 < 0:
        raise ValueError("noise.q0: must be >= 0")
    if ell <= 0:
        raise ValueError("noise.ell: must be > 0")

    def kernel(r2: np.ndarray) -> np.ndarray:
        return q0 * np.exp(-r2 / (2.0 * ell**2))

    x = grid.x
    if grid.d == 1:
        r2 = x**2
    else:
        xp = grid.x_perp
        # nearest periodic image on the transverse torus
        xp_c = np.minimum(xp, grid.T_perp - xp)
        r2 = x[:, None] ** 2 + xp_c[None, :] ** 2
    q_samples = kernel(r2)
    q_hat_scalar = _spectrum_from_samples(grid, q_samples)
    eye = np.eye(m)
    q_hat = q_hat_scalar[..., None, None] * eye
    sqrt_q_hat = np.sqrt(np.maximum(q_hat_scalar, 0.0))[..., None, None] * eye
    q_L1 = float(np.sum(np.abs(q_samples)) * grid.cell_volume) * m
    return NoiseModel(grid=grid, m=m, kernel=kernel, q_hat=q_hat,
                      sqrt_q_hat=sqrt_q_hat, q_L1=q_L1,
                      params={"kernel": "gaussian", "q0": q0, "ell": ell})


def _spectrum_from_samples(grid: Grid, q_samples: np.ndarray) -> np.ndarray:
    """Continuum-normalized Fourier symbol of a kernel sampled around x=0."""
    shifted = np.fft.ifftshift(q_samples, axes=0 if grid.d == 1 else (0,))
    spec = np.fft.fftn(shifted, axes=tuple(range(grid.d))) * grid.cell_volume
    sym = spec.real
    if np.min(sym) < -1e-12 * max(np.max(sym), 1e-300):
        raise ValueError("noise kernel has a significantly negative Fourier symbol")
    return np.maximum(sym, 0.0)


def check_kernel_symmetry(noise: NoiseModel, n_samples: int = 64,
                          rng_seed: int = 0) -> float:
    """Max |q(-x) - q(x)| + |q^T - q| over sampled grid separations."""
    rng = np.random.default_rng(rng_seed)
    grid = noise.grid
    xs = rng.uniform(-grid.L, grid.L, size=n_samples)
    vals_p = noise.kernel(xs**2)
    vals_m = noise.kernel((-xs) ** 2)
    return float(np.max(np.abs(vals_p - vals_m)))


# ---------------------------------------------------------------------------
# Q and sqrt(Q) as Fourier multipliers
# ---------------------------------------------------------------------------

def _mode_multiply(grid: Grid, symbol: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Apply a per-mode (m x m) symbol to an m-component field (batched)."""
    axes = grid.spatial_axes
    vhat = np.fft.fftn(values, axes=axes)
    # vhat: (..., m, *spatial); symbol: (*spatial, m, m)
    if grid.d == 1:
        out = np.einsum("xcm,...mx->...cx", symbol, vhat)
    else:
        out = np.einsum("xycm,...mxy->...cxy", symbol, vhat)
    res = np.fft.ifftn(out, axes=axes)
    return res.real if np.isrealobj(values) else res


def apply_Q(noise: NoiseModel, values: np.ndarray) -> np.ndarray:
    """Convolution with the covariance kernel, spectrally."""
    if values.shape[-noise.grid.d - 1] != noise.m:
        raise ValueError("apply_Q: field must have m components")
    return _mode_multiply(noise.grid, noise.q_hat, values)


def apply_sqrtQ(noise: NoiseModel, values: np.ndarray) -> np.ndarray:
    return _mode_multiply(noise.grid, noise.sqrt_q_hat, values)


# ---------------------------------------------------------------------------
# increment sampling
# ---------------------------------------------------------------------------

@dataclass
class NoiseSampler:
    """Counter-based stream of Q-Wiener increments for one replica."""

    noise: NoiseModel
    seed: int
    stream_id: int
    _stride: int = 0
    _scaled_sqrt: np.ndarray | None = None

    def __post_init__(self):
        draws = self.noise.m * int(np.prod(self.noise.grid.spatial_shape))
        self._stride = 8 * int(2 ** np.ceil(np.log2(max(draws, 2))))
        # sqrt(q_hat / cell_volume): per-step dt scaling applied at draw time
        self._scaled_sqrt = self.noise.sqrt_q_hat / np.sqrt(self.noise.grid.cell_volume)
        self._key = np.array([self.seed % (2**64), self.stream_id % (2**64)],
                             dtype=np.uint64)
        self._bitgen = np.random.Philox(key=self._key)
        self._gen = np.random.Generator(self._bitgen)
        self._template = dict(self._bitgen.state)

    def _generator(self, step: int) -> np.random.Generator:
        # equivalent to a fresh Philox(key) advanced by step * stride, but
        # reuses the cached object: counter units match advance()
        st = dict(self._template)
        st["state"] = {"counter": np.array([(step * self._stride) % (2**64), 0, 0, 0],
                                           dtype=np.uint64),
                       "key": self._key}
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bitgen.state = st
        return self._gen

    def raw_normals(self, step: int) -> np.ndarray:
        """White-noise slab for one step, from the step-keyed counter."""
        return self._generator(step).standard_normal(
            size=(self.noise.m,) + self.noise.grid.spatial_shape)

    def increment(self, dt: float, step: int) -> np.ndarray:
        """One increment with mean 0 and covariance dt * Q; shape (m, *spatial)."""
        if dt <= 0:
            raise ValueError("dt must be > 0")
        out = _mode_multiply(self.noise.grid, self._scaled_sqrt, self.raw_normals(step))
        return out * np.sqrt(dt)


def sample_increment(sampler: NoiseSampler, grid: Grid, dt: float,
                     step: int = 0) -> np.ndarray:
    if grid != sampler.noise.grid:
        raise ValueError("sampler grid mismatch")
    return sampler.increment(dt, step)


def batched_increments(samplers: list[NoiseSampler], dt: float,
                       step: int) -> np.ndarray:
    """Increments for a replica batch: (R, m, *spatial), one shared transform.

    Bit-identical to calling increment() per sampler; the per-replica white
    noise comes from each sampler's own counter stream.
    """
    noise = samplers[0].noise
    eps = np.stack([s.raw_normals(step) for s in samplers])
    out = _mode_multiply(noise.grid, samplers[0]._scaled_sqrt, eps)
    return out * np.sqrt(dt)


# ---------------------------------------------------------------------------
# Hilbert-Schmidt norms of pointwise multiplication operators
# ---------------------------------------------------------------------------

def _basis_mode_field(grid: Grid, flat_index: int) -> np.ndarray:
    """Unit-L^2 complex Fourier mode as a spatial array."""
    idx = np.unravel_index(flat_index, grid.spatial_shape)
    out = np.zeros(grid.spatial_shape, dtype=complex)
    out[idx] = 1.0
    vol = 2.0 * grid.L * grid.torus_measure
    field = np.fft.ifftn(out) * np.prod(grid.spatial_shape) / np.sqrt(vol)
    return field


def hs_norm_multiplication(noise: NoiseModel, z_values: np.ndarray, k: int) -> float:
    """HS norm of v -> z v as an operator from L^2_Q into H^k.

    z_values has shape (n, m, *spatial). The orthonormal basis of L^2_Q is
    the Fourier/noise-component tensor basis pushed through sqrt(Q); modes
    with negligible symbol are skipped.
    """
    grid = noise.grid
    n = z_values.shape[0]
    if z_values.shape[1] != noise.m:
        raise ValueError("z must have n x m components")
    total = 0.0
    sq_flat = noise.sqrt_q_hat.reshape(-1, noise.m, noise.m)
    for flat in noise.live_modes:
        mode = _basis_mode_field(grid, int(flat))
        sq = sq_flat[flat]
        for c in range(noise.m):
            # z . (sqrt(Q) e_{mode,c}), an n-component complex field
            coef = np.einsum("nm...,m->n...", z_values, sq[:, c])
            y = coef * mode
            total += float(np.sum(sobolev_norm_sq_values(grid, y, k)))
    return float(np.sqrt(total))


def hs_norm_row_functional(noise: NoiseModel, w_values: np.ndarray) -> float:
    """HS norm of the scalar functional xi -> <w, xi> over L^2_Q.

    Equals sqrt(<Q w, w>) by Parseval; w_values has shape (m, *spatial).
    """
    qw = apply_Q(noise, w_values)
    val = float(np.sum(qw * w_values)) * noise.grid.cell_volume
    return float(np.sqrt(max(val, 0.0)))
