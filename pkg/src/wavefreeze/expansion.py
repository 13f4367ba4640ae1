"""Order-by-order expansion hierarchy driven by shared noise increments.

The fields Y_1, ..., Y_{r-1} solve a triangular system: each Y_j is forced
by derivative tensors of the frozen nonlinearities at the origin contracted
against lower-order fields (drift N_j, noise operator B_j), and is advanced
with the same exponential-Euler propagator and the same increments as the
full simulation, which is what makes the residual Z = V - sum Y_j meaningful
pathwise. Everything is batched over replicas.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from math import factorial

import numpy as np

from .fields import l2_norm_sq_values, sobolev_norm_sq_values
from .freeze import FreezeContext, multilinear_fd_batched
from .linops import LinearOperator


def compositions(total: int, max_part: int) -> list[tuple[int, ...]]:
    """Ordered tuples of integers >= 1 (each <= max_part) summing to total."""
    if total == 0:
        return [()]
    out = []
    for ell in range(1, total + 1):
        for tup in product(range(1, max_part + 1), repeat=ell):
            if sum(tup) == total:
                out.append(tup)
    return out


@dataclass
class ConstantSources:
    """The order-zero forcing data: rho_N field and the rho_B noise operator."""

    rho_N: np.ndarray   # (n, *spatial)
    g0: np.ndarray      # g(phi): (n, m, *spatial)
    w_b0: np.ndarray    # representer of b at the front: (m, *spatial)
    phi_d1: np.ndarray  # (n, *spatial)
    cell_volume: float
    sub: str

    def rho_B_apply(self, xi: np.ndarray) -> np.ndarray:
        """rho_B[xi] = g(phi) xi + phi' b(phi,0)[xi]; batched over xi."""
        s = self.sub
        gxi = np.einsum(f"nm{s},...m{s}->...n{s}", self.g0, xi)
        b_val = np.sum(self.w_b0 * xi, axis=tuple(range(-len(s) - 1, 0))) \
            * self.cell_volume
        return gxi + b_val.reshape(b_val.shape + (1,) * (len(s) + 1)) * self.phi_d1


def constant_sources(ctx: FreezeContext) -> ConstantSources:
    z = np.zeros((ctx.model.n,) + ctx.grid.spatial_shape)
    rho_n = ctx.R_II(z) + ctx.Upsilon(z)
    return ConstantSources(
        rho_N=rho_n,
        g0=ctx.g_u(z),
        w_b0=ctx.b_row_v(z),
        phi_d1=ctx.phi_d1,
        cell_volume=ctx.grid.cell_volume,
        sub=ctx._sp,
    )


class ExpansionEngine:
    """Integrates the hierarchy Y_1..Y_{r-1} on a replica batch."""

    def __init__(self, ctx: FreezeContext, linop: LinearOperator, dt: float,
                 batch: int, delta: float, v_star: np.ndarray,
                 k_star: int = 1, sources: ConstantSources | None = None,
                 max_order: int | None = None):
        self.ctx = ctx
        self.linop = linop
        self.dt = float(dt)
        self.batch = int(batch)
        self.r = ctx.model.r
        self.k_star = int(k_star)
        self.k_ladder = [k_star + self.r + 1 - j for j in range(1, self.r)]
        self.sources = sources if sources is not None else constant_sources(ctx)
        self.max_order = self.r - 1 if max_order is None else min(max_order, self.r - 1)
        shape = (batch, ctx.model.n) + ctx.grid.spatial_shape
        self.Y = [np.zeros(shape) for _ in range(self.r - 1)]
        self.Y[0] = self.Y[0] + delta * v_star
        self.t = 0.0

    # -- forcing assembly -------------------------------------------------------

    def assemble_N(self, j: int) -> np.ndarray | float:
        """Drift forcing for Y_j (uses current fields)."""
        ctx = self.ctx
        s2 = ctx.sigma**2
        out: np.ndarray | float = 0.0
        # quadratic-and-higher part of R_I: compositions of j with l >= 2
        for tup in compositions(j, self.r - 1):
            if len(tup) < 2:
                continue
            dirs = [self.Y[i - 1] for i in tup]
            term = multilinear_fd_batched(ctx.R_I_withdx, dirs, ctx.grid,
                                          step=ctx.fd_step,
                                          richardson=ctx.fd_richardson,
                                          deriv_orders=(1,))
            out = out + term / factorial(len(tup))
        if s2 > 0.0 and j >= 2:
            if j == 2:
                out = out + s2 * self.sources.rho_N
            else:
                for tup in compositions(j - 2, self.r - 1):
                    dirs = [self.Y[i - 1] for i in tup]
                    t_ii = multilinear_fd_batched(ctx.R_II_withdx, dirs, ctx.grid,
                                                  step=ctx.fd_step,
                                                  richardson=ctx.fd_richardson,
                                                  deriv_orders=(1,))
                    t_iii = multilinear_fd_batched(ctx.Upsilon_withdx, dirs, ctx.grid,
                                                   step=ctx.fd_step,
                                                   richardson=ctx.fd_richardson,
                                                   deriv_orders=(1, 2))
                    out = out + s2 * (t_ii + t_iii) / factorial(len(tup))
        return out

    def assemble_B_applied(self, j: int, dW: np.ndarray) -> np.ndarray | float:
        """Noise forcing B_j applied to the shared increment."""
        ctx = self.ctx
        sig = ctx.sigma
        if sig == 0.0:
            return 0.0
        out: np.ndarray | float = 0.0
        if j == 1:
            out = sig * self.sources.rho_B_apply(dW)
        else:
            for tup in compositions(j - 1, self.r - 1):
                dirs = [self.Y[i - 1] for i in tup]
                term = multilinear_fd_batched(
                    lambda pts, d1: ctx.S_apply_withdx(pts, d1, dW), dirs, ctx.grid,
                    step=ctx.fd_step, richardson=ctx.fd_richardson,
                    deriv_orders=(1,))
                out = out + sig * term / factorial(len(tup))
        return out

    # -- stepping ------------------------------------------------------------------

    def pre_step(self, dW: np.ndarray) -> list[np.ndarray]:
        """Y_j + dt N_j + B_j(dW) for every j, from the step-start fields."""
        staged = []
        for j in range(1, self.max_order + 1):
            incr = self.Y[j - 1] + self.dt * self.assemble_N(j) \
                + self.assemble_B_applied(j, dW)
            staged.append(incr)
        staged.extend(self.Y[self.max_order:])
        return staged

    def commit(self, propagated: list[np.ndarray]) -> None:
        self.Y = propagated
        self.t += self.dt

    def step(self, dW: np.ndarray) -> None:
        staged = self.pre_step(dW)
        self.commit([self.linop.apply_propagator(self.dt, s) for s in staged])

    # -- observables -----------------------------------------------------------------

    def y_tay(self) -> np.ndarray:
        out = self.Y[0].copy()
        for y in self.Y[1:]:
            out += y
        return out

    def norms(self) -> list[np.ndarray]:
        """H^{k_j} norms per order, batched."""
        return [np.sqrt(sobolev_norm_sq_values(self.ctx.grid, y, k))
                for y, k in zip(self.Y, self.k_ladder)]

    def orthogonality_residuals(self) -> list[np.ndarray]:
        out = []
        for y in self.Y:
            pair = self.ctx.pair_psi(y)
            scale = np.maximum(np.sqrt(l2_norm_sq_values(self.ctx.grid, y)), 1e-300)
            out.append(np.abs(pair) / scale)
        return out

    # -- remainders ---------------------------------------------------------------------

    def remainders(self) -> tuple[np.ndarray, "RemainderOperator"]:
        """(N_rem field, B_rem operator) at the current state."""
        ctx = self.ctx
        ytay = self.y_tay()
        s2 = ctx.sigma**2
        full = ctx.R_I(ytay)
        if s2 > 0.0:
            full = full + s2 * (ctx.R_II(ytay) + ctx.Upsilon(ytay))
        n_rem = full
        for j in range(1, self.r):
            n_rem = n_rem - self.assemble_N(j)
        return n_rem, RemainderOperator(self, ytay)


class RemainderOperator:
    """B_rem = sigma S(Y_tay) - sum_j B_j, applied lazily to increments."""

    def __init__(self, engine: ExpansionEngine, ytay: np.ndarray):
        self.engine = engine
        self.ytay = ytay

    def apply(self, xi: np.ndarray) -> np.ndarray:
        eng = self.engine
        out = eng.ctx.sigma * eng.ctx.S_apply(self.ytay, xi)
        for j in range(1, eng.r):
            out = out - eng.assemble_B_applied(j, xi)
        return out


def integrate_y1(ctx: FreezeContext, linop: LinearOperator, samplers: list,
                 dt: float, n_steps: int, delta: float = 0.0,
                 v_star: np.ndarray | None = None,
                 norm_k: int = 0, snapshot_steps: tuple[int, ...] = ()) -> dict:
    """Light integrator for the leading-order field only.

    Tracks the running supremum of ||Y_1||_{H^norm_k}^2 and returns requested
    snapshots; used by the Monte-Carlo oracles for the stationary covariance
    and the moment-growth law.
    """
    from .noise import batched_increments
    batch = len(samplers)
    shape = (batch, ctx.model.n) + ctx.grid.spatial_shape
    y = np.zeros(shape)
    if delta != 0.0:
        if v_star is None:
            raise ValueError("delta != 0 requires v_star")
        y = y + delta * v_star
    sources = constant_sources(ctx)
    sup_sq = sobolev_norm_sq_values(ctx.grid, y, norm_k)
    snaps = {}
    for step in range(n_steps):
        dW = batched_increments(samplers, dt, step)
        y = linop.apply_propagator(dt, y + ctx.sigma * sources.rho_B_apply(dW))
        sup_sq = np.maximum(sup_sq, sobolev_norm_sq_values(ctx.grid, y, norm_k))
        if (step + 1) in snapshot_steps:
            snaps[step + 1] = y.copy()
    return {"y": y, "sup_norm_sq": sup_sq, "snapshots": snaps}


class ConvolutionDiagnostics:
    """Running semigroup convolution E and its exponentially weighted energy I.

    E(t) accumulates P_perp-projected sources through the propagator;
    I(t) = integral e^{-beta (t-s)} ||E(s)||_{H^{k+1}}^2 ds via the exact
    one-step recursion. Tracks suprema along the path.
    """

    def __init__(self, linop: LinearOperator, beta: float, k: int, dt: float,
                 batch_shape: tuple[int, ...], n: int):
        self.linop = linop
        self.beta = float(beta)
        self.k = int(k)
        self.dt = float(dt)
        self.E = np.zeros(batch_shape + (n,) + linop.grid.spatial_shape)
        self.I = np.zeros(batch_shape)
        self.sup_E = np.zeros(batch_shape)
        self.sup_I = np.zeros(batch_shape)

    def update(self, contribution: np.ndarray) -> None:
        """contribution: N dt (deterministic) or B(dW) (stochastic), pre-scaled."""
        g = self.linop.grid
        self.E = self.linop.apply_propagator(
            self.dt, self.E + self.linop.projector.complement(contribution))
        e_norm_sq = sobolev_norm_sq_values(g, self.E, self.k + 1)
        self.I = np.exp(-self.beta * self.dt) * self.I + self.dt * e_norm_sq
        self.sup_E = np.maximum(self.sup_E,
                                np.sqrt(sobolev_norm_sq_values(g, self.E, self.k)))
        self.sup_I = np.maximum(self.sup_I, self.I)
