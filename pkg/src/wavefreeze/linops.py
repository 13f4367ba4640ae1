"""Discretized linearization about the front, its semigroup and projections.

The longitudinal operator v -> v'' + c0 v' + Df(phi) v is a dense matrix on
the grid (spectral differentiation plus pointwise multiplication); transverse
Laplacian directions act as scalar Fourier multipliers, so every propagator
factorizes into (dense longitudinal) x (diagonal transverse).

Semigroup values at arbitrary times come from a cached eigendecomposition;
the fixed-step propagators used by the integrators come from expm and a
repeated-squaring chain, which is also the quadrature backend for the
infinite-horizon integrals in the limit formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .fields import Grid, deriv_values
from .models import ReactionModel
from .waves import WaveProfile, build_wave_operator, spectral_diff_matrix


@dataclass
class Projector:
    """Rank-one spectral projector onto the translation mode and complement."""

    grid: Grid
    psi: np.ndarray         # (n, N)
    phi_prime: np.ndarray   # (n, N)

    def pair(self, values: np.ndarray) -> np.ndarray:
        """<v, psi> over the cylinder divided by the torus measure (batched)."""
        psi_b = self.psi.reshape(self.psi.shape + (1,) * (self.grid.d - 1))
        axes = tuple(range(-self.grid.d - 1, 0))
        return np.sum(values * psi_b, axis=axes) * self.grid.cell_volume \
            / self.grid.torus_measure

    def apply(self, values: np.ndarray) -> np.ndarray:
        coef = np.asarray(self.pair(values))
        coef = coef.reshape(coef.shape + (1,) * (self.grid.d + 1))
        phi_b = self.phi_prime.reshape(self.phi_prime.shape + (1,) * (self.grid.d - 1))
        return coef * phi_b

    def complement(self, values: np.ndarray) -> np.ndarray:
        return values - self.apply(values)


class RangeError(ValueError):
    pass


class LinearOperator:
    """The operator L_tw + Delta_perp with cached spectral machinery."""

    def __init__(self, model: ReactionModel, grid: Grid, prof: WaveProfile,
                 A: np.ndarray | None = None):
        self.model = model
        self.grid = grid
        self.profile = prof
        self.n = model.n
        self.A = build_wave_operator(model, grid, prof) if A is None else A
        self.projector = Projector(grid, prof.psi, prof.phi_derivs[0])
        self.lambda_perp = grid.xi_perp**2 if grid.d == 2 else None
        self._eig = None
        self._propagators: dict[float, np.ndarray] = {}
        self._chains: dict[float, list[np.ndarray]] = {}

    # -- eigendecomposition ------------------------------------------------

    def eig(self):
        if self._eig is None:
            lam, R = scipy.linalg.eig(self.A)
            Linv = np.linalg.inv(R)
            cond = float(np.linalg.cond(R))
            if cond > 1e8:
                raise RuntimeError(f"eigenbasis condition number {cond:.2e} > 1e8")
            self._eig = (lam, R, Linv, cond)
        return self._eig

    @property
    def eig_condition(self) -> float:
        return self.eig()[3]

    def diagnostics(self) -> dict:
        lam, R, Linv, cond = self.eig()
        recon = np.linalg.norm(R @ (lam[:, None] * Linv) - self.A) / np.linalg.norm(self.A)
        neutral = self.apply_matrix(self.profile.phi_derivs[0][None])[0]
        return {
            "eig_condition": cond,
            "reconstruction_rel_error": float(recon),
            "neutral_residual": float(np.sqrt(np.sum(neutral**2) * self.grid.dx)),
        }

    # -- basic actions -------------------------------------------------------

    def _apply_long(self, M: np.ndarray, values: np.ndarray) -> np.ndarray:
        """Apply an (nN x nN) matrix along the (components, x) axes."""
        g = self.grid
        head = values.shape[: -1 - g.d]
        if g.d == 1:
            flat = values.reshape(head + (self.n * g.N,))
            out = flat @ M.T
            return out.reshape(values.shape)
        vp = np.moveaxis(values, -1, -3)  # (..., Np, n, N)
        flat = vp.reshape(head + (g.N_perp, self.n * g.N))
        out = flat @ M.T
        return np.moveaxis(out.reshape(vp.shape), -3, -1)

    def apply_matrix(self, values: np.ndarray) -> np.ndarray:
        """(L_tw + Delta_perp) v."""
        out = self._apply_long(self.A, values)
        if self.grid.d == 2:
            out = out + deriv_values(self.grid, values, 1, 2)
        return out

    def apply_adjoint_matrix(self, values: np.ndarray) -> np.ndarray:
        out = self._apply_long(self.A.T, values)
        if self.grid.d == 2:
            out = out + deriv_values(self.grid, values, 1, 2)
        return out

    # -- semigroup -----------------------------------------------------------

    def apply_semigroup(self, t: float, values: np.ndarray) -> np.ndarray:
        """exp(t (L_tw + Delta_perp)) v via the eigendecomposition."""
        if t < 0:
            raise ValueError("semigroup time must be >= 0")
        if t == 0:
            return np.array(values, copy=True)
        lam, R, Linv, _ = self.eig()
        g = self.grid

        def long_action(vals):  # vals (..., nN) real
            a = vals @ Linv.T
            return (a * np.exp(lam * t)) @ R.T

        head = values.shape[: -1 - g.d]
        if g.d == 1:
            flat = values.reshape(head + (self.n * g.N,))
            return long_action(flat).real.reshape(values.shape)
        vhat = np.fft.fft(values, axis=-1)
        vp = np.moveaxis(vhat, -1, -3).reshape(head + (g.N_perp, self.n * g.N))
        out = long_action(vp)
        out = out * np.exp(-self.lambda_perp * t)[..., :, None]
        out = np.moveaxis(out.reshape(head + (g.N_perp, self.n, g.N)), -3, -1)
        return np.fft.ifft(out, axis=-1).real

    def propagator(self, dt: float) -> np.ndarray:
        """Dense longitudinal exp(A dt), cached per dt."""
        key = float(dt)
        if key not in self._propagators:
            self._propagators[key] = scipy.linalg.expm(self.A * dt)
        return self._propagators[key]

    def apply_propagator(self, dt: float, values: np.ndarray,
                         nu: float | np.ndarray = 1.0) -> np.ndarray:
        """One fixed step of the linear flow; nu scales the transverse diffusion."""
        M = self.propagator(dt)
        if self.grid.d == 1:
            return self._apply_long(M, values)
        vhat = np.fft.fft(values, axis=-1)
        out = self._apply_long(M, vhat)
        damp = np.exp(-np.multiply.outer(np.asarray(nu), self.lambda_perp * dt))
        out = out * damp[..., None, None, :]
        return np.fft.ifft(out, axis=-1).real

    # -- squaring chain (quadrature backend) ---------------------------------

    def squaring_chain(self, t0: float, levels: int) -> list[np.ndarray]:
        """[exp(A t0), exp(A 2 t0), ..., exp(A 2^(levels-1) t0)]."""
        key = float(t0)
        chain = self._chains.setdefault(key, [self.propagator(t0)])
        while len(chain) < levels:
            last = chain[-1]
            chain.append(last @ last)
        return chain[:levels]

    # -- decay certificate ----------------------------------------------------

    def hk_weight(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Dense longitudinal H^k weight W and its inverse (d=1)."""
        g1 = self.profile.grid1d
        mult = (1.0 + g1.xi**2) ** (k / 2.0)
        eye = np.eye(g1.N)
        F = np.fft.fft(eye, axis=0)
        W1 = np.real(np.fft.ifft(mult[:, None] * F, axis=0))
        Wi1 = np.real(np.fft.ifft(F / mult[:, None], axis=0))
        if self.n > 1:
            W1 = np.kron(np.eye(self.n), W1)
            Wi1 = np.kron(np.eye(self.n), Wi1)
        return W1, Wi1

    def decay_certificate(self, k: int = 1, ts: np.ndarray | None = None,
                          beta_floor_check: bool = True) -> tuple[float, float]:
        """Fit ||S(t) P_perp||_{H^k -> H^k} <= M e^{-beta t} on a dyadic grid.

        Returns (M_hat, beta_hat) with M_hat inflated so the bound holds at
        every sampled t by construction.
        """
        if self.grid.d != 1:
            raise NotImplementedError("decay certificate implemented for d=1")
        if ts is None:
            ts = np.array([0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0])
        t0 = float(ts[0])
        if not np.allclose(ts, t0 * 2 ** np.arange(len(ts))):
            raise ValueError("certificate times must be dyadic t0 * 2^j")
        chain = self.squaring_chain(t0, len(ts))
        W, Wi = self.hk_weight(k)
        P_perp_mat = np.eye(self.n * self.grid.N) \
            - np.outer(self.profile.phi_derivs[0].reshape(-1),
                       self.profile.psi.reshape(-1)) * self.grid.dx
        norms = []
        for M in chain:
            T = W @ (M @ P_perp_mat) @ Wi
            norms.append(float(scipy.linalg.svdvals(T)[0]))
        norms = np.array(norms)
        sel = ts >= 1.0
        slope, intercept = np.polyfit(ts[sel], np.log(norms[sel]), 1)
        beta_hat = float(-slope)
        if beta_hat <= 0:
            raise RuntimeError("decay certificate fit failed (nonpositive rate)")
        M_hat = 1.02 * float(np.max(norms * np.exp(beta_hat * ts)))
        if beta_floor_check and np.isfinite(self.profile.beta_tw):
            floor = 0.9 * min(self.profile.beta_tw, 0.5 * self.grid.lambda1)
            if beta_hat < floor:
                raise RuntimeError(
                    f"certified decay rate {beta_hat:.4f} below 0.9*min(beta_tw, lambda1/2)"
                    f" = {floor:.4f}; discretization too coarse")
        return M_hat, beta_hat

    # -- evolution family ------------------------------------------------------

    def apply_evolution_family(self, nu_path, s: float, t: float,
                               values: np.ndarray, max_step: float = 0.05) -> np.ndarray:
        """E(t, s) v for dv = [L_tw + nu(tau) Delta_perp] v, midpoint in nu.

        The longitudinal factor is exact per substep; only the transverse
        coefficient is frozen at the midpoint.
        """
        if t < s:
            raise ValueError("need t >= s")
        if t == s:
            return np.array(values, copy=True)
        nsub = max(1, int(np.ceil((t - s) / max_step)))
        h = (t - s) / nsub
        out = values
        for j in range(nsub):
            tau_mid = s + (j + 0.5) * h
            nu = float(np.asarray(nu_path(tau_mid)))
            if not 0.5 <= nu <= 2.0:
                raise ValueError(f"nu({tau_mid}) = {nu} outside [1/2, 2]")
            out = self.apply_propagator(h, out, nu=nu)
        return out

    # -- constrained solve -------------------------------------------------------

    def solve_on_range(self, rhs: np.ndarray, method: str = "solve",
                       ortho_tol: float = 1e-6) -> np.ndarray | tuple:
        """Solve (L_tw + Delta_perp) w = -rhs with <w, psi> = 0.

        rhs must be orthogonal to psi. method: 'solve' (bordered linear
        system), 'quadrature' (doubling integral of S(s) rhs), or 'both'
        (returns (w_solve, w_quad)).
        """
        if self.grid.d != 1:
            raise NotImplementedError("solve_on_range implemented for d=1")
        pair = float(self.projector.pair(rhs))
        scale = float(np.sqrt(np.sum(rhs**2) * self.grid.dx))
        if abs(pair) > ortho_tol * max(1.0, scale):
            raise RangeError(f"rhs not orthogonal to psi: <rhs, psi> = {pair:.3e}")
        if method in ("solve", "both"):
            w_solve = self._solve_bordered(rhs)
        if method in ("quadrature", "both"):
            w_quad = self._solve_by_quadrature(rhs)
        if method == "solve":
            return w_solve
        if method == "quadrature":
            return w_quad
        return w_solve, w_quad

    def _solve_bordered(self, rhs: np.ndarray) -> np.ndarray:
        nN = self.n * self.grid.N
        M = np.zeros((nN + 1, nN + 1))
        M[:nN, :nN] = self.A
        M[:nN, -1] = self.profile.phi_derivs[0].reshape(-1)
        M[-1, :nN] = self.profile.psi.reshape(-1) * self.grid.dx
        b = np.concatenate([-rhs.reshape(-1), [0.0]])
        sol = scipy.linalg.solve(M, b)
        return sol[:nN].reshape(rhs.shape)

    def _solve_by_quadrature(self, rhs: np.ndarray, t0: float = 1e-3,
                             levels: int = 18) -> np.ndarray:
        """integral_0^inf S(s) P_perp rhs ds by Simpson seed + doubling."""
        r = self.projector.complement(rhs).reshape(-1)
        chain_half = self.propagator(t0 / 2.0)
        S = self.propagator(t0)
        w = (t0 / 6.0) * (r + 4.0 * (chain_half @ r) + S @ r)
        for _ in range(levels):
            w = w + S @ w
            S = S @ S
        return self.projector.complement(w.reshape(rhs.shape))
