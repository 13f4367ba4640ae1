"""Deterministic evaluation of the limiting expectations.

The leading-order field is an Ornstein-Uhlenbeck process in the stable
subspace; its stationary covariance is computed two independent ways (an
authored doubling quadrature of the semigroup integral seeded exactly via a
block matrix exponential, and a library Lyapunov solve) and cross-checked.
From the covariance follow the mean second-order field, the quadratic
wave-speed coefficient, and the limiting polynomial coefficients of smooth
functionals. d = 1 only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .expansion import ConstantSources
from .freeze import FreezeContext, multilinear_fd
from .linops import LinearOperator
from .noise import NoiseModel, _basis_mode_field


@dataclass
class CovarianceOperator:
    """Pointwise stationary covariance of the leading-order field per sigma^2."""

    grid: object
    n: int
    matrix: np.ndarray            # (nN, nN), symmetric PSD
    lyapunov_residual: float
    method_rel_gap: float         # |trace_quad - trace_lyap| / trace
    _eig: tuple | None = field(default=None, repr=False)

    @property
    def trace_L2(self) -> float:
        return float(np.trace(self.matrix)) * self.grid.dx

    def diagonal(self) -> np.ndarray:
        """c(x): (n, n, N) pointwise covariance blocks."""
        N = self.grid.N
        out = np.empty((self.n, self.n, N))
        for i in range(self.n):
            for j in range(self.n):
                out[i, j] = np.diag(self.matrix[i * N:(i + 1) * N,
                                                j * N:(j + 1) * N])
        return out

    def psi_pairing(self, psi: np.ndarray) -> float:
        """sup-norm of <C ., psi> as a field; zero when range is psi-orthogonal."""
        vec = self.matrix @ psi.reshape(-1) * self.grid.dx
        return float(np.max(np.abs(vec)))

    def eig(self, rel_tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
        """Leading eigenpairs (descending), truncated at rel_tol * max."""
        if self._eig is None:
            w, U = scipy.linalg.eigh(self.matrix)
            w = w[::-1]
            U = U[:, ::-1]
            keep = w > rel_tol * max(w[0], 1e-300)
            self._eig = (w[keep], U[:, keep])
        return self._eig

    def min_eigenvalue(self) -> float:
        return float(scipy.linalg.eigvalsh(self.matrix)[0])


def _forcing_matrix(linop: LinearOperator, sources: ConstantSources,
                    noise: NoiseModel) -> np.ndarray:
    """F = sum_k Re[(P_perp rho_B sqrt(Q) e_k)(same)^H] over the mode basis."""
    grid = linop.grid
    n = linop.n
    cols = []
    sq_flat = noise.sqrt_q_hat.reshape(-1, noise.m, noise.m)
    for flat in noise.live_modes:
        mode = _basis_mode_field(grid, int(flat))
        for c in range(noise.m):
            xi = sq_flat[flat][:, c].reshape((noise.m,) + (1,) * grid.d) * mode
            f = sources.rho_B_apply(xi)
            f = linop.projector.complement(f)
            cols.append(f.reshape(-1))
    M = np.array(cols).T  # (nN, K) complex
    # the grid Fourier modes are a complete quadrature-orthonormal basis, so
    # the mode sum is the plain outer-product accumulation
    return (M @ M.conj().T).real


def stationary_covariance(linop: LinearOperator, sources: ConstantSources,
                          noise: NoiseModel, seed_h: float = 0.01,
                          levels: int = 15, deflation: float = 1.0,
                          rel_tol: float = 1e-6) -> CovarianceOperator:
    """Stationary covariance by doubling quadrature, checked against Lyapunov.

    The quadrature path integrates S(s) F S(s)^T exactly on [0, seed_h] via a
    block matrix exponential and doubles the horizon `levels` times. The
    library path solves the continuous Lyapunov equation with the neutral
    eigenvalue deflated. Raises if the two disagree beyond rel_tol on the
    trace or if the Lyapunov residual is large.
    """
    if linop.grid.d != 1:
        raise NotImplementedError("stationary covariance implemented for d=1")
    A = linop.A
    nN = A.shape[0]
    F = _forcing_matrix(linop, sources, noise)
    # quadrature: exact seed by Van Loan block exponential
    block = np.zeros((2 * nN, 2 * nN))
    block[:nN, :nN] = A
    block[:nN, nN:] = F
    block[nN:, nN:] = -A.T
    E = scipy.linalg.expm(block * seed_h)
    S = E[:nN, :nN]           # exp(A h)
    C = E[:nN, nN:] @ S.T     # integral_0^h exp(As) F exp(A^T s) ds
    for _ in range(levels):
        C = C + S @ C @ S.T
        S = S @ S
    C_quad = 0.5 * (C + C.T)
    # Lyapunov with the neutral mode deflated out of A
    phi_p = linop.profile.phi_derivs[0].reshape(-1)
    psi = linop.profile.psi.reshape(-1)
    A_defl = A - deflation * np.outer(phi_p, psi) * linop.grid.dx
    C_lyap = scipy.linalg.solve_continuous_lyapunov(A_defl, -F)
    C_lyap = 0.5 * (C_lyap + C_lyap.T)
    resid = np.linalg.norm(A_defl @ C_lyap + C_lyap @ A_defl.T + F) \
        / max(np.linalg.norm(F), 1e-300)
    if resid > 1e-8:
        raise RuntimeError(f"Lyapunov residual {resid:.2e} above tolerance")
    tr_q = np.trace(C_quad)
    tr_l = np.trace(C_lyap)
    gap = abs(tr_q - tr_l) / max(abs(tr_l), 1e-300)
    if gap > rel_tol:
        raise RuntimeError(
            f"quadrature/Lyapunov covariance traces disagree: {gap:.2e}")
    return CovarianceOperator(grid=linop.grid, n=linop.n, matrix=C_quad,
                              lyapunov_residual=float(resid),
                              method_rel_gap=float(gap))


# ---------------------------------------------------------------------------
# second-derivative contraction against the covariance
# ---------------------------------------------------------------------------

def d2_drift_contract(ctx: FreezeContext, cov: CovarianceOperator,
                      fd_check_modes: int = 0) -> np.ndarray:
    """D^2 R_I(0) contracted with the covariance: pointwise D^2 f(phi)[c(x)]
    minus its neutral projection.

    With fd_check_modes > 0, also evaluates the contraction through nested
    finite differences on the leading covariance eigenmodes and records the
    relative deviation in ctx (returned via attribute on the result array).
    """
    c_diag = cov.diagonal()  # (n, n, N)
    d2f = ctx.model.deriv("f", 2, ctx.phi)  # (n, n, n, N)
    m_f = np.einsum("nijx,ijx->nx", d2f, c_diag)
    chi_l0 = float(ctx.cutoffs_v(np.zeros_like(ctx.phi)).chi_l)
    contracted = m_f - chi_l0 * ctx.pair_psi(m_f) * ctx.phi_d1
    if fd_check_modes > 0:
        w, U = cov.eig()
        k = min(fd_check_modes, w.size)
        acc = np.zeros_like(contracted)
        for p in range(k):
            u = U[:, p].reshape(ctx.model.n, ctx.grid.N)
            term = multilinear_fd(lambda pts: ctx.R_I(pts), [u, u], ctx.grid,
                                  step=ctx.fd_step, richardson=True)
            acc += w[p] * term
        covered = float(np.sum(w[:k]) / np.sum(w))
        rel = float(np.max(np.abs(acc - contracted))
                    / max(np.max(np.abs(contracted)), 1e-300))
        d2_drift_contract.last_fd_check = {"rel_dev": rel, "trace_covered": covered}
    return contracted


def mean_limit_y2(ctx: FreezeContext, linop: LinearOperator,
                  sources: ConstantSources, cov: CovarianceOperator,
                  method: str = "solve") -> np.ndarray:
    """lim_t E Y_2(t) / sigma^2 = integral of S(s)[rho_N + D^2 R_I(0) C / 2]."""
    m = 0.5 * d2_drift_contract(ctx, cov) + sources.rho_N
    m = linop.projector.complement(m)
    return linop.solve_on_range(m, method=method)


def wave_speed_c2(ctx: FreezeContext, cov: CovarianceOperator) -> float:
    """Quadratic coefficient of the expected observed speed in sigma.

    c2 = -chi_l(phi) [ <psi, D^2 f(phi)[c]> / 2 - <K_C(phi), psi'>
                      + nu_tilde(phi) <phi, psi''> ].
    """
    grid = ctx.grid
    zero = np.zeros_like(ctx.phi)
    cut0 = ctx.cutoffs_v(zero)
    c_diag = cov.diagonal()
    d2f = ctx.model.deriv("f", 2, ctx.phi)
    m_f = np.einsum("nijx,ijx->nx", d2f, c_diag)
    term_f = 0.5 * float(ctx.pair_psi(m_f))
    _, kc0 = ctx.K_pair_v(zero, cut0)
    term_k = float(np.sum(kc0 * ctx.psi_d1) * grid.cell_volume)
    nut0 = float(ctx.nu_tilde_v(zero))
    term_nu = nut0 * float(np.sum(ctx.phi * ctx.psi_d2) * grid.cell_volume)
    return -float(cut0.chi_l) * (term_f - term_k + term_nu)


@dataclass
class LimitCoefficients:
    """Coefficients of the limiting sigma-polynomial of a functional."""

    values: list          # h_inf[0..r-1] in the functional's codomain
    r: int

    def polynomial(self, sigma: float):
        out = self.values[0]
        for j in range(1, self.r):
            out = out + sigma**j * self.values[j]
        return out


def functional_h_infinity(ctx: FreezeContext, linop: LinearOperator,
                          phi0, dphi, d2phi,
                          sources: ConstantSources, cov: CovarianceOperator,
                          rel_tol: float = 1e-10) -> LimitCoefficients:
    """Limiting polynomial coefficients for a smooth functional (r = 3).

    phi0: value at 0; dphi(field) -> codomain; d2phi(field, field) -> codomain.
    h0 = phi(0); h1 = 0 (the mean of the leading field decays); h2 combines
    the mean second-order field with the covariance trace of d2phi.
    """
    if ctx.model.r != 3:
        raise ValueError("functional limit coefficients implemented for r = 3")
    y2 = mean_limit_y2(ctx, linop, sources, cov)
    h2 = dphi(y2)
    w, U = cov.eig(rel_tol)
    for p in range(w.size):
        u = U[:, p].reshape(ctx.model.n, ctx.grid.N)
        h2 = h2 + 0.5 * w[p] * d2phi(u, u)
    h1 = dphi(np.zeros_like(y2))  # structurally zero; keeps codomain type
    return LimitCoefficients(values=[phi0, h1, h2], r=3)


def convergence_rate_fit(times: np.ndarray, values: np.ndarray) -> dict:
    """Fit values(t) = a + b exp(-c t); returns the limit a and rate c."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size < 6:
        raise ValueError("need at least 6 time points")
    a0 = values[-1]
    b0 = values[0] - values[-1]
    span = times[-1] - times[0]
    c0 = 3.0 / max(span, 1e-300)
    try:
        popt, _ = scipy.optimize.curve_fit(
            lambda t, a, b, c: a + b * np.exp(-c * t),
            times, values, p0=[a0, b0 if b0 != 0 else 1e-12, c0], maxfev=20000)
    except RuntimeError as exc:
        raise RuntimeError("exponential convergence fit failed") from exc
    a, b, c = popt
    resid = values - (a + b * np.exp(-c * times))
    return {"limit": float(a), "rate": float(c), "amplitude": float(b),
            "rms_residual": float(np.sqrt(np.mean(resid**2)))}
