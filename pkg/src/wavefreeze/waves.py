"""Travelling-front computation: profile, speed, adjoint eigenfunction, gap.

The front is represented as an analytic ramp between the pinning states plus
a periodic, exponentially decaying remainder solved for on the grid. All
derivatives of the remainder are spectral, so the discrete front satisfies
the discretized wave equation essentially to round-off and the stored
derivative fields are consistent with the spectral calculus used elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .fields import Grid, Field, deriv_values, translate_values
from .models import ReactionModel


class WaveSolveError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# analytic ramp (componentwise logistic) and its derivatives
# ---------------------------------------------------------------------------

RAMP_WIDTH = 2.0


def _logistic_stack(x: np.ndarray, w: float) -> list[np.ndarray]:
    """s(x/w) and its first four derivatives."""
    s = 1.0 / (1.0 + np.exp(-x / w))
    p = s * (1.0 - s)
    s1 = p / w
    s2 = p * (1.0 - 2.0 * s) / w**2
    s3 = p * (1.0 - 6.0 * s + 6.0 * s**2) / w**3
    s4 = p * (1.0 - 2.0 * s) * (1.0 - 12.0 * s + 12.0 * s**2) / w**4
    return [s, s1, s2, s3, s4]


def ramp_stack(x: np.ndarray, u_minus: np.ndarray, u_plus: np.ndarray,
               width: float = RAMP_WIDTH) -> list[np.ndarray]:
    """rho(x) = u_- + (u_+ - u_-) s(x) and derivatives; shapes (n, len(x))."""
    stack = _logistic_stack(x, width)
    jump = (u_plus - u_minus)[:, None]
    out = [u_minus[:, None] + jump * stack[0][None, :]]
    out += [jump * s[None, :] for s in stack[1:]]
    return out


def spectral_diff_matrix(grid: Grid, order: int) -> np.ndarray:
    """Dense longitudinal differentiation matrix consistent with deriv_values."""
    eye = np.eye(grid.N)
    return deriv_values(Grid(1, grid.L, grid.N), eye[None], 0, order)[0].T.copy()


@dataclass
class WaveProfile:
    """Front data on the grid; 1D arrays broadcast across transverse axes."""

    grid: Grid
    c0: float
    phi: np.ndarray                   # (n, N)
    phi_derivs: list[np.ndarray]      # [phi', .., phi''''] each (n, N)
    w: np.ndarray                     # periodic remainder (n, N)
    u_minus: np.ndarray
    u_plus: np.ndarray
    ramp_width: float
    residual_inf: float
    newton_iters: int
    psi: np.ndarray | None = None           # adjoint eigenfunction (n, N)
    psi_derivs: list[np.ndarray] = field(default_factory=list)
    adjoint_residual: float = np.nan
    beta_tw: float = np.nan
    lambda0_residual: float = np.nan
    nu_minus: float = np.nan
    nu_plus: float = np.nan
    spatial_rates_minus: np.ndarray | None = None
    spatial_rates_plus: np.ndarray | None = None

    def bc(self, arr: np.ndarray) -> np.ndarray:
        """Broadcast a 1D (n, N) profile array over transverse axes."""
        if self.grid.d == 1:
            return arr
        return arr.reshape(arr.shape + (1,) * (self.grid.d - 1))

    def translated(self, gamma: float) -> dict[str, np.ndarray]:
        """Profile, derivatives and adjoint data shifted right by gamma."""
        x = self.grid.x
        ramp = ramp_stack(x - gamma, self.u_minus, self.u_plus, self.ramp_width)
        out = {}
        wsh = translate_values(self.grid1d, self.w, gamma)
        out["phi"] = ramp[0] + wsh
        for j in (1, 2):
            out[f"phi_d{j}"] = ramp[j] + deriv_values(self.grid1d, wsh, 0, j)
        out["psi"] = translate_values(self.grid1d, self.psi, gamma)
        out["psi_d1"] = translate_values(self.grid1d, self.psi_derivs[0], gamma)
        out["psi_d2"] = translate_values(self.grid1d, self.psi_derivs[1], gamma)
        return out

    @property
    def grid1d(self) -> Grid:
        return self.grid if self.grid.d == 1 else Grid(1, self.grid.L, self.grid.N)

    def phi_field(self) -> Field:
        return Field(self.grid, np.broadcast_to(
            self.bc(self.phi), (self.phi.shape[0],) + self.grid.spatial_shape).copy())


def solve_profile(model: ReactionModel, grid: Grid, init: Field | None = None,
                  phase_anchor: float = 0.0, tol: float = 1e-11,
                  max_iters: int = 40, c_init: float = 0.0) -> WaveProfile:
    """Newton iteration for the front (phi, c) with a midpoint phase condition.

    The phase condition pins component 0 at x = phase_anchor to the midpoint
    of the corresponding pinning values, removing translational degeneracy.
    """
    n, N = model.n, grid.N
    g1 = grid if grid.d == 1 else Grid(1, grid.L, grid.N)
    x = g1.x
    D1 = spectral_diff_matrix(g1, 1)
    D2 = spectral_diff_matrix(g1, 2)
    ramp = ramp_stack(x, model.u_minus, model.u_plus)

    anchor_idx = int(round((phase_anchor + grid.L) / grid.dx)) % N
    target = 0.5 * (model.u_minus[0] + model.u_plus[0])

    if init is not None:
        w = init.values.reshape(n, N) - ramp[0]
    else:
        w = np.zeros((n, N))
    c = float(c_init)

    def residual(w, c):
        phi = ramp[0] + w
        dphi = ramp[1] + w @ D1.T
        d2phi = ramp[2] + w @ D2.T
        return d2phi + c * dphi + model.f(phi), phi, dphi

    iters = 0
    for iters in range(1, max_iters + 1):
        res, phi, dphi = residual(w, c)
        phase_res = phi[0, anchor_idx] - target
        if max(np.max(np.abs(res)), abs(phase_res)) < tol:
            break
        # assemble the bordered Newton system in (w, c)
        J = np.zeros((n * N + 1, n * N + 1))
        df = model.deriv("f", 1, phi)  # (n, n, N)
        for i in range(n):
            for j in range(n):
                blk = np.diag(df[i, j])
                if i == j:
                    blk = blk + D2 + c * D1
                J[i * N:(i + 1) * N, j * N:(j + 1) * N] = blk
        J[: n * N, -1] = dphi.reshape(-1)
        J[-1, anchor_idx] = 1.0
        rhs = np.concatenate([-res.reshape(-1), [-phase_res]])
        try:
            delta = scipy.linalg.solve(J, rhs)
        except scipy.linalg.LinAlgError as exc:
            raise WaveSolveError(
                "degenerate Newton Jacobian (failed hyperbolicity?)") from exc
        w = w + delta[: n * N].reshape(n, N)
        c = c + delta[-1]
    else:
        raise WaveSolveError(f"front Newton did not converge in {max_iters} iterations")

    res, phi, _ = residual(w, c)
    derivs = [ramp[j] + deriv_values(g1, w, 0, j) for j in range(1, 5)]
    prof = WaveProfile(
        grid=grid, c0=c, phi=phi, phi_derivs=derivs, w=w,
        u_minus=model.u_minus.copy(), u_plus=model.u_plus.copy(),
        ramp_width=RAMP_WIDTH, residual_inf=float(np.max(np.abs(res))),
        newton_iters=iters,
    )
    _fit_decay_rates(model, prof)
    return prof


def _fit_decay_rates(model: ReactionModel, prof: WaveProfile) -> None:
    """Affine fit of log|phi - u_pm| in the tails; also store linearized rates."""
    x = prof.grid1d.x
    for side in ("minus", "plus"):
        u_ref = model.u_minus if side == "minus" else model.u_plus
        window = (x < -0.3 * prof.grid.L) & (x > -0.75 * prof.grid.L) if side == "minus" \
            else (x > 0.3 * prof.grid.L) & (x < 0.75 * prof.grid.L)
        dev = np.linalg.norm(prof.phi - u_ref[:, None], axis=0)
        mask = window & (dev > 1e-13)
        if mask.sum() >= 8:
            slope = np.polyfit(np.abs(x[mask]), np.log(dev[mask]), 1)[0]
            setattr(prof, f"nu_{side}", float(-slope))
        rates = _spatial_eigenvalues(model, u_ref, prof.c0)
        setattr(prof, f"spatial_rates_{side}", rates)


def _spatial_eigenvalues(model: ReactionModel, u: np.ndarray, c0: float) -> np.ndarray:
    """Roots mu of det(mu^2 I + c0 mu I + Df(u)) via companion linearization."""
    n = model.n
    df = model.deriv("f", 1, u[:, None])[..., 0]
    comp = np.zeros((2 * n, 2 * n))
    comp[:n, n:] = np.eye(n)
    comp[n:, :n] = -df
    comp[n:, n:] = -c0 * np.eye(n)
    return np.linalg.eigvals(comp)


# ---------------------------------------------------------------------------
# adjoint eigenfunction and spectral gap
# ---------------------------------------------------------------------------

def build_wave_operator(model: ReactionModel, grid: Grid, prof: WaveProfile) -> np.ndarray:
    """Dense matrix of v -> v'' + c0 v' + Df(phi) v on the longitudinal grid."""
    n, N = model.n, grid.N
    g1 = prof.grid1d
    D1 = spectral_diff_matrix(g1, 1)
    D2 = spectral_diff_matrix(g1, 2)
    df = model.deriv("f", 1, prof.phi)
    A = np.zeros((n * N, n * N))
    for i in range(n):
        for j in range(n):
            blk = np.diag(df[i, j])
            if i == j:
                blk = blk + D2 + prof.c0 * D1
            A[i * N:(i + 1) * N, j * N:(j + 1) * N] = blk
    return A


def _inverse_iteration(M: np.ndarray, v0: np.ndarray, iters: int = 4) -> np.ndarray:
    lu = scipy.linalg.lu_factor(M)
    v = v0 / np.linalg.norm(v0)
    for _ in range(iters):
        v = scipy.linalg.lu_solve(lu, v)
        v = v / np.linalg.norm(v)
    return v


def compute_adjoint(model: ReactionModel, grid: Grid, prof: WaveProfile,
                    A: np.ndarray | None = None) -> np.ndarray:
    """Kernel element of the adjoint linearization, normalized against phi'.

    Normalization: <psi, phi'> = 1 in the longitudinal L^2 pairing (the
    pairing over the full cylinder then equals the torus measure, which the
    neutral projector divides out again).
    """
    if A is None:
        A = build_wave_operator(model, grid, prof)
    n, N = model.n, grid.N
    guess = (np.exp(prof.c0 * prof.grid1d.x)[None, :] * prof.phi_derivs[0]).reshape(-1)
    if not np.all(np.isfinite(guess)):
        guess = prof.phi_derivs[0].reshape(-1)
    psi = _inverse_iteration(A.T, guess)
    pairing = float(psi @ prof.phi_derivs[0].reshape(-1)) * grid.dx
    if abs(pairing) < 1e-12:
        raise WaveSolveError("adjoint eigenvector orthogonal to phi' (not isolated?)")
    psi = (psi / pairing).reshape(n, N)
    prof.psi = psi
    g1 = prof.grid1d
    prof.psi_derivs = [deriv_values(g1, psi, 0, 1), deriv_values(g1, psi, 0, 2)]
    prof.adjoint_residual = float(
        np.sqrt(np.sum((A.T @ psi.reshape(-1)) ** 2) * grid.dx))
    return psi


def spectral_gap(model: ReactionModel, grid: Grid, prof: WaveProfile,
                 A: np.ndarray | None = None, zero_tol: float = 1e-6) -> tuple[float, float]:
    """Dense eigensolve of the longitudinal linearization.

    Returns (|closest-to-zero eigenvalue|, beta_tw) with
    beta_tw = -max{Re lambda : |lambda| > zero_tol} / 2. Raises if the
    neutral eigenvalue is not isolated or if an unstable eigenvalue exists.
    """
    if A is None:
        A = build_wave_operator(model, grid, prof)
    lam = scipy.linalg.eigvals(A)
    near_zero = np.abs(lam) < zero_tol
    if near_zero.sum() != 1:
        raise WaveSolveError(
            f"{near_zero.sum()} eigenvalues within {zero_tol} of 0 (need exactly 1)")
    rest = lam[~near_zero]
    max_re = float(np.max(rest.real))
    if max_re > 0.0:
        raise WaveSolveError(f"spectral stability violated: Re lambda = {max_re:.3e} > 0")
    prof.lambda0_residual = float(np.min(np.abs(lam)))
    prof.beta_tw = -0.5 * max_re
    return prof.lambda0_residual, prof.beta_tw
