"""Nonlinearities of the frozen-frame evolution.

Everything the coupled (perturbation, phase) system needs: smooth cutoffs,
the phase-noise functional b and its quadratic form nu_tilde, the Ito
cross-variation fields K_C, the phase drift a_sigma (raw and reduced forms),
the drift nonlinearities R_I, R_II, Upsilon and the noise operator S, plus
finite-difference derivative tensors of all of these at the origin.

All evaluators act on perturbation arrays v of shape (*batch, n, *spatial)
in the frozen frame (gamma = 0); translated (u, gamma) entry points exist
for the commutation checks. Scalar outputs are batch-shaped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import Grid, deriv_values, inner_values, l2_norm_sq_values, \
    sobolev_norm_sq_values
from .models import ReactionModel
from .noise import NoiseModel, apply_Q, hs_norm_row_functional, _basis_mode_field
from .waves import WaveProfile


# ---------------------------------------------------------------------------
# smooth cutoff shapes
# ---------------------------------------------------------------------------

def _smoothstep(t: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for t<=0, 1 for t>=1."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(t > 0.0, np.exp(-1.0 / np.maximum(t, 1e-300)), 0.0)
        b = np.where(t < 1.0, np.exp(-1.0 / np.maximum(1.0 - t, 1e-300)), 0.0)
    return a / (a + b)


def chi_high_shape(theta: np.ndarray, lo: float = 2.0, hi: float = 3.0) -> np.ndarray:
    """Non-increasing: 1 below lo, 0 above hi."""
    return 1.0 - _smoothstep((np.asarray(theta) - lo) / (hi - lo))


def chi_low_shape(theta: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Non-decreasing: equals lo below lo, equals theta above hi."""
    theta = np.asarray(theta, dtype=float)
    s = _smoothstep((theta - lo) / (hi - lo))
    return np.where(theta <= lo, lo,
                    np.where(theta >= hi, theta, lo + (theta - lo) * s))


@dataclass
class CutoffPair:
    chi_h: np.ndarray  # in [0, 1]
    chi_l: np.ndarray  # > 0


class FreezeContext:
    """Immutable bundle of everything the frozen nonlinearities depend on."""

    def __init__(self, model: ReactionModel, grid: Grid, profile: WaveProfile,
                 noise: NoiseModel, sigma: float, kc_sign: float = -1.0,
                 fd_step: float = 1e-3, fd_richardson: bool = True):
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        if profile.psi is None:
            raise ValueError("profile must carry the adjoint eigenfunction")
        self.model = model
        self.grid = grid
        self.profile = profile
        self.noise = noise
        self.sigma = float(sigma)
        self.kc_sign = float(kc_sign)
        self.fd_step = float(fd_step)
        self.fd_richardson = bool(fd_richardson)
        self._sp = "xy"[: grid.d]

        def full(arr_1d: np.ndarray) -> np.ndarray:
            out = np.broadcast_to(profile.bc(arr_1d),
                                  arr_1d.shape[:1] + grid.spatial_shape)
            return np.ascontiguousarray(out)

        self.phi = full(profile.phi)
        self.phi_d1 = full(profile.phi_derivs[0])
        self.phi_d2 = full(profile.phi_derivs[1])
        self.psi = full(profile.psi)
        self.psi_d1 = full(profile.psi_derivs[0])
        self.psi_d2 = full(profile.psi_derivs[1])
        self.df_phi = self.model.deriv("f", 1, self.phi)
        self.f_phi = self.model.f(self.phi)

    # -- small helpers -------------------------------------------------------

    def pair_psi(self, values: np.ndarray) -> np.ndarray:
        """<values, psi> over the cylinder (batch scalar)."""
        return inner_values(self.grid, values, self.psi)

    def _bscal(self, scal) -> np.ndarray:
        """Reshape a batch scalar for broadcasting against fields."""
        scal = np.asarray(scal)
        return scal.reshape(scal.shape + (1,) * (self.grid.d + 1))

    def dx_u(self, v: np.ndarray) -> np.ndarray:
        return self.phi_d1 + deriv_values(self.grid, v, 0, 1)

    # -- cutoffs ---------------------------------------------------------------

    def cutoffs_v(self, v: np.ndarray) -> CutoffPair:
        dist = np.sqrt(l2_norm_sq_values(self.grid, v))
        chi_h = chi_high_shape(dist)
        tm = self.grid.torus_measure
        den = inner_values(self.grid, self.dx_u(v), self.psi)
        chi_l = 1.0 / chi_low_shape(den, 0.25 * tm, 0.5 * tm)
        return CutoffPair(chi_h=np.asarray(chi_h), chi_l=np.asarray(chi_l))

    # -- pointwise model evaluation on (*batch, n, *spatial) layouts ---------------

    def f_at(self, u: np.ndarray) -> np.ndarray:
        d = self.grid.d
        u0 = np.moveaxis(u, -d - 1, 0)
        return np.moveaxis(self.model.f(u0), 0, -d - 1)

    def g_at(self, u: np.ndarray) -> np.ndarray:
        d = self.grid.d
        u0 = np.moveaxis(u, -d - 1, 0)
        out = self.model.g(u0)  # (n, m, *tail)
        return np.moveaxis(out, (0, 1), (-d - 2, -d - 1))

    # -- phase-noise functional b and friends ------------------------------------

    def g_u(self, v: np.ndarray) -> np.ndarray:
        return self.g_at(self.phi + v)

    def gT_psi(self, v: np.ndarray) -> np.ndarray:
        """g(u)^T psi: (*batch, m, *spatial)."""
        s = self._sp
        return np.einsum(f"...nm{s},n{s}->...m{s}", self.g_u(v), self.psi)

    def b_row_v(self, v: np.ndarray, cut: CutoffPair | None = None) -> np.ndarray:
        """Representer w_b with b(u,0)[xi] = <w_b, xi>: (*batch, m, *spatial)."""
        cut = cut or self.cutoffs_v(v)
        coef = -cut.chi_h**2 * cut.chi_l
        return self._bscal(coef) * self.gT_psi(v)

    def b_apply(self, w_b: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return inner_values(self.grid, w_b, xi)

    def nu_tilde_v(self, v: np.ndarray, w_b: np.ndarray | None = None) -> np.ndarray:
        """0.5 chi_h^4 chi_l^2 <Q g^T psi, g^T psi> = 0.5 ||b||_HS^2."""
        if w_b is None:
            w_b = self.b_row_v(v)
        qw = apply_Q(self.noise, w_b)
        return 0.5 * inner_values(self.grid, qw, w_b)

    def K_pair_v(self, v: np.ndarray, cut: CutoffPair | None = None
                 ) -> tuple[np.ndarray, np.ndarray]:
        """(K_tilde_C, K_C) at u = phi + v, frozen frame."""
        cut = cut or self.cutoffs_v(v)
        s = self._sp
        ktilde = self._bscal(cut.chi_l * cut.chi_h) * apply_Q(self.noise, self.gT_psi(v))
        gk = np.einsum(f"...nm{s},...m{s}->...n{s}", self.g_u(v), ktilde)
        kc = self.kc_sign * self._bscal(cut.chi_h) * gk
        return ktilde, kc

    # -- drift pieces ---------------------------------------------------------------

    def N_f(self, v: np.ndarray) -> np.ndarray:
        """f(phi + v) - f(phi) - Df(phi) v."""
        s = self._sp
        lin = np.einsum(f"nj{s},...j{s}->...n{s}", self.df_phi, v)
        return self.f_at(self.phi + v) - self.f_phi - lin

    def R_I(self, v: np.ndarray, cut: CutoffPair | None = None) -> np.ndarray:
        cut = cut or self.cutoffs_v(v)
        nf = self.N_f(v)
        coef = cut.chi_l * self.pair_psi(nf)
        return nf - self._bscal(coef) * self.dx_u(v)

    def R_II(self, v: np.ndarray, cut: CutoffPair | None = None,
             variant: str = "dxk") -> np.ndarray:
        """Two algebraically equal forms: 'dxk' subtracts <dx K_C, psi> dx(u);
        'kdpsi' adds <K_C, psi'> dx(u) (integration by parts)."""
        cut = cut or self.cutoffs_v(v)
        _, kc = self.K_pair_v(v, cut)
        dxk = deriv_values(self.grid, kc, 0, 1)
        if variant == "dxk":
            coef = -cut.chi_l * self.pair_psi(dxk)
        elif variant == "kdpsi":
            coef = cut.chi_l * inner_values(self.grid, kc, self.psi_d1)
        else:
            raise ValueError("variant must be 'dxk' or 'kdpsi'")
        return dxk + self._bscal(coef) * self.dx_u(v)

    def Upsilon(self, v: np.ndarray, cut: CutoffPair | None = None) -> np.ndarray:
        cut = cut or self.cutoffs_v(v)
        nut = self.nu_tilde_v(v, self.b_row_v(v, cut))
        dxx_u = self.phi_d2 + deriv_values(self.grid, v, 0, 2)
        pair = inner_values(self.grid, self.phi + v, self.psi_d2)
        coef = -cut.chi_l * nut * pair
        return self._bscal(nut) * dxx_u + self._bscal(coef) * self.dx_u(v)

    def R_nonlinear(self, v: np.ndarray) -> np.ndarray:
        """R_I + sigma^2 (R_II + Upsilon): the drift minus its linear part."""
        cut = self.cutoffs_v(v)
        out = self.R_I(v, cut)
        if self.sigma != 0.0:
            s2 = self.sigma**2
            out = out + s2 * self.R_II(v, cut) + s2 * self.Upsilon(v, cut)
        return out

    def kappa_sigma(self, v: np.ndarray) -> np.ndarray:
        return 1.0 + self.sigma**2 * self.nu_tilde_v(v)

    # -- phase drift ---------------------------------------------------------------

    def a_sigma(self, v: np.ndarray, cut: CutoffPair | None = None) -> np.ndarray:
        """Reduced form of the phase drift (uses the wave equation)."""
        cut = cut or self.cutoffs_v(v)
        out = self.pair_psi(self.N_f(v))
        if self.sigma != 0.0:
            s2 = self.sigma**2
            _, kc = self.K_pair_v(v, cut)
            kc_pair = inner_values(self.grid, kc, self.psi_d1)
            upp = inner_values(self.grid, self.phi + v, self.psi_d2)
            nut = self.nu_tilde_v(v, self.b_row_v(v, cut))
            out = out - s2 * kc_pair + s2 * nut * upp
        return -cut.chi_l * out

    def a_sigma_raw(self, v: np.ndarray) -> np.ndarray:
        """Literal form of the phase drift; cross-check path."""
        cut = self.cutoffs_v(v)
        u = self.phi + v
        f_pair = self.pair_psi(self.f_at(u))
        _, kc = self.K_pair_v(v, cut)
        mix = self.profile.c0 * u + self.sigma**2 * kc
        mix_pair = inner_values(self.grid, mix, self.psi_d1)
        upp = inner_values(self.grid, u, self.psi_d2)
        nut = self.nu_tilde_v(v, self.b_row_v(v, cut))
        return -cut.chi_l * (f_pair - mix_pair + (1.0 + self.sigma**2 * nut) * upp)

    # -- consolidated one-pass evaluation (hot path) --------------------------------

    def step_bundle(self, v: np.ndarray, dW: np.ndarray) -> dict:
        """All drift/noise/phase quantities for one step, sharing transforms.

        Returns r_nl = R_I + sigma^2 (R_II + Upsilon), s_dw = sigma S(v)[dW],
        a (phase drift), b (noise functional applied to dW), chi_h, kappa.
        """
        grid = self.grid
        s = self._sp
        sig = self.sigma
        dxv = deriv_values(grid, v, 0, 1)
        dxu = self.phi_d1 + dxv
        u = self.phi + v
        # cutoffs
        dist = np.sqrt(l2_norm_sq_values(grid, v))
        chi_h = np.asarray(chi_high_shape(dist))
        tm = grid.torus_measure
        den = inner_values(grid, dxu, self.psi)
        chi_l = np.asarray(1.0 / chi_low_shape(den, 0.25 * tm, 0.5 * tm))
        cut = CutoffPair(chi_h=chi_h, chi_l=chi_l)
        # drift: quadratic remainder part
        nf = self.f_at(u) - self.f_phi \
            - np.einsum(f"nj{s},...j{s}->...n{s}", self.df_phi, v)
        nf_pair = inner_values(grid, nf, self.psi)
        r_nl = nf - self._bscal(chi_l * nf_pair) * dxu
        a_core = nf_pair
        # noise functional pieces
        g = self.g_at(u)
        gpsi = np.einsum(f"...nm{s},n{s}->...m{s}", g, self.psi)
        w_b = self._bscal(-chi_h**2 * chi_l) * gpsi
        b_val = inner_values(grid, w_b, dW)
        gxi = np.einsum(f"...nm{s},...m{s}->...n{s}", g, dW)
        s_dw = sig * (gxi + self._bscal(b_val) * dxu)
        kappa = np.ones_like(chi_h)
        if sig != 0.0:
            s2 = sig * sig
            qgpsi = apply_Q(self.noise, gpsi)
            nut = 0.5 * chi_h**4 * chi_l**2 * inner_values(grid, qgpsi, gpsi)
            kappa = 1.0 + s2 * nut
            ktilde = self._bscal(chi_l * chi_h) * qgpsi
            kc = self.kc_sign * self._bscal(chi_h) \
                * np.einsum(f"...nm{s},...m{s}->...n{s}", g, ktilde)
            dxk = deriv_values(grid, kc, 0, 1)
            r_ii = dxk - self._bscal(chi_l * self.pair_psi(dxk)) * dxu
            dxxv = deriv_values(grid, v, 0, 2)
            upp = inner_values(grid, u, self.psi_d2)
            ups = self._bscal(nut) * (self.phi_d2 + dxxv) \
                - self._bscal(chi_l * nut * upp) * dxu
            r_nl = r_nl + s2 * (r_ii + ups)
            kc_pair = inner_values(grid, kc, self.psi_d1)
            a_core = a_core - s2 * kc_pair + s2 * nut * upp
        a_val = -chi_l * a_core
        return {"r_nl": r_nl, "s_dw": s_dw, "a": a_val, "b": b_val,
                "cut": cut, "kappa": kappa}

    # -- dx-precomputed fast variants (derivative-tensor stencils) -------------------

    def cutoffs_withdx(self, v: np.ndarray, dxu: np.ndarray) -> CutoffPair:
        dist = np.sqrt(l2_norm_sq_values(self.grid, v))
        tm = self.grid.torus_measure
        den = inner_values(self.grid, dxu, self.psi)
        return CutoffPair(chi_h=np.asarray(chi_high_shape(dist)),
                          chi_l=np.asarray(1.0 / chi_low_shape(den, 0.25 * tm, 0.5 * tm)))

    def R_I_withdx(self, v: np.ndarray, dxv: np.ndarray) -> np.ndarray:
        dxu = self.phi_d1 + dxv
        cut = self.cutoffs_withdx(v, dxu)
        nf = self.N_f(v)
        coef = cut.chi_l * self.pair_psi(nf)
        return nf - self._bscal(coef) * dxu

    def S_apply_withdx(self, v: np.ndarray, dxv: np.ndarray,
                       xi: np.ndarray) -> np.ndarray:
        dxu = self.phi_d1 + dxv
        cut = self.cutoffs_withdx(v, dxu)
        s = self._sp
        g = self.g_u(v)
        gxi = np.einsum(f"...nm{s},...m{s}->...n{s}", g, xi)
        gpsi = np.einsum(f"...nm{s},n{s}->...m{s}", g, self.psi)
        w_b = self._bscal(-cut.chi_h**2 * cut.chi_l) * gpsi
        b_val = inner_values(self.grid, w_b, xi)
        return gxi + self._bscal(b_val) * dxu

    def R_II_withdx(self, v: np.ndarray, dxv: np.ndarray) -> np.ndarray:
        dxu = self.phi_d1 + dxv
        cut = self.cutoffs_withdx(v, dxu)
        _, kc = self.K_pair_v(v, cut)
        dxk = deriv_values(self.grid, kc, 0, 1)
        coef = -cut.chi_l * self.pair_psi(dxk)
        return dxk + self._bscal(coef) * dxu

    def Upsilon_withdx(self, v: np.ndarray, dxv: np.ndarray,
                       dxxv: np.ndarray) -> np.ndarray:
        dxu = self.phi_d1 + dxv
        cut = self.cutoffs_withdx(v, dxu)
        nut = self.nu_tilde_v(v, self.b_row_v(v, cut))
        pair = inner_values(self.grid, self.phi + v, self.psi_d2)
        coef = -cut.chi_l * nut * pair
        return self._bscal(nut) * (self.phi_d2 + dxxv) + self._bscal(coef) * dxu

    # -- noise operator S ---------------------------------------------------------

    def S_apply(self, v: np.ndarray, xi: np.ndarray,
                cut: CutoffPair | None = None) -> np.ndarray:
        """S(v)[xi] = g(u) xi + dx(u) b(u,0)[xi]."""
        cut = cut or self.cutoffs_v(v)
        s = self._sp
        gxi = np.einsum(f"...nm{s},...m{s}->...n{s}", self.g_u(v), xi)
        b_val = self.b_apply(self.b_row_v(v, cut), xi)
        return gxi + self._bscal(b_val) * self.dx_u(v)

    def S_hs(self, v: np.ndarray, k: int) -> float:
        """HS norm of S(v) from L^2_Q into H^k (single unbatched v)."""
        grid = self.grid
        cut = self.cutoffs_v(v)
        g = self.g_u(v)
        w_b = self.b_row_v(v, cut)
        dxu = self.dx_u(v)
        sq_flat = self.noise.sqrt_q_hat.reshape(-1, self.noise.m, self.noise.m)
        total = 0.0
        s = self._sp
        for flat in self.noise.live_modes:
            mode = _basis_mode_field(grid, int(flat))
            for c in range(self.noise.m):
                xi = sq_flat[flat][:, c].reshape((self.noise.m,) + (1,) * grid.d) * mode
                gxi = np.einsum(f"nm{s},m{s}->n{s}", g, xi)
                b_val = np.sum(w_b * xi) * grid.cell_volume
                y = gxi + b_val * dxu
                total += float(np.sum(sobolev_norm_sq_values(grid, y, k)))
        return float(np.sqrt(total))

    def b_hs(self, v: np.ndarray) -> float:
        """HS norm of the scalar functional b(u, 0)."""
        return hs_norm_row_functional(self.noise, self.b_row_v(v))

    # -- translated evaluation (commutation checks) --------------------------------

    def _translated_data(self, gamma: float) -> dict[str, np.ndarray]:
        data = self.profile.translated(gamma)
        out = {}
        for key, arr in data.items():
            full = np.broadcast_to(self.profile.bc(arr),
                                   arr.shape[:1] + self.grid.spatial_shape)
            out[key] = np.ascontiguousarray(full)
        return out

    def cutoffs_translated(self, u: np.ndarray, gamma: float) -> CutoffPair:
        d = self._translated_data(gamma)
        dist = np.sqrt(l2_norm_sq_values(self.grid, u - d["phi"]))
        chi_h = chi_high_shape(dist)
        tm = self.grid.torus_measure
        den = -inner_values(self.grid, u, d["psi_d1"])
        chi_l = 1.0 / chi_low_shape(den, 0.25 * tm, 0.5 * tm)
        return CutoffPair(chi_h=np.asarray(chi_h), chi_l=np.asarray(chi_l))

    def b_apply_translated(self, u: np.ndarray, gamma: float,
                           xi: np.ndarray) -> np.ndarray:
        d = self._translated_data(gamma)
        cut = self.cutoffs_translated(u, gamma)
        s = self._sp
        gxi = np.einsum(f"...nm{s},...m{s}->...n{s}", self.g_at(u), xi)
        pair = inner_values(self.grid, gxi, d["psi"])
        return -cut.chi_h**2 * cut.chi_l * pair

    def nu_tilde_translated(self, u: np.ndarray, gamma: float) -> np.ndarray:
        d = self._translated_data(gamma)
        cut = self.cutoffs_translated(u, gamma)
        s = self._sp
        gpsi = np.einsum(f"...nm{s},n{s}->...m{s}", self.g_at(u), d["psi"])
        qg = apply_Q(self.noise, gpsi)
        return 0.5 * cut.chi_h**4 * cut.chi_l**2 * inner_values(self.grid, qg, gpsi)

    def a_sigma_translated(self, u: np.ndarray, gamma: float) -> np.ndarray:
        """Raw-form phase drift at general (u, gamma)."""
        d = self._translated_data(gamma)
        cut = self.cutoffs_translated(u, gamma)
        s = self._sp
        g = self.g_at(u)
        gpsi = np.einsum(f"...nm{s},n{s}->...m{s}", g, d["psi"])
        qgpsi = apply_Q(self.noise, gpsi)
        ktilde = self._bscal(cut.chi_l * cut.chi_h) * qgpsi
        gk = np.einsum(f"...nm{s},...m{s}->...n{s}", g, ktilde)
        kc = self.kc_sign * self._bscal(cut.chi_h) * gk
        nut = 0.5 * cut.chi_h**4 * cut.chi_l**2 * inner_values(self.grid, qgpsi, gpsi)
        f_pair = inner_values(self.grid, self.f_at(u), d["psi"])
        mix = self.profile.c0 * u + self.sigma**2 * kc
        mix_pair = inner_values(self.grid, mix, d["psi_d1"])
        upp = inner_values(self.grid, u, d["psi_d2"])
        return -cut.chi_l * (f_pair - mix_pair + (1.0 + self.sigma**2 * nut) * upp)


# ---------------------------------------------------------------------------
# finite-difference multilinear derivatives at the origin
# ---------------------------------------------------------------------------

def multilinear_fd(func, directions: list[np.ndarray], grid: Grid,
                   step: float = 1e-3, richardson: bool = True):
    """D^l func(0)[d1, ..., dl] by nested central differences.

    Directions are normalized internally and the product of their norms is
    reapplied afterwards, which keeps the result exactly homogeneous of
    degree one in each direction (to float rounding). func must accept
    batched inputs; all stencil points go through a single call.
    """
    ell = len(directions)
    if ell == 0:
        raise ValueError("need at least one direction")
    norms = [float(np.sqrt(np.sum(l2_norm_sq_values(grid, d)))) for d in directions]
    if any(nn == 0.0 for nn in norms):
        probe = func(np.zeros_like(directions[0])[None])[0]
        return np.zeros_like(probe)
    units = [d / nn for d, nn in zip(directions, norms)]
    scale = float(np.prod(norms))

    def estimate(h: float) -> np.ndarray:
        signs = np.array(np.meshgrid(*([[-1.0, 1.0]] * ell), indexing="ij"))
        signs = signs.reshape(ell, -1).T  # (2^l, l)
        points = np.stack([
            sum(sgn * u for sgn, u in zip(row, units)) * h for row in signs
        ])
        vals = func(points)
        weights = np.prod(signs, axis=1) / (2.0 * h) ** ell
        w = weights.reshape((-1,) + (1,) * (vals.ndim - 1))
        return np.sum(w * vals, axis=0)

    est = estimate(step)
    if richardson:
        est_half = estimate(step / 2.0)
        est = (4.0 * est_half - est) / 3.0
    return est * scale


def multilinear_fd_batched(func, directions: list[np.ndarray], grid: Grid,
                           step: float = 1e-3, richardson: bool = True,
                           deriv_orders: tuple[int, ...] = ()) -> np.ndarray:
    """Batched D^l func(0)[d1_r, ..., dl_r] over replicas r.

    Each direction has shape (R, n, *spatial); the result is field-shaped
    (R, n, *spatial). Stencil points are stacked into one leading axis so
    func runs once. Replicas with a zero direction yield zero. Normalizing
    directions per replica keeps the estimate exactly homogeneous under
    power-of-two rescalings of the inputs.

    If deriv_orders is nonempty, func is called as func(points, d1, d2, ...)
    with the longitudinal spectral derivatives of the stencil points of the
    requested orders; these are formed from the unit-direction derivatives
    by the same linear combinations, saving transforms.
    """
    ell = len(directions)
    if ell == 0:
        raise ValueError("need at least one direction")
    tail = (1,) * (grid.d + 1)
    norms = [np.sqrt(l2_norm_sq_values(grid, d)) for d in directions]  # each (R,)
    scale = np.prod(np.stack(norms), axis=0)
    units = [d / np.where(nn > 0, nn, 1.0).reshape(nn.shape + tail)
             for d, nn in zip(directions, norms)]

    def unit_derivs(u: np.ndarray) -> list[np.ndarray]:
        return [deriv_values(grid, u, 0, order) for order in deriv_orders]

    if ell == 2 and directions[0] is directions[1]:
        # diagonal second difference: spacings 2h and h share evaluation points
        u = units[0]
        du = unit_derivs(u)
        coefs = [2.0, -2.0, 1.0, -1.0, 0.0] if richardson else [2.0, -2.0, 0.0]
        c_arr = np.array(coefs).reshape((-1,) + (1,) * u.ndim) * step
        points = c_arr * u
        extras = [c_arr * d for d in du]
        vals = func(points, *extras)
        f0 = vals[-1]
        est_h = (vals[0] + vals[1] - 2.0 * f0) / (4.0 * step**2)
        if richardson:
            est_h2 = (vals[2] + vals[3] - 2.0 * f0) / step**2
            est = (4.0 * est_h2 - est_h) / 3.0
        else:
            est = est_h
        return est * scale.reshape(scale.shape + tail)

    signs = np.array(np.meshgrid(*([[-1.0, 1.0]] * ell), indexing="ij"))
    signs = signs.reshape(ell, -1).T  # (2^l, l)
    steps = [step, step / 2.0] if richardson else [step]

    def stencil(fields: list[np.ndarray]) -> np.ndarray:
        fstack = np.stack(fields)  # (l, R, n, *spatial)
        combos = np.tensordot(signs, fstack, axes=(1, 0))  # (2^l, R, n, *spatial)
        return np.concatenate([combos * h for h in steps])

    points = stencil(units)
    extras = []
    if deriv_orders:
        dstacks = [unit_derivs(u) for u in units]
        for i_ord in range(len(deriv_orders)):
            extras.append(stencil([d[i_ord] for d in dstacks]))
    vals = func(points, *extras)  # (len(steps) * 2^l, R, n, *spatial)
    base_w = np.prod(signs, axis=1)
    ests = []
    n_c = signs.shape[0]
    for i, h in enumerate(steps):
        w = (base_w / (2.0 * h) ** ell).reshape((-1,) + (1,) * (vals.ndim - 1))
        ests.append(np.sum(w * vals[i * n_c:(i + 1) * n_c], axis=0))
    est = (4.0 * ests[1] - ests[0]) / 3.0 if richardson else ests[0]
    return est * scale.reshape(scale.shape + tail)
