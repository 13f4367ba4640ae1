"""Frozen-frame integration of the coupled (perturbation, phase) system.

The perturbation V evolves under the full frozen drift and multiplicative
noise; the phase Gamma accumulates the drift c0 + a_sigma and the noise
functional b on the same increments. The expansion hierarchy runs in
lockstep on the identical increments, so the residual Z = V - Y_tay is a
pathwise object. All state is batched over replicas.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .expansion import ExpansionEngine
from .fields import (deriv_values, l2_norm_sq_values, sobolev_norm_sq_values,
                     sobolev_norm_sq_multi, tail_mass_values)
from .freeze import FreezeContext
from .linops import LinearOperator
from .noise import NoiseSampler

BLOWUP_LIMIT = 1e6

STATUS_COMPLETED = "completed"
STATUS_STOPPED = "stopped"
STATUS_BLOWN_UP = "blown_up"


@dataclass
class PathRecord:
    """Per-replica outcome of a lockstep run."""

    seed: int
    stream_id: int
    status: str
    t_final: float
    t_st: float
    gamma_final: float
    c_obs: float
    a_avg_half: float       # (2/T) integral of a_sigma over [T/2, T]
    b_mart_half: float      # (2/T) integral of b dW over [T/2, T]
    sup_neutral_pair: float
    sup_chi_defect: float   # sup (1 - chi_h)
    sup_kappa: float
    max_tail_mass: float
    max_n_full: float
    max_z_sq: float
    max_y_sq: tuple
    series: dict = field(default_factory=dict)


class Simulator:
    """Batched exponential-Euler integrator for the frozen system."""

    def __init__(self, ctx: FreezeContext, linop: LinearOperator, dt: float,
                 batch: int, delta: float, v_star: np.ndarray):
        self.ctx = ctx
        self.linop = linop
        self.dt = float(dt)
        self.batch = int(batch)
        shape = (batch, ctx.model.n) + ctx.grid.spatial_shape
        self.V = np.zeros(shape) + delta * v_star
        self.gamma = np.zeros(batch)
        self.t = 0.0
        self.alive = np.ones(batch, dtype=bool)
        # running diagnostics
        self.sup_neutral_pair = np.zeros(batch)
        self.sup_chi_defect = np.zeros(batch)
        self.sup_kappa = np.ones(batch)
        self.max_tail_mass = np.zeros(batch)
        self.last_a = np.zeros(batch)
        self.last_b = np.zeros(batch)

    def pre_step(self, dW: np.ndarray) -> np.ndarray:
        """V + dt R_nl(V) + sigma S(V) dW, plus the phase update (left-point)."""
        ctx = self.ctx
        bundle = ctx.step_bundle(self.V, dW)
        a_val = np.asarray(bundle["a"])
        b_val = np.asarray(bundle["b"])
        self.gamma = self.gamma + (ctx.profile.c0 + a_val) * self.dt \
            + ctx.sigma * b_val
        self.last_a = a_val
        self.last_b = b_val
        self.sup_chi_defect = np.maximum(self.sup_chi_defect,
                                         1.0 - bundle["cut"].chi_h)
        self.sup_kappa = np.maximum(self.sup_kappa, bundle["kappa"])
        return self.V + self.dt * bundle["r_nl"] + bundle["s_dw"]

    def commit(self, propagated: np.ndarray) -> None:
        self.V = propagated
        self.t += self.dt
        bad = ~np.isfinite(self.V).all(axis=tuple(range(1, self.V.ndim)))
        bad |= np.max(np.abs(self.V), axis=tuple(range(1, self.V.ndim))) > BLOWUP_LIMIT
        if bad.any():
            self.alive &= ~bad
            self.V[bad] = np.nan
        pair = np.abs(self.ctx.pair_psi(self.V))
        ok = self.alive
        self.sup_neutral_pair[ok] = np.maximum(self.sup_neutral_pair[ok], pair[ok])

    def step(self, dW: np.ndarray) -> None:
        staged = self.pre_step(dW)
        self.commit(self.linop.apply_propagator(self.dt, staged))

    def update_tail_mass(self) -> None:
        tm = tail_mass_values(self.ctx.grid, np.nan_to_num(self.V))
        self.max_tail_mass = np.maximum(self.max_tail_mass, tm)


class LockstepRunner:
    """Advances simulator, expansion and monitors on shared increments."""

    def __init__(self, ctx: FreezeContext, linop: LinearOperator, dt: float,
                 T: float, delta: float, v_star: np.ndarray,
                 samplers: list[NoiseSampler], k_star: int = 1,
                 stability=None, record_every: int = 0,
                 track_expansion: bool = True):
        self.ctx = ctx
        self.linop = linop
        self.dt = float(dt)
        self.T = float(T)
        self.n_steps = int(round(self.T / self.dt))
        self.samplers = samplers
        batch = len(samplers)
        self.sim = Simulator(ctx, linop, dt, batch, delta, v_star)
        self.expansion = ExpansionEngine(ctx, linop, dt, batch, delta, v_star,
                                         k_star=k_star) if track_expansion else None
        self.stability = stability
        self.k_star = k_star
        self.record_every = int(record_every)
        self.series: dict[str, list] = {key: [] for key in
                                        ("t", "gamma", "a_sigma", "v_norm", "z_norm",
                                         "n_res", "n_full", "chi_h", "kappa",
                                         "tail_mass", "y_norms", "neutral_pair")}
        # speed-window accumulators over [T/2, T]
        self._half_steps = self.n_steps // 2
        self.a_int = np.zeros(batch)
        self.b_int = np.zeros(batch)
        self.max_z_sq = np.zeros(batch)
        self.max_y_sq = np.zeros((batch, ctx.model.r - 1))
        self.gamma_half = np.zeros(batch)

    def z_values(self) -> np.ndarray:
        if self.expansion is None:
            return np.zeros_like(self.sim.V)
        return np.nan_to_num(self.sim.V) - self.expansion.y_tay()

    def run(self) -> None:
        from .noise import batched_increments
        for step_idx in range(self.n_steps):
            dW = batched_increments(self.samplers, self.dt, step_idx)
            self.advance(step_idx, dW)

    def advance(self, step_idx: int, dW: np.ndarray) -> None:
        sim_staged = self.sim.pre_step(dW)
        stages = [sim_staged]
        if self.expansion is not None:
            stages.extend(self.expansion.pre_step(dW))
        propagated = self.linop.apply_propagator(self.dt, np.stack(stages))
        self.sim.commit(propagated[0])
        if self.expansion is not None:
            self.expansion.commit(list(propagated[1:]))
        t = self.sim.t

        # monitors
        z = self.z_values()
        g = self.ctx.grid
        z_k, z_k1 = sobolev_norm_sq_multi(g, z, (self.k_star, self.k_star + 1))
        y_norms_sq = [sobolev_norm_sq_values(g, y, k) for y, k in
                      zip(self.expansion.Y, self.expansion.k_ladder)] \
            if self.expansion is not None else []
        self.max_z_sq = np.maximum(self.max_z_sq, z_k)
        for j, ysq in enumerate(y_norms_sq):
            self.max_y_sq[:, j] = np.maximum(self.max_y_sq[:, j], ysq)
        if self.stability is not None:
            self.stability.update(t, z_k, z_k1, y_norms_sq, self.sim.alive)

        # observed-speed window
        if step_idx == self._half_steps - 1:
            self.gamma_half = self.sim.gamma.copy()
        if step_idx >= self._half_steps:
            self.a_int += self.sim.last_a * self.dt
            self.b_int += self.ctx.sigma * self.sim.last_b

        if self.record_every and (step_idx + 1) % self.record_every == 0:
            self.sim.update_tail_mass()
            self._record(t, z_k, y_norms_sq)

    def _record(self, t, z_k_sq, y_norms_sq) -> None:
        s = self.series
        s["t"].append(t)
        s["gamma"].append(self.sim.gamma.copy())
        s["a_sigma"].append(self.sim.last_a.copy())
        s["v_norm"].append(np.sqrt(sobolev_norm_sq_values(
            self.ctx.grid, np.nan_to_num(self.sim.V), self.k_star)))
        s["z_norm"].append(np.sqrt(z_k_sq))
        s["y_norms"].append(np.sqrt(np.stack(y_norms_sq)) if y_norms_sq else None)
        s["neutral_pair"].append(np.abs(self.ctx.pair_psi(self.sim.V)))
        if self.stability is not None:
            s["n_res"].append(self.stability.n_res.copy())
            s["n_full"].append(self.stability.n_full.copy())
        s["tail_mass"].append(self.sim.max_tail_mass.copy())

    def finalize(self) -> list[PathRecord]:
        records = []
        T = self.T
        for i, smp in enumerate(self.samplers):
            alive = bool(self.sim.alive[i])
            if not alive:
                status = STATUS_BLOWN_UP
            elif self.stability is not None and self.stability.tripped[i]:
                status = STATUS_STOPPED
            else:
                status = STATUS_COMPLETED
            t_st = T
            if self.stability is not None and self.stability.tripped[i]:
                t_st = float(self.stability.t_st[i])
            c_obs = self.sim.gamma[i] - self.gamma_half[i]
            records.append(PathRecord(
                seed=smp.seed, stream_id=smp.stream_id, status=status,
                t_final=self.sim.t,
                t_st=t_st,
                gamma_final=float(self.sim.gamma[i]),
                c_obs=float(2.0 * c_obs / T),
                a_avg_half=float(2.0 * self.a_int[i] / T),
                b_mart_half=float(2.0 * self.b_int[i] / T),
                sup_neutral_pair=float(self.sim.sup_neutral_pair[i]),
                sup_chi_defect=float(self.sim.sup_chi_defect[i]),
                sup_kappa=float(self.sim.sup_kappa[i]),
                max_tail_mass=float(self.sim.max_tail_mass[i]),
                max_n_full=float(self.stability.max_n_full[i])
                if self.stability is not None else np.nan,
                max_z_sq=float(self.max_z_sq[i]),
                max_y_sq=tuple(float(v) for v in self.max_y_sq[i]),
            ))
        return records


def integrate_unfrozen(ctx: FreezeContext, u0: np.ndarray, dt: float,
                       n_steps: int) -> np.ndarray:
    """Reference lab-frame integration du = [u_xx + f(u)] dt (deterministic).

    Splits u into the front solver's analytic ramp plus a periodic remainder
    and applies the heat propagator spectrally. Used as an independent check
    of the freezing decomposition; d = 1 only.
    """
    grid = ctx.grid
    if grid.d != 1:
        raise NotImplementedError("unfrozen reference integrator is d=1 only")
    from .waves import ramp_stack
    prof = ctx.profile
    ramp = ramp_stack(grid.x, prof.u_minus, prof.u_plus, prof.ramp_width)
    w = u0 - ramp[0]
    heat = np.exp(-grid.xi**2 * dt)
    for _ in range(n_steps):
        u = ramp[0] + w
        drift = ctx.model.f(u) + ramp[2]
        w_hat = np.fft.fft(w + dt * drift, axis=-1)
        w = np.fft.ifft(heat * w_hat, axis=-1).real
    return ramp[0] + w
