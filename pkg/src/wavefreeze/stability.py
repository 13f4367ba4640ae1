"""Stability monitoring: weighted energies, stopping times, event statistics.

The running quantities are
    n_res(t)  = ||Z(t)||_{H^k*}^2 + I(t),
    I(t)      = integral of e^{-2 beta (t-s)} ||Z(s)||_{H^{k*+1}}^2 ds,
    n_full(t) = sum_j alpha^{2(r-j)} ||Y_j(t)||_{H^{k_j}}^2 + n_res(t),
with alpha^2 = delta^2 + sigma^2 ln T. A path stops the first time n_full
exceeds eta alpha^{2(r-1)}; the stability event is "never stopped before the
horizon". Ensemble reductions produce event probabilities with Wilson
intervals, observed-speed statistics, and conditional expectations with the
Cauchy-Schwarz conditioning correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_EVENT_SAMPLES = 30


def theta_star(r: int) -> float:
    """Scale choice making the pathwise event bounds collapse to powers of sigma."""
    return r / (2.0 * (2.0 * r - 1.0))


def eta_scale(sigma: float, theta: float, r: int) -> float:
    return 2.0 ** (1 - r) * sigma ** (2.0 * (1.0 - theta))


def horizon_scale(sigma: float, theta: float, mu: float, r: int,
                  T_cap: float) -> float:
    """min(floor(exp(mu sigma^(-2 theta / r) / 2)), T_cap)."""
    if sigma <= 0.0:
        return float(T_cap)
    expo = 0.5 * mu * sigma ** (-2.0 * theta / r)
    if expo > 700.0:
        return float(T_cap)
    return float(min(np.floor(np.exp(expo)), T_cap))


@dataclass
class StabilityConfig:
    r: int
    sigma: float
    delta: float
    beta: float
    k_star: int
    theta: float
    mu: float = 0.1
    T: float = 10.0          # horizon actually monitored
    eta: float | None = None  # defaults to eta_scale(sigma, theta, r)

    def __post_init__(self):
        if not 0.0 <= self.theta < 0.5:
            raise ValueError("theta must lie in [0, 1/2)")
        if not 0.0 < self.mu < 1.0:
            raise ValueError("mu must lie in (0, 1)")
        if self.eta is None:
            self.eta = eta_scale(self.sigma, self.theta, self.r)
        if self.delta**2 >= self.mu * self.eta:
            raise ValueError(
                f"delta^2 = {self.delta**2:.3e} must be < mu*eta = "
                f"{self.mu * self.eta:.3e}")

    @property
    def alpha_sq(self) -> float:
        log_T = np.log(self.T) if self.T > 1.0 else 0.0
        return self.delta**2 + self.sigma**2 * log_T

    @property
    def threshold(self) -> float:
        return self.eta * self.alpha_sq ** (self.r - 1)

    def y_weight(self, j: int) -> float:
        return self.alpha_sq ** (self.r - j)


class StabilityMonitors:
    """Batched running monitors; update once per accepted step."""

    def __init__(self, cfg: StabilityConfig, batch: int, dt: float):
        self.cfg = cfg
        self.dt = float(dt)
        self.I = np.zeros(batch)
        self.n_res = np.zeros(batch)
        self.n_full = np.zeros(batch)
        self.max_n_full = np.zeros(batch)
        self.t_st = np.full(batch, np.nan)
        self.tripped = np.zeros(batch, dtype=bool)
        self._decay = np.exp(-2.0 * cfg.beta * self.dt)

    def update(self, t: float, z_ksq: np.ndarray, z_k1sq: np.ndarray,
               y_norms_sq: list[np.ndarray], alive: np.ndarray) -> None:
        cfg = self.cfg
        self.I = self._decay * self.I + self.dt * z_k1sq
        self.n_res = z_ksq + self.I
        nf = self.n_res.copy()
        for j, ysq in enumerate(y_norms_sq, start=1):
            nf = nf + cfg.y_weight(j) * ysq
        self.n_full = nf
        self.max_n_full = np.maximum(self.max_n_full, np.where(alive, nf, np.inf))
        newly = (~self.tripped) & alive & (nf > cfg.threshold)
        newly |= (~self.tripped) & (~alive)
        self.t_st[newly] = t
        self.tripped |= newly


def stopping_time(n_full_path: np.ndarray, times: np.ndarray,
                  threshold: float, horizon: float) -> float:
    """First grid time with n_full > threshold; horizon if never exceeded."""
    hits = np.nonzero(n_full_path > threshold)[0]
    return float(times[hits[0]]) if hits.size else float(horizon)


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1.0 + z**2 / n
    center = (p + z**2 / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass
class StabilityReport:
    n_paths: int
    n_events: int
    p_stb: float
    wilson: tuple[float, float]
    horizon: float
    threshold: float
    t_st: list[float]
    event_flags: list[bool]
    max_n_full: list[float]
    c_obs_mean: float = np.nan
    c_obs_se: float = np.nan
    c_obs_conditional: float = np.nan
    conditional_correction: float = np.nan
    notes: dict = field(default_factory=dict)


def stability_event(records: list, cfg: StabilityConfig) -> StabilityReport:
    """Flag per path whether the stopping time reached the horizon."""
    if len(records) < 2:
        raise ValueError("need at least 2 paths for event statistics")
    flags = [rec.status == "completed" and rec.t_st >= cfg.T for rec in records]
    t_st = [rec.t_st for rec in records]
    n_events = int(sum(flags))
    n = len(records)
    report = StabilityReport(
        n_paths=n, n_events=n_events, p_stb=n_events / n,
        wilson=wilson_interval(n_events, n),
        horizon=cfg.T, threshold=cfg.threshold,
        t_st=t_st, event_flags=flags,
        max_n_full=[rec.max_n_full for rec in records],
    )
    c_obs = np.array([rec.c_obs for rec in records])
    ok = np.array(flags)
    if ok.any():
        vals = c_obs[ok]
        report.c_obs_mean = float(vals.mean())
        if vals.size > 1:
            report.c_obs_se = float(vals.std(ddof=1) / np.sqrt(vals.size))
    if n_events >= MIN_EVENT_SAMPLES:
        cond, corr = conditional_expectation(c_obs, ok)
        report.c_obs_conditional = cond
        report.conditional_correction = corr
    return report


def observed_speed(record, cfg: StabilityConfig) -> dict:
    """Increment-based speed over the second half window, with decomposition."""
    if record.status != "completed" or record.t_final < cfg.T:
        raise ValueError("path did not complete the horizon")
    return {
        "c_obs": record.c_obs,
        "a_avg": record.a_avg_half,
        "b_mart": record.b_mart_half,
    }


def conditional_expectation(values: np.ndarray, flags: np.ndarray,
                            enforce_min: bool = True) -> tuple[float, float]:
    """Event-conditional mean plus the conditioning-correction bound.

    The bound is p^{-1} sqrt(E |phi|^2) sqrt(p (1-p)) evaluated from sample
    moments; it controls how far conditioning can move the unconditional mean.
    """
    values = np.asarray(values, dtype=float)
    flags = np.asarray(flags, dtype=bool)
    n_pos = int(flags.sum())
    if enforce_min and n_pos < MIN_EVENT_SAMPLES:
        raise ValueError(f"need >= {MIN_EVENT_SAMPLES} event-positive samples, "
                         f"have {n_pos}")
    if n_pos == 0:
        raise ValueError("no event-positive samples")
    p = n_pos / flags.size
    cond_mean = float(values[flags].mean())
    second_moment = float(np.mean(values**2))
    corr = np.sqrt(second_moment) * np.sqrt(p * (1.0 - p)) / p
    return cond_mean, float(corr)
