"""Experiment configuration: schema, validation, and the assembled lab.

A config is plain JSON; load_config validates it field by field and applies
defaults. Lab.from_config solves the front, builds the adjoint/spectral
machinery, the noise model and the initial perturbation direction, so every
downstream entry point works from one prepared object.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .fields import Grid, sobolev_norm_sq_values
from .freeze import FreezeContext
from .linops import LinearOperator
from .models import ReactionModel, model_from_config
from .noise import NoiseModel, gaussian_kernel_model
from .stability import theta_star
from .waves import WaveProfile, solve_profile, compute_adjoint, spectral_gap, \
    build_wave_operator


class ConfigError(ValueError):
    """Schema or hypothesis violation, with the offending field path."""


@dataclass
class ExperimentConfig:
    model_name: str = "nagumo"
    model_params: dict = field(default_factory=lambda: {"a": 0.35})
    d: int = 1
    L: float = 64.0
    N: int = 512
    T_perp: float = 2.0 * np.pi
    N_perp: int = 1
    noise_kernel: str = "gaussian"
    q0: float = 0.25
    ell: float = 2.0
    m: int = 1
    sigma: float = 0.02
    delta: float = 0.0
    r: int = 3
    k_star: int = 1
    theta: float | str = "theta_star"
    eta: float | None = None
    mu: float = 0.1
    T: float | None = None
    T_cap: float = 10.0
    dt: float = 1e-3
    replicas: int = 4
    seed: int = 1234
    out_dir: str | None = None
    snapshot_cadence: int = 0
    record_every: int = 20
    kc_sign: float = -1.0
    stability_enabled: bool = True
    threads: int = 1
    batch_size: int = 64

    def resolved_theta(self) -> float:
        if self.theta == "theta_star" or self.theta is None:
            return theta_star(self.r)
        return float(self.theta)

    def to_dict(self) -> dict:
        out = {}
        for key, val in self.__dict__.items():
            out[key] = val
        return out


_FIELD_ALIASES = {
    "model": ("model_name", "model_params"),
    "grid": ("d", "L", "N", "T_perp", "N_perp"),
    "noise": ("noise_kernel", "q0", "ell", "m"),
}


def _flatten(raw: dict) -> dict:
    """Accept both nested ({"grid": {...}}) and flat key layouts."""
    flat = {}
    for key, val in raw.items():
        if key == "model" and isinstance(val, dict):
            if "name" in val:
                flat["model_name"] = val["name"]
            if "params" in val:
                flat["model_params"] = val["params"]
        elif key == "grid" and isinstance(val, dict):
            for sub, v in val.items():
                flat[sub] = v
        elif key == "noise" and isinstance(val, dict):
            mapping = {"kernel": "noise_kernel"}
            for sub, v in val.items():
                flat[mapping.get(sub, sub)] = v
        else:
            flat[key] = val
    return flat


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.N < 16 or (cfg.N & (cfg.N - 1)) != 0:
        raise ConfigError("grid.N: must be a power of two >= 16")
    if cfg.d < 1 or cfg.d > 2:
        raise ConfigError("grid.d: must be 1 or 2")
    if cfg.k_star <= cfg.d / 2:
        raise ConfigError(f"k_star: violated hypothesis k_* > d/2 "
                          f"(k_star={cfg.k_star}, d={cfg.d})")
    if cfg.r < 3:
        raise ConfigError("r: expansion order must satisfy r >= 3")
    if cfg.sigma < 0:
        raise ConfigError("sigma: must be >= 0")
    if cfg.delta < 0:
        raise ConfigError("delta: must be >= 0")
    if cfg.dt <= 0:
        raise ConfigError("dt: must be > 0")
    if cfg.replicas < 0:
        raise ConfigError("replicas: must be >= 0")
    theta = cfg.resolved_theta()
    if not 0.0 <= theta < 0.5:
        raise ConfigError("theta: must lie in [0, 1/2)")
    if not 0.0 < cfg.mu < 1.0:
        raise ConfigError("mu: must lie in (0, 1)")
    if cfg.stability_enabled:
        eta = cfg.eta
        if eta is None:
            from .stability import eta_scale
            eta = eta_scale(cfg.sigma, theta, cfg.r)
        if cfg.delta**2 >= cfg.mu * eta and cfg.sigma > 0:
            raise ConfigError(
                f"delta: violated hypothesis delta^2 < mu*eta "
                f"(delta^2={cfg.delta**2:.3e}, mu*eta={cfg.mu * eta:.3e})")


def load_config(path: str | Path | dict) -> ExperimentConfig:
    """Read and validate a JSON config (or an already-parsed dict)."""
    if isinstance(path, (str, Path)):
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    else:
        raw = dict(path)
    flat = _flatten(raw)
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(flat) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    cfg = ExperimentConfig(**flat)
    validate_config(cfg)
    return cfg


@dataclass
class Lab:
    """Fully assembled numerical laboratory for one configuration."""

    config: ExperimentConfig
    grid: Grid
    model: ReactionModel
    profile: WaveProfile
    linop: LinearOperator
    noise: NoiseModel
    ctx: FreezeContext
    v_star: np.ndarray
    beta: float

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "Lab":
        grid = Grid(cfg.d, cfg.L, cfg.N, cfg.T_perp, cfg.N_perp)
        model = model_from_config(cfg.model_name, cfg.model_params, r=cfg.r)
        prof = solve_profile(model, grid)
        A = build_wave_operator(model, grid, prof)
        compute_adjoint(model, grid, prof, A)
        spectral_gap(model, grid, prof, A)
        linop = LinearOperator(model, grid, prof, A)
        if cfg.noise_kernel != "gaussian":
            raise ConfigError(f"noise.kernel: unknown kernel '{cfg.noise_kernel}'")
        noise = gaussian_kernel_model(grid, m=cfg.m, q0=cfg.q0, ell=cfg.ell)
        ctx = FreezeContext(model, grid, prof, noise, cfg.sigma,
                            kc_sign=cfg.kc_sign)
        v_star = make_v_star(grid, linop, k_norm=cfg.k_star + cfg.r)
        return cls(config=cfg, grid=grid, model=model, profile=prof,
                   linop=linop, noise=noise, ctx=ctx, v_star=v_star,
                   beta=min(prof.beta_tw, 0.5 * grid.lambda1))

    def horizon(self) -> float:
        cfg = self.config
        if cfg.T is not None:
            return float(cfg.T)
        from .stability import horizon_scale
        return horizon_scale(cfg.sigma, cfg.resolved_theta(), cfg.mu, cfg.r,
                             cfg.T_cap)


def make_v_star(grid: Grid, linop: LinearOperator, k_norm: int,
                center: float = 3.0, width_sq: float = 18.0) -> np.ndarray:
    """Deterministic smooth initial direction: bump, projected, unit H^k norm."""
    n = linop.n
    bump = np.exp(-(grid.x - center) ** 2 / width_sq)
    vals = np.zeros((n,) + grid.spatial_shape)
    sl = (0,) + (slice(None),) + (0,) * (grid.d - 1)
    if grid.d == 1:
        vals[0] = bump
    else:
        vals[0] = bump[:, None]
    vals = linop.projector.complement(vals)
    nrm = float(np.sqrt(np.sum(sobolev_norm_sq_values(grid, vals, k_norm))))
    return vals / nrm


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    version: str
    seed: int
    statuses: list
    wall_time_s: float
    files: dict = field(default_factory=dict)  # path -> sha256

    def register(self, path: str | Path) -> None:
        self.files[str(path)] = file_sha256(path)

    def write(self, path: str | Path) -> None:
        payload = {
            "config": self.config,
            "code_version": self.version,
            "seed": self.seed,
            "path_statuses": self.statuses,
            "wall_time_s": self.wall_time_s,
            "files": self.files,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


def new_manifest(cfg: ExperimentConfig, statuses: list,
                 wall_time_s: float) -> RunManifest:
    return RunManifest(config=cfg.to_dict(), version=__version__,
                       seed=cfg.seed, statuses=statuses,
                       wall_time_s=wall_time_s)
