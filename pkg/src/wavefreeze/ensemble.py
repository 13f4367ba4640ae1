"""Replica-parallel ensemble execution and persistence.

Replicas are partitioned into fixed batches (independent of thread count);
each batch advances vectorized on its own counter-keyed noise streams, so
results are bit-reproducible for a given (config, seed) regardless of
scheduling. Reductions run in replica order. Outputs: per-path CSV series,
JSON reports, raw float64 field snapshots with JSON sidecars, and a manifest
listing every file with a content hash.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, Lab, new_manifest, RunManifest
from .noise import NoiseSampler
from .simulate import LockstepRunner, PathRecord, STATUS_BLOWN_UP
from .stability import StabilityConfig, StabilityMonitors, StabilityReport, \
    stability_event


def _batches(n: int, size: int) -> list[range]:
    return [range(lo, min(lo + size, n)) for lo in range(0, n, size)]


def run_ensemble(lab: Lab, threads: int | None = None,
                 out_dir: str | Path | None = None,
                 track_expansion: bool = True) -> dict:
    """Run all replicas, reduce, optionally persist. Returns a result dict.

    result = {records, report (or None), manifest, elapsed}.
    """
    cfg = lab.config
    t0 = time.time()
    horizon = lab.horizon()
    threads = _thread_count(cfg, threads)
    records: list[PathRecord | None] = [None] * cfg.replicas

    def run_batch(idxs: range) -> list[PathRecord]:
        samplers = [NoiseSampler(lab.noise, cfg.seed, i) for i in idxs]
        stability = None
        if cfg.stability_enabled and cfg.sigma > 0:
            scfg = StabilityConfig(r=cfg.r, sigma=cfg.sigma, delta=cfg.delta,
                                   beta=lab.beta, k_star=cfg.k_star,
                                   theta=cfg.resolved_theta(), mu=cfg.mu,
                                   T=horizon, eta=cfg.eta)
            stability = StabilityMonitors(scfg, len(samplers), cfg.dt)
        runner = LockstepRunner(lab.ctx, lab.linop, cfg.dt, horizon,
                                cfg.delta, lab.v_star, samplers,
                                k_star=cfg.k_star, stability=stability,
                                record_every=cfg.record_every,
                                track_expansion=track_expansion)
        runner.run()
        out = runner.finalize()
        for rec, idx in zip(out, idxs):
            rec.series = _series_columns(runner, idxs, idx)
        return out

    batches = _batches(cfg.replicas, cfg.batch_size)
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for idxs, recs in zip(batches, pool.map(run_batch, batches)):
                for i, rec in zip(idxs, recs):
                    records[i] = rec
    else:
        for idxs in batches:
            for i, rec in zip(idxs, run_batch(idxs)):
                records[i] = rec

    report = None
    if cfg.stability_enabled and cfg.sigma > 0 and cfg.replicas >= 2:
        scfg = StabilityConfig(r=cfg.r, sigma=cfg.sigma, delta=cfg.delta,
                               beta=lab.beta, k_star=cfg.k_star,
                               theta=cfg.resolved_theta(), mu=cfg.mu,
                               T=horizon, eta=cfg.eta)
        report = stability_event(records, scfg)

    elapsed = time.time() - t0
    manifest = new_manifest(cfg, [rec.status for rec in records], elapsed)
    if out_dir is not None:
        _persist(lab, records, report, manifest, Path(out_dir))
    return {"records": records, "report": report, "manifest": manifest,
            "elapsed": elapsed}


def _thread_count(cfg: ExperimentConfig, override: int | None) -> int:
    env = os.environ.get("WAVEFREEZE_THREADS")
    if override is not None:
        return max(1, int(override))
    if env:
        return max(1, int(env))
    return max(1, cfg.threads)


def _series_columns(runner: LockstepRunner, idxs: range, idx: int) -> dict:
    """Extract one replica's recorded time series as flat arrays."""
    pos = idx - idxs.start
    s = runner.series
    if not s["t"]:
        return {}
    out = {"t": np.array(s["t"])}
    for key in ("gamma", "a_sigma", "v_norm", "z_norm", "neutral_pair",
                "tail_mass"):
        out[key] = np.array([row[pos] for row in s[key]])
    if s["n_res"]:
        out["n_res"] = np.array([row[pos] for row in s["n_res"]])
        out["n_full"] = np.array([row[pos] for row in s["n_full"]])
    if s["y_norms"] and s["y_norms"][0] is not None:
        ys = np.array([row[:, pos] for row in s["y_norms"]])  # (steps, r-1)
        for j in range(ys.shape[1]):
            out[f"y{j + 1}_norm"] = ys[:, j]
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_field_snapshot(path_base: str | Path, values: np.ndarray,
                         grid, components: int, t: float, seed: int) -> list[str]:
    """Raw little-endian float64 (row-major) plus a JSON sidecar."""
    raw_path = str(path_base) + ".f64"
    np.ascontiguousarray(values, dtype="<f8").tofile(raw_path)
    sidecar = {
        "grid": {"d": grid.d, "L": grid.L, "N": grid.N,
                 "T_perp": grid.T_perp, "N_perp": grid.N_perp},
        "components": components,
        "shape": list(values.shape),
        "time": t,
        "seed": seed,
        "dtype": "<f8",
        "order": "C",
    }
    json_path = str(path_base) + ".json"
    with open(json_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return [raw_path, json_path]


def read_field_snapshot(path_base: str | Path) -> tuple[np.ndarray, dict]:
    with open(str(path_base) + ".json") as fh:
        sidecar = json.load(fh)
    values = np.fromfile(str(path_base) + ".f64", dtype="<f8")
    return values.reshape(sidecar["shape"]), sidecar


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_path_csv(path: str | Path, series: dict) -> None:
    keys = [k for k in ("t", "gamma", "a_sigma", "v_norm", "z_norm",
                        "y1_norm", "y2_norm", "y3_norm", "y4_norm",
                        "n_res", "n_full", "neutral_pair", "tail_mass")
            if k in series]
    rows = len(series["t"])
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for i in range(rows):
            fh.write(",".join(_fmt(float(series[k][i])) for k in keys) + "\n")


def _persist(lab: Lab, records: list[PathRecord], report: StabilityReport | None,
             manifest: RunManifest, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = lab.config
    for rec in records:
        if rec.series:
            csv_path = out_dir / f"path_{rec.stream_id:04d}.csv"
            write_path_csv(csv_path, rec.series)
            manifest.register(csv_path)
    summary = {
        "replicas": cfg.replicas,
        "horizon": lab.horizon(),
        "statuses": [rec.status for rec in records],
        "c_obs": [rec.c_obs for rec in records],
        "a_avg_half": [rec.a_avg_half for rec in records],
        "sup_neutral_pair": [rec.sup_neutral_pair for rec in records],
        "sup_kappa": [rec.sup_kappa for rec in records],
    }
    if report is not None:
        summary["stability"] = {
            "p_stb": report.p_stb,
            "wilson": list(report.wilson),
            "n_events": report.n_events,
            "threshold": report.threshold,
            "t_st": report.t_st,
        }
    sum_path = out_dir / "summary.json"
    with open(sum_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    manifest.register(sum_path)
    if cfg.snapshot_cadence:
        base = out_dir / "profile"
        paths = write_field_snapshot(base, lab.profile.phi, lab.grid,
                                     lab.model.n, 0.0, cfg.seed)
        for p in paths:
            manifest.register(p)
    manifest.write(out_dir / "manifest.json")
