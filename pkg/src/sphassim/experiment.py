"""Experiment orchestration: observation sampling, config sweeps, result tables.

A sweep iterates the (sigma_z_b x sigma_m x inflation) grid for each filter
method on one held-out trajectory, sharing one seeded observation stream
across cells so configurations are compared on identical data.  Cells own
disjoint RNG streams (base seed + cell index), so results are reproducible
regardless of worker count.  Per-cell failures are recorded and the grid
continues.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                      # python < 3.11
    import tomli as tomllib

from .datasets import Dataset, make_latlon_grid, make_staggered_grid
from .filters import FilterConfig, ObservationBatch, run_cycles
from .ltsr import load_params
from .metrics import weighted_rmse_flat
from .sinr import (AffineDecoder, EncodeOptions, SinrParams, encode_values,
                   filter_bases)
from .sphere import SamplingSet, sph_harm_basis
from .dynamics import OdeFuncParams, RezeroParams
from .uncertainty import ModelErrorEstimator, latent_background_cov

TABLE_SIGMA_Z_B = (0.01, 0.003, 0.001)
TABLE_SIGMA_M = (0.1, 0.03, 0.01, 0.003, 0.001, 0.0003, 0.0001)
TABLE_INFLATION = (1.02, 1.05, 1.10)
MASK_RATIOS = (0.30, 0.03, 0.02, 0.01)
MASK_COUNTS = (50, 20, 10)

RESULT_COLUMNS = ("config_id", "method", "sigma_z_b", "sigma_m", "inflation",
                  "mean_analysis_rmse", "final_rmse", "wall_time_s")
DIAG_COLUMNS = ("cycle", "background_rmse", "analysis_rmse", "spread", "config_id")

__all__ = [
    "ObsTemplate",
    "random_obs_operator",
    "ExperimentConfig",
    "ResultRow",
    "load_config_file",
    "experiment_config_from_sections",
    "run_experiment",
    "run_masked_reconstruction",
    "write_results_csv",
    "write_diagnostics_csv",
]


@dataclass(frozen=True)
class ObsTemplate:
    """A fixed random selection of observed (point, channel) values on a grid."""

    grid: SamplingSet
    indices: np.ndarray            # flat indices into the (n, c) value vector
    n_channels: int
    noise_std: float

    @property
    def count(self) -> int:
        return self.indices.size

    def points(self) -> SamplingSet:
        return self.grid.subset(np.unique(self.indices // self.n_channels),
                                grid_tag=f"{self.grid.grid_tag}-obs")

    def batch(self, truth_values: np.ndarray, rng: np.random.Generator) -> ObservationBatch:
        """Mask a snapshot's values and perturb them with observation noise."""
        y = truth_values.reshape(-1)[self.indices]
        y = y + rng.standard_normal(y.shape) * self.noise_std
        return ObservationBatch(sset=self.grid, y=y, noise_std=self.noise_std,
                                indices=self.indices)


def random_obs_operator(grid: SamplingSet, count: int, seed: int,
                        n_channels: int = 1, noise_std: float = 0.1) -> ObsTemplate:
    """Seeded uniform sample of value slots, without replacement."""
    total = len(grid) * n_channels
    if not 1 <= count <= total:
        raise ValueError(f"count must lie in [1, {total}], got {count}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(total, size=count, replace=False))
    return ObsTemplate(grid=grid, indices=idx.astype(np.int64),
                       n_channels=n_channels, noise_std=noise_std)


@dataclass(frozen=True)
class ExperimentConfig:
    """The full assimilation-experiment description (one TOML file)."""

    dataset_path: str = ""
    sinr_path: str = ""
    dynamics_path: str = ""
    estimator_path: str = ""
    methods: tuple[str, ...] = ("enkf", "senkf", "denkf", "etkf", "etkfq")
    sigma_z_b: tuple[float, ...] = TABLE_SIGMA_Z_B
    sigma_m: tuple[float, ...] = TABLE_SIGMA_M
    inflation: tuple[float, ...] = TABLE_INFLATION
    obs_count: int = 1024
    sigma_o: float = 0.1
    sigma_x_b: float = 0.1
    grid_mode: str = "on-grid"          # on-grid | staggered | random-mask
    mask_ratio: float = 1.0
    mask_counts: tuple[int, ...] = MASK_COUNTS
    n_members: int = 64
    n_cycles: int = 40
    test_traj: int = 0
    seed: int = 0
    workers: int = 1
    uncertainty: str = "none"           # none | scalar | diagonal

    def __post_init__(self):
        if not self.methods:
            raise ValueError("methods list is empty")
        if not (self.sigma_z_b and self.sigma_m and self.inflation):
            raise ValueError("configuration grid lists must be non-empty")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in (0, 1]")
        if self.grid_mode not in ("on-grid", "staggered", "random-mask"):
            raise ValueError(f"unknown grid_mode {self.grid_mode!r}")
        if self.uncertainty not in ("none", "scalar", "diagonal"):
            raise ValueError(f"unknown uncertainty mode {self.uncertainty!r}")


@dataclass(frozen=True)
class ResultRow:
    config_id: str
    method: str
    sigma_z_b: float
    sigma_m: float
    inflation: float
    mean_analysis_rmse: float
    final_rmse: float
    wall_time_s: float


def load_config_file(path) -> dict:
    """Read the TOML config; returns the raw section dict."""
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def experiment_config_from_sections(sections: dict, **overrides) -> ExperimentConfig:
    """Build an ExperimentConfig from the [experiment] + [filter] sections."""
    merged: dict = {}
    merged.update(sections.get("filter", {}))
    merged.update(sections.get("experiment", {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    fields = ExperimentConfig.__dataclass_fields__
    kwargs = {}
    for key, value in merged.items():
        if key not in fields:
            continue
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return ExperimentConfig(**kwargs)


def load_models(cfg: ExperimentConfig):
    """Load dataset, decoder parameters, dynamics, and optional estimator."""
    dataset = Dataset.load(cfg.dataset_path)
    sinr_pv, sinr_meta = load_params(cfg.sinr_path)
    sinr = SinrParams.from_meta(sinr_pv, sinr_meta)
    dyn_pv, dyn_meta = load_params(cfg.dynamics_path)
    if dyn_meta.get("kind") == "rezero":
        dyn = RezeroParams.from_meta(dyn_pv, dyn_meta)
    else:
        dyn = OdeFuncParams.from_meta(dyn_pv, dyn_meta)
    estimator = None
    if cfg.estimator_path:
        est_pv, est_meta = load_params(cfg.estimator_path)
        estimator = ModelErrorEstimator.from_params(est_pv.values, est_meta)
    return dataset, sinr, dyn, estimator


@dataclass
class _Prepared:
    """Shared, read-only context for every sweep cell."""

    decoder: AffineDecoder                  # on the evaluation (training) grid
    obs_decoder: AffineDecoder              # where observations are decoded
    obs_template: ObsTemplate
    obs_stream: list[ObservationBatch]
    truth_flat: np.ndarray                  # (n_cycles, n*c) on the evaluation grid
    z0: "object"
    rmse: "object"
    dt: float
    background_cov: "object | None" = None


def _prepare(cfg: ExperimentConfig, dataset: Dataset, sinr: SinrParams) -> _Prepared:
    grid = dataset.grid
    c = dataset.n_channels
    flat = dataset.flat[cfg.test_traj]                   # (K, n, c)
    if cfg.n_cycles + 1 > flat.shape[0]:
        raise ValueError("test trajectory is too short for the requested cycles")
    if cfg.grid_mode == "staggered":
        obs_grid = make_staggered_grid(grid)
        if obs_grid.intersects(grid, tol=1e-9):
            raise AssertionError("staggered grid must not intersect the training grid")
        obs_values = _resample_trajectory(dataset, cfg, obs_grid)
    else:
        obs_grid = grid
        obs_values = None

    template = random_obs_operator(obs_grid, cfg.obs_count, seed=cfg.seed,
                                   n_channels=c, noise_std=cfg.sigma_o)

    rng_obs = np.random.default_rng(cfg.seed + 7919)
    obs_stream = []
    for k in range(1, cfg.n_cycles + 1):
        truth_vals = flat[k] if obs_values is None else obs_values[k]
        obs_stream.append(template.batch(truth_vals, rng_obs))
    truth_flat = flat[1:cfg.n_cycles + 1].reshape(cfg.n_cycles, -1)

    # initial background: perturbed observation of the truth at time zero
    rng_bg = np.random.default_rng(cfg.seed + 104729)
    t0_vals = flat[0] if obs_values is None else obs_values[0]
    y0 = t0_vals.reshape(-1)[template.indices]
    y0 = y0 + rng_bg.standard_normal(y0.shape) * cfg.sigma_x_b
    enc = encode_values(sinr, obs_grid, template.indices, y0,
                        opts=EncodeOptions(steps=500, lr=1e-2, tol=1e-10))
    z0 = enc.latent

    decoder = AffineDecoder.build(sinr, grid, filter_bases(sinr.dims, grid))
    obs_decoder = decoder if cfg.grid_mode != "staggered" \
        else AffineDecoder.build(sinr, obs_grid)

    background_cov = None
    if cfg.uncertainty != "none":
        sub_dec = AffineDecoder.build(sinr, template.points())
        background_cov = latent_background_cov(sub_dec, z0, sigma_x_b=cfg.sigma_x_b)

    return _Prepared(decoder=decoder, obs_decoder=obs_decoder,
                     obs_template=template, obs_stream=obs_stream,
                     truth_flat=truth_flat, z0=z0,
                     rmse=weighted_rmse_flat(grid, c), dt=dataset.dt,
                     background_cov=background_cov)


def _resample_trajectory(dataset: Dataset, cfg: ExperimentConfig,
                         target: SamplingSet) -> np.ndarray:
    """Evaluate the truth trajectory on a different sampling set.

    The twin truth is band-limited, so a least-squares harmonic fit on the
    training grid reproduces it exactly and can be evaluated anywhere.
    """
    flat = dataset.flat[cfg.test_traj]
    c = flat.shape[2]
    nlat = dataset.values.shape[3]
    ell_max = min(nlat // 2, 16)
    pairs = [(ell, m) for ell in range(ell_max + 1) for m in range(-ell, ell + 1)]
    B = sph_harm_basis(pairs, dataset.grid)              # (modes, n)
    L = np.linalg.cholesky(B @ B.T)
    B_target = sph_harm_basis(pairs, target)
    out = np.empty((cfg.n_cycles + 1, len(target), c))
    for k in range(cfg.n_cycles + 1):
        rhs = B @ flat[k]                                # (modes, c)
        coeff = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        out[k] = B_target.T @ coeff
    return out


def _run_cell(cfg: ExperimentConfig, prep: _Prepared, dyn, method: str,
              sigma_z_b, sigma_m, inflation: float, cell_index: int,
              config_id: str) -> tuple[ResultRow, list]:
    fc = FilterConfig(method=method, n_members=cfg.n_members,
                      inflation=inflation, sigma_m=sigma_m,
                      sigma_o=cfg.sigma_o, sigma_z_b=sigma_z_b,
                      seed=cfg.seed + cell_index)
    t0 = time.perf_counter()
    result = run_cycles(prep.z0, _with_dt(dyn, prep.dt), prep.obs_decoder,
                        prep.obs_stream, fc, truth=prep.truth_flat,
                        rmse_fn=prep.rmse, diag_decoder=prep.decoder)
    wall = time.perf_counter() - t0
    records = [(r.cycle, r.rmse_background, r.rmse_analysis, r.spread, config_id)
               for r in result.records]
    rmses = [r.rmse_analysis for r in result.records]
    row = ResultRow(config_id=config_id, method=method,
                    sigma_z_b=_scalar_or_nan(sigma_z_b),
                    sigma_m=_scalar_or_nan(sigma_m), inflation=inflation,
                    mean_analysis_rmse=float(np.mean(rmses)),
                    final_rmse=float(rmses[-1]), wall_time_s=wall)
    return row, records


def _with_dt(dyn, dt: float):
    return dyn if dyn.dt == dt else replace(dyn, dt=dt)


def _scalar_or_nan(value) -> float:
    return float(value) if isinstance(value, (int, float)) else math.nan


def run_experiment(cfg: ExperimentConfig, dataset=None, sinr=None, dyn=None,
                   estimator=None, out_dir=None, log=None):
    """Execute the configuration grid; returns (rows, diagnostics, failures).

    For ``uncertainty != "none"`` the model-error level comes from the fitted
    estimator and the background covariance from Jacobian propagation, so only
    the inflation axis of the grid remains.
    """
    if dataset is None:
        dataset, sinr, dyn, estimator = load_models(cfg)
    if cfg.grid_mode == "random-mask":
        raise ValueError("random-mask mode is served by run_masked_reconstruction")
    prep = _prepare(cfg, dataset, sinr)

    cells = []
    if cfg.uncertainty != "none":
        if estimator is None:
            raise ValueError("uncertainty mode requires a fitted estimator")
        for method in cfg.methods:
            for inf in cfg.inflation:
                cells.append((method, prep.background_cov, estimator, inf))
    else:
        for method in cfg.methods:
            for zb in cfg.sigma_z_b:
                for sm in cfg.sigma_m:
                    for inf in cfg.inflation:
                        cells.append((method, zb, sm, inf))

    rows: list[ResultRow] = []
    diagnostics: list[tuple] = []
    failures: list[tuple[str, str, str]] = []

    def work(item):
        idx, (method, zb, sm, inf) = item
        config_id = f"cfg{idx:03d}"
        try:
            return _run_cell(cfg, prep, dyn, method, zb, sm, inf, idx, config_id)
        except Exception as exc:            # per-cell failure: record, continue
            return ("__failure__", (config_id, method, repr(exc)))

    items = list(enumerate(cells))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outputs = list(pool.map(work, items))
    else:
        outputs = [work(it) for it in items]

    for out in outputs:
        if out[0] == "__failure__":
            failures.append(out[1])
            if log:
                log(f"cell failed: {out[1]}")
            continue
        row, recs = out
        rows.append(row)
        diagnostics.extend(recs)
        if log:
            log(f"{row.config_id} {row.method} rmse={row.mean_analysis_rmse:.4f}")

    if out_dir is not None:
        from pathlib import Path
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_results_csv(rows, out_dir / "results.csv")
        write_diagnostics_csv(diagnostics, out_dir / "diagnostics.csv")
        if failures:
            with open(out_dir / "failures.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["config_id", "method", "error"])
                w.writerows(failures)
    return rows, diagnostics, failures


def run_masked_reconstruction(cfg: ExperimentConfig, dataset: Dataset,
                              sinr: SinrParams, ratios=MASK_RATIOS,
                              counts=MASK_COUNTS, snapshot_time: int = 0):
    """Encode one held-out snapshot from progressively rarer observations.

    Returns rows (label, n_obs, recon_rmse_on_full_grid); mirrors the
    rare-observation reconstruction study.
    """
    grid = dataset.grid
    c = dataset.n_channels
    values = dataset.flat[cfg.test_traj, snapshot_time]
    total = len(grid) * c
    rmse = weighted_rmse_flat(grid, c)
    decoder = AffineDecoder.build(sinr, grid, filter_bases(sinr.dims, grid))
    rows = []
    specs = [(f"ratio={r:g}", max(1, int(round(r * total)))) for r in ratios]
    specs += [(f"count={n}", int(n)) for n in counts]
    for i, (label, count) in enumerate(specs):
        template = random_obs_operator(grid, count, seed=cfg.seed + i,
                                       n_channels=c, noise_std=cfg.sigma_o)
        y = values.reshape(-1)[template.indices]
        enc = encode_values(sinr, grid, template.indices, y,
                            opts=EncodeOptions(steps=800, lr=1e-2, tol=1e-12))
        recon = decoder.decode_members(enc.latent.z[None, :])[0]
        if not np.all(np.isfinite(recon)):
            raise FloatingPointError(f"masked reconstruction diverged at {label}")
        rows.append((label, count, rmse(recon, values.reshape(-1))))
    return rows


def write_results_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r.config_id, r.method, r.sigma_z_b, r.sigma_m,
                        r.inflation, r.mean_analysis_rmse, r.final_rmse,
                        r.wall_time_s])


def write_diagnostics_csv(diagnostics, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAG_COLUMNS)
        w.writerows(diagnostics)
