"""Latitude-weighted error metrics and prediction-error curves."""

from __future__ import annotations

import numpy as np

from .sinr import AffineDecoder, FieldSnapshot, SinrParams, filter_bases
from .sphere import SamplingSet

__all__ = [
    "weighted_rmse",
    "weighted_rmse_flat",
    "multi_step_pred_rmse",
    "free_run_rmse",
]


def _check_same_set(a: SamplingSet, b: SamplingSet) -> None:
    if len(a) != len(b) or not (np.allclose(a.theta, b.theta, atol=1e-12)
                                and np.allclose(a.phi, b.phi, atol=1e-12)):
        raise ValueError("snapshots must share an identical sampling set")


def weighted_rmse(a: FieldSnapshot, b: FieldSnapshot) -> float:
    """sqrt( sum_p cos(lat_p) ||a_p - b_p||^2 / sum_p cos(lat_p) )."""
    _check_same_set(a.sset, b.sset)
    w = np.cos(a.sset.lat)
    d = a.values - b.values
    return float(np.sqrt(np.dot(w, (d * d).sum(axis=1)) / w.sum()))


def weighted_rmse_flat(sset: SamplingSet, n_channels: int):
    """A closure computing the weighted RMSE on flat (n*c,) value vectors."""
    w = np.repeat(np.cos(sset.lat), n_channels)
    total = w.sum()

    def rmse(a_flat: np.ndarray, b_flat: np.ndarray) -> float:
        d = a_flat - b_flat
        return float(np.sqrt(np.dot(w, d * d) / total * n_channels))

    return rmse


def multi_step_pred_rmse(dataset, sinr: SinrParams, table, dyn, s: int,
                         trajectories=None) -> list[float]:
    """Mean weighted RMSE of decoded s-step latent forecasts, for steps 0..s.

    Step 0 is the pure reconstruction error.  Latents come from the table;
    forecasts iterate the surrogate and decode on the dataset grid.
    """
    if s < 0:
        raise ValueError("horizon must be non-negative")
    grid = dataset.grid
    flat = dataset.flat                                    # (T, K, n, c)
    T, K, n, c = flat.shape
    trajs = list(range(T)) if trajectories is None else list(trajectories)
    decoder = AffineDecoder.build(sinr, grid, filter_bases(sinr.dims, grid))
    w = np.cos(grid.lat)
    wsum = w.sum()
    Z = table.z[trajs].reshape(len(trajs) * K, -1)
    truth = flat[trajs].reshape(len(trajs) * K, n, c)
    curve: list[float] = []
    cur = Z.copy()
    for step in range(s + 1):
        if step > 0:
            cur = dyn.advance(cur, (step - 1) * dyn.dt, step * dyn.dt)
        # pair forecast of z_k with truth x_{k+step}, within each trajectory
        pred = decoder.decode_members(cur).reshape(len(trajs), K, n, c)
        rmses = []
        for ti in range(len(trajs)):
            for k in range(K - step):
                d = pred[ti, k] - truth[ti * K + k + step].reshape(n, c)
                rmses.append(np.sqrt(np.dot(w, (d * d).sum(axis=1)) / wsum))
        curve.append(float(np.mean(rmses)))
    return curve


def free_run_rmse(z0, dyn, decoder: AffineDecoder, truth_flat: np.ndarray,
                  rmse) -> list[float]:
    """Forecast-only baseline: decode an unassimilated rollout against truth."""
    out: list[float] = []
    Z = z0.z[None, :].copy()
    t = float(z0.time_index)
    for k in range(truth_flat.shape[0]):
        Z = dyn.advance(Z, t, t + dyn.dt)
        t += dyn.dt
        out.append(rmse(decoder.decode_members(Z)[0], truth_flat[k].reshape(-1)))
    return out
