"""Losses and the two-stage training procedure for the neural-field branch.

Pre-training alternates a per-snapshot latent gradient step (latents only)
with one full-batch decoder update per epoch; fine-tuning adds the surrogate
dynamics, optimized on the latent prediction loss through the integrator while
reconstruction updates continue at a reduced rate.  Parameter groups keep
separate optimizers; the losses are never blended into one scalar objective.

Adam drives every update group by default; ``optimizer="sgd"`` switches all of
them to plain gradient steps (the literal procedure).

Because the decoder output is affine in the latent vector, the full-batch
decoder gradient can be taken through one probe forward pass (the latent basis
vectors) instead of one pass per snapshot: with F(theta) = [base | J] and
u_k = [1; z_k], the loss is mean_k ||F u_k - x_k||^2_w, so
d loss/d theta = <dF/d theta, 2 W mean_k (F u_k - x_k) u_k^T>.  The residual
moments are plain matrix products; only F rides the tape.  The per-snapshot
("direct") path is kept and must agree to round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamVector
from .ltsr import save_ltsr, save_params
from .sinr import (FieldSnapshot, LatentState, SinrParams,
                   filter_bases, recon_weights, sinr_output_t, weighted_mse_t)

__all__ = [
    "TrainConfig",
    "LatentTable",
    "LossTrace",
    "recon_loss",
    "pred_loss",
    "pretrain",
    "finetune",
]


@dataclass(frozen=True)
class TrainConfig:
    """Budgets and learning rates for both training stages."""

    epochs: int = 1000
    lr_pretrain: float = 1e-3
    lr_finetune: float = 1e-4
    lr_latent: float = 1e-2
    s: int = 1                       # prediction horizon (fixed by default)
    seed: int = 0                    # batch ordering seed (mini-batch mode)
    checkpoint_every: int = 0        # epochs between checkpoints; 0 disables
    checkpoint_dir: str | None = None
    optimizer: str = "adam"          # "adam" | "sgd" (literal procedure)
    batch_size: int | None = None    # None = full batch, as written
    chunk: int = 16                  # snapshots per chunk on the direct path
    grad_path: str = "affine"        # "affine" | "direct" (must agree)
    finetune_latent_scale: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.s < 1:
            raise ValueError("epochs must be >= 0 and s >= 1")
        if min(self.lr_pretrain, self.lr_finetune, self.lr_latent) <= 0:
            raise ValueError("learning rates must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.grad_path not in ("affine", "direct"):
            raise ValueError(f"unknown grad_path {self.grad_path!r}")


class LatentTable:
    """One latent vector per training snapshot, keyed by (trajectory, time index)."""

    def __init__(self, n_traj: int, n_steps: int, m: int, values=None):
        self.z = np.zeros((n_traj, n_steps, m)) if values is None \
            else np.asarray(values, dtype=np.float64).reshape(n_traj, n_steps, m).copy()

    @property
    def shape(self):
        return self.z.shape

    def get(self, traj: int, k: int) -> LatentState:
        return LatentState(self.z[traj, k].copy(), time_index=k)

    def set(self, traj: int, k: int, state: LatentState) -> None:
        self.z[traj, k] = state.z

    def matrix(self) -> np.ndarray:
        """(n_traj * n_steps, m) view in trajectory-major order."""
        t, k, m = self.z.shape
        return self.z.reshape(t * k, m)

    def copy(self) -> "LatentTable":
        t, k, m = self.z.shape
        return LatentTable(t, k, m, values=self.z)


@dataclass
class LossTrace:
    """Per-epoch loss rows; written as CSV (epoch, recon, pred) by the CLI."""

    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def append(self, epoch: int, recon: float, pred: float = math.nan) -> None:
        self.rows.append((epoch, float(recon), float(pred)))

    def write_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "recon", "pred"])
            w.writerows(self.rows)


def recon_loss(snapshot: FieldSnapshot, decoded: FieldSnapshot) -> float:
    """Latitude-cosine-weighted mean squared error between two snapshots."""
    if len(snapshot.sset) == 0:
        raise ValueError("empty snapshot")
    if len(snapshot.sset) != len(decoded.sset) or snapshot.values.shape != decoded.values.shape:
        raise ValueError("snapshots must share a sampling set")
    w = recon_weights(snapshot.sset)
    d = snapshot.values - decoded.values
    return float(np.dot(w, (d * d).sum(axis=1)))


def pred_loss(z_seq, model, s: int = 1) -> float:
    """Mean over k of ||z_{k+s} - G^s(z_k)||^2 for one latent sequence."""
    Z = np.asarray([st.z for st in z_seq]) if not isinstance(z_seq, np.ndarray) else z_seq
    if Z.shape[0] <= s:
        raise ValueError(f"sequence of length {Z.shape[0]} is too short for s={s}")
    cur = Z[:-s]
    t = 0.0
    for _ in range(s):
        cur = model.advance(cur, t, t + model.dt)
        t += model.dt
    d = Z[s:] - cur
    return float(np.mean((d * d).sum(axis=1)))


class _LatentOptimizer:
    """Per-snapshot Adam (or plain SGD) state for the latent inner updates."""

    def __init__(self, count: int, m: int, optimizer: str):
        self.optimizer = optimizer
        if optimizer == "adam":
            self.m1 = np.zeros((count, m))
            self.v1 = np.zeros((count, m))
            self.t = np.zeros(count, dtype=np.int64)

    def step(self, Z: np.ndarray, idx: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if self.optimizer == "sgd":
            Z[idx] -= lr * grad
            return
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.t[idx] += 1
        t = self.t[idx][:, None].astype(np.float64)
        self.m1[idx] = b1 * self.m1[idx] + (1 - b1) * grad
        self.v1[idx] = b2 * self.v1[idx] + (1 - b2) * grad * grad
        mhat = self.m1[idx] / (1.0 - b1 ** t)
        vhat = self.v1[idx] / (1.0 - b2 ** t)
        Z[idx] -= lr * mhat / (np.sqrt(vhat) + eps)


class _ReconStage:
    """Shared machinery for one training stage on a fixed dataset/grid."""

    def __init__(self, dataset, sinr: SinrParams, cfg: TrainConfig):
        self.grid = dataset.grid
        flat = dataset.flat                                  # (T, K, n, c)
        self.T, self.K, self.n, self.c = flat.shape
        self.targets_flat = flat.reshape(self.T * self.K, self.n * self.c)
        self.targets_cn = np.swapaxes(
            flat.reshape(self.T * self.K, self.n, self.c), 1, 2)
        self.bases = filter_bases(sinr.dims, self.grid)
        self.w_point = recon_weights(self.grid)
        self.w_flat = np.repeat(self.w_point, self.c)
        m = sinr.dims.m
        self.probe = np.vstack([np.zeros(m), np.eye(m)])
        self.latent_opt = _LatentOptimizer(self.T * self.K, m, cfg.optimizer)
        self.cfg = cfg

    def epoch_step(self, sinr: SinrParams, Z: np.ndarray, idx: np.ndarray,
                   lr_latent: float):
        """One latent step plus the decoder gradient, on the chosen path."""
        if self.cfg.grad_path == "affine":
            return self._affine_step(sinr, Z, idx, lr_latent)
        return self._direct_step(sinr, Z, idx, lr_latent)

    def _affine_step(self, sinr: SinrParams, Z: np.ndarray, idx: np.ndarray,
                     lr_latent: float):
        dims = sinr.dims
        m = dims.m
        leaves = ad.make_leaves(sinr.params)
        O_t = sinr_output_t(leaves, ad.constant(self.probe), self.bases,
                            dims, sinr.skip)                 # (m+1, c, n)
        vals = np.swapaxes(O_t.data, 1, 2).reshape(m + 1, -1)
        base, jac_rows = vals[0], vals[1:] - vals[0]         # (nc,), (m, nc)
        targets = self.targets_flat[idx]
        # latent inner step (decoder untouched)
        r = Z[idx] @ jac_rows + base - targets
        g_z = 2.0 * (r * self.w_flat) @ jac_rows.T
        self.latent_opt.step(Z, idx, g_z, lr_latent)
        # decoder gradient at the updated latents, via residual moments
        zb = Z[idx]
        R = zb @ jac_rows + base - targets                   # (K, nc)
        loss = float(((R * R) @ self.w_flat).mean())
        k_count = idx.size
        U = np.hstack([np.ones((k_count, 1)), zb])           # (K, m+1)
        Gc = 2.0 * ((R * self.w_flat).T @ U) / k_count       # (nc, m+1)
        Cflat = np.empty((m + 1, base.size))
        Cflat[0] = Gc[:, 0] - Gc[:, 1:].sum(axis=1)
        Cflat[1:] = Gc[:, 1:].T
        C = np.swapaxes(Cflat.reshape(m + 1, self.n, self.c), 1, 2)
        s_t = ad.tsum(O_t * ad.constant(C))
        rep = ad.harvest(s_t, leaves, sinr.params)
        if not math.isfinite(loss):
            raise ad.NonFiniteLossError("reconstruction loss is non-finite")
        return loss, rep.grad

    def _direct_step(self, sinr: SinrParams, Z: np.ndarray, idx: np.ndarray,
                     lr_latent: float):
        from .sinr import AffineDecoder

        decoder = AffineDecoder.build(sinr, self.grid, self.bases)
        r = decoder.decode_members(Z[idx]) - self.targets_flat[idx]
        g_z = 2.0 * (r * self.w_flat) @ decoder.jac
        self.latent_opt.step(Z, idx, g_z, lr_latent)
        total_loss = 0.0
        total_grad = np.zeros_like(sinr.params.values)

        def program(leaves, z_chunk, tgt_chunk):
            pred = sinr_output_t(leaves, ad.constant(z_chunk), self.bases,
                                 sinr.dims, sinr.skip)
            return weighted_mse_t(pred, tgt_chunk, self.w_point)

        for lo in range(0, idx.size, self.cfg.chunk):
            sel = idx[lo:lo + self.cfg.chunk]
            rep = ad.value_and_grad(program, sinr.params, Z[sel],
                                    self.targets_cn[sel])
            frac = sel.size / idx.size
            total_loss += rep.loss * frac
            total_grad += rep.grad.values * frac
        return total_loss, sinr.params.with_values(total_grad)


def _pred_report(dyn, z_from: np.ndarray, z_to: np.ndarray, s: int,
                 chunk: int) -> ad.GradReport:
    """Full-batch dynamics gradient of the mean s-step prediction loss."""
    K = z_from.shape[0]
    total_loss = 0.0
    total_grad = np.zeros_like(dyn.params.values)

    def program(leaves, zf, zt):
        cur = ad.constant(zf)
        t = 0.0
        for _ in range(s):
            cur = dyn.advance_t(lambda name: leaves[name], cur, t, t + dyn.dt)
            t += dyn.dt
        r = cur - ad.constant(zt)
        return ad.tmean(ad.tsum(ad.square(r), axis=1))

    for lo in range(0, K, chunk):
        hi = min(lo + chunk, K)
        rep = ad.value_and_grad(program, dyn.params, z_from[lo:hi], z_to[lo:hi])
        frac = (hi - lo) / K
        total_loss += rep.loss * frac
        total_grad += rep.grad.values * frac
    return ad.GradReport(loss=total_loss, grad=dyn.params.with_values(total_grad))


def _param_step(params: ParamVector, grad: ParamVector, lr: float,
                state: AdamState | None, optimizer: str):
    if optimizer == "adam":
        return ad.adam_step(state, params, grad, lr)
    return ad.sgd_step(params, grad, lr), state


def _checkpoint(cfg: TrainConfig, epoch: int, sinr: SinrParams,
                table: LatentTable, dyn=None) -> None:
    if not cfg.checkpoint_every or cfg.checkpoint_dir is None:
        return
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(sinr.params, out / f"sinr_ep{epoch}.ltsr", meta=sinr.to_meta())
    save_ltsr(table.z, out / f"latents_ep{epoch}.ltsr")
    if dyn is not None:
        save_params(dyn.params, out / f"dynamics_ep{epoch}.ltsr", meta=dyn.to_meta())


def _epoch_batches(K: int, cfg: TrainConfig, rng) -> list[np.ndarray]:
    if cfg.batch_size is None:
        return [np.arange(K)]
    order = rng.permutation(K)
    return [order[lo:lo + cfg.batch_size] for lo in range(0, K, cfg.batch_size)]


def pretrain(dataset, sinr: SinrParams, table: LatentTable, cfg: TrainConfig,
             trace: LossTrace | None = None):
    """Stage one: fit latents and decoder on the reconstruction loss.

    Per epoch: one gradient step on every latent (decoder frozen), then one
    decoder update on the mean reconstruction loss.  Returns the trained
    parameters and the latent table; ``trace`` collects per-epoch losses.
    """
    stage = _ReconStage(dataset, sinr, cfg)
    if table.shape != (stage.T, stage.K, sinr.dims.m):
        raise ValueError("latent table shape mismatch")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.init(sinr.params) if cfg.optimizer == "adam" else None
    trace = LossTrace() if trace is None else trace
    loss = math.nan
    for epoch in range(cfg.epochs):
        Z = table.matrix()
        try:
            for batch in _epoch_batches(stage.T * stage.K, cfg, rng):
                loss, grad = stage.epoch_step(sinr, Z, batch, cfg.lr_latent)
                new_params, state = _param_step(sinr.params, grad,
                                                cfg.lr_pretrain, state,
                                                cfg.optimizer)
                sinr = sinr.with_params(new_params)
        except ad.NonFiniteLossError:
            _checkpoint(cfg, epoch, sinr, table)
            raise
        trace.append(epoch, loss)
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _checkpoint(cfg, epoch + 1, sinr, table)
    return sinr, table


def finetune(dataset, sinr: SinrParams, table: LatentTable, dyn, cfg: TrainConfig,
             trace: LossTrace | None = None):
    """Stage two: learn the latent dynamics; keep refining latents and decoder.

    The dynamics parameters minimize the s-step latent prediction loss at
    ``lr_finetune``; reconstruction updates continue with the latent rate
    scaled by ``finetune_latent_scale`` and the decoder at ``lr_finetune``.
    Gradients never cross groups (no blended objective).
    """
    stage = _ReconStage(dataset, sinr, cfg)
    if stage.K <= cfg.s:
        raise ValueError(f"trajectories of length {stage.K} are too short for s={cfg.s}")
    state_dec = AdamState.init(sinr.params) if cfg.optimizer == "adam" else None
    state_dyn = AdamState.init(dyn.params) if cfg.optimizer == "adam" else None
    trace = LossTrace() if trace is None else trace
    lr_lat = cfg.lr_latent * cfg.finetune_latent_scale
    all_idx = np.arange(stage.T * stage.K)
    for epoch in range(cfg.epochs):
        Z = table.matrix()
        try:
            loss, grad = stage.epoch_step(sinr, Z, all_idx, lr_lat)
            new_params, state_dec = _param_step(sinr.params, grad,
                                                cfg.lr_finetune, state_dec,
                                                cfg.optimizer)
            sinr = sinr.with_params(new_params)
            z3 = table.z
            z_from = z3[:, :-cfg.s].reshape(-1, z3.shape[2])
            z_to = z3[:, cfg.s:].reshape(-1, z3.shape[2])
            rep_p = _pred_report(dyn, z_from, z_to, cfg.s,
                                 max(cfg.chunk * 8, 64))
            new_dyn, state_dyn = _param_step(dyn.params, rep_p.grad,
                                             cfg.lr_finetune, state_dyn,
                                             cfg.optimizer)
            dyn = dyn.with_params(new_dyn)
        except ad.NonFiniteLossError:
            _checkpoint(cfg, epoch, sinr, table, dyn)
            raise
        trace.append(epoch, loss, rep_p.loss)
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _checkpoint(cfg, epoch + 1, sinr, table, dyn)
    return sinr, table, dyn
