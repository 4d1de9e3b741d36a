"""Latent surrogate models: a continuous-time neural ODE and a gated-residual baseline.

The neural ODE integrates dz/dt = f(z) with classic RK4 (discretize-then-
optimize: gradients are taken through the integration steps, so they are the
exact derivatives of the computed map).  Real (t0, t1) pairs are honored, so
irregular observation intervals need no special handling.  The baseline is a
discrete-time map of five residual blocks whose scalar gates start at zero,
i.e. the identity map at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tensor
from .sinr import LatentState

__all__ = [
    "OdeFuncParams",
    "RezeroParams",
    "init_node_params",
    "init_rezero_params",
    "ode_step",
    "rezero_step",
    "rollout",
]


def _leaky(x, slope):
    if isinstance(x, Tensor):
        return ad.leaky_relu(x, slope)
    return np.where(x >= 0.0, x, slope * x)


def _mlp(seg, Z, widths_n, slope):
    """Apply the stacked MLP to (K, m) rows; works on arrays and Tensors."""
    a = Z
    n_layers = widths_n + 1
    for i in range(n_layers):
        a = a @ seg(f"lin{i}_W").T + seg(f"lin{i}_b")
        if i < n_layers - 1:
            a = _leaky(a, slope)
    return a


@dataclass(frozen=True)
class OdeFuncParams:
    """MLP vector field f(z) plus integrator defaults (dt, substeps)."""

    params: ParamVector
    m: int
    widths: tuple[int, ...] = (512, 512, 512)
    slope: float = 0.2
    dt: float = 1.0
    substeps: int = 4

    def f(self, Z: np.ndarray) -> np.ndarray:
        return _mlp(self.params.segment, Z, len(self.widths), self.slope)

    def advance(self, Z: np.ndarray, t0: float, t1: float) -> np.ndarray:
        """RK4 over (t0, t1) for a (K, m) batch of latents."""
        return _rk4(self.params.segment, Z, t0, t1, self.substeps,
                    len(self.widths), self.slope)

    def advance_t(self, seg, Z_t, t0: float, t1: float):
        """Tape version for training programs; ``seg`` maps names to Tensors."""
        return _rk4(seg, Z_t, t0, t1, self.substeps, len(self.widths), self.slope)

    def with_params(self, params: ParamVector) -> "OdeFuncParams":
        return replace(self, params=params)

    def to_meta(self) -> dict:
        return {"kind": "node", "m": self.m, "widths": list(self.widths),
                "slope": self.slope, "dt": self.dt, "substeps": self.substeps}

    @classmethod
    def from_meta(cls, params: ParamVector, meta: dict) -> "OdeFuncParams":
        return cls(params=params, m=int(meta["m"]),
                   widths=tuple(int(w) for w in meta["widths"]),
                   slope=float(meta["slope"]), dt=float(meta["dt"]),
                   substeps=int(meta["substeps"]))


def _rk4(seg, Z, t0, t1, substeps, widths_n, slope):
    if t1 <= t0:
        raise ValueError(f"need t1 > t0, got ({t0}, {t1})")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = (t1 - t0) / substeps
    for _ in range(substeps):
        k1 = _mlp(seg, Z, widths_n, slope)
        k2 = _mlp(seg, Z + (0.5 * h) * k1, widths_n, slope)
        k3 = _mlp(seg, Z + (0.5 * h) * k2, widths_n, slope)
        k4 = _mlp(seg, Z + h * k3, widths_n, slope)
        Z = Z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return Z


def init_node_params(m: int, widths=(512, 512, 512), seed: int = 0,
                     slope: float = 0.2, dt: float = 1.0,
                     substeps: int = 4, scale: float = 1.0) -> OdeFuncParams:
    """Fan-in initialized MLP; ``scale`` shrinks the output layer (gentle flows)."""
    rng = np.random.default_rng(seed)
    dims = [m, *widths, m]
    segs: dict[str, np.ndarray] = {}
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(d_in)
        segs[f"lin{i}_W"] = rng.uniform(-bound, bound, size=(d_out, d_in))
        segs[f"lin{i}_b"] = rng.uniform(-bound, bound, size=(d_out,))
    segs[f"lin{len(widths)}_W"] *= scale
    segs[f"lin{len(widths)}_b"] *= scale
    return OdeFuncParams(params=ParamVector.from_segments(segs), m=m,
                         widths=tuple(widths), slope=slope, dt=dt, substeps=substeps)


@dataclass(frozen=True)
class RezeroParams:
    """Five gated residual blocks; the gates start at zero (identity map)."""

    params: ParamVector
    m: int
    n_blocks: int = 5
    slope: float = 0.2
    dt: float = 1.0

    def advance(self, Z: np.ndarray, t0: float = 0.0, t1: float = 1.0) -> np.ndarray:
        del t0, t1  # discrete-time map: one application per dataset interval
        return _rezero_apply(self.params.segment, Z, self.n_blocks, self.slope)

    def advance_t(self, seg, Z_t, t0: float = 0.0, t1: float = 1.0):
        del t0, t1
        return _rezero_apply(seg, Z_t, self.n_blocks, self.slope)

    def with_params(self, params: ParamVector) -> "RezeroParams":
        return replace(self, params=params)

    def to_meta(self) -> dict:
        return {"kind": "rezero", "m": self.m, "n_blocks": self.n_blocks,
                "slope": self.slope, "dt": self.dt}

    @classmethod
    def from_meta(cls, params: ParamVector, meta: dict) -> "RezeroParams":
        return cls(params=params, m=int(meta["m"]), n_blocks=int(meta["n_blocks"]),
                   slope=float(meta["slope"]), dt=float(meta.get("dt", 1.0)))


def _rezero_apply(seg, Z, n_blocks, slope):
    for b in range(n_blocks):
        inner = Z @ seg(f"blk{b}_W").T + seg(f"blk{b}_b")
        if b < n_blocks - 1:
            inner = _leaky(inner, slope)
        Z = Z + seg(f"blk{b}_alpha") * inner
    return Z


def init_rezero_params(m: int, n_blocks: int = 5, seed: int = 0,
                       slope: float = 0.2, dt: float = 1.0) -> RezeroParams:
    rng = np.random.default_rng(seed)
    segs: dict[str, np.ndarray] = {}
    for b in range(n_blocks):
        bound = 1.0 / np.sqrt(m)
        segs[f"blk{b}_W"] = rng.uniform(-bound, bound, size=(m, m))
        segs[f"blk{b}_b"] = rng.uniform(-bound, bound, size=(m,))
        segs[f"blk{b}_alpha"] = np.zeros(())
    return RezeroParams(params=ParamVector.from_segments(segs), m=m,
                        n_blocks=n_blocks, slope=slope, dt=dt)


def ode_step(params: OdeFuncParams, z: LatentState, t0: float, t1: float,
             substeps: int | None = None) -> LatentState:
    """Advance one latent state with classic RK4 over (t0, t1)."""
    model = params if substeps is None else replace(params, substeps=substeps)
    out = model.advance(z.z[None, :], t0, t1)[0]
    if not np.all(np.isfinite(out)):
        raise ad.NonFiniteLossError("latent state diverged during integration")
    return LatentState(out, time_index=t1)


def rezero_step(params: RezeroParams, z: LatentState) -> LatentState:
    out = params.advance(z.z[None, :])[0]
    return LatentState(out, time_index=z.time_index + params.dt)


def rollout(model, z0: LatentState, s: int, dt: float | None = None) -> list[LatentState]:
    """Iterate the step operator s times, returning every intermediate state."""
    if s < 1:
        raise ValueError("rollout length must be >= 1")
    dt = model.dt if dt is None else dt
    states: list[LatentState] = []
    Z = z0.z[None, :]
    t = float(z0.time_index)
    for _ in range(s):
        Z = model.advance(Z, t, t + dt)
        t += dt
        if not np.all(np.isfinite(Z)):
            raise ad.NonFiniteLossError("latent rollout diverged")
        states.append(LatentState(Z[0].copy(), time_index=t))
    return states
