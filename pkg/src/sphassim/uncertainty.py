"""Data-driven uncertainty: model-error covariance fits and background propagation.

The surrogate model's error covariance is assumed diagonal and
time-independent, parameterized through log-standard deviations d so that
Sigma = diag(exp(2 d)).  The maximum-likelihood fit has a closed form (the
per-coordinate mean squared residual); a gradient-descent route on the same
negative log-likelihood exists for cross-checking.

The latent background covariance propagates isotropic physical noise through
the Moore-Penrose pseudoinverse of the decoder Jacobian: since the
pseudoinverse is a left inverse wherever the Jacobian has full column rank, it
stands in for the (implicit, optimization-defined) encoder Jacobian.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .sinr import AffineDecoder, SinrParams, decoder_jacobian

VAR_FLOOR = 1e-12

__all__ = [
    "ModelErrorEstimator",
    "BackgroundSpec",
    "fit_mle",
    "fit_mle_gd",
    "mle_loss_program",
    "latent_background_cov",
]


@dataclass(frozen=True)
class ModelErrorEstimator:
    """Diagonal (or scalar) model-error covariance via log-std entries."""

    kind: str                 # "scalar" | "diagonal"
    d: np.ndarray             # log standard deviations (1 or m entries)

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.d, dtype=np.float64))
        if self.kind not in ("scalar", "diagonal"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.kind == "scalar" and d.size != 1:
            raise ValueError("scalar estimator must have a single entry")
        if not np.all(np.isfinite(d)):
            raise ValueError("log-std entries must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    def std(self, m: int) -> np.ndarray:
        s = np.exp(self.d)
        return np.full(m, s[0]) if self.kind == "scalar" else s

    def var(self, m: int) -> np.ndarray:
        return self.std(m) ** 2

    def to_meta(self) -> dict:
        return {"kind": "model-error", "variant": self.kind}

    @classmethod
    def from_params(cls, d: np.ndarray, meta: dict) -> "ModelErrorEstimator":
        return cls(kind=meta["variant"], d=d)


def _residuals(pairs, dynamics) -> np.ndarray:
    """One-step prediction residuals G(z_k) - z_{k+1} as a (K, m) array."""
    if isinstance(pairs, tuple) and len(pairs) == 2:
        z_from, z_to = (np.asarray(p, dtype=np.float64) for p in pairs)
    else:
        z_from = np.asarray([p[0].z if hasattr(p[0], "z") else p[0] for p in pairs])
        z_to = np.asarray([p[1].z if hasattr(p[1], "z") else p[1] for p in pairs])
    if z_from.shape != z_to.shape or z_from.ndim != 2:
        raise ValueError("latent pairs must form two (K, m) stacks")
    if z_from.shape[0] < 2:
        raise ValueError("need at least two latent pairs")
    pred = dynamics.advance(z_from, 0.0, dynamics.dt)
    return pred - z_to


def fit_mle(pairs, dynamics, kind: str = "diagonal") -> ModelErrorEstimator:
    """Maximum-likelihood fit of the diagonal/scalar model-error covariance.

    Closed form: exp(2 d_j) = mean_k r_{k,j}^2 (pooled over coordinates for the
    scalar kind), floored at 1e-12 to keep degenerate residuals invertible.
    """
    r = _residuals(pairs, dynamics)
    if kind == "diagonal":
        var = np.maximum((r * r).mean(axis=0), VAR_FLOOR)
        return ModelErrorEstimator(kind="diagonal", d=0.5 * np.log(var))
    if kind == "scalar":
        var = max(float((r * r).mean()), VAR_FLOOR)
        return ModelErrorEstimator(kind="scalar", d=np.array([0.5 * math.log(var)]))
    raise ValueError(f"unknown estimator kind {kind!r}")


def mle_loss_program(residuals: np.ndarray, kind: str = "diagonal"):
    """The negative log-likelihood as a differentiable program over {"d": ...}.

    loss = sum_k ( sum_j d_j + 0.5 || exp(-d) * r_k ||^2 ), with d broadcast
    across coordinates for the scalar kind.
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    K, m = residuals.shape

    def program(leaves):
        d = leaves["d"]
        trace_term = ad.tsum(d) * (float(K) * (m if kind == "scalar" else 1.0))
        scaled = ad.exp(-d) * ad.constant(residuals)
        return trace_term + 0.5 * ad.tsum(ad.square(scaled))

    return program


def fit_mle_gd(pairs, dynamics, kind: str = "diagonal", steps: int = 2000,
               lr: float = 5e-2) -> ModelErrorEstimator:
    """Gradient-descent route to the same MLE; used to cross-check the closed form."""
    r = _residuals(pairs, dynamics)
    program = mle_loss_program(r, kind)
    n = 1 if kind == "scalar" else r.shape[1]
    pv = ParamVector.from_segments({"d": np.zeros(n)})
    state = ad.AdamState.init(pv)
    for _ in range(steps):
        rep = ad.value_and_grad(program, pv)
        pv, state = ad.adam_step(state, pv, rep.grad, lr)
    return ModelErrorEstimator(kind=kind, d=pv.values.copy())


@dataclass(frozen=True)
class BackgroundSpec:
    """Physical background noise level and the induced latent covariance."""

    sigma_x_b: float
    cov_z_b: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cov_z_b, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("cov_z_b must be square")
        if not np.allclose(c, c.T, atol=1e-10):
            raise ValueError("cov_z_b must be symmetric")
        eig = np.linalg.eigvalsh(c)
        if eig.min() < -1e-10 * max(1.0, eig.max()):
            raise ValueError("cov_z_b must be positive semidefinite")
        c.setflags(write=False)
        object.__setattr__(self, "cov_z_b", c)

    @property
    def m(self) -> int:
        return self.cov_z_b.shape[0]

    def sample(self, mean: np.ndarray, n: int, rng) -> np.ndarray:
        """Draw n members from N(mean, cov_z_b)."""
        eigval, eigvec = np.linalg.eigh(self.cov_z_b)
        root = eigvec * np.sqrt(np.maximum(eigval, 0.0))
        return mean[None, :] + rng.standard_normal((n, self.m)) @ root.T

    def to_csv(self, path) -> None:
        np.savetxt(path, self.cov_z_b, delimiter=",")


def latent_background_cov(decoder, z_b, sset=None, sigma_x_b: float = 0.1,
                          rcond: float = 1e-10) -> BackgroundSpec:
    """Propagate isotropic physical background noise into latent space.

    cov = J+ (sigma^2 I) (J+)^T with J+ the SVD pseudoinverse of the decoder
    Jacobian at the encoded background (singular values below rcond * s_max are
    dropped; a warning reports rank deficiency).  ``decoder`` may be decoder
    parameters, a materialized :class:`AffineDecoder`, or a raw Jacobian.
    """
    if isinstance(decoder, SinrParams):
        if sset is None:
            raise ValueError("a sampling set is required with raw decoder parameters")
        jac = decoder_jacobian(decoder, z_b, sset)
    elif isinstance(decoder, AffineDecoder):
        jac = decoder.jac
    else:
        jac = np.asarray(decoder, dtype=np.float64)
    if jac.ndim != 2:
        raise ValueError("expected a 2-d Jacobian")
    m = jac.shape[1]
    u, s, vt = np.linalg.svd(jac, full_matrices=False)
    keep = s > rcond * s[0]
    rank = int(keep.sum())
    if rank < m:
        warnings.warn(f"decoder Jacobian is rank deficient ({rank} < {m}); "
                      "the background covariance is degenerate along the null space",
                      RuntimeWarning, stacklevel=2)
    inv_s = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    # J+ = V S^-1 U^T ; cov = sigma^2 J+ J+^T = sigma^2 V S^-2 V^T
    v = vt.T
    cov = (sigma_x_b ** 2) * (v * inv_s ** 2) @ v.T
    cov = 0.5 * (cov + cov.T)
    return BackgroundSpec(sigma_x_b=float(sigma_x_b), cov_z_b=cov)
