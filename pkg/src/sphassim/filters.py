"""Ensemble Kalman filters operating in latent space.

Members are stored as rows of an (N, m) matrix; anomalies carry the 1/sqrt(N-1)
scaling so that X^T X is the ensemble covariance.  No filter ever forms a
linearized observation operator: gains are built from ensemble cross-
covariances, which accommodates the nonlinear decode-then-observe map.

Methods: stochastic EnKF (perturbed observations), SEnKF (stochastically
estimated gain), DEnKF (deterministic half-gain anomaly update), ETKF
(ensemble transform with symmetric square root and mean-preserving random
rotation), and ETKF-Q (deviation-space transform with deterministic
model-error augmentation through a truncated eigendecomposition).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .sinr import AffineDecoder, LatentState
from .uncertainty import BackgroundSpec, ModelErrorEstimator
from .sphere import SamplingSet

__all__ = [
    "Ensemble",
    "FilterConfig",
    "ObservationBatch",
    "CycleRecord",
    "CycleResult",
    "forecast",
    "analyze_enkf",
    "analyze_senkf",
    "analyze_denkf",
    "analyze_etkf",
    "analyze_etkfq",
    "apply_inflation",
    "make_obs_op",
    "run_cycles",
    "ANALYZERS",
]


class Ensemble:
    """N latent members (rows) with cached mean/anomaly views."""

    __slots__ = ("members", "_mean")

    def __init__(self, members: np.ndarray, _mean: np.ndarray | None = None):
        members = np.ascontiguousarray(members, dtype=np.float64)
        if members.ndim != 2 or members.shape[0] < 2:
            raise ValueError("an ensemble needs at least two member rows")
        if not np.all(np.isfinite(members)):
            raise ValueError("ensemble members must be finite")
        self.members = members
        self._mean = members.mean(axis=0) if _mean is None else _mean

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self._mean

    @property
    def anomalies(self) -> np.ndarray:
        """(members - mean) / sqrt(N - 1); rows sum to ~0 by construction."""
        return (self.members - self._mean) / math.sqrt(self.n_members - 1)

    def covariance(self) -> np.ndarray:
        X = self.anomalies
        return X.T @ X

    def spread(self) -> float:
        """Root-mean ensemble variance per coordinate."""
        return float(np.sqrt(np.trace(self.covariance()) / self.dim))


@dataclass(frozen=True)
class FilterConfig:
    """One assimilation configuration (a single cell of the sweep grid)."""

    method: str = "etkf"             # enkf | senkf | denkf | etkf | etkfq
    n_members: int = 64
    inflation: float = 1.0
    sigma_m: float | ModelErrorEstimator = 0.01
    sigma_o: float = 0.1
    sigma_z_b: float | BackgroundSpec = 0.01
    seed: int = 0
    inflate_stage: str = "pre_analysis"   # or "pre_forecast"
    rotate_etkf: bool = True

    def __post_init__(self):
        if self.method not in ANALYZERS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.n_members < 2:
            raise ValueError("need at least two ensemble members")
        if self.inflation < 1.0:
            raise ValueError("inflation factor must be >= 1")
        if self.inflate_stage not in ("pre_analysis", "pre_forecast"):
            raise ValueError(f"unknown inflate_stage {self.inflate_stage!r}")


@dataclass(frozen=True)
class ObservationBatch:
    """Observed values at a set of locations, with their noise level.

    ``indices`` aligns y with the flat (point, channel) value vector of a
    snapshot decoded on ``sset``; None means every value is observed.
    """

    sset: SamplingSet
    y: np.ndarray
    noise_std: float
    indices: np.ndarray | None = None

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        if y.ndim != 1 or y.size < 1:
            raise ValueError("observations must form a non-empty vector")
        if not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite")
        if self.noise_std <= 0:
            raise ValueError("observation noise std must be positive")
        object.__setattr__(self, "y", y)
        if self.indices is not None:
            idx = np.ascontiguousarray(self.indices, dtype=np.int64)
            if idx.shape != y.shape:
                raise ValueError("indices must align with y")
            object.__setattr__(self, "indices", idx)


def make_obs_op(decoder: AffineDecoder, indices: np.ndarray | None):
    """Observation operator H(D(z)): decode members, pick the observed values."""
    if indices is None:
        return lambda Z: decoder.decode_members(Z)
    idx = np.asarray(indices, dtype=np.int64)
    return lambda Z: decoder.decode_members(Z)[:, idx]


def _noise_std_vector(model_noise, m: int) -> np.ndarray | None:
    if model_noise is None:
        return None
    if isinstance(model_noise, ModelErrorEstimator):
        return model_noise.std(m)
    arr = np.atleast_1d(np.asarray(model_noise, dtype=np.float64))
    if arr.size == 1:
        if arr[0] == 0.0:
            return None
        return np.full(m, float(arr[0]))
    if arr.shape != (m,):
        raise ValueError("model noise std must be scalar or length m")
    return arr


def forecast(ens: Ensemble, dynamics, model_noise, dt: float,
             rng: np.random.Generator, t0: float = 0.0) -> Ensemble:
    """Propagate every member and perturb with independent model-noise draws."""
    Z = dynamics.advance(ens.members, t0, t0 + dt)
    if not np.all(np.isfinite(Z)):
        raise FloatingPointError("ensemble forecast diverged")
    std = _noise_std_vector(model_noise, ens.dim)
    if std is not None:
        Z = Z + rng.standard_normal(Z.shape) * std
    return Ensemble(Z)


def apply_inflation(ens: Ensemble, factor: float) -> Ensemble:
    """Scale anomalies about the (exactly preserved) mean."""
    if factor == 1.0:
        return ens
    dev = ens.members - ens.mean
    return Ensemble(ens.mean + factor * dev, _mean=ens.mean)


def _obs_stats(ens: Ensemble, obs_op):
    Y_members = obs_op(ens.members)                      # (N, p)
    y_mean = Y_members.mean(axis=0)
    Y = (Y_members - y_mean) / math.sqrt(ens.n_members - 1)
    return Y_members, y_mean, Y


def _gain_transpose(X: np.ndarray, Y: np.ndarray, sigma_o: float) -> np.ndarray:
    """K^T = (P_yy + sigma^2 I)^{-1} P_xy^T via a symmetric factorization."""
    p = Y.shape[1]
    C = Y.T @ Y + (sigma_o ** 2) * np.eye(p)
    L = np.linalg.cholesky(C)                            # aborts if not PD
    Pxy_t = Y.T @ X                                      # (p, m)
    tmp = np.linalg.solve(L, Pxy_t)
    return np.linalg.solve(L.T, tmp)                     # (p, m)


def analyze_enkf(ens: Ensemble, obs: ObservationBatch, obs_op,
                 rng: np.random.Generator) -> Ensemble:
    """Stochastic EnKF: perturbed observations, ensemble-statistics gain."""
    X = ens.anomalies
    Y_members, _, Y = _obs_stats(ens, obs_op)
    Kt = _gain_transpose(X, Y, obs.noise_std)
    eps = rng.standard_normal(Y_members.shape) * obs.noise_std
    D = obs.y[None, :] + eps - Y_members                 # per-member innovations
    return Ensemble(ens.members + D @ Kt)


def analyze_senkf(ens: Ensemble, obs: ObservationBatch, obs_op,
                  rng: np.random.Generator) -> Ensemble:
    """Stochastic-gain EnKF: the noise enters the gain estimate itself.

    y_p^j = H(z^j) - eps^j; K = X Y_p^T (Y_p Y_p^T)^{-1}.  With fewer members
    than observations the Gram matrix is rank deficient and the gain is taken
    in the least-squares (pseudoinverse) sense.
    """
    X = ens.anomalies
    Y_members, _, _ = _obs_stats(ens, obs_op)
    eps = rng.standard_normal(Y_members.shape) * obs.noise_std
    Yp_members = Y_members - eps
    yp_mean = Yp_members.mean(axis=0)
    Yp = (Yp_members - yp_mean) / math.sqrt(ens.n_members - 1)
    G = Yp.T @ Yp                                        # (p, p), rank <= N-1
    Pxy_t = Yp.T @ X
    Kt = np.linalg.pinv(G, rcond=1e-10, hermitian=True) @ Pxy_t
    D = obs.y[None, :] - Yp_members                      # = y + eps - H(z)
    return Ensemble(ens.members + D @ Kt)


def analyze_denkf(ens: Ensemble, obs: ObservationBatch, obs_op,
                  rng: np.random.Generator | None = None) -> Ensemble:
    """Deterministic EnKF: full-gain mean update, half-gain anomaly update."""
    X = ens.anomalies
    _, y_mean, Y = _obs_stats(ens, obs_op)
    Kt = _gain_transpose(X, Y, obs.noise_std)
    mean_a = ens.mean + (obs.y - y_mean) @ Kt
    X_a = X - 0.5 * (Y @ Kt)
    n = ens.n_members
    return Ensemble(mean_a + math.sqrt(n - 1) * X_a)


def _mean_preserving_rotation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random orthogonal U with U 1 = 1, via a Householder basis of 1-perp."""
    v = -np.ones(n) / math.sqrt(n)
    v[0] += 1.0
    v /= np.linalg.norm(v)
    H = np.eye(n) - 2.0 * np.outer(v, v)                 # maps e1 -> 1/sqrt(n)
    Q = H[:, 1:]                                         # orthonormal basis of 1-perp
    A = rng.standard_normal((n - 1, n - 1))
    Om, R = np.linalg.qr(A)
    Om = Om * np.sign(np.diag(R))                        # fix signs: unique QR
    return np.outer(np.ones(n), np.ones(n)) / n + Q @ Om @ Q.T


def analyze_etkf(ens: Ensemble, obs: ObservationBatch, obs_op,
                 rng: np.random.Generator | None = None,
                 rotate: bool = True) -> Ensemble:
    """Ensemble transform KF with symmetric-square-root anomaly update.

    T = (I_N + S^T S)^{-1} is applied through the SVD of the scaled
    observation anomalies, so the cost is governed by min(N, p).  The analysis
    anomalies are X T^{1/2} U with a seeded mean-preserving rotation U.
    """
    n = ens.n_members
    X = ens.anomalies
    _, y_mean, Y = _obs_stats(ens, obs_op)
    S_rows = Y / obs.noise_std                           # (N, p); paper's S^T
    U_s, s, Vt = np.linalg.svd(S_rows, full_matrices=False)
    delta = (obs.y - y_mean) / obs.noise_std
    w = U_s @ ((s / (1.0 + s * s)) * (Vt @ delta))
    mean_a = ens.mean + w @ X
    shrink = 1.0 - 1.0 / np.sqrt(1.0 + s * s)
    X_a = X - U_s @ (shrink[:, None] * (U_s.T @ X))      # T^{1/2} X
    if rotate:
        if rng is None:
            raise ValueError("a random generator is required when rotate=True")
        U_rot = _mean_preserving_rotation(n, rng)
        X_a = U_rot.T @ X_a
    return Ensemble(mean_a + math.sqrt(n - 1) * X_a)


def _householder_complement(n: int) -> np.ndarray:
    """The reflection vector v with H = I - 2 v v^T sending e1 to 1/sqrt(n)."""
    v = -np.ones(n) / math.sqrt(n)
    v[0] += 1.0
    return v / np.linalg.norm(v)


def analyze_etkfq(ens: Ensemble, obs: ObservationBatch, obs_op,
                  model_noise=None,
                  rng: np.random.Generator | None = None) -> Ensemble:
    """Deviation-space transform filter with deterministic model-error handling.

    Forecast-stage augmentation: the deviation covariance plus the model-error
    covariance is eigendecomposed and its leading N-1 eigenpairs become the new
    deviations; the analysis then runs in deviation coordinates with
    T = (I_{N-1} + S^T S)^{-1}.
    """
    del rng  # fully deterministic
    n, m = ens.n_members, ens.dim
    v = _householder_complement(n)

    def uT(A):          # U^T A for the (n, n-1) Householder complement basis
        return (A - 2.0 * np.outer(v, v @ A))[1:]

    def u_mul(B):       # U B
        B0 = np.vstack([np.zeros((1, B.shape[1])), B])
        return B0 - 2.0 * np.outer(v, v @ B0)

    sq = math.sqrt(n - 1)
    mean = ens.mean
    Dev = uT(ens.members) / sq                           # (n-1, m): deviations^T
    std = _noise_std_vector(model_noise, m)
    if std is not None:
        C = Dev.T @ Dev + np.diag(std * std)
        eigval, eigvec = np.linalg.eigh(C)
        order = np.argsort(eigval)[::-1][:min(n - 1, m)]
        lam = np.sqrt(np.maximum(eigval[order], 0.0))
        Dev_new = np.zeros_like(Dev)
        Dev_new[:order.size] = (eigvec[:, order] * lam).T
        Dev = Dev_new
        members = mean + sq * u_mul(Dev)                 # rebuilt background
    else:
        members = ens.members
    bg = Ensemble(members, _mean=mean)

    Y_members = obs_op(bg.members)
    y_mean = Y_members.mean(axis=0)
    Dy = uT(Y_members) / sq                              # (n-1, p)
    S_rows = Dy / obs.noise_std
    U_s, s, Vt = np.linalg.svd(S_rows, full_matrices=False)
    delta = (obs.y - y_mean) / obs.noise_std
    w = U_s @ ((s / (1.0 + s * s)) * (Vt @ delta))       # (n-1,)
    mean_a = mean + w @ Dev
    shrink = 1.0 - 1.0 / np.sqrt(1.0 + s * s)
    Dev_a = Dev - U_s @ (shrink[:, None] * (U_s.T @ Dev))
    members_a = mean_a + sq * u_mul(Dev_a)
    return Ensemble(members_a, _mean=mean_a)


ANALYZERS = {
    "enkf": analyze_enkf,
    "senkf": analyze_senkf,
    "denkf": analyze_denkf,
    "etkf": analyze_etkf,
    "etkfq": analyze_etkfq,
}


@dataclass(frozen=True)
class CycleRecord:
    cycle: int
    rmse_background: float
    rmse_analysis: float
    spread: float


@dataclass
class CycleResult:
    analyses: list[LatentState] = field(default_factory=list)
    records: list[CycleRecord] = field(default_factory=list)
    final: Ensemble | None = None


def _background_spec(cfg: FilterConfig, m: int) -> BackgroundSpec:
    if isinstance(cfg.sigma_z_b, BackgroundSpec):
        return cfg.sigma_z_b
    s = float(cfg.sigma_z_b)
    return BackgroundSpec(sigma_x_b=math.nan, cov_z_b=(s * s) * np.eye(m))


def run_cycles(z0: LatentState, dynamics, decoder: AffineDecoder,
               obs_stream, cfg: FilterConfig, truth=None,
               rmse_fn=None, sink=None, diag_decoder: AffineDecoder | None = None) -> CycleResult:
    """The full assimilation loop: seed, then forecast / inflate / analyze.

    ``obs_stream`` yields one :class:`ObservationBatch` per cycle (cycle k
    observes the state at time k+1); ``decoder`` supplies the observation
    operator H(D(z)).  Optional ``truth`` (array of flat truth values per
    cycle, aligned with ``diag_decoder``'s sampling set, which defaults to
    ``decoder``) enables RMSE diagnostics through
    ``rmse_fn(decoded_flat, truth_flat)``.  ``sink`` receives each CycleRecord
    as soon as it exists, so partial results survive a mid-run failure.
    """
    rng = np.random.default_rng(cfg.seed)
    spec = _background_spec(cfg, z0.z.size)
    ens = Ensemble(spec.sample(z0.z, cfg.n_members, rng))
    result = CycleResult()
    t = float(z0.time_index)
    model_noise = cfg.sigma_m
    diag_decoder = decoder if diag_decoder is None else diag_decoder
    try:
        for k, obs in enumerate(obs_stream):
            if cfg.inflate_stage == "pre_forecast":
                ens = apply_inflation(ens, cfg.inflation)
            noise = None if cfg.method == "etkfq" else model_noise
            ens = forecast(ens, dynamics, noise, dynamics.dt, rng, t0=t)
            t += dynamics.dt
            if cfg.inflate_stage == "pre_analysis":
                ens = apply_inflation(ens, cfg.inflation)
            obs_op = make_obs_op(decoder, obs.indices)
            rmse_b = _diag_rmse(diag_decoder, ens.mean, truth, k, rmse_fn)
            if cfg.method == "etkf":
                ens = analyze_etkf(ens, obs, obs_op, rng, rotate=cfg.rotate_etkf)
            elif cfg.method == "etkfq":
                ens = analyze_etkfq(ens, obs, obs_op, model_noise)
            else:
                ens = ANALYZERS[cfg.method](ens, obs, obs_op, rng)
            rmse_a = _diag_rmse(diag_decoder, ens.mean, truth, k, rmse_fn)
            rec = CycleRecord(cycle=k, rmse_background=rmse_b,
                              rmse_analysis=rmse_a, spread=ens.spread())
            result.records.append(rec)
            if sink is not None:
                sink(rec)
            result.analyses.append(LatentState(ens.mean.copy(), time_index=t))
    finally:
        result.final = ens
    return result


def _diag_rmse(decoder, z_mean, truth, k, rmse_fn) -> float:
    if truth is None or rmse_fn is None or k >= len(truth):
        return math.nan
    decoded = decoder.decode_members(z_mean[None, :])[0]
    return float(rmse_fn(decoded, np.asarray(truth[k]).reshape(-1)))
