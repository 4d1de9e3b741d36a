"""Grids, trajectory datasets, synthetic twin data, and jet initial conditions.

Datasets are (traj, time, lon, lat, channel) tensors riding on a cell-centered
latitude-longitude grid whose point order matches the C-order flattening of
the (lon, lat) axes.  Trajectory data is ingested from LTSR files; this module
only *generates* the solid-body-rotation twin dataset and the balanced-jet
initial condition (no time integrator lives here).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .ltsr import load_ltsr, save_ltsr
from .sinr import FieldSnapshot
from .sphere import SamplingSet, sph_harm_basis

EARTH_RADIUS = 6.37122e6
EARTH_OMEGA = 7.292e-5
EARTH_GRAVITY = 9.80616

__all__ = [
    "Dataset",
    "make_latlon_grid",
    "make_staggered_grid",
    "gen_synthetic_rotation",
    "gen_galewsky_ic",
    "rotation_coeff_matrix",
    "save_snapshot",
    "load_snapshot",
]


def make_latlon_grid(nlon: int = 128, nlat: int = 64) -> SamplingSet:
    """Regular latitude-longitude grid at cell centers, lon-major point order.

    Point index i*nlat + j carries (lon_i, lat_j), matching the C-order
    flattening of a (lon, lat) value array.
    """
    if nlon < 1 or nlat < 1:
        raise ValueError("grid dimensions must be positive")
    lon = 2.0 * math.pi * (np.arange(nlon) + 0.5) / nlon
    lat = -0.5 * math.pi + math.pi * (np.arange(nlat) + 0.5) / nlat
    theta = 0.5 * math.pi - lat
    return SamplingSet(np.tile(theta, nlon), np.repeat(lon, nlat),
                       grid_tag=f"latlon-{nlon}x{nlat}", validate=False)


def _grid_shape(tag: str) -> tuple[int, int]:
    if not tag.startswith("latlon-"):
        raise ValueError(f"not a latlon grid: {tag!r}")
    nlon, nlat = tag.removeprefix("latlon-").split("x")
    return int(nlon), int(nlat)


def make_staggered_grid(base: SamplingSet) -> SamplingSet:
    """Offset the base grid by half a cell in both axes.

    Latitude rows that would land on a pole are dropped (a pole point repeated
    at every longitude would be degenerate), so the staggered grid carries
    nlon * (nlat - 1) points.  The result provably shares no point with the
    base grid.
    """
    nlon, nlat = _grid_shape(base.grid_tag)
    lon = (2.0 * math.pi * (np.arange(nlon) + 1.0) / nlon) % (2.0 * math.pi)
    lat = -0.5 * math.pi + math.pi * (np.arange(1, nlat)) / nlat
    theta = 0.5 * math.pi - lat
    out = SamplingSet(np.tile(theta, nlon), np.repeat(lon, nlat - 1),
                      grid_tag=f"staggered-{nlon}x{nlat}", validate=False)
    if out.intersects(base, tol=1e-9):
        raise AssertionError("staggered grid unexpectedly intersects the base grid")
    return out


@dataclass(frozen=True)
class Dataset:
    """A (traj, time, lon, lat, channel) tensor plus its grid and normalization."""

    values: np.ndarray
    grid: SamplingSet
    dt: float = 1.0
    channel_names: tuple[str, ...] = ()
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 5:
            raise ValueError("dataset tensor must be 5-d (traj, time, lon, lat, ch)")
        if v.shape[2] * v.shape[3] != len(self.grid):
            raise ValueError("grid size does not match the tensor")
        names = tuple(self.channel_names) or tuple(f"ch{i}" for i in range(v.shape[4]))
        if len(names) != v.shape[4]:
            raise ValueError("channel_names length mismatch")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "channel_names", names)

    @property
    def n_traj(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[4]

    @property
    def flat(self) -> np.ndarray:
        """View of shape (traj, time, |grid|, channels)."""
        t, k, nlon, nlat, c = self.values.shape
        return self.values.reshape(t, k, nlon * nlat, c)

    def snapshot(self, traj: int, k: int) -> FieldSnapshot:
        return FieldSnapshot(self.grid, self.flat[traj, k], self.channel_names)

    def normalize(self) -> "Dataset":
        """Shift/scale each channel to zero mean and unit standard deviation."""
        axes = (0, 1, 2, 3)
        mean = self.values.mean(axis=axes)
        std = self.values.std(axis=axes)
        if np.any(std <= 0.0):
            raise ValueError("cannot normalize a constant channel")
        return replace(self, values=(self.values - mean) / std,
                       norm_mean=mean, norm_std=std)

    def denormalize(self, values: np.ndarray | None = None) -> np.ndarray:
        """Map normalized values (any (..., c) array) back to physical units."""
        if self.norm_mean is None or self.norm_std is None:
            raise ValueError("dataset carries no normalization record")
        v = self.values if values is None else values
        return v * self.norm_std + self.norm_mean

    def save(self, path) -> None:
        nlon, nlat = self.values.shape[2], self.values.shape[3]
        meta = {
            "kind": "dataset", "dt": self.dt, "nlon": nlon, "nlat": nlat,
            "channel_names": list(self.channel_names),
            "norm_mean": None if self.norm_mean is None else list(self.norm_mean),
            "norm_std": None if self.norm_std is None else list(self.norm_std),
        }
        save_ltsr(self.values, path, meta=meta)

    @classmethod
    def load(cls, path) -> "Dataset":
        f = load_ltsr(path)
        meta = f.meta
        grid = make_latlon_grid(int(meta["nlon"]), int(meta["nlat"]))
        mean = meta.get("norm_mean")
        std = meta.get("norm_std")
        return cls(values=f.tensor, grid=grid, dt=float(meta.get("dt", 1.0)),
                   channel_names=tuple(meta.get("channel_names", ())),
                   norm_mean=None if mean is None else np.asarray(mean),
                   norm_std=None if std is None else np.asarray(std))


def _mode_pairs(ell_max: int) -> list[tuple[int, int]]:
    return [(ell, m) for ell in range(ell_max + 1) for m in range(-ell, ell + 1)]


def rotation_coeff_matrix(coeffs: np.ndarray, pairs, angle: float) -> np.ndarray:
    """Rotate harmonic coefficients by a longitude shift.

    A field advected by solid-body rotation, f_t(lon, lat) = f_0(lon - a, lat),
    has coefficients that mix within each (l, m)/(l, -m) pair:

        c'_{l,m}  = cos(m a) c_{l,m} - sin(m a) c_{l,-m}
        c'_{l,-m} = sin(m a) c_{l,m} + cos(m a) c_{l,-m}

    ``coeffs`` is indexed like ``pairs``; returns the rotated copy.
    """
    index = {pair: i for i, pair in enumerate(pairs)}
    out = coeffs.copy()
    for (ell, m), i in index.items():
        if m <= 0:
            continue
        j = index[(ell, -m)]
        ca, sa = math.cos(m * angle), math.sin(m * angle)
        out[i] = ca * coeffs[i] - sa * coeffs[j]
        out[j] = sa * coeffs[i] + ca * coeffs[j]
    return out


def gen_synthetic_rotation(seed: int, n_traj: int = 20, n_steps: int = 240,
                           ell_max: int = 6, omega: float = 2.0 * math.pi / 96.0,
                           nlon: int = 64, nlat: int = 32,
                           dt: float = 1.0) -> Dataset:
    """Band-limited random fields advected by solid-body rotation.

    The spectral dynamics is an exact block rotation of the coefficients, so
    encoding, surrogate dynamics, and assimilation all have analytic oracles.
    One full revolution takes 2*pi/(omega*dt) steps.
    """
    grid = make_latlon_grid(nlon, nlat)
    pairs = _mode_pairs(ell_max)
    basis = sph_harm_basis(pairs, grid)                # (modes, n)
    rng = np.random.default_rng(seed)
    values = np.empty((n_traj, n_steps, nlon, nlat, 1))
    for tr in range(n_traj):
        scale = np.array([1.0 / math.sqrt(2 * ell + 1) for ell, _ in pairs])
        c0 = rng.normal(size=len(pairs)) * scale
        for k in range(n_steps):
            ck = rotation_coeff_matrix(c0, pairs, omega * k * dt)
            values[tr, k, :, :, 0] = (ck @ basis).reshape(nlon, nlat)
    return Dataset(values=values, grid=grid, dt=dt, channel_names=("field",))


_PHI0 = math.pi / 7.0
_PHI1 = 0.5 * math.pi - _PHI0
_EN = math.exp(-4.0 / (_PHI1 - _PHI0) ** 2)


def _jet_profile(u_m: float, lat: np.ndarray) -> np.ndarray:
    """Symmetric zonal jets: the bump profile applied to |latitude|."""
    a = np.abs(lat)
    u = np.zeros_like(lat)
    inside = (a > _PHI0) & (a < _PHI1)
    ai = a[inside]
    u[inside] = (u_m / _EN) * np.exp(1.0 / ((ai - _PHI0) * (ai - _PHI1)))
    return u


def gen_galewsky_ic(u_m: float, grid: SamplingSet) -> FieldSnapshot:
    """Balanced mid-latitude jet initial condition (zonal wind and thickness).

    The thickness integrates the zonal balance relation with composite Simpson
    on a fine latitude mesh; the integration constant pins the cos-weighted
    global mean of h at 1e4.  A localized bump perturbs the balanced field.
    """
    if not 60.0 < u_m < 80.0:
        raise ValueError(f"u_m must lie in (60, 80), got {u_m}")
    n_int = 4096                                      # Simpson intervals
    lat_f = np.linspace(-0.5 * math.pi, 0.5 * math.pi, n_int + 1)
    u_f = _jet_profile(u_m, lat_f)
    f_cor = 2.0 * EARTH_OMEGA * np.sin(lat_f)
    integrand = EARTH_RADIUS * u_f * (f_cor + (u_f / EARTH_RADIUS) * np.tan(lat_f))
    gh = -_cumulative_simpson(integrand, lat_f)
    # fix the constant from the cos-weighted global mean of h
    w = np.cos(lat_f)
    mean_gh = _simpson(gh * w, lat_f) / _simpson(w, lat_f)
    gh += EARTH_GRAVITY * 1.0e4 - mean_gh
    h_f = gh / EARTH_GRAVITY

    lat_g = grid.lat
    u = _jet_profile(u_m, lat_g)
    h = np.interp(lat_g, lat_f, h_f)
    # localized bump, longitude wrapped to (-pi, pi]
    lon = np.where(grid.lon > math.pi, grid.lon - 2.0 * math.pi, grid.lon)
    h_hat, alpha, beta, phi2 = 120.0, 1.0 / 3.0, 1.0 / 15.0, math.pi / 4.0
    h = h + h_hat * np.exp(-((lon / alpha) ** 2) - (((phi2 - lat_g) / beta) ** 2)) * np.cos(lat_g)
    return FieldSnapshot(grid, np.stack([u, h], axis=1), ("u", "h"))


def save_snapshot(snap: FieldSnapshot, path) -> None:
    """Persist a snapshot on a latlon grid as an (nlon, nlat, c) tensor."""
    nlon, nlat = _grid_shape(snap.sset.grid_tag)
    tensor = snap.values.reshape(nlon, nlat, snap.n_channels)
    save_ltsr(tensor, path, meta={"kind": "snapshot", "nlon": nlon, "nlat": nlat,
                                  "channel_names": list(snap.channel_names)})


def load_snapshot(path) -> FieldSnapshot:
    f = load_ltsr(path)
    nlon, nlat = int(f.meta["nlon"]), int(f.meta["nlat"])
    grid = make_latlon_grid(nlon, nlat)
    values = f.tensor.reshape(nlon * nlat, -1)
    return FieldSnapshot(grid, values, tuple(f.meta.get("channel_names", ())))


def _simpson(y: np.ndarray, x: np.ndarray) -> float:
    h = x[1] - x[0]
    n = len(x) - 1
    return float(h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum())) if n % 2 == 0 else _trap(y, x)


def _trap(y: np.ndarray, x: np.ndarray) -> float:
    return float(np.trapz(y, x))


def _cumulative_simpson(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Cumulative integral with Simpson pairs; odd endpoints use a trapezoid patch."""
    h = x[1] - x[0]
    out = np.zeros_like(y)
    pair = h / 3.0 * (y[:-2:2] + 4.0 * y[1:-1:2] + y[2::2])
    out[2::2] = np.cumsum(pair)
    out[1::2] = out[0:-1:2] + 0.5 * h * (y[0:-1:2] + y[1::2])
    return out
