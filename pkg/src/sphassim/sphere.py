"""Real spherical harmonics, associated Legendre functions and quadrature on S^2.

Everything in this module is a pure function of immutable inputs.  Values are
float64 throughout; harmonics are the real orthonormal basis obtained from the
complex harmonics

    Y_{l,m}(theta, phi) = sqrt((2l+1)/(4pi) (l-m)!/(l+m)!) P_l^m(cos theta) e^{i m phi}

via the usual real/imaginary-part combination.  P_l^m carries the
Condon-Shortley phase; negative orders follow
P_l^{-m} = (-1)^m (l-m)!/(l+m)! P_l^m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi
FOUR_PI = 4.0 * math.pi

__all__ = [
    "SphericalPoint",
    "SamplingSet",
    "SphCoeffs",
    "assoc_legendre",
    "real_sph_harm",
    "sph_harm_basis",
    "gauss_legendre_grid",
    "project_field",
    "synthesize_field",
]


@dataclass(frozen=True)
class SphericalPoint:
    """A point on the unit sphere: polar angle theta in [0, pi], azimuth in [0, 2pi)."""

    theta: float
    phi_az: float

    def __post_init__(self):
        if not 0.0 <= self.theta <= math.pi:
            raise ValueError(f"theta must lie in [0, pi], got {self.theta}")
        phi = float(self.phi_az) % TWO_PI
        # x % 2pi can round up to exactly 2pi for tiny negative x
        object.__setattr__(self, "phi_az", 0.0 if phi >= TWO_PI else phi)

    @property
    def lat(self) -> float:
        """Geographic latitude in radians (pi/2 - theta)."""
        return 0.5 * math.pi - self.theta

    @property
    def lon(self) -> float:
        """Geographic longitude in radians, alias for the azimuth."""
        return self.phi_az


def _angular_dist(t1, p1, t2, p2):
    c = np.cos(t1) * np.cos(t2) + np.sin(t1) * np.sin(t2) * np.cos(p1 - p2)
    return np.arccos(np.clip(c, -1.0, 1.0))


class SamplingSet:
    """An ordered set of points on the sphere, optionally with quadrature weights.

    Backed by flat float64 arrays for speed; the arrays are frozen after
    construction so instances are safe to share across threads.  Weights, when
    present, are strictly positive and (for full quadrature grids) sum to 4pi.
    """

    __slots__ = ("theta", "phi", "quad_weights", "grid_tag")

    def __init__(self, theta, phi, quad_weights=None, grid_tag="", validate=True):
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        phi = np.ascontiguousarray(phi, dtype=np.float64) % TWO_PI
        phi[phi >= TWO_PI] = 0.0
        if theta.ndim != 1 or theta.shape != phi.shape:
            raise ValueError("theta and phi must be 1-d arrays of equal length")
        if validate:
            if theta.size and (theta.min() < 0.0 or theta.max() > math.pi):
                raise ValueError("theta values must lie in [0, pi]")
            self._check_duplicates(theta, phi)
        if quad_weights is not None:
            quad_weights = np.ascontiguousarray(quad_weights, dtype=np.float64)
            if quad_weights.shape != theta.shape:
                raise ValueError("quad_weights length mismatch")
            if validate and quad_weights.size and quad_weights.min() <= 0.0:
                raise ValueError("quadrature weights must be strictly positive")
            quad_weights.setflags(write=False)
        theta.setflags(write=False)
        phi.setflags(write=False)
        self.theta = theta
        self.phi = phi
        self.quad_weights = quad_weights
        self.grid_tag = str(grid_tag)

    @staticmethod
    def _check_duplicates(theta, phi, tol=1e-12):
        # exact duplicates become adjacent under a lexicographic sort, so an
        # adjacent-pair scan is enough at O(n log n)
        if theta.size < 2:
            return
        order = np.lexsort((phi, theta))
        t, p = theta[order], phi[order]
        d = _angular_dist(t[:-1], p[:-1], t[1:], p[1:])
        if d.size and d.min() < tol:
            raise ValueError("sampling set contains duplicate points")

    @classmethod
    def from_points(cls, points, quad_weights=None, grid_tag=""):
        theta = np.array([p.theta for p in points])
        phi = np.array([p.phi_az for p in points])
        return cls(theta, phi, quad_weights=quad_weights, grid_tag=grid_tag)

    def __len__(self) -> int:
        return self.theta.size

    def point(self, i: int) -> SphericalPoint:
        return SphericalPoint(float(self.theta[i]), float(self.phi[i]))

    @property
    def points(self) -> list[SphericalPoint]:
        return [self.point(i) for i in range(len(self))]

    @property
    def lat(self) -> np.ndarray:
        return 0.5 * math.pi - self.theta

    @property
    def lon(self) -> np.ndarray:
        return self.phi

    def subset(self, idx, grid_tag=None) -> "SamplingSet":
        """Sub-sampling drops quadrature weights (they no longer tile the sphere)."""
        idx = np.asarray(idx)
        tag = self.grid_tag if grid_tag is None else grid_tag
        return SamplingSet(self.theta[idx], self.phi[idx], grid_tag=tag, validate=False)

    def intersects(self, other: "SamplingSet", tol=1e-9) -> bool:
        """True when any point of *other* coincides with a point of self within tol."""
        # sort-merge on theta keeps this O((n+m) log(n+m)) instead of pairwise
        t = np.concatenate([self.theta, other.theta])
        p = np.concatenate([self.phi, other.phi])
        owner = np.concatenate([np.zeros(len(self), bool), np.ones(len(other), bool)])
        order = np.lexsort((p, t))
        t, p, owner = t[order], p[order], owner[order]
        d = _angular_dist(t[:-1], p[:-1], t[1:], p[1:])
        cross = owner[:-1] != owner[1:]
        return bool(np.any(cross & (d < tol)))


@dataclass
class SphCoeffs:
    """Sparse real spherical-harmonic coefficients keyed by (degree, order)."""

    entries: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        for (ell, m) in self.entries:
            if ell < 0 or abs(m) > ell:
                raise ValueError(f"invalid harmonic index (ell={ell}, m={m})")

    def __getitem__(self, key) -> float:
        return self.entries.get(key, 0.0)

    def __setitem__(self, key, value):
        ell, m = key
        if ell < 0 or abs(m) > ell:
            raise ValueError(f"invalid harmonic index (ell={ell}, m={m})")
        self.entries[key] = float(value)

    def items(self):
        return self.entries.items()

    def __len__(self):
        return len(self.entries)

    @property
    def ell_max(self) -> int:
        return max((ell for ell, _ in self.entries), default=-1)

    def energy(self) -> float:
        """Sum of squared coefficients (L^2 energy by orthonormality)."""
        return float(sum(v * v for v in self.entries.values()))


def _check_index(ell: int, m: int):
    if ell < 0:
        raise ValueError(f"degree must be non-negative, got ell={ell}")
    if abs(m) > ell:
        raise ValueError(f"order out of range: |m|={abs(m)} > ell={ell}")


def _norm_legendre_chain(ell: int, m: int, x: np.ndarray) -> np.ndarray:
    """Fully normalized P-bar_ell^m(x) for m >= 0, vectorized over x.

    P-bar carries the factor sqrt((2l+1)/(4pi) (l-m)!/(l+m)!) and the
    Condon-Shortley phase; |P-bar| stays O(1), so the upward recurrence in l is
    stable and free of factorial overflow for any practical degree.
    """
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    pmm = np.full_like(x, 1.0 / math.sqrt(FOUR_PI))
    for k in range(1, m + 1):
        pmm = -math.sqrt((2 * k + 1) / (2.0 * k)) * s * pmm
    if ell == m:
        return pmm
    pm1 = math.sqrt(2 * m + 3.0) * x * pmm
    if ell == m + 1:
        return pm1
    for k in range(m + 2, ell + 1):
        a = math.sqrt((4.0 * k * k - 1.0) / (k * k - m * m))
        b = math.sqrt(((k - 1.0) ** 2 - m * m) / (4.0 * (k - 1.0) ** 2 - 1.0))
        pmm, pm1 = pm1, a * (x * pm1 - b * pmm)
    return pm1


def _norm_legendre_scaled(ell: int, m: int, x: float) -> tuple[float, int]:
    """Scalar P-bar_ell^m as (mantissa, base-2 exponent), rescaled on the fly.

    The diagonal recurrence underflows float64 for large m near the poles;
    keeping a separate exponent makes the chain exact down to any magnitude.
    The three-term recurrence is linear, so one shared exponent rescales both
    running terms together.
    """
    s = math.sqrt(max(0.0, 1.0 - x * x))
    mant, ex = 1.0 / math.sqrt(FOUR_PI), 0
    for k in range(1, m + 1):
        mant *= -math.sqrt((2 * k + 1) / (2.0 * k)) * s
        if mant != 0.0 and abs(mant) < 1e-270:
            mant *= 2.0 ** 900
            ex -= 900
    if ell == m:
        return mant, ex
    pm1 = math.sqrt(2 * m + 3.0) * x * mant
    if ell == m + 1:
        return pm1, ex
    pmm = mant
    for k in range(m + 2, ell + 1):
        a = math.sqrt((4.0 * k * k - 1.0) / (k * k - m * m))
        b = math.sqrt(((k - 1.0) ** 2 - m * m) / (4.0 * (k - 1.0) ** 2 - 1.0))
        pmm, pm1 = pm1, a * (x * pm1 - b * pmm)
        big = max(abs(pmm), abs(pm1))
        if 0.0 < big < 1e-270:
            pmm *= 2.0 ** 900
            pm1 *= 2.0 ** 900
            ex -= 900
    return pm1, ex


_LOG2 = math.log(2.0)


def assoc_legendre(ell: int, m: int, x: float) -> float:
    """Associated Legendre P_ell^m(x) with the Condon-Shortley phase.

    Negative m follows P_l^{-m} = (-1)^m (l-m)!/(l+m)! P_l^m.  Internally the
    fully normalized recurrence runs with exponent rescaling and the result is
    unnormalized through log-gamma, so no factorial is ever formed and degrees
    in the hundreds stay exact; a result whose true magnitude exceeds float64
    range comes back as a signed infinity (and as zero below it).
    """
    _check_index(ell, m)
    if abs(x) > 1.0:
        raise ValueError(f"argument must lie in [-1, 1], got {x}")
    ma = abs(m)
    pbar, ex = _norm_legendre_scaled(ell, ma, float(x))
    log_ratio = math.lgamma(ell + ma + 1) - math.lgamma(ell - ma + 1)
    if m >= 0:
        log_scale = 0.5 * (math.log(FOUR_PI) - math.log(2 * ell + 1) + log_ratio)
        sign = 1.0
    else:
        # fold the convention factor (-1)^m (l-m)!/(l+m)! into the scale
        log_scale = 0.5 * (math.log(FOUR_PI) - math.log(2 * ell + 1) - log_ratio)
        sign = (-1.0) ** ma
    if pbar == 0.0:
        return 0.0
    sign *= math.copysign(1.0, pbar)
    log_val = math.log(abs(pbar)) + ex * _LOG2 + log_scale
    if log_val > 709.0:                      # beyond float64: saturate cleanly
        return sign * math.inf
    return sign * math.exp(log_val)


def _real_harm_values(ell: int, m: int, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    x = np.cos(theta)
    pbar = _norm_legendre_chain(ell, abs(m), x)
    if m == 0:
        return pbar
    ma = abs(m)
    amp = math.sqrt(2.0) * (-1.0) ** ma * pbar
    return amp * (np.cos(ma * phi) if m > 0 else np.sin(ma * phi))


def real_sph_harm(ell: int, m: int, p: SphericalPoint) -> float:
    """Real orthonormal spherical harmonic Y_ell^m evaluated at a point."""
    _check_index(ell, m)
    return float(
        _real_harm_values(ell, m, np.atleast_1d(p.theta), np.atleast_1d(p.phi_az))[0]
    )


def sph_harm_basis(pairs, sset: SamplingSet) -> np.ndarray:
    """Evaluate Y_ell^m for each (ell, m) in *pairs* on a sampling set.

    Returns an array of shape (len(pairs), len(sset)).  Rows sharing an order
    reuse one Legendre chain, which keeps large bases cheap.
    """
    pairs = list(pairs)
    for ell, m in pairs:
        _check_index(ell, m)
    n = len(sset)
    out = np.empty((len(pairs), n))
    x = np.cos(sset.theta)
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    by_order: dict[int, list[int]] = {}
    for i, (ell, m) in enumerate(pairs):
        by_order.setdefault(abs(m), []).append(i)
    for ma, rows in by_order.items():
        ell_need = max(pairs[i][0] for i in rows)
        # walk the chain once up to the highest requested degree
        table = {}
        pmm = np.full(n, 1.0 / math.sqrt(FOUR_PI))
        for k in range(1, ma + 1):
            pmm = -math.sqrt((2 * k + 1) / (2.0 * k)) * s * pmm
        table[ma] = pmm
        if ell_need > ma:
            pm1 = math.sqrt(2 * ma + 3.0) * x * pmm
            table[ma + 1] = pm1
            for k in range(ma + 2, ell_need + 1):
                a = math.sqrt((4.0 * k * k - 1.0) / (k * k - ma * ma))
                b = math.sqrt(((k - 1.0) ** 2 - ma * ma) / (4.0 * (k - 1.0) ** 2 - 1.0))
                pmm, pm1 = pm1, a * (x * pm1 - b * pmm)
                table[k] = pm1
        if ma > 0:
            cosm = np.cos(ma * sset.phi)
            sinm = np.sin(ma * sset.phi)
            amp = math.sqrt(2.0) * (-1.0) ** ma
        for i in rows:
            ell, m = pairs[i]
            if m == 0:
                out[i] = table[ell]
            elif m > 0:
                out[i] = amp * table[ell] * cosm
            else:
                out[i] = amp * table[ell] * sinm
    return out


def _tri_pairs(ell_max: int) -> list[tuple[int, int]]:
    return [(ell, m) for ell in range(ell_max + 1) for m in range(-ell, ell + 1)]


def gauss_legendre_grid(nlat: int, nlon: int) -> SamplingSet:
    """Gauss-Legendre latitudes x uniform longitudes, with exact quadrature weights.

    Integrates any integrand band-limited to degree < nlat exactly (up to
    round-off); the weights sum to 4pi.
    """
    if nlat < 1 or nlon < 1:
        raise ValueError("nlat and nlon must be positive")
    x, w = np.polynomial.legendre.leggauss(nlat)
    theta_lat = np.arccos(x)
    lon = TWO_PI * (np.arange(nlon) + 0.5) / nlon
    theta = np.repeat(theta_lat, nlon)
    phi = np.tile(lon, nlat)
    weights = np.repeat(w * (TWO_PI / nlon), nlon)
    return SamplingSet(theta, phi, quad_weights=weights,
                       grid_tag=f"gauss-legendre-{nlat}x{nlon}", validate=False)


def project_field(sset: SamplingSet, values, ell_max: int) -> SphCoeffs:
    """Quadrature projection onto Y_ell^m for all ell <= ell_max.

    entries[(l, m)] = sum_p w_p f(p) Y_l^m(p); exact for band-limited f on a
    Gauss-Legendre grid with nlat > ell_max.
    """
    if sset.quad_weights is None:
        raise ValueError("projection requires a sampling set with quadrature weights")
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(sset),):
        raise ValueError("values must be a flat array matching the sampling set")
    pairs = _tri_pairs(ell_max)
    basis = sph_harm_basis(pairs, sset)
    coeffs = basis @ (sset.quad_weights * values)
    return SphCoeffs({pair: float(c) for pair, c in zip(pairs, coeffs)})


def synthesize_field(coeffs: SphCoeffs, sset: SamplingSet) -> np.ndarray:
    """Pointwise sum of c_(l,m) Y_l^m over the sampling set."""
    if not len(coeffs):
        return np.zeros(len(sset))
    pairs = list(coeffs.entries.keys())
    basis = sph_harm_basis(pairs, sset)
    c = np.array([coeffs.entries[p] for p in pairs])
    return c @ basis
