"""Harmonic-filter neural fields: the latent-modulated encoder/decoder pair.

The decoder is a multiplicative filter network whose per-layer filters are
fixed real spherical harmonics mixed by a trainable coefficient matrix; layer
l uses orders -D..D at degrees |m|+l (the "shift").  Every layer adds a skip
path to the output, and a per-layer affine map of the latent vector is added
to the pre-filter activation, so all snapshot-to-snapshot variation lives in
the latent vector.

A consequence worth knowing: for frozen network parameters the decoded field
is *affine* in the latent vector (the modulation enters additively and the
filters do not depend on it).  :class:`AffineDecoder` materializes that affine
map once per sampling set, which makes encoding, Jacobians and
observation-operator evaluations cheap and exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tensor
from .sphere import SamplingSet, SphCoeffs, sph_harm_basis

__all__ = [
    "SinrDims",
    "SphericalFilterParams",
    "SinrParams",
    "LatentState",
    "FieldSnapshot",
    "EncodeOptions",
    "EncodeResult",
    "filter_bases",
    "init_sinr_params",
    "sinr_forward",
    "sinr_decode",
    "decode_batch",
    "sinr_encode",
    "encode_values",
    "represent_subspace",
    "decoder_jacobian",
    "AffineDecoder",
    "weighted_mse_t",
    "recon_weights",
]


@dataclass(frozen=True)
class SinrDims:
    """Hyperparameters: layers L, filter degree D, width h, latent m, channels c."""

    L: int
    D: int
    h: int
    m: int
    c: int

    def __post_init__(self):
        if self.L < 1 or self.D < 0 or self.h < 1 or self.m < 1 or self.c < 1:
            raise ValueError(f"invalid dimensions {self}")


@dataclass(frozen=True)
class SphericalFilterParams:
    """One spherical filter: coefficient matrix (h x (2D+1)), degree and shift."""

    xi: np.ndarray
    degree: int
    shift: int

    def __post_init__(self):
        if self.degree < 0 or self.shift < 0:
            raise ValueError("degree and shift must be non-negative")
        if self.xi.ndim != 2 or self.xi.shape[1] != 2 * self.degree + 1:
            raise ValueError("xi must have shape (h, 2D+1)")


@dataclass(frozen=True)
class LatentState:
    """An m-dimensional latent vector with a timestamp."""

    z: np.ndarray
    time_index: float = 0.0

    def __post_init__(self):
        z = np.ascontiguousarray(self.z, dtype=np.float64)
        if z.ndim != 1:
            raise ValueError("latent vector must be 1-d")
        if not np.all(np.isfinite(z)):
            raise ValueError("latent vector must be finite")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)


@dataclass(frozen=True)
class FieldSnapshot:
    """Samples of a c-channel field on a sampling set (values: |S| x c)."""

    sset: SamplingSet
    values: np.ndarray
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != len(self.sset):
            raise ValueError("row count must match the sampling set")
        if not np.all(np.isfinite(values)):
            raise ValueError("snapshot values must be finite")
        names = tuple(self.channel_names) or tuple(f"ch{i}" for i in range(values.shape[1]))
        if len(names) != values.shape[1]:
            raise ValueError("channel_names length mismatch")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", names)

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


def _segment_names(dims: SinrDims) -> list[tuple[str, tuple[int, ...]]]:
    L, D, h, m, c = dims.L, dims.D, dims.h, dims.m, dims.c
    names: list[tuple[str, tuple[int, ...]]] = []
    for l in range(L + 1):
        names.append((f"xi{l}", (h, 2 * D + 1)))
    for l in range(1, L + 1):
        names.append((f"W{l}", (h, h)))
        names.append((f"b{l}", (h,)))
    for l in range(L + 1):
        names.append((f"wout{l}", (c, h)))
        names.append((f"bout{l}", (c,)))
    for l in range(1, L + 1):
        names.append((f"A{l}", (h, m)))
        names.append((f"c{l}", (h,)))
    return names


@dataclass(frozen=True)
class SinrParams:
    """All trainable decoder parameters plus the dimension record.

    ``skip=False`` drops every output path except the last layer's (the
    no-skip ablation); the parameter layout is unchanged.
    """

    dims: SinrDims
    params: ParamVector
    skip: bool = True

    def __post_init__(self):
        expected = {name: shape for name, shape in _segment_names(self.dims)}
        got = {name: shape for name, (_, shape) in self.params.layout.items()}
        if got != expected:
            raise ValueError("parameter layout inconsistent with dimensions")
        if not np.all(np.isfinite(self.params.values)):
            raise ValueError("parameters must be finite")

    def filter(self, layer: int) -> SphericalFilterParams:
        return SphericalFilterParams(self.params.segment(f"xi{layer}"),
                                     degree=self.dims.D, shift=layer)

    def with_params(self, params: ParamVector) -> "SinrParams":
        return replace(self, params=params)

    def to_meta(self) -> dict:
        d = self.dims
        return {"kind": "sinr", "L": d.L, "D": d.D, "h": d.h, "m": d.m, "c": d.c,
                "skip": self.skip}

    @classmethod
    def from_meta(cls, params: ParamVector, meta: dict) -> "SinrParams":
        dims = SinrDims(L=int(meta["L"]), D=int(meta["D"]), h=int(meta["h"]),
                        m=int(meta["m"]), c=int(meta["c"]))
        return cls(dims=dims, params=params, skip=bool(meta.get("skip", True)))


def init_sinr_params(dims: SinrDims, seed: int = 0, skip: bool = True) -> SinrParams:
    """Seeded initialization: scaled-uniform filters and affine maps.

    Modulation input maps A_l are randomly initialized while their biases c_l
    start at zero, so a zero latent vector decodes to the unmodulated shared
    field, yet gradients flow into the latents from the first step.  (Zeroing
    A_l as well would pin the coupled latent/modulation optimization at an
    exact saddle point when the latent table starts at zero.)
    """
    rng = np.random.default_rng(seed)
    L, D, h, m, c = dims.L, dims.D, dims.h, dims.m, dims.c
    segs: dict[str, np.ndarray] = {}
    xi_scale = 1.0 / math.sqrt(2 * D + 1)
    fan = 1.0 / math.sqrt(h)
    mod_scale = 1.0 / math.sqrt(m)
    for l in range(L + 1):
        segs[f"xi{l}"] = rng.uniform(-xi_scale, xi_scale, size=(h, 2 * D + 1))
    for l in range(1, L + 1):
        segs[f"W{l}"] = rng.uniform(-fan, fan, size=(h, h))
        segs[f"b{l}"] = rng.uniform(-fan, fan, size=(h,))
    for l in range(L + 1):
        segs[f"wout{l}"] = rng.uniform(-fan, fan, size=(c, h))
        segs[f"bout{l}"] = np.zeros(c)
    for l in range(1, L + 1):
        segs[f"A{l}"] = rng.uniform(-mod_scale, mod_scale, size=(h, m))
        segs[f"c{l}"] = np.zeros(h)
    order = {name: segs[name] for name, _ in _segment_names(dims)}
    return SinrParams(dims=dims, params=ParamVector.from_segments(order), skip=skip)


def filter_bases(dims: SinrDims, sset: SamplingSet) -> list[np.ndarray]:
    """Per-layer harmonic tables: B_l[m+D] = Y_{|m|+l}^m on the sampling set."""
    return [sph_harm_basis([(abs(m) + l, m) for m in range(-dims.D, dims.D + 1)], sset)
            for l in range(dims.L + 1)]


def _forward_arrays(seg, z2, bases, dims: SinrDims, skip: bool):
    """Shared forward recursion; ``seg`` maps names to arrays or Tensors.

    ``z2`` has shape (K, m); returns the stacked output of shape (K, c, n).
    Works identically for numpy arrays and tape tensors, so the numeric and
    differentiable paths cannot drift apart.
    """
    L = dims.L
    gamma = seg("xi0") @ bases[0]                      # (h, n)
    out = None
    if skip:
        out = seg("wout0") @ gamma + _col(seg("bout0"))
    for l in range(1, L + 1):
        shift = z2 @ _T(seg(f"A{l}")) + (seg(f"c{l}") + seg(f"b{l}"))   # (K, h)
        pre = seg(f"W{l}") @ gamma + _last(shift)
        gamma = pre * (seg(f"xi{l}") @ bases[l])       # (K, h, n)
        if skip or l == L:
            term = seg(f"wout{l}") @ gamma + _col(seg(f"bout{l}"))
            out = term if out is None else out + term
    return out


def _T(x):
    return x.T if isinstance(x, Tensor) else x.T


def _col(x):
    # (c,) -> (c, 1) for broadcasting against (..., c, n)
    if isinstance(x, Tensor):
        return x.reshape((x.shape[0], 1))
    return x[:, None]


def _last(x):
    # (K, h) -> (K, h, 1)
    if isinstance(x, Tensor):
        return x.reshape((x.shape[0], x.shape[1], 1))
    return x[:, :, None]


def decode_batch(params: SinrParams, zs: np.ndarray, sset: SamplingSet,
                 bases: list[np.ndarray] | None = None) -> np.ndarray:
    """Decode K latent vectors at once; returns values of shape (K, n, c)."""
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    if zs.shape[1] != params.dims.m:
        raise ValueError(f"latent dimension mismatch: {zs.shape[1]} != {params.dims.m}")
    if bases is None:
        bases = filter_bases(params.dims, sset)
    out = _forward_arrays(params.params.segment, zs, bases, params.dims, params.skip)
    return np.swapaxes(out, 1, 2)


def sinr_forward(params: SinrParams, z, sset: SamplingSet,
                 bases: list[np.ndarray] | None = None,
                 channel_names: tuple[str, ...] = ()) -> FieldSnapshot:
    """Evaluate the decoder at one latent state on a sampling set."""
    zv = z.z if isinstance(z, LatentState) else np.asarray(z, dtype=np.float64)
    values = decode_batch(params, zv[None, :], sset, bases)[0]
    return FieldSnapshot(sset=sset, values=values, channel_names=channel_names)


def sinr_decode(params: SinrParams, z, sset: SamplingSet,
                bases: list[np.ndarray] | None = None,
                channel_names: tuple[str, ...] = ()) -> FieldSnapshot:
    """The decoder mapping; identical to :func:`sinr_forward` by definition."""
    return sinr_forward(params, z, sset, bases, channel_names)


def sinr_output_t(leaves, z_t: Tensor, bases, dims: SinrDims, skip: bool = True) -> Tensor:
    """Tape version of the forward pass for training programs.

    ``leaves`` maps segment names to Tensors (tracked parameters or constants);
    ``z_t`` is a (K, m) Tensor of latent vectors.  Returns a (K, c, n) Tensor.
    """
    const_bases = [ad.constant(b) for b in bases]
    return _forward_arrays(lambda name: leaves[name], z_t, const_bases, dims, skip)


def recon_weights(sset: SamplingSet) -> np.ndarray:
    """Cosine-of-latitude weights, normalized to sum to one."""
    w = np.cos(sset.lat)
    total = w.sum()
    if total <= 0.0:
        raise ValueError("degenerate sampling set: non-positive total weight")
    return w / total


def weighted_mse_t(pred: Tensor, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """Tape-level latitude-weighted mean squared error.

    ``pred`` is (K, c, n); ``target`` (K, c, n); ``weights`` (n,) sums to one.
    Channel errors are summed per point, then weight-averaged over points and
    averaged over the K snapshots.
    """
    r = pred - ad.constant(target)
    per_point = ad.tsum(ad.square(r), axis=1)          # (K, n)
    return ad.tmean(ad.tsum(per_point * ad.constant(weights), axis=1))


class AffineDecoder:
    """The decoder restricted to one sampling set, materialized as x = base + J z.

    Exact (not a linearization): the modulation enters the network affinely,
    so the decoded values are affine in the latent vector.  Build once per
    (parameters, sampling set) pair and reuse for encodes, observation
    operators, and background-covariance propagation.
    """

    def __init__(self, base: np.ndarray, jac: np.ndarray, sset: SamplingSet,
                 channel_names: tuple[str, ...] = ()):
        self.base = base                      # (n, c)
        self.jac = jac                        # (n*c, m), rows in (n, c) C-order
        self.sset = sset
        self.channel_names = channel_names

    @classmethod
    def build(cls, params: SinrParams, sset: SamplingSet,
              bases: list[np.ndarray] | None = None,
              channel_names: tuple[str, ...] = ()) -> "AffineDecoder":
        m = params.dims.m
        probe = np.vstack([np.zeros(m), np.eye(m)])
        vals = decode_batch(params, probe, sset, bases)   # (m+1, n, c)
        base = vals[0]
        jac = (vals[1:] - base[None]).reshape(m, -1).T    # (n*c, m)
        return cls(base=base, jac=np.ascontiguousarray(jac), sset=sset,
                   channel_names=channel_names)

    @property
    def m(self) -> int:
        return self.jac.shape[1]

    def decode(self, z) -> np.ndarray:
        zv = z.z if isinstance(z, LatentState) else np.asarray(z)
        return self.base + (self.jac @ zv).reshape(self.base.shape)

    def decode_members(self, Z: np.ndarray) -> np.ndarray:
        """Decode an (N, m) stack of latents to (N, n*c) flat values."""
        return Z @ self.jac.T + self.base.reshape(-1)[None, :]

    def snapshot(self, z) -> FieldSnapshot:
        return FieldSnapshot(self.sset, self.decode(z), self.channel_names)


def decoder_jacobian(params: SinrParams, z, sset: SamplingSet,
                     bases: list[np.ndarray] | None = None) -> np.ndarray:
    """Exact Jacobian of the decoded values with respect to the latent vector.

    Shape (|S|*c, m) with rows in (point, channel) C-order.  One forward pass
    per latent basis vector suffices because the map is affine in z (the
    argument z is accepted for interface symmetry; it does not change J).
    """
    del z  # affine in z: the Jacobian is constant
    return AffineDecoder.build(params, sset, bases).jac


@dataclass(frozen=True)
class EncodeOptions:
    """Budget for the encoding optimization."""

    steps: int = 500
    lr: float = 1e-2
    tol: float = 1e-8
    optimizer: str = "adam"


@dataclass(frozen=True)
class EncodeResult:
    latent: LatentState
    loss: float
    steps: int


def _minimize_recon_quadratic(base: np.ndarray, jac: np.ndarray, target: np.ndarray,
                              w_flat: np.ndarray, init: np.ndarray,
                              opts: EncodeOptions) -> tuple[np.ndarray, float, int]:
    """Gradient descent on the weighted quadratic encode objective."""

    def loss_grad(zv):
        r = base + jac @ zv - target
        loss = float(np.dot(w_flat, r * r))
        grad = 2.0 * (jac.T @ (w_flat * r))
        return loss, grad

    pv = ParamVector.from_segments({"z": init})
    state = ad.AdamState.init(pv)
    prev = math.inf
    steps_done = 0
    for step in range(opts.steps):
        loss, grad = loss_grad(pv.values)
        if not math.isfinite(loss):
            raise ad.NonFiniteLossError(f"encode loss diverged at step {step}")
        steps_done = step + 1
        if abs(prev - loss) < opts.tol:
            break
        gv = pv.with_values(grad)
        if opts.optimizer == "adam":
            pv, state = ad.adam_step(state, pv, gv, opts.lr)
        else:
            pv = ad.sgd_step(pv, gv, opts.lr)
        prev = loss
    final_loss, _ = loss_grad(pv.values)
    return pv.values.copy(), float(final_loss), steps_done


def sinr_encode(params: SinrParams, snapshot: FieldSnapshot,
                init: LatentState | None = None,
                opts: EncodeOptions = EncodeOptions(),
                decoder: AffineDecoder | None = None) -> EncodeResult:
    """Encode a snapshot by minimizing the weighted reconstruction loss over z.

    Gradient descent (Adam by default) on the latent vector only, with the
    decoder frozen.  Cold starts use the zero vector; pass ``init`` to warm
    start.  Stops after ``opts.steps`` or when the loss improvement falls
    below ``opts.tol``.
    """
    if len(snapshot.sset) == 0:
        raise ValueError("cannot encode an empty snapshot")
    if decoder is None:
        decoder = AffineDecoder.build(params, snapshot.sset)
    w = recon_weights(snapshot.sset)
    w_flat = np.repeat(w, snapshot.n_channels)          # matches (n, c) C-order
    z0 = np.zeros(params.dims.m) if init is None else init.z.copy()
    t_index = 0.0 if init is None else init.time_index
    z, loss, steps = _minimize_recon_quadratic(
        decoder.base.reshape(-1), decoder.jac, snapshot.values.reshape(-1),
        w_flat, z0, opts)
    return EncodeResult(latent=LatentState(z, time_index=t_index),
                        loss=loss, steps=steps)


def encode_values(params: SinrParams, sset: SamplingSet, indices: np.ndarray,
                  y: np.ndarray, init: LatentState | None = None,
                  opts: EncodeOptions = EncodeOptions()) -> EncodeResult:
    """Encode from a sparse subset of (point, channel) values.

    ``indices`` address the flat (|S|, c) value vector of a snapshot on
    ``sset``; only the involved points are decoded, so rare-observation
    encodes stay cheap.  Each value is weighted by the cosine latitude of its
    point.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("cannot encode from an empty observation set")
    c = params.dims.c
    pt_idx = indices // c
    ch_idx = indices % c
    uniq, inverse = np.unique(pt_idx, return_inverse=True)
    sub = sset.subset(uniq, grid_tag=f"{sset.grid_tag}-masked")
    decoder = AffineDecoder.build(params, sub)
    rows = inverse * c + ch_idx
    base = decoder.base.reshape(-1)[rows]
    jac = decoder.jac[rows]
    w = np.cos(sub.lat)[inverse]
    w = w / w.sum()
    z0 = np.zeros(params.dims.m) if init is None else init.z.copy()
    t_index = 0.0 if init is None else init.time_index
    z, loss, steps = _minimize_recon_quadratic(
        base, jac, np.asarray(y, dtype=np.float64), w, z0, opts)
    return EncodeResult(latent=LatentState(z, time_index=t_index),
                        loss=loss, steps=steps)


def encode_loss_program(params: SinrParams, snapshot: FieldSnapshot,
                        bases: list[np.ndarray] | None = None):
    """The encode objective as a differentiable program over the latent vector.

    Used by the gradient-correctness suite; :func:`sinr_encode` evaluates the
    same objective through the materialized affine map.
    """
    if bases is None:
        bases = filter_bases(params.dims, snapshot.sset)
    w = recon_weights(snapshot.sset)
    target = snapshot.values.T[None]                    # (1, c, n)
    consts = {name: ad.constant(params.params.segment(name))
              for name in params.params.names()}

    def program(leaves):
        z_t = leaves["z"].reshape((1, params.dims.m))
        seg = dict(consts)
        pred = sinr_output_t(seg, z_t, bases, params.dims, params.skip)
        return weighted_mse_t(pred, target, w)

    return program


def represent_subspace(coeffs: SphCoeffs, D: int | None = None, L: int | None = None,
                       h: int | None = None, m: int = 1) -> SinrParams:
    """Construct decoder parameters that reproduce a harmonic combination exactly.

    ``coeffs`` must live in the admissible index set {|m| <= D, 0 <= l-|m| <= L};
    the construction zeroes the mixing weights, sets the pre-filter biases to
    one, and routes coefficient a_{|m|+l, m} through layer l's output path.
    """
    if len(coeffs):
        need_D = max(abs(mm) for _, mm in coeffs.entries)
        need_L = max(ell - abs(mm) for ell, mm in coeffs.entries)
    else:
        need_D, need_L = 0, 0
    D = need_D if D is None else D
    L = max(need_L, 1) if L is None else L
    for ell, mm in coeffs.entries:
        if abs(mm) > D or not 0 <= ell - abs(mm) <= L:
            raise ValueError(
                f"coefficient (ell={ell}, m={mm}) lies outside the admissible "
                f"index set for D={D}, L={L}")
    width = 2 * D + 1
    h = width if h is None else h
    if h < width:
        raise ValueError(f"hidden dimension h={h} is too small; need at least {width}")
    dims = SinrDims(L=L, D=D, h=h, m=m, c=1)
    segs: dict[str, np.ndarray] = {}
    eye = np.zeros((h, width))
    eye[:width, :width] = np.eye(width)
    for l in range(L + 1):
        segs[f"xi{l}"] = eye.copy()
    for l in range(1, L + 1):
        segs[f"W{l}"] = np.zeros((h, h))
        segs[f"b{l}"] = np.ones(h)
    for l in range(L + 1):
        wout = np.zeros((1, h))
        for j in range(width):
            order = j - D
            wout[0, j] = coeffs[(abs(order) + l, order)]
        segs[f"wout{l}"] = wout
        segs[f"bout{l}"] = np.zeros(1)
    for l in range(1, L + 1):
        segs[f"A{l}"] = np.zeros((h, m))
        segs[f"c{l}"] = np.zeros(h)
    order_map = {name: segs[name] for name, _ in _segment_names(dims)}
    return SinrParams(dims=dims, params=ParamVector.from_segments(order_map))
