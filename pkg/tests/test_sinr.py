import math

import numpy as np
import pytest

from sphassim import autodiff as ad
from sphassim import sinr as si
from sphassim.datasets import Dataset, make_latlon_grid
from sphassim.sphere import (SphCoeffs, gauss_legendre_grid, project_field,
                             sph_harm_basis, synthesize_field)
from sphassim.training import LatentTable, TrainConfig, pretrain


def random_modulated(dims, seed=7, scale=0.3):
    params = si.init_sinr_params(dims, seed=seed)
    vals = params.params.values.copy()
    rng = np.random.default_rng(seed + 1)
    for l in range(1, dims.L + 1):
        off, shape = params.params.layout[f"c{l}"]
        vals[off:off + int(np.prod(shape))] = rng.normal(scale=scale,
                                                         size=int(np.prod(shape)))
    return params.with_params(params.params.with_values(vals))


class TestForward:
    def test_representation_construction(self, quad_grid):
        params = si.represent_subspace(SphCoeffs({(1, 0): 2.5}))
        f = si.sinr_forward(params, si.LatentState(np.zeros(params.dims.m)), quad_grid)
        ref = 2.5 * sph_harm_basis([(1, 0)], quad_grid)[0]
        assert np.abs(f.values[:, 0] - ref).max() < 1e-12

    def test_zero_output_weights(self, quad_grid, small_sinr):
        vals = small_sinr.params.values.copy()
        for l in range(small_sinr.dims.L + 1):
            for seg in (f"wout{l}", f"bout{l}"):
                off, shape = small_sinr.params.layout[seg]
                vals[off:off + int(np.prod(shape))] = 0.0
        params = small_sinr.with_params(small_sinr.params.with_values(vals))
        f = si.sinr_forward(params, np.zeros(params.dims.m), quad_grid)
        assert np.array_equal(f.values, np.zeros_like(f.values))

    def test_band_limit_expansion(self, quad_grid, small_sinr):
        # degree bound (2D+L)(L+1)/2 = 9 for D=L=2, checked by quadrature
        rng = np.random.default_rng(0)
        z = si.LatentState(rng.normal(size=small_sinr.dims.m))
        f = si.sinr_forward(small_sinr, z, quad_grid)
        for ch in range(small_sinr.dims.c):
            v = f.values[:, ch]
            coeffs = project_field(quad_grid, v, 9)
            recon = synthesize_field(coeffs, quad_grid)
            assert np.abs(recon - v).max() < 1e-6

    def test_residual_energy_bound(self, quad_grid):
        for seed in range(5):
            dims = si.SinrDims(L=2, D=2, h=8, m=4, c=1)
            params = random_modulated(dims, seed=seed)
            z = np.random.default_rng(seed).normal(size=4)
            v = si.sinr_forward(params, z, quad_grid).values[:, 0]
            coeffs = project_field(quad_grid, v, 9)
            energy = float(np.sum(quad_grid.quad_weights * v * v))
            assert energy - coeffs.energy() < 1e-8

    def test_decode_is_forward(self, quad_grid, small_sinr):
        z = np.random.default_rng(1).normal(size=small_sinr.dims.m)
        a = si.sinr_forward(small_sinr, z, quad_grid)
        b = si.sinr_decode(small_sinr, z, quad_grid)
        assert np.array_equal(a.values, b.values)

    def test_tape_matches_numeric(self, quad_grid, small_sinr):
        rng = np.random.default_rng(2)
        zs = rng.normal(size=(3, small_sinr.dims.m))
        bases = si.filter_bases(small_sinr.dims, quad_grid)
        num = si.decode_batch(small_sinr, zs, quad_grid, bases)
        leaves = ad.make_leaves(small_sinr.params)
        out = si.sinr_output_t(leaves, ad.constant(zs), bases, small_sinr.dims, True)
        assert np.abs(np.swapaxes(out.data, 1, 2) - num).max() < 1e-12

    def test_no_skip_ablation(self, quad_grid):
        dims = si.SinrDims(L=2, D=1, h=4, m=3, c=1)
        full = random_modulated(dims, seed=3)
        noskip = si.SinrParams(dims=dims, params=full.params, skip=False)
        z = np.random.default_rng(3).normal(size=3)
        bases = si.filter_bases(dims, quad_grid)
        out_full = si.decode_batch(full, z[None], quad_grid, bases)[0]
        out_noskip = si.decode_batch(noskip, z[None], quad_grid, bases)[0]
        # the no-skip output keeps only the last layer's contribution
        assert not np.allclose(out_full, out_noskip)
        seg = full.params.segment
        gamma = seg("xi0") @ bases[0]
        for l in (1, 2):
            shift = (seg(f"A{l}") @ z + seg(f"c{l}") + seg(f"b{l}"))
            gamma = (seg(f"W{l}") @ gamma + shift[:, None]) * (seg(f"xi{l}") @ bases[l])
        ref = (seg("wout2") @ gamma + seg("bout2")[:, None]).T
        assert np.abs(out_noskip - ref).max() < 1e-12

    def test_modulation_linearity(self, quad_grid):
        # outputs depend on z only through the per-layer affine maps: project a
        # direction out of every A_l and move z along it
        dims = si.SinrDims(L=2, D=2, h=8, m=6, c=1)
        params = random_modulated(dims, seed=4)
        rng = np.random.default_rng(4)
        null = rng.normal(size=6)
        null /= np.linalg.norm(null)
        vals = params.params.values.copy()
        for l in (1, 2):
            off, shape = params.params.layout[f"A{l}"]
            A = vals[off:off + int(np.prod(shape))].reshape(shape)
            A -= np.outer(A @ null, null)
            vals[off:off + A.size] = A.ravel()
        params = params.with_params(params.params.with_values(vals))
        A_stack = np.vstack([params.params.segment(f"A{l}") for l in (1, 2)])
        assert np.abs(A_stack @ null).max() < 1e-10
        z1 = rng.normal(size=6)
        z2 = z1 + 3.0 * null
        out1 = si.sinr_forward(params, z1, quad_grid).values
        out2 = si.sinr_forward(params, z2, quad_grid).values
        assert np.abs(out1 - out2).max() < 1e-10


class TestRepresentSubspace:
    def test_constant(self, quad_grid):
        params = si.represent_subspace(SphCoeffs({(0, 0): 1.0}))
        f = si.sinr_forward(params, np.zeros(params.dims.m), quad_grid)
        assert np.abs(f.values[:, 0] - 1.0 / math.sqrt(4 * math.pi)).max() < 1e-12

    def test_top_corner_mode(self, quad_grid):
        D, L = 2, 3
        params = si.represent_subspace(SphCoeffs({(D + L, D): 3.0}), D=D, L=L)
        f = si.sinr_forward(params, np.zeros(params.dims.m), quad_grid)
        ref = 3.0 * sph_harm_basis([(D + L, D)], quad_grid)[0]
        assert np.abs(f.values[:, 0] - ref).max() < 1e-10

    def test_empty_coeffs(self, quad_grid):
        params = si.represent_subspace(SphCoeffs())
        f = si.sinr_forward(params, np.zeros(params.dims.m), quad_grid)
        assert np.abs(f.values).max() == 0.0

    def test_random_admissible_sets(self, quad_grid):
        rng = np.random.default_rng(11)
        for _ in range(12):
            D = int(rng.integers(0, 4))
            L = int(rng.integers(1, 4))
            entries = {}
            for _ in range(int(rng.integers(1, 6))):
                m = int(rng.integers(-D, D + 1))
                ell = abs(m) + int(rng.integers(0, L + 1))
                entries[(ell, m)] = float(rng.normal())
            coeffs = SphCoeffs(entries)
            params = si.represent_subspace(coeffs, D=D, L=L,
                                           h=2 * D + 1 + int(rng.integers(0, 3)))
            f = si.sinr_forward(params, np.zeros(params.dims.m), quad_grid)
            ref = synthesize_field(coeffs, quad_grid)
            assert np.abs(f.values[:, 0] - ref).max() < 1e-10

    def test_index_out_of_set(self):
        with pytest.raises(ValueError):
            si.represent_subspace(SphCoeffs({(5, 1): 1.0}), D=1, L=2)
        with pytest.raises(ValueError):
            si.represent_subspace(SphCoeffs({(3, 3): 1.0}), D=2, L=2)

    def test_h_too_small(self):
        with pytest.raises(ValueError):
            si.represent_subspace(SphCoeffs({(1, 1): 1.0}), D=1, L=1, h=2)


class TestJacobian:
    def test_zero_modulation_zero_jacobian(self, quad_grid):
        params = si.represent_subspace(SphCoeffs({(2, 1): 1.0}))
        J = si.decoder_jacobian(params, np.zeros(params.dims.m), quad_grid)
        assert np.abs(J).max() == 0.0

    def test_single_layer_hand_expansion(self, quad_grid):
        dims = si.SinrDims(L=1, D=1, h=3, m=2, c=1)
        params = si.init_sinr_params(dims, seed=0)
        vals = np.zeros_like(params.params.values)
        pv = params.params.with_values(vals)
        segs = {name: pv.segment(name).copy() for name in pv.names()}
        rng = np.random.default_rng(5)
        segs["xi1"] = rng.normal(size=(3, 3))
        segs["A1"] = rng.normal(size=(3, 2))
        segs["wout1"][0, 0] = 1.0                    # select hidden row 0
        params = si.SinrParams(dims=dims,
                               params=ad.ParamVector.from_segments(
                                   {n: segs[n] for n in pv.names()}))
        bases = si.filter_bases(dims, quad_grid)
        g1 = segs["xi1"] @ bases[1]
        expected = np.stack([segs["A1"][0, j] * g1[0] for j in range(2)], axis=1)
        J = si.decoder_jacobian(params, np.zeros(2), quad_grid, bases)
        assert np.abs(J - expected).max() < 1e-12

    def test_matches_finite_differences(self, quad_grid, small_sinr):
        rng = np.random.default_rng(6)
        z = rng.normal(size=small_sinr.dims.m)
        bases = si.filter_bases(small_sinr.dims, quad_grid)
        J = si.decoder_jacobian(small_sinr, z, quad_grid, bases)
        h = 1e-6
        for j in range(small_sinr.dims.m):
            e = np.zeros(small_sinr.dims.m)
            e[j] = h
            fp = si.decode_batch(small_sinr, (z + e)[None], quad_grid, bases)[0]
            fm = si.decode_batch(small_sinr, (z - e)[None], quad_grid, bases)[0]
            fd = ((fp - fm) / (2 * h)).reshape(-1)
            denom = max(1.0, np.abs(fd).max())
            assert np.abs(J[:, j] - fd).max() / denom < 1e-6

    def test_affine_decoder_is_exact(self, quad_grid, small_sinr):
        dec = si.AffineDecoder.build(small_sinr, quad_grid)
        rng = np.random.default_rng(7)
        Z = rng.normal(size=(4, small_sinr.dims.m))
        direct = si.decode_batch(small_sinr, Z, quad_grid)
        via = dec.decode_members(Z).reshape(direct.shape)
        assert np.abs(direct - via).max() < 1e-12


class TestEncode:
    def test_fixed_point(self, quad_grid, small_sinr):
        rng = np.random.default_rng(8)
        z_star = rng.normal(size=small_sinr.dims.m)
        snap = si.sinr_decode(small_sinr, z_star, quad_grid)
        res = si.sinr_encode(small_sinr, snap, init=si.LatentState(z_star))
        assert np.abs(res.latent.z - z_star).max() < 1e-8
        assert res.loss < 1e-20

    def test_self_consistency(self, quad_grid, small_sinr):
        rng = np.random.default_rng(9)
        for _ in range(10):
            z_star = rng.normal(size=small_sinr.dims.m)
            snap = si.sinr_decode(small_sinr, z_star, quad_grid)
            res = si.sinr_encode(small_sinr, snap,
                                 opts=si.EncodeOptions(steps=1200, lr=0.05,
                                                       tol=1e-14))
            assert res.loss < 1e-6

    def test_masked_encode_close_to_full(self, quad_grid):
        # 3%-masked encode recovers the full grid within 2x of the full encode
        dims = si.SinrDims(L=2, D=2, h=8, m=6, c=1)
        params = random_modulated(dims, seed=10)
        coeffs = SphCoeffs({(1, 0): 0.8, (2, 1): -0.5, (3, 2): 0.3, (2, -2): 0.4})
        grid = make_latlon_grid(32, 16)
        target = synthesize_field(coeffs, grid)
        snap = si.FieldSnapshot(grid, target)
        opts = si.EncodeOptions(steps=3000, lr=0.05, tol=0.0)
        full = si.sinr_encode(params, snap, opts=opts)
        dec = si.AffineDecoder.build(params, grid)
        from sphassim.metrics import weighted_rmse_flat
        rmse = weighted_rmse_flat(grid, 1)
        rmse_full = rmse(dec.decode_members(full.latent.z[None])[0], target)
        rng = np.random.default_rng(10)
        count = max(dims.m + 2, int(round(0.03 * len(grid))))
        idx = np.sort(rng.choice(len(grid), size=count, replace=False))
        masked = si.encode_values(params, grid, idx, target[idx], opts=opts)
        rmse_masked = rmse(dec.decode_members(masked.latent.z[None])[0], target)
        assert rmse_masked < 2.0 * max(rmse_full, 1e-12) + 1e-8

    def test_empty_snapshot_rejected(self, small_sinr):
        from sphassim.sphere import SamplingSet
        empty = SamplingSet(np.zeros(0), np.zeros(0))
        with pytest.raises(ValueError):
            si.sinr_encode(small_sinr, si.FieldSnapshot(empty, np.zeros((0, 2))))

    def test_encode_program_matches_fd(self, quad_grid, small_sinr):
        rng = np.random.default_rng(12)
        snap = si.sinr_decode(small_sinr, rng.normal(size=small_sinr.dims.m),
                              quad_grid)
        program = si.encode_loss_program(small_sinr, snap)
        pv = ad.ParamVector.from_segments({"z": rng.normal(size=small_sinr.dims.m)})
        rep = ad.value_and_grad(program, pv)
        h = 1e-6
        for j in range(small_sinr.dims.m):
            vp, vm = pv.values.copy(), pv.values.copy()
            vp[j] += h
            vm[j] -= h
            num = (ad.value_and_grad(program, pv.with_values(vp)).loss
                   - ad.value_and_grad(program, pv.with_values(vm)).loss) / (2 * h)
            assert rep.grad.values[j] == pytest.approx(num, rel=1e-5, abs=1e-10)

    def test_encode_gradient_route_matches_program(self, quad_grid, small_sinr):
        # the quadratic used by sinr_encode is the same objective as the tape program
        rng = np.random.default_rng(13)
        snap = si.sinr_decode(small_sinr, rng.normal(size=small_sinr.dims.m),
                              quad_grid)
        z = rng.normal(size=small_sinr.dims.m)
        program = si.encode_loss_program(small_sinr, snap)
        rep = ad.value_and_grad(program, ad.ParamVector.from_segments({"z": z}))
        dec = si.AffineDecoder.build(small_sinr, quad_grid)
        w = si.recon_weights(quad_grid)
        w_flat = np.repeat(w, snap.n_channels)
        r = dec.base.reshape(-1) + dec.jac @ z - snap.values.reshape(-1)
        loss = float(np.dot(w_flat, r * r))
        grad = 2.0 * (dec.jac.T @ (w_flat * r))
        assert loss == pytest.approx(rep.loss, rel=1e-12)
        assert np.abs(grad - rep.grad.values).max() < 1e-10


class TestConvergenceTrend:
    def test_deeper_wider_fits_better(self):
        # fitting a degree-12 band-limited target with growing (D, L)
        grid = make_latlon_grid(32, 16)
        rng = np.random.default_rng(42)
        entries = {}
        for ell in range(13):
            for m in range(-ell, ell + 1):
                entries[(ell, m)] = float(rng.normal()) / (1.0 + ell)
        target = synthesize_field(SphCoeffs(entries), grid)
        target = target / target.std()
        data = Dataset(values=target.reshape(1, 1, 32, 16, 1), grid=grid)
        best = []
        for D, L in ((2, 2), (4, 4), (8, 8)):
            dims = si.SinrDims(L=L, D=D, h=2 * D + 1, m=2, c=1)
            params = si.init_sinr_params(dims, seed=0)
            table = LatentTable(1, 1, dims.m)
            for epochs, lr in ((400, 1e-2), (200, 3e-3)):
                params, table = pretrain(data, params, table,
                                         TrainConfig(epochs=epochs, lr_pretrain=lr,
                                                     lr_latent=1e-2))
            dec = si.AffineDecoder.build(params, grid)
            from sphassim.metrics import weighted_rmse_flat
            rmse = weighted_rmse_flat(grid, 1)
            best.append(rmse(dec.decode_members(table.matrix())[0], target))
        assert best[0] >= best[1] >= best[2]
