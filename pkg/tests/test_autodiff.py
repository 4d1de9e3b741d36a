import numpy as np
import pytest

from sphassim import autodiff as ad


def finite_diff(program, params, h=1e-6):
    base = params.values
    num = np.zeros_like(base)
    for i in range(base.size):
        vp, vm = base.copy(), base.copy()
        vp[i] += h
        vm[i] -= h
        num[i] = (ad.value_and_grad(program, params.with_values(vp)).loss
                  - ad.value_and_grad(program, params.with_values(vm)).loss) / (2 * h)
    return num


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.abs(b), 1.0)


class TestValueAndGrad:
    def test_quadratic_gradient_is_params(self):
        pv = ad.ParamVector.from_segments({"x": np.array([1.0, -2.0, 0.5])})
        rep = ad.value_and_grad(lambda t: ad.tsum(ad.square(t["x"])) * 0.5, pv)
        assert np.allclose(rep.grad.values, pv.values, atol=1e-14)

    def test_constant_loss_zero_grad(self):
        pv = ad.ParamVector.from_segments({"x": np.ones(4)})
        rep = ad.value_and_grad(lambda t: ad.constant(3.5) + 0.0 * ad.tsum(t["x"]), pv)
        assert rep.loss == pytest.approx(3.5)
        assert np.array_equal(rep.grad.values, np.zeros(4))

    def test_every_primitive_against_fd(self):
        rng = np.random.default_rng(2)
        B = rng.normal(size=(3, 4, 6))
        tgt = rng.normal(size=(3, 4, 6))
        pv = ad.ParamVector.from_segments({
            "W": rng.normal(size=(4, 4)), "b": rng.normal(size=(4,)),
            "A": rng.normal(size=(4, 2)), "z": rng.normal(size=(3, 2)),
            "d": rng.normal(size=(4,)),
        })

        def program(t):
            mod = ad.matmul(t["z"], t["A"].T)
            pre = ad.matmul(t["W"], ad.constant(B)) + t["b"].reshape(1, 4, 1) \
                + mod.reshape(3, 4, 1)
            gam = ad.leaky_relu(pre * ad.constant(tgt), 0.2)
            mix = ad.sin(gam) + 0.3 * ad.cos(gam) + ad.exp(0.1 * gam)
            r = mix - ad.constant(tgt)
            return ad.tmean(ad.square(r)) + 1e-3 * ad.tsum(ad.log(ad.exp(t["d"])))

        rep = ad.value_and_grad(program, pv)
        assert rel_err(rep.grad.values, finite_diff(program, pv)).max() < 1e-6

    def test_vector_matmul_cases(self):
        rng = np.random.default_rng(3)
        pv = ad.ParamVector.from_segments({"v": rng.normal(size=4),
                                           "M": rng.normal(size=(4, 4)),
                                           "u": rng.normal(size=4)})

        def program(t):
            return (ad.tsum(ad.square(ad.matmul(t["v"], t["M"])))
                    + ad.tsum(ad.square(ad.matmul(t["M"], t["u"])))
                    + ad.square(ad.matmul(t["v"], t["u"])))

        rep = ad.value_and_grad(program, pv)
        assert rel_err(rep.grad.values, finite_diff(program, pv)).max() < 1e-6

    def test_mean_and_axis_reductions(self):
        rng = np.random.default_rng(4)
        pv = ad.ParamVector.from_segments({"x": rng.normal(size=(3, 5))})

        def program(t):
            return ad.tsum(ad.tmean(ad.square(t["x"]), axis=1))

        rep = ad.value_and_grad(program, pv)
        assert rel_err(rep.grad.values, finite_diff(program, pv)).max() < 1e-6

    def test_non_finite_loss_error(self):
        pv = ad.ParamVector.from_segments({"x": np.array([-1.0])})
        with pytest.raises(ad.NonFiniteLossError):
            ad.value_and_grad(lambda t: ad.tsum(ad.log(t["x"])), pv)

    def test_unsupported_primitives(self):
        pv = ad.ParamVector.from_segments({"x": np.ones(2)})
        with pytest.raises(ad.UnsupportedPrimitiveError):
            ad.value_and_grad(lambda t: ad.tsum(t["x"] ** 3), pv)
        with pytest.raises(ad.UnsupportedPrimitiveError):
            ad.value_and_grad(lambda t: ad.tsum(t["x"] / t["x"]), pv)

    def test_determinism(self):
        rng = np.random.default_rng(5)
        pv = ad.ParamVector.from_segments({"x": rng.normal(size=(8, 8))})

        def program(t):
            return ad.tsum(ad.square(ad.sin(ad.matmul(t["x"], t["x"]))))

        r1 = ad.value_and_grad(program, pv)
        r2 = ad.value_and_grad(program, pv)
        assert r1.loss == r2.loss
        assert np.array_equal(r1.grad.values, r2.grad.values)

    def test_aux_values_returned(self):
        pv = ad.ParamVector.from_segments({"x": np.ones(3)})

        def program(t):
            s = ad.tsum(ad.square(t["x"]))
            return s, {"sq": s, "plain": 2.0}

        rep = ad.value_and_grad(program, pv)
        assert rep.aux == {"sq": 3.0, "plain": 2.0}


class TestParamVector:
    def test_segment_views(self):
        pv = ad.ParamVector.from_segments({"a": np.arange(6.0).reshape(2, 3),
                                           "b": np.array([9.0])})
        assert pv.segment("a").shape == (2, 3)
        assert pv.segment("b")[0] == 9.0
        assert len(pv) == 7

    def test_layout_must_cover(self):
        with pytest.raises(ValueError):
            ad.ParamVector(np.zeros(5), {"a": (0, (2,)), "b": (3, (2,))})
        with pytest.raises(ValueError):
            ad.ParamVector(np.zeros(3), {"a": (0, (2,))})

    def test_overlapping_segments_rejected(self):
        with pytest.raises(ValueError):
            ad.ParamVector(np.zeros(4), {"a": (0, (3,)), "b": (2, (2,))})


class TestAdam:
    def test_zero_grad_no_move(self):
        pv = ad.ParamVector.from_segments({"x": np.array([1.0, 2.0])})
        out, _ = ad.adam_step(ad.AdamState.init(pv), pv, pv.zeros_like(), 0.1)
        assert np.array_equal(out.values, pv.values)

    def test_descends_quadratic(self):
        pv = ad.ParamVector.from_segments({"x": np.array([1.0])})
        rep = ad.value_and_grad(lambda t: ad.square(t["x"]), pv)
        out, _ = ad.adam_step(ad.AdamState.init(pv), pv, rep.grad, 0.1)
        assert out.values[0] < 1.0

    def test_reaches_minimizer(self):
        # convex quadratic: 200 steps bring |x - x*| below 1e-6
        target = 0.1 * np.array([0.3, -0.4, 1.1])
        pv = ad.ParamVector.from_segments({"x": np.zeros(3)})
        st = ad.AdamState.init(pv)
        for _ in range(200):
            rep = ad.value_and_grad(
                lambda t: ad.tsum(ad.square(t["x"] - ad.constant(target))), pv)
            pv, st = ad.adam_step(st, pv, rep.grad, 0.01)
        assert np.abs(pv.values - target).max() < 1e-6

    def test_shape_mismatch(self):
        pv = ad.ParamVector.from_segments({"x": np.zeros(3)})
        other = ad.ParamVector.from_segments({"x": np.zeros(2)})
        with pytest.raises(ValueError):
            ad.adam_step(ad.AdamState.init(pv), pv, other, 0.1)

    def test_sgd_step(self):
        pv = ad.ParamVector.from_segments({"x": np.array([1.0])})
        g = pv.with_values(np.array([0.5]))
        out = ad.sgd_step(pv, g, 0.2)
        assert out.values[0] == pytest.approx(0.9)
