import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, strategies as st

from dgml import autodiff as ad
from dgml.autodiff import BatchNormState, ShapeError, Tensor


# ---------------------------------------------------------------------------
# naive reference implementations


def naive_conv2d(x, k, bias, stride, pad):
    c, h, w = x.shape
    co, ci, kh, kw = k.shape
    sh, sw = stride
    ph, pw = pad
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw))
    xp[:, ph : ph + h, pw : pw + w] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for y in range(ho):
            for z in range(wo):
                acc = 0.0
                for cc in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            acc += k[o, cc, i, j] * xp[cc, y * sh + i, z * sw + j]
                out[o, y, z] = acc + bias[o]
    return out


def naive_avgpool(x, size):
    c, h, w = x.shape
    ph, pw = size
    ho, wo = h // ph, w // pw
    out = np.zeros((c, ho, wo))
    for cc in range(c):
        for y in range(ho):
            for z in range(wo):
                out[cc, y, z] = x[cc, y * ph : (y + 1) * ph, z * pw : (z + 1) * pw].mean()
    return out


def naive_linear(x, w, b):
    m, n = w.shape
    out = np.zeros(m)
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += w[i, j] * x[j]
        out[i] = acc + b[i]
    return out


def fd_check(build, params, eps=1e-5, **kw):
    """Max relative error of analytic vs central-difference gradients."""
    report = ad.grad_check(build, params, eps=eps, **kw)
    assert not report.nan_sites
    return report.max_rel_error


# ---------------------------------------------------------------------------
# conv2d


class TestConv2d:
    def test_spatial_preserving_stack_shape(self, rng):
        x = Tensor(rng.uniform(size=(1, 80, 120)))
        k = Tensor(rng.normal(size=(32, 1, 3, 3)))
        b = Tensor(np.zeros(32))
        out = ad.conv2d(x, k, b, stride=(1, 1), padding=(1, 1))
        assert out.shape == (32, 80, 120)

    def test_identity_kernel(self, rng):
        x = Tensor(rng.uniform(size=(1, 4, 5)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = ad.conv2d(x, k, b, stride=(1, 1), padding=(0, 0))
        npt.assert_array_equal(out.data, x.data)

    def test_matches_naive_loop(self, rng):
        x = rng.normal(size=(1, 5, 5))
        k = rng.normal(size=(1, 1, 3, 3))
        b = rng.normal(size=1)
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=(1, 1), padding=(0, 0))
        npt.assert_allclose(out.data, naive_conv2d(x, k, b, (1, 1), (0, 0)), atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [((1, 1), (1, 1)), ((2, 1), (0, 1)), ((2, 2), (2, 0))])
    def test_matches_naive_on_random_geometry(self, rng, stride, pad):
        for _ in range(10):
            c, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            kh = int(rng.integers(1, min(h + 2 * pad[0], 4) + 1))
            kw = int(rng.integers(1, min(w + 2 * pad[1], 4) + 1))
            x = rng.normal(size=(c, h, w))
            k = rng.normal(size=(co, c, kh, kw))
            b = rng.normal(size=co)
            out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad)
            npt.assert_allclose(out.data, naive_conv2d(x, k, b, stride, pad), atol=1e-12)

    def test_batched_matches_per_sample(self, rng):
        # batched layout is channel-major: [C, N, H, W]
        xs = rng.normal(size=(2, 3, 6, 7))
        k = rng.normal(size=(4, 2, 3, 3))
        b = rng.normal(size=4)
        out = ad.conv2d(Tensor(xs), Tensor(k), Tensor(b), (1, 1), (1, 1))
        assert out.shape == (4, 3, 6, 7)
        for n in range(3):
            single = ad.conv2d(Tensor(xs[:, n]), Tensor(k), Tensor(b), (1, 1), (1, 1))
            npt.assert_allclose(out.data[:, n], single.data, atol=1e-12)

    def test_channel_mismatch_rejected(self, rng):
        x = Tensor(rng.normal(size=(3, 5, 5)))
        k = Tensor(rng.normal(size=(2, 4, 3, 3)))
        with pytest.raises(ShapeError, match="4 input channels"):
            ad.conv2d(x, k, Tensor(np.zeros(2)), (1, 1), (1, 1))

    def test_oversized_kernel_rejected(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 4)))
        k = Tensor(rng.normal(size=(1, 1, 5, 5)))
        with pytest.raises(ShapeError, match="larger than padded"):
            ad.conv2d(x, k, Tensor(np.zeros(1)), (1, 1), (0, 0))

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)

        def forward():
            return ad.sum_all(ad.tanh(ad.conv2d(x, k, b, (1, 1), (1, 1))))

        assert fd_check(forward, {"x": x, "k": k, "b": b}) < 1e-4


# ---------------------------------------------------------------------------
# avgpool2d


class TestAvgPool2d:
    def test_constant_input(self):
        x = Tensor(np.full((3, 8, 8), 2.5))
        out = ad.avgpool2d(x, (4, 2))
        npt.assert_allclose(out.data, 2.5, atol=0)
        assert out.shape == (3, 2, 4)

    def test_pool_chain_reaches_table_dims(self, rng):
        x = Tensor(rng.uniform(size=(32, 80, 120)))
        out = ad.avgpool2d(ad.avgpool2d(ad.avgpool2d(x, (4, 4)), (2, 2)), (2, 2))
        assert out.shape == (32, 5, 7)
        assert 32 * 5 * 7 == 1120

    def test_matches_naive_window_mean(self, rng):
        x = rng.normal(size=(1, 6, 6))
        out = ad.avgpool2d(Tensor(x), (2, 2))
        npt.assert_allclose(out.data, naive_avgpool(x, (2, 2)), atol=1e-12)

    def test_incomplete_windows_dropped(self, rng):
        x = rng.normal(size=(2, 7, 5))
        out = ad.avgpool2d(Tensor(x), (2, 2))
        assert out.shape == (2, 3, 2)
        npt.assert_allclose(out.data, naive_avgpool(x, (2, 2)), atol=1e-12)

    def test_oversized_window_rejected(self, rng):
        with pytest.raises(ShapeError, match="pool size"):
            ad.avgpool2d(Tensor(rng.normal(size=(1, 3, 3))), (4, 1))

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 6)), requires_grad=True)

        def forward():
            return ad.sum_all(ad.mul(ad.avgpool2d(x, (2, 3)), ad.avgpool2d(x, (2, 3))))

        assert fd_check(forward, {"x": x}) < 1e-4


# ---------------------------------------------------------------------------
# linear


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=4)
        out = ad.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        npt.assert_array_equal(out.data, x)

    def test_two_to_one_sum(self):
        out = ad.linear(Tensor([3.0, 4.5]), Tensor([[1.0, 1.0]]), Tensor([0.0]))
        npt.assert_allclose(out.data, [7.5], atol=0)

    def test_matches_naive_dot(self, rng):
        x = rng.normal(size=4)
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=3)
        out = ad.linear(Tensor(x), Tensor(w), Tensor(b))
        npt.assert_allclose(out.data, naive_linear(x, w, b), atol=1e-12)

    def test_batched_rows(self, rng):
        x = rng.normal(size=(5, 4))
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=3)
        out = ad.linear(Tensor(x), Tensor(w), Tensor(b))
        for i in range(5):
            npt.assert_allclose(out.data[i], naive_linear(x[i], w, b), atol=1e-12)

    def test_dimension_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            ad.linear(Tensor(rng.normal(size=5)), Tensor(rng.normal(size=(3, 4))), None)
        with pytest.raises(ShapeError):
            ad.linear(Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(2)))

    def test_gradients_tight(self, rng):
        x = Tensor(rng.normal(size=4))
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)

        def forward():
            return ad.sum_all(ad.linear(x, w, b))

        assert fd_check(forward, {"w": w, "b": b}) < 1e-6


# ---------------------------------------------------------------------------
# activations


class TestActivations:
    def test_sigmoid_symmetry(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_analytic_point(self):
        npt.assert_allclose(ad.sigmoid(Tensor(math.log(3.0))).item(), 0.75, rtol=1e-15)

    def test_relu_and_tanh_fixed_points(self, rng):
        x = rng.uniform(0.5, 3.0, size=6)
        npt.assert_array_equal(ad.relu(Tensor(-x)).data, np.zeros(6))
        assert ad.tanh(Tensor(0.0)).item() == 0.0

    def test_dispatcher(self, rng):
        x = Tensor(rng.normal(size=3))
        npt.assert_array_equal(ad.activation(x, "relu").data, ad.relu(x).data)
        with pytest.raises(ValueError, match="unknown activation"):
            ad.activation(x, "softmax")

    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_sigmoid_strictly_inside_unit_interval(self, value):
        out = ad.sigmoid(Tensor(value)).item()
        assert 0.0 < out < 1.0

    @given(st.floats(min_value=1e-300, max_value=1.0, exclude_max=True))
    def test_alpha_plus_beta_is_exactly_one(self, alpha):
        # float64 lemma behind the gate identity: alpha + (1 - alpha) == 1 exactly
        assert alpha + (1.0 - alpha) == 1.0

    def test_gradients(self, rng):
        for fn in (ad.relu, ad.sigmoid, ad.tanh):
            x = Tensor(rng.normal(size=7) + 0.05, requires_grad=True)  # keep off relu's kink
            assert fd_check(lambda fn=fn, x=x: ad.sum_all(fn(x)), {"x": x}) < 1e-5


# ---------------------------------------------------------------------------
# batch norm


class TestBatchNorm:
    def test_normalised_input_passes_through(self, rng):
        x = rng.normal(size=(1, 6, 4, 4))
        x = (x - x.mean()) / x.std()
        out = ad.batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormState.fresh(1), "train")
        npt.assert_allclose(out.data, x, rtol=1e-4, atol=1e-5)

    def test_constant_channels_collapse_to_beta(self, rng):
        x = np.stack([np.full((3, 2, 2), 4.0), np.full((3, 2, 2), -1.5)])
        beta = rng.normal(size=2)
        out = ad.batchnorm(Tensor(x), Tensor(rng.normal(size=2)), Tensor(beta), BatchNormState.fresh(2), "train")
        npt.assert_allclose(out.data, np.broadcast_to(beta.reshape(2, 1, 1, 1), out.shape), atol=1e-10)

    def test_running_stats_update_and_inference(self, rng):
        x = rng.normal(loc=3.0, scale=2.0, size=(2, 8, 3, 3))
        state = BatchNormState.fresh(2)
        ad.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "train")
        mu = x.mean(axis=(1, 2, 3))
        var = x.var(axis=(1, 2, 3))
        npt.assert_allclose(state.running_mean, 0.9 * 0 + 0.1 * mu, rtol=1e-12)
        npt.assert_allclose(state.running_var, 0.9 * 1 + 0.1 * var, rtol=1e-12)
        out = ad.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "infer")
        expected = (x - state.running_mean.reshape(2, 1, 1, 1)) / np.sqrt(
            state.running_var.reshape(2, 1, 1, 1) + state.eps
        )
        npt.assert_allclose(out.data, expected, rtol=1e-12)

    def test_single_sample_training_uses_running_stats(self, rng):
        x = rng.normal(size=(2, 1, 3, 3))
        state = BatchNormState.fresh(2)
        before = (state.running_mean.copy(), state.running_var.copy())
        out = ad.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "train")
        infer = ad.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "infer")
        npt.assert_array_equal(out.data, infer.data)
        npt.assert_array_equal(state.running_mean, before[0])
        npt.assert_array_equal(state.running_var, before[1])

    @pytest.mark.parametrize("mode,batch", [("train", 3), ("train", 1), ("infer", 2)])
    def test_gradients_vs_finite_differences(self, rng, mode, batch):
        x = Tensor(rng.normal(size=(2, batch, 3, 4)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True)
        beta = Tensor(rng.normal(size=2), requires_grad=True)
        seed_state = BatchNormState.fresh(2)
        seed_state.running_mean = rng.normal(size=2)
        seed_state.running_var = rng.uniform(0.5, 2.0, size=2)
        # random probe direction: a symmetric loss like sum(out^2) is nearly
        # input-invariant under batch normalisation, which starves the finite
        # differences of signal
        probe = rng.normal(size=x.shape)

        def forward():
            out = ad.batchnorm(x, gamma, beta, seed_state.copy(), mode)
            return ad.sum_all(ad.mul(ad.tanh(out), probe))

        assert fd_check(forward, {"x": x, "gamma": gamma, "beta": beta}) < 1e-4

    def test_mode_validation(self, rng):
        with pytest.raises(ValueError, match="mode"):
            ad.batchnorm(Tensor(rng.normal(size=(1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                         BatchNormState.fresh(1), "evaluate")


# ---------------------------------------------------------------------------
# Huber loss


class TestHuberLoss:
    def test_quadratic_branch(self):
        loss = ad.huber_loss(Tensor([0.5]), np.array([0.0]), delta=1.0)
        npt.assert_allclose(loss.item(), 0.125, atol=0)

    def test_linear_branch(self):
        loss = ad.huber_loss(Tensor([2.0]), np.array([0.0]), delta=1.0)
        npt.assert_allclose(loss.item(), 1.5, atol=0)

    def test_branch_formulas_agree_at_boundary(self):
        r, delta = 1.0, 1.0
        quadratic = 0.5 * r * r
        linear_tail = delta * (abs(r) - 0.5 * delta)
        assert quadratic == linear_tail == ad.huber_loss(Tensor([r]), np.array([0.0]), delta).item()

    def test_first_derivative_continuous_at_boundary(self):
        delta, h = 1.0, 1e-7

        def f(r):
            return ad.huber_loss(Tensor([r]), np.array([0.0]), delta).item()

        left = (f(delta) - f(delta - h)) / h
        right = (f(delta + h) - f(delta)) / h
        npt.assert_allclose(left, right, atol=1e-6)
        npt.assert_allclose(left, delta, atol=1e-6)

    def test_mean_reduction_and_gradient(self, rng):
        pred = Tensor(rng.normal(size=(4, 3)) * 2, requires_grad=True)
        target = rng.normal(size=(4, 3))
        assert fd_check(lambda: ad.huber_loss(pred, target, 1.0), {"pred": pred}) < 1e-6

    def test_invalid_delta_rejected(self):
        with pytest.raises(ValueError, match="delta"):
            ad.huber_loss(Tensor([1.0]), np.array([0.0]), delta=0.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ad.huber_loss(Tensor([1.0, 2.0]), np.array([0.0]), delta=1.0)


# ---------------------------------------------------------------------------
# backward semantics


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        w = Tensor(rng.normal(size=5), requires_grad=True)
        ad.sum_all(w).backward()
        npt.assert_array_equal(w.grad, np.ones(5))

    def test_elementwise_square_gradient(self, rng):
        w = Tensor(rng.normal(size=5), requires_grad=True)
        ad.sum_all(ad.mul(w, w)).backward()
        npt.assert_allclose(w.grad, 2 * w.data, rtol=1e-12)

    def test_fanout_accumulates_additively(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        loss = ad.sum_all(ad.add(ad.mul(w, 2.0), ad.mul(w, 3.0)))
        loss.backward()
        npt.assert_allclose(w.grad, np.full(3, 5.0), atol=0)

    def test_sibling_gradients_do_not_alias(self, rng):
        a = Tensor(rng.normal(size=3), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        ad.sum_all(ad.add(a, b)).backward()
        a.grad[0] = 99.0
        npt.assert_array_equal(b.grad, np.ones(3))

    def test_non_scalar_rejected(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            ad.mul(w, 2.0).backward()

    def test_consumed_graph_rejected(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        loss = ad.sum_all(w)
        loss.backward()
        with pytest.raises(RuntimeError, match="single-use"):
            loss.backward()

    def test_free_function_alias(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        ad.backward(ad.sum_all(w))
        npt.assert_array_equal(w.grad, np.ones(3))

    def test_detach_blocks_gradient(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        ad.sum_all(ad.add(w.detach(), 1.0)).backward = None  # detached result has no graph
        out = ad.add(w.detach(), 1.0)
        assert not out.requires_grad

    def test_no_grad_suppresses_graph(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        with ad.no_grad():
            out = ad.mul(w, w)
        assert not out.requires_grad
        assert out._parents == ()


# ---------------------------------------------------------------------------
# shape plumbing ops


class TestPlumbingOps:
    def test_concat_narrow_roundtrip(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        joined = ad.concat([a, b], axis=1)
        assert joined.shape == (2, 5)
        npt.assert_array_equal(ad.narrow(joined, 1, 0, 3).data, a.data)
        npt.assert_array_equal(ad.narrow(joined, 1, 3, 2).data, b.data)

    def test_concat_gradient_splits(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)

        def forward():
            j = ad.concat([a, b], axis=1)
            return ad.sum_all(ad.mul(j, j))

        assert fd_check(forward, {"a": a, "b": b}) < 1e-6

    def test_narrow_out_of_range(self, rng):
        with pytest.raises(ShapeError):
            ad.narrow(Tensor(rng.normal(size=(2, 3))), 1, 2, 2)

    def test_reshape_transpose_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)

        def forward():
            y = ad.transpose(ad.reshape(x, (6, 4)), (1, 0))
            return ad.sum_all(ad.mul(y, y))

        assert fd_check(forward, {"x": x}) < 1e-6

    def test_broadcasting_add_mul_gradients(self, rng):
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        s = Tensor(rng.normal(size=(4, 1)), requires_grad=True)

        def forward():
            return ad.sum_all(ad.mul(ad.add(a, b), s))

        assert fd_check(forward, {"a": a, "b": b, "s": s}) < 1e-6

    def test_mean_all(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        loss = ad.mean_all(x)
        npt.assert_allclose(loss.item(), x.data.mean(), rtol=1e-15)
        loss.backward()
        npt.assert_allclose(x.grad, np.full((3, 4), 1 / 12), rtol=1e-15)


# ---------------------------------------------------------------------------
# properties: every op keeps the spec's shape algebra


class TestShapeAlgebra:
    @given(
        st.integers(min_value=3, max_value=10),
        st.integers(min_value=3, max_value=10),
        st.integers(min_value=1, max_value=3),
    )
    def test_same_conv_preserves_spatial_dims(self, h, w, c):
        rng = np.random.default_rng(h * 100 + w * 10 + c)
        x = Tensor(rng.normal(size=(c, h, w)))
        k = Tensor(rng.normal(size=(2, c, 3, 3)))
        out = ad.conv2d(x, k, Tensor(np.zeros(2)), stride=(1, 1), padding=(1, 1))
        assert out.shape == (2, h, w)

    @given(st.integers(min_value=16, max_value=64), st.integers(min_value=16, max_value=64))
    def test_pool_chain_is_floor_div_16(self, h, w):
        x = Tensor(np.zeros((1, h, w)))
        out = ad.avgpool2d(ad.avgpool2d(ad.avgpool2d(x, (4, 4)), (2, 2)), (2, 2))
        assert out.shape == (1, h // 16, w // 16)


# ---------------------------------------------------------------------------
# grad_check itself


class TestGradCheck:
    def test_linear_layer_tight_tolerance(self, rng):
        x = Tensor(rng.normal(size=6))
        w = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        report = ad.grad_check(lambda: ad.sum_all(ad.linear(x, w, b)), {"w": w, "b": b}, eps=1e-5)
        assert report.max_rel_error < 1e-6
        assert report.passed(1e-6)

    def test_sigmoid_gate_path(self, rng):
        x_a = Tensor(rng.normal(size=5))
        x_b = Tensor(rng.normal(size=7))
        params = {
            "wa": Tensor(rng.normal(size=(1, 5)), requires_grad=True),
            "wb": Tensor(rng.normal(size=(1, 7)), requires_grad=True),
            "wc": Tensor(rng.normal(size=(1, 2)), requires_grad=True),
            "bc": Tensor(rng.normal(size=1), requires_grad=True),
        }

        def forward():
            pair = ad.concat([ad.linear(x_a, params["wa"], None), ad.linear(x_b, params["wb"], None)], axis=0)
            return ad.sum_all(ad.sigmoid(ad.linear(pair, params["wc"], params["bc"])))

        report = ad.grad_check(forward, params, eps=1e-5)
        assert report.max_rel_error < 1e-5

    def test_corrupted_gradient_is_flagged(self, rng):
        w = Tensor(rng.normal(size=4), requires_grad=True)
        report = ad.grad_check(lambda: ad.sum_all(ad.mul(w, w)), {"w": w}, eps=1e-5, _corrupt="w")
        assert not report.passed(1e-4)
        assert report.entries[0].name == "w"

    def test_report_covers_each_tensor_once_sorted(self, rng):
        params = {
            "a": Tensor(rng.normal(size=3), requires_grad=True),
            "b": Tensor(rng.normal(size=2), requires_grad=True),
        }

        def forward():
            return ad.sum_all(ad.concat([ad.mul(params["a"], params["a"]), params["b"]], axis=0))

        report = ad.grad_check(forward, params, eps=1e-5)
        assert sorted(e.name for e in report.entries) == ["a", "b"]
        errs = [e.max_rel_error for e in report.entries]
        assert errs == sorted(errs, reverse=True)

    def test_nan_reported_not_swallowed(self, rng):
        w = Tensor(np.array([0.0]), requires_grad=True)

        def forward():
            # NaN appears only when w is perturbed negative: sqrt of a negative
            data = np.sqrt(w.data) if (w.data >= 0).all() else np.array([np.nan])
            return ad.mul(Tensor(data), ad.sum_all(w))

        report = ad.grad_check(forward, {"w": w}, eps=1e-5)
        assert report.nan_sites
        assert not report.passed(1e-4)
