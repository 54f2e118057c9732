"""Unit tests for the tensor/autodiff core."""

import numpy as np
import pytest

from tpcnet import kernels
from tpcnet.autodiff import (
    BatchNorm,
    Graph,
    Tensor,
    backward,
    broadcast_repeat,
    concat,
    dropout,
    exp,
    grouped_causal_conv,
    hardtanh,
    log,
    masked_mean,
    mul,
    pointwise_linear,
    relu,
    reshape,
    sigmoid,
    softplus,
    take_slice,
    tensor_sum,
)
from tpcnet.errors import (
    DegenerateMaskError,
    DimensionError,
    DomainError,
    GraphError,
    NormStateError,
)
from tpcnet.gradcheck import finite_difference_check

from oracles import naive_causal_conv, naive_pointwise

GRAD_TOL = 1e-4


class TestCausalConv:
    def test_worked_example_running_sum(self):
        """A filter adding the current and previous value gives [1, 3, 5]."""
        x = Tensor(np.array([[[1.0, 2.0, 3.0], [1.0, 1.0, 1.0]]]))
        filters = np.zeros((1, 1, 2, 2))
        filters[0, 0, 0, :] = 1.0  # both taps read the value channel
        out = grouped_causal_conv(x, Tensor(filters), dilation=1)
        np.testing.assert_allclose(out.data, [[[1.0, 3.0, 5.0]]])

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(11)
        for g, c, y, k, t, d in [
            (1, 1, 1, 1, 1, 1),
            (3, 2, 4, 3, 12, 1),
            (2, 5, 3, 4, 9, 2),
            (4, 2, 2, 3, 5, 4),  # receptive field exceeds T
            (2, 3, 3, 2, 20, 7),
        ]:
            x = rng.normal(size=(g, c, t))
            f = rng.normal(size=(g, y, c, k))
            got = grouped_causal_conv(Tensor(x), Tensor(f), d).data
            np.testing.assert_allclose(got, naive_causal_conv(x, f, d), atol=1e-12)

    def test_shared_bank_matches_naive_oracle(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(5, 2, 8))
        f = rng.normal(size=(1, 3, 2, 3))
        got = grouped_causal_conv(Tensor(x), Tensor(f), 2).data
        np.testing.assert_allclose(got, naive_causal_conv(x, f, 2), atol=1e-12)

    def test_batched_equals_stacked(self):
        rng = np.random.default_rng(13)
        xs = rng.normal(size=(4, 3, 2, 10))
        f = rng.normal(size=(3, 2, 2, 3))
        batched = grouped_causal_conv(Tensor(xs), Tensor(f), 2).data
        for b in range(4):
            single = grouped_causal_conv(Tensor(xs[b]), Tensor(f), 2).data
            np.testing.assert_array_equal(batched[b], single)

    def test_causality_future_perturbation(self):
        """Output at time t is bitwise unchanged by edits at times > t."""
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 3, 16))
        f = rng.normal(size=(2, 4, 3, 3))
        base = grouped_causal_conv(Tensor(x), Tensor(f), 2).data
        for t_cut in [0, 5, 11]:
            x2 = x.copy()
            x2[:, :, t_cut + 1 :] = rng.normal(size=x2[:, :, t_cut + 1 :].shape) * 50
            pert = grouped_causal_conv(Tensor(x2), Tensor(f), 2).data
            np.testing.assert_array_equal(base[:, :, : t_cut + 1], pert[:, :, : t_cut + 1])

    def test_gradients(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(2, 2, 7))
        f = rng.normal(size=(2, 3, 2, 3))
        weight = rng.normal(size=(2, 3, 7))

        def loss_wrt_x(t):
            return tensor_sum(mul(grouped_causal_conv(t, Tensor(f), 2), Tensor(weight)))

        def loss_wrt_f(t):
            return tensor_sum(mul(grouped_causal_conv(Tensor(x), t, 2), Tensor(weight)))

        assert finite_difference_check(loss_wrt_x, Tensor(x)) < GRAD_TOL
        assert finite_difference_check(loss_wrt_f, Tensor(f)) < GRAD_TOL

    def test_shared_bank_gradients(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(3, 2, 6))
        f = rng.normal(size=(1, 2, 2, 2))
        weight = rng.normal(size=(3, 2, 6))

        def loss_wrt_f(t):
            return tensor_sum(mul(grouped_causal_conv(Tensor(x), t, 1), Tensor(weight)))

        assert finite_difference_check(loss_wrt_f, Tensor(f)) < GRAD_TOL

    def test_shape_validation(self):
        x = Tensor(np.zeros((2, 3, 5)))
        with pytest.raises(DimensionError):
            grouped_causal_conv(x, Tensor(np.zeros((2, 4, 2, 3))), 1)  # channel mismatch
        with pytest.raises(DimensionError):
            grouped_causal_conv(x, Tensor(np.zeros((3, 4, 3, 3))), 1)  # group mismatch
        with pytest.raises(DimensionError):
            grouped_causal_conv(x, Tensor(np.zeros((2, 4, 3, 3))), 0)  # bad dilation

    @pytest.mark.skipif(kernels.BACKEND != "compiled", reason="extension not built")
    def test_backends_agree(self):
        from tpcnet.kernels import reference

        rng = np.random.default_rng(17)
        x = np.ascontiguousarray(rng.normal(size=(3, 4, 3, 18)))
        f = np.ascontiguousarray(rng.normal(size=(4, 5, 3, 4)))
        g = np.ascontiguousarray(rng.normal(size=(3, 4, 5, 18)))
        for d in (1, 2, 5):
            np.testing.assert_allclose(
                kernels.conv_forward(x, f, d), reference.conv_forward(x, f, d), rtol=1e-12, atol=1e-12
            )
            np.testing.assert_allclose(
                kernels.conv_backward_input(g, f, d),
                reference.conv_backward_input(g, f, d),
                rtol=1e-12,
                atol=1e-12,
            )
            for shared in (False, True):
                gref = reference.conv_backward_filters(g, x, d, 4, shared)
                gcmp = kernels.conv_backward_filters(g, x, d, 4, shared)
                np.testing.assert_allclose(gcmp, gref, rtol=1e-12, atol=1e-12)


class TestPointwiseLinear:
    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(5, 7))
        w = rng.normal(size=(3, 5))
        b = rng.normal(size=3)
        got = pointwise_linear(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(got, naive_pointwise(x, w, b), atol=1e-12)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(22)
        x = rng.normal(size=(4, 5, 6))
        w = rng.normal(size=(2, 5))
        b = rng.normal(size=2)
        got = pointwise_linear(Tensor(x), Tensor(w), Tensor(b)).data
        for i in range(4):
            np.testing.assert_allclose(got[i], naive_pointwise(x[i], w, b), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(23)
        x = rng.normal(size=(2, 4, 5))
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=3)
        weight = rng.normal(size=(2, 3, 5))

        def wrt_x(t):
            return tensor_sum(mul(pointwise_linear(t, Tensor(w), Tensor(b)), Tensor(weight)))

        def wrt_w(t):
            return tensor_sum(mul(pointwise_linear(Tensor(x), t, Tensor(b)), Tensor(weight)))

        def wrt_b(t):
            return tensor_sum(mul(pointwise_linear(Tensor(x), Tensor(w), t), Tensor(weight)))

        for fn, arg in [(wrt_x, x), (wrt_w, w), (wrt_b, b)]:
            assert finite_difference_check(fn, Tensor(arg)) < GRAD_TOL

    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            pointwise_linear(Tensor(np.zeros((4, 6))), Tensor(np.zeros((3, 5))), Tensor(np.zeros(3)))
        with pytest.raises(DimensionError):
            pointwise_linear(Tensor(np.zeros((5, 6))), Tensor(np.zeros((3, 5))), Tensor(np.zeros(2)))


class TestElementwise:
    def test_forward_values(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]))
        np.testing.assert_array_equal(relu(x).data, [0.0, 0.0, 3.0])
        np.testing.assert_allclose(exp(x).data, np.exp([-2.0, 0.0, 3.0]))
        np.testing.assert_allclose(sigmoid(x).data, 1 / (1 + np.exp([2.0, 0.0, -3.0])))
        np.testing.assert_allclose(softplus(x).data, np.log1p(np.exp([-2.0, 0.0, 3.0])))

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            log(Tensor(np.array([1.0, 0.0])))
        with pytest.raises(DomainError):
            log(Tensor(np.array([-1.0])))

    def test_hardtanh_clamps_both_sides(self):
        lo, hi = 1.0 / 48.0, 100.0
        x = Tensor(np.array([0.001, 0.5, 5.0, 150.0]))
        out = hardtanh(x, lo, hi)
        np.testing.assert_allclose(out.data, [lo, 0.5, 5.0, hi])

    def test_sigmoid_extreme_inputs_are_finite(self):
        out = sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)

    def test_gradients_at_interior_points(self):
        rng = np.random.default_rng(31)
        weight = rng.normal(size=7)
        cases = [
            (relu, rng.normal(size=7) + np.sign(rng.normal(size=7)) * 0.2),
            (exp, rng.normal(size=7)),
            (log, rng.uniform(0.5, 3.0, size=7)),
            (sigmoid, rng.normal(size=7)),
            (softplus, rng.normal(size=7)),
            (lambda t: hardtanh(t, -1.0, 1.0), rng.uniform(-0.8, 0.8, size=7)),
        ]
        for fn, point in cases:
            def loss(t, fn=fn):
                return tensor_sum(mul(fn(t), Tensor(weight)))

            assert finite_difference_check(loss, Tensor(point)) < GRAD_TOL

    def test_hardtanh_saturated_gradient_is_zero(self):
        x = Tensor(np.array([-5.0, 0.0, 5.0]), requires_grad=True)
        with Graph() as g:
            loss = tensor_sum(hardtanh(x, -1.0, 1.0))
        backward(g, loss, params=(x,))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestStructural:
    def test_concat_and_gradient_split(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.full((2, 2), 2.0), requires_grad=True)
        with Graph() as g:
            out = concat([a, b], axis=1)
            loss = tensor_sum(mul(out, Tensor(np.arange(10.0).reshape(2, 5))))
        assert out.shape == (2, 5)
        backward(g, loss, params=())
        np.testing.assert_array_equal(a.grad, [[0, 1, 2], [5, 6, 7]])
        np.testing.assert_array_equal(b.grad, [[3, 4], [8, 9]])

    def test_concat_shape_mismatch(self):
        with pytest.raises(DimensionError):
            concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)

    def test_broadcast_repeat_inserts_axis(self):
        x = Tensor(np.arange(8.0).reshape(4, 2))
        out = broadcast_repeat(x, axis=1, count=3)
        assert out.shape == (4, 3, 2)
        for i in range(3):
            np.testing.assert_array_equal(out.data[:, i, :], x.data)

    def test_broadcast_repeat_gradient_sums_copies(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Graph() as g:
            out = broadcast_repeat(x, axis=0, count=4)
            loss = tensor_sum(out)
        backward(g, loss)
        np.testing.assert_array_equal(x.grad, np.full((2, 3), 4.0))

    def test_reshape_roundtrip_bitwise(self):
        rng = np.random.default_rng(41)
        x = Tensor(rng.normal(size=(3, 4, 5)))
        back = reshape(reshape(x, (12, 5)), (3, 4, 5))
        np.testing.assert_array_equal(back.data, x.data)

    def test_take_slice_gradient_scatter(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        with Graph() as g:
            loss = tensor_sum(take_slice(x, (slice(1, 3), slice(0, 2))))
        backward(g, loss)
        expected = np.zeros((3, 4))
        expected[1:3, 0:2] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_masked_mean_value_and_gradient(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 100.0]]), requires_grad=True)
        mask = np.array([[1.0, 1.0], [1.0, 0.0]])
        with Graph() as g:
            out = masked_mean(x, mask)
        assert out.item() == pytest.approx(2.0)
        backward(g, out)
        np.testing.assert_allclose(x.grad, mask / 3.0)

    def test_masked_mean_degenerate(self):
        with pytest.raises(DegenerateMaskError):
            masked_mean(Tensor(np.ones((2, 2))), np.zeros((2, 2)))

    def test_div_values_and_gradients(self):
        from tpcnet.autodiff import div

        rng = np.random.default_rng(42)
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(3, 4))
        np.testing.assert_array_equal(div(Tensor(a), Tensor(b)).data, a / b)
        weight = rng.normal(size=(3, 4))

        def wrt_a(t):
            return tensor_sum(mul(div(t, Tensor(b)), Tensor(weight)))

        def wrt_b(t):
            return tensor_sum(mul(div(Tensor(a), t), Tensor(weight)))

        assert finite_difference_check(wrt_a, Tensor(a)) < GRAD_TOL
        assert finite_difference_check(wrt_b, Tensor(b)) < GRAD_TOL
        with pytest.raises(DomainError):
            div(Tensor(np.ones(2)), Tensor(np.array([1.0, 0.0])))

    def test_broadcast_arithmetic_unbroadcasts_gradients(self):
        a = Tensor(np.ones((3, 1)), requires_grad=True)
        b = Tensor(np.ones((1, 4)), requires_grad=True)
        with Graph() as g:
            loss = tensor_sum(mul(a + b, Tensor(np.arange(12.0).reshape(3, 4))))
        backward(g, loss)
        assert a.grad.shape == (3, 1)
        assert b.grad.shape == (1, 4)
        np.testing.assert_array_equal(a.grad[:, 0], [6.0, 22.0, 38.0])
        np.testing.assert_array_equal(b.grad[0], [12.0, 15.0, 18.0, 21.0])


class TestBackwardMechanics:
    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Graph() as g:
            loss = tensor_sum(mul(x, x) + x)  # d/dx (x^2 + x) = 2x + 1
        backward(g, loss)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_backward_twice_raises(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with Graph() as g:
            loss = tensor_sum(x)
        backward(g, loss)
        with pytest.raises(GraphError):
            backward(g, loss)

    def test_non_scalar_loss_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Graph() as g:
            out = mul(x, x)
        with pytest.raises(GraphError):
            backward(g, out)

    def test_disconnected_param_gets_zero_grad(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        with Graph() as g:
            loss = tensor_sum(x)
        backward(g, loss, params=(unused,))
        assert unused.grad is not None
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))

    def test_tape_is_topologically_ordered(self):
        x = Tensor(np.ones(4), requires_grad=True)
        with Graph() as g:
            a = relu(x)
            b = exp(a)
            c = mul(a, b)
            tensor_sum(c)
        produced = {id(x)}
        for rec in g._records:
            for inp in rec.inputs:
                if inp.requires_grad:
                    assert id(inp) in produced or inp.grad is None and not any(
                        id(inp) == id(r.out) for r in g._records
                    )
            produced.add(id(rec.out))

    def test_no_recording_without_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        out = mul(x, x)  # no active graph
        np.testing.assert_array_equal(out.data, np.ones(3))
        with Graph() as g:
            pass
        assert len(g) == 0

    def test_values_identical_with_and_without_graph(self):
        rng = np.random.default_rng(51)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        plain = pointwise_linear(x, w, b).data
        with Graph():
            recorded = pointwise_linear(x, w, b).data
        np.testing.assert_array_equal(plain, recorded)


class TestBatchNorm:
    def test_train_output_statistics(self):
        """Normalised output has mean 0 / variance 1 over valid cells."""
        rng = np.random.default_rng(61)
        bn = BatchNorm(channels=3)
        x = Tensor(rng.normal(scale=300.0, size=(4, 3, 12)))
        out = bn(x, mask=None, training=True).data
        mean = out.mean(axis=(0, 2))
        var = out.var(axis=(0, 2))
        np.testing.assert_allclose(mean, 0.0, atol=1e-9)
        np.testing.assert_allclose(var, 1.0, atol=1e-9)

    def test_masked_statistics_ignore_padding(self):
        rng = np.random.default_rng(62)
        bn = BatchNorm(channels=2)
        x = rng.normal(size=(2, 2, 6))
        mask = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 1, 0, 0, 0]], dtype=float)
        x_t = Tensor(x.copy())
        out1 = bn(x_t, mask=mask, training=True).data
        # Garbage in padded cells must not change valid outputs.
        x2 = x.copy()
        x2[0, :, 4:] = 1e6
        x2[1, :, 3:] = -1e6
        bn2 = BatchNorm(channels=2)
        out2 = bn2(Tensor(x2), mask=mask, training=True).data
        np.testing.assert_array_equal(out1[0, :, :4], out2[0, :, :4])
        np.testing.assert_array_equal(out1[1, :, :3], out2[1, :, :3])

    def test_running_statistics_match_formula(self):
        rng = np.random.default_rng(63)
        bn = BatchNorm(channels=2, momentum=0.1)
        x = rng.normal(loc=5.0, scale=2.0, size=(3, 2, 8))
        bn(Tensor(x), mask=None, training=True)
        n = 3 * 8
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        np.testing.assert_allclose(bn.running_mean, 0.9 * 0.0 + 0.1 * mean, atol=1e-12)
        np.testing.assert_allclose(
            bn.running_var, 0.9 * 1.0 + 0.1 * var * n / (n - 1), atol=1e-12
        )

    def test_eval_before_any_update_raises(self):
        bn = BatchNorm(channels=2)
        with pytest.raises(NormStateError):
            bn(Tensor(np.zeros((1, 2, 3))), mask=None, training=False)

    def test_eval_is_fixed_affine(self):
        rng = np.random.default_rng(64)
        bn = BatchNorm(channels=2)
        bn(Tensor(rng.normal(size=(4, 2, 6))), mask=None, training=True)
        x = rng.normal(size=(1, 2, 5))
        out1 = bn(Tensor(x), mask=None, training=False).data
        out2 = bn(Tensor(x), mask=None, training=False).data
        np.testing.assert_array_equal(out1, out2)
        expected = (
            bn.gamma.data[None, :, None]
            * (x - bn.running_mean[None, :, None])
            / np.sqrt(bn.running_var[None, :, None] + bn.eps)
            + bn.beta.data[None, :, None]
        )
        np.testing.assert_allclose(out1, expected, atol=1e-12)

    def test_train_gradients(self):
        rng = np.random.default_rng(65)
        x = rng.normal(size=(2, 3, 5))
        mask = np.array([[1, 1, 1, 1, 0], [1, 1, 1, 0, 0]], dtype=float)
        weight = rng.normal(size=(2, 3, 5))

        def wrt_x(t):
            bn = BatchNorm(channels=3)
            return tensor_sum(mul(bn(t, mask=mask, training=True), Tensor(weight)))

        assert finite_difference_check(wrt_x, Tensor(x)) < GRAD_TOL

        base = BatchNorm(channels=3)

        def wrt_gamma(t):
            base.gamma = t
            return tensor_sum(mul(base(Tensor(x), mask=mask, training=True), Tensor(weight)))

        assert finite_difference_check(wrt_gamma, Tensor(np.ones(3))) < GRAD_TOL

    def test_eval_gradients(self):
        rng = np.random.default_rng(66)
        bn = BatchNorm(channels=2)
        bn(Tensor(rng.normal(size=(3, 2, 6))), mask=None, training=True)
        x = rng.normal(size=(2, 2, 4))
        weight = rng.normal(size=(2, 2, 4))

        def wrt_x(t):
            return tensor_sum(mul(bn(t, mask=None, training=False), Tensor(weight)))

        assert finite_difference_check(wrt_x, Tensor(x)) < GRAD_TOL


class TestDropout:
    def test_eval_is_identity_object(self):
        x = Tensor(np.ones((3, 3)))
        assert dropout(x, 0.5, np.random.default_rng(0), training=False) is x
        assert dropout(x, 0.0, np.random.default_rng(0), training=True) is x

    def test_train_scaling_preserves_expectation(self):
        rng = np.random.default_rng(71)
        x = Tensor(np.ones((200, 200)))
        out = dropout(x, 0.45, rng, training=True).data
        dropped = float((out == 0).mean())
        assert abs(dropped - 0.45) < 0.01
        assert abs(out.mean() - 1.0) < 0.01
        kept = out[out != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.55, rtol=1e-12)

    def test_deterministic_given_seed(self):
        x = Tensor(np.ones((10, 10)))
        a = dropout(x, 0.3, np.random.default_rng(5), training=True).data
        b = dropout(x, 0.3, np.random.default_rng(5), training=True).data
        np.testing.assert_array_equal(a, b)
