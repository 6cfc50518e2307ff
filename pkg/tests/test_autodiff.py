import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slashlab import autodiff as ad
from slashlab.errors import ConfigError, ShapeError, UsageError
from slashlab.gradcheck import finite_diff_check


def param(arr, name="p"):
    return ad.Parameter(np.asarray(arr, dtype=np.float64), name, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        out = ad.matmul(ad.Tensor(np.eye(3), dtype=np.float64), ad.Tensor(a, dtype=np.float64))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_arithmetic(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0], [3.0, 4.0]]), ad.Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        a = param(rng.normal(size=(4, 5)), "a")
        b = param(rng.normal(size=(5, 3)), "b")
        err = finite_diff_check(lambda: ad.reduce_sum(ad.matmul(a, b)), [a, b])
        assert err <= 1e-4


class TestSoftmax:
    def test_symmetric_input(self):
        out = ad.softmax(ad.Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)

    def test_stabilized_against_overflow(self):
        out = ad.softmax(ad.Tensor([1000.0, 0.0]), axis=0)
        assert np.isfinite(out.data).all()
        assert out.data[0] > 0.999999
        assert out.data[1] < 1e-6

    def test_temperature_two_matches_scalar_recomputation(self):
        x = [1.0, 2.0, 3.0]
        out = ad.softmax(ad.Tensor(x, dtype=np.float64), axis=0, temperature=2.0)
        es = [math.exp(v / 2.0) for v in x]
        expected = [e / sum(es) for e in es]
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ConfigError):
            ad.softmax(ad.Tensor([1.0]), axis=0, temperature=0.0)

    @given(st.lists(st.floats(-300, 300, allow_nan=False), min_size=2, max_size=9))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, values):
        x32 = ad.softmax(ad.Tensor(np.array(values, dtype=np.float32)), axis=0)
        assert abs(x32.data.sum() - 1.0) <= 1e-5
        x64 = ad.softmax(ad.Tensor(np.array(values, dtype=np.float64)), axis=0)
        assert abs(x64.data.sum() - 1.0) <= 1e-12


class TestConv2dSingle:
    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(1)
        x = ad.Tensor(rng.normal(size=(7, 6)), dtype=np.float64)
        delta = np.zeros((3, 3))
        delta[1, 1] = 1.0
        out = ad.conv2d_single(x, ad.Tensor(delta, dtype=np.float64))
        np.testing.assert_array_equal(out.data, x.data)

    def test_constant_input_preserved_by_sum_one_kernel(self):
        k = np.random.default_rng(2).uniform(size=(5, 5))
        k /= k.sum()
        out = ad.conv2d_single(ad.Tensor(np.full((6, 6), 3.5)), ad.Tensor(k, dtype=np.float64))
        np.testing.assert_allclose(out.data, 3.5, rtol=1e-12)

    def test_uniform_kernel_equals_neighborhood_mean(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 5))
        out = ad.conv2d_single(
            ad.Tensor(x, dtype=np.float64), ad.Tensor(np.full((3, 3), 1 / 9), dtype=np.float64))
        # independent oracle: direct neighborhood averaging on interior pixels
        for i in range(1, 4):
            for j in range(1, 4):
                assert out.data[i, j] == pytest.approx(x[i - 1:i + 2, j - 1:j + 2].mean(), rel=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ad.conv2d_single(ad.Tensor(np.zeros((4, 4))), ad.Tensor(np.zeros((2, 2))))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_simplex_kernel_preserves_range(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 6)) * rng.uniform(0.1, 10)
        k = rng.uniform(size=(3, 3)) ** 2
        k /= k.sum()
        out = ad.conv2d_single(ad.Tensor(x, dtype=np.float64), ad.Tensor(k, dtype=np.float64)).data
        assert out.max() <= x.max() + 1e-12
        assert out.min() >= x.min() - 1e-12


class TestLayerNorm:
    def test_constant_input_gives_zeros(self):
        x = ad.Tensor(np.full((4,), 2.7), dtype=np.float64)
        out = ad.layer_norm(x, ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)), axis=0)
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_two_point_standardization(self):
        out = ad.layer_norm(
            ad.Tensor([1.0, 3.0], dtype=np.float64),
            ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)), axis=0)
        # variance 1 with eps=1e-5 shrinks |1| slightly
        np.testing.assert_allclose(out.data, [-1.0, 1.0], rtol=1e-4)

    def test_moments_recomputed(self):
        rng = np.random.default_rng(4)
        x = ad.Tensor(rng.normal(size=(32,)) * 3 + 1, dtype=np.float64)
        out = ad.layer_norm(x, ad.Tensor(np.ones(32)), ad.Tensor(np.zeros(32)), axis=0).data
        assert abs(out.mean()) <= 1e-6
        assert abs(out.var() - 1.0) <= 1e-3

    def test_gain_bias_length_checked(self):
        with pytest.raises(ShapeError):
            ad.layer_norm(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(3)))


def make_gru(rng, d, bias_z=0.0):
    def mk(shape, name):
        return param(rng.normal(size=shape) * 0.4, name)

    p = ad.GRUParams(
        mk((d, d), "wz"), mk((d, d), "uz"), param(np.full(d, bias_z), "bz"),
        mk((d, d), "wr"), mk((d, d), "ur"), mk((d,), "br"),
        mk((d, d), "wh"), mk((d, d), "uh"), mk((d,), "bh"))
    return p


class TestGruCell:
    def test_update_gate_saturated_low_gives_candidate(self):
        rng = np.random.default_rng(5)
        p = make_gru(rng, 4, bias_z=-60.0)
        p.w_z.data[:] = 0.0
        p.u_z.data[:] = 0.0
        state = ad.Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        inp = ad.Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        out = ad.gru_cell(state, inp, p)
        r = ad.sigmoid(inp @ p.w_r + state @ p.u_r + p.b_r)
        cand = ad.tanh(inp @ p.w_h + ad.mul(r, state) @ p.u_h + p.b_h)
        np.testing.assert_allclose(out.data, cand.data, atol=1e-12)

    def test_update_gate_saturated_high_keeps_state(self):
        rng = np.random.default_rng(6)
        p = make_gru(rng, 4, bias_z=60.0)
        p.w_z.data[:] = 0.0
        p.u_z.data[:] = 0.0
        state = ad.Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        inp = ad.Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        out = ad.gru_cell(state, inp, p)
        np.testing.assert_allclose(out.data, state.data, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        p = make_gru(rng, 4)
        state = param(rng.normal(size=(2, 4)), "state")
        inp = param(rng.normal(size=(2, 4)), "inp")

        def f():
            out = ad.gru_cell(state, inp, p)
            return ad.reduce_sum(ad.mul(out, out))

        assert finite_diff_check(f, p.tensors() + [state, inp]) <= 1e-4


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = param(np.arange(6, dtype=float).reshape(2, 3))
        with ad.Tape() as tape:
            loss = ad.reduce_sum(x)
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[x], np.ones((2, 3)))

    def test_mse_gradient_is_2x_over_n(self):
        x = param([1.0, -2.0, 3.0, 0.5])
        with ad.Tape() as tape:
            loss = ad.reduce_mean(ad.mul(x, x))
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads[x], 2.0 * x.data / 4.0, rtol=1e-12)

    def test_nonscalar_loss_rejected(self):
        x = param(np.ones(3))
        with ad.Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(UsageError):
            tape.backward(y)

    def test_tape_is_single_use(self):
        x = param(np.ones(3))
        with ad.Tape() as tape:
            loss = ad.reduce_sum(x)
        tape.backward(loss)
        with pytest.raises(UsageError):
            tape.backward(loss)

    def test_disconnected_loss_rejected(self):
        x = param(np.ones(3))
        with ad.Tape() as tape:
            ad.reduce_sum(x)
        other = ad.Tensor(1.0)
        with pytest.raises(UsageError):
            tape.backward(other)

    def test_grad_accumulates_across_tapes(self):
        x = param(np.ones(3))
        for _ in range(2):
            with ad.Tape() as tape:
                loss = ad.reduce_sum(x)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))

    def test_reused_input_accumulates_within_graph(self):
        x = param([3.0])
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.mul(x, x))
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads[x], [6.0])


class TestFiniteDiffCheck:
    def test_quadratic_is_exact_up_to_rounding(self):
        theta = param([3.0])
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.mul(theta, theta))
        grads = tape.backward(loss)
        assert grads[theta][0] == pytest.approx(6.0)
        err = finite_diff_check(lambda: ad.reduce_sum(ad.mul(theta, theta)), [theta])
        assert err <= 1e-6

    def test_softmax_composition(self):
        x = param([0.3, -1.2, 0.8, 2.0])

        def f():
            s = ad.softmax(x, axis=0)
            return ad.reduce_sum(ad.mul(s, x))

        assert finite_diff_check(f, [x]) <= 1e-6

    def test_conv_kernel_gradient(self):
        rng = np.random.default_rng(8)
        x = ad.Tensor(rng.normal(size=(6, 6)), dtype=np.float64)
        k = param(rng.normal(size=(3, 3)), "k")

        def f():
            y = ad.conv2d_single(x, k)
            return ad.reduce_sum(ad.mul(y, y))

        assert finite_diff_check(f, [k]) <= 1e-5

    def test_nan_loss_propagates_as_failure(self):
        from slashlab.errors import NumericError
        x = param([1.0])

        def f():
            return ad.reduce_sum(ad.mul(x, ad.Tensor([float("nan")], dtype=np.float64)))

        with pytest.raises(NumericError):
            finite_diff_check(f, [x])


def _composed_graphs(rng):
    """A pool of small multi-op graphs used for randomized gradient checks."""
    a = param(rng.normal(size=(3, 4)), "a")
    b = param(rng.normal(size=(4, 2)), "b")
    c = param(rng.normal(size=(2,)), "c")
    g = param(np.abs(rng.normal(size=(4,))) + 0.5, "g")
    bias = param(rng.normal(size=(4,)), "bias")

    def graph_affine_softmax():
        h = ad.matmul(a, b) + c
        s = ad.softmax(h, axis=1, temperature=1.5)
        return ad.reduce_sum(ad.mul(s, h))

    def graph_norm_relu():
        h = ad.layer_norm(a, g, bias, axis=1)
        return ad.reduce_mean(ad.mul(ad.relu(h), h))

    def graph_mixed():
        h = ad.sigmoid(ad.matmul(a, b))
        t = ad.tanh(ad.transpose(h))
        return ad.reduce_sum(ad.div(ad.mul(t, t), ad.add_scalar(ad.mul(t, t), 1.0)))

    def graph_reshape_stack():
        h = ad.reshape(a, (4, 3))
        piled = ad.stack([h, ad.scale(h, 0.5)], axis=0)
        return ad.reduce_mean(ad.mul(piled, piled))

    return [a, b, c, g, bias], [graph_affine_softmax, graph_norm_relu,
                                graph_mixed, graph_reshape_stack]


@pytest.mark.parametrize("trial", range(25))
def test_random_composed_graphs_match_finite_differences(trial):
    # 25 trials x 4 graphs = 100 randomized instances
    rng = np.random.default_rng(1000 + trial)
    params, graphs = _composed_graphs(rng)
    for f in graphs:
        assert finite_diff_check(f, params) <= 1e-5


def test_forward_backward_deterministic_across_runs():
    def run():
        rng = np.random.default_rng(42)
        x = param(rng.normal(size=(5, 5)), "x")
        k = param(rng.normal(size=(3, 3)), "k")
        with ad.Tape() as tape:
            y = ad.conv2d_single(x, k)
            s = ad.softmax(y, axis=1)
            loss = ad.reduce_sum(ad.mul(s, y))
        grads = tape.backward(loss)
        return loss.data.copy(), grads[x].copy(), grads[k].copy()

    first, second = run(), run()
    for lhs, rhs in zip(first, second):
        np.testing.assert_array_equal(lhs, rhs)
