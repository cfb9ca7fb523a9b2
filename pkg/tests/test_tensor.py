"""Forward-value and gradient tests for the autodiff core."""

import math

import numpy as np
import pytest

from qieemo import tensor as T
from qieemo.errors import ContractError, DimensionError, LabelError
from qieemo.gradcheck import finite_diff_check
from qieemo.rng import Xoshiro256StarStar
from qieemo.tensor import Tensor, Tape, backward


def rand(gen, *shape):
    return gen.normals(shape)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(T.matmul(a, eye).data, a.data)

    def test_zeros(self):
        z = Tensor(np.zeros((3, 4)))
        b = Tensor(np.arange(8.0).reshape(4, 2))
        np.testing.assert_array_equal(T.matmul(z, b).data, np.zeros((3, 2)))

    def test_hand_computed(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_mismatch_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


class TestSoftmax:
    def test_constant_rows(self):
        for c in (-3.0, 0.0, 7.5):
            out = T.softmax(Tensor([c, c, c])).data
            np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-12)

    def test_closed_form(self):
        out = T.softmax(Tensor([0.0, math.log(2.0)])).data
        np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-12)

    def test_shift_invariance(self):
        gen = Xoshiro256StarStar(1)
        x = rand(gen, 5)
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + 7.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_are_distributions(self):
        gen = Xoshiro256StarStar(2)
        x = rand(gen, 4, 6) * 10
        out = T.softmax(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(4), atol=1e-6)
        assert (out >= 0).all() and (out <= 1).all()

    def test_empty_axis_rejected(self):
        with pytest.raises(DimensionError):
            T.softmax(Tensor(np.zeros((3, 0))))

    def test_large_inputs_stay_finite(self):
        out = T.softmax(Tensor([1000.0, -1000.0, 999.0])).data
        assert np.isfinite(out).all()


class TestActivations:
    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(T.relu(Tensor([-5.0, -0.1])).data, [0.0, 0.0])

    def test_relu_idempotent(self):
        gen = Xoshiro256StarStar(3)
        x = rand(gen, 4, 4)
        once = T.relu(Tensor(x)).data
        np.testing.assert_array_equal(T.relu(Tensor(once)).data, once)

    def test_swish_values(self):
        assert T.swish(Tensor(0.0)).item() == 0.0
        assert abs(T.swish(Tensor(20.0)).item() - 20.0) < 1e-6
        assert abs(T.swish(Tensor(1.0)).item() - 0.7310585786300049) < 1e-9

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)

    def test_glu_zero_gate(self):
        x = Tensor([2.0, 4.0, 0.0, 0.0])
        np.testing.assert_allclose(T.glu(x).data, [1.0, 2.0], atol=1e-12)

    def test_glu_saturated_gate(self):
        x = Tensor([2.0, 4.0, 100.0, 100.0])
        np.testing.assert_allclose(T.glu(x).data, [2.0, 4.0], atol=1e-12)

    def test_glu_zero_value(self):
        gen = Xoshiro256StarStar(4)
        gate = rand(gen, 3)
        x = Tensor(np.concatenate([np.zeros(3), gate]))
        np.testing.assert_array_equal(T.glu(x).data, np.zeros(3))

    def test_glu_odd_dim_rejected(self):
        with pytest.raises(DimensionError):
            T.glu(Tensor(np.zeros(5)))


class TestLayerNorm:
    def test_constant_slice(self):
        g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
        out = T.layer_norm(Tensor([5.0, 5.0, 5.0, 5.0]), g, b).data
        np.testing.assert_allclose(out, np.zeros(4), atol=1e-9)

    def test_already_normalized(self):
        g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
        out = T.layer_norm(Tensor([1.0, -1.0]), g, b).data
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-4)

    def test_zero_gamma_broadcasts_beta(self):
        gen = Xoshiro256StarStar(5)
        x = rand(gen, 3, 4)
        beta = np.array([1.0, 2.0, 3.0, 4.0])
        out = T.layer_norm(Tensor(x), Tensor(np.zeros(4)), Tensor(beta)).data
        np.testing.assert_array_equal(out, np.broadcast_to(beta, (3, 4)))

    def test_moments(self):
        gen = Xoshiro256StarStar(6)
        x = rand(gen, 5, 16) * 3 + 1
        out = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        assert np.abs(out.mean(axis=-1)).max() <= 1e-6
        np.testing.assert_allclose(out.var(axis=-1), np.ones(5), atol=1e-3)


class TestConv2d:
    def test_identity_kernel_exact(self):
        gen = Xoshiro256StarStar(7)
        x = rand(gen, 1, 5, 6)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1))).data
        np.testing.assert_array_equal(out, x)

    def test_zero_kernel_gives_bias(self):
        x = Tensor(np.ones((2, 3, 3)))
        k = Tensor(np.zeros((1, 2, 3, 3)))
        out = T.conv2d(x, k, Tensor([2.5])).data
        np.testing.assert_array_equal(out, np.full((1, 3, 3), 2.5))

    def test_ones_kernel_hand_computed(self):
        x = Tensor(np.ones((1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, k, Tensor(np.zeros(1))).data[0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
        assert out[0, 1] == 6.0

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 3))),
                     Tensor(np.zeros(1)))


class TestDepthwiseConv1d:
    def test_delta_kernel_identity(self):
        gen = Xoshiro256StarStar(8)
        x = rand(gen, 6, 3)
        k = np.zeros((3, 5))
        k[:, 2] = 1.0
        np.testing.assert_array_equal(T.depthwise_conv1d(Tensor(x), Tensor(k)).data, x)

    def test_zero_kernel(self):
        out = T.depthwise_conv1d(Tensor(np.ones((4, 2))), Tensor(np.zeros((2, 3)))).data
        np.testing.assert_array_equal(out, np.zeros((4, 2)))

    def test_hand_computed(self):
        x = Tensor(np.array([[1.0], [2.0], [3.0]]))
        k = Tensor(np.ones((1, 3)))
        np.testing.assert_array_equal(
            T.depthwise_conv1d(x, k).data[:, 0], [3.0, 6.0, 5.0])


class TestConv1dStrided:
    def test_output_length(self):
        k = Tensor(np.zeros((2, 2, 3)))
        b = Tensor(np.zeros(2))
        assert T.conv1d_strided(Tensor(np.zeros((8, 2))), k, b).shape == (4, 2)
        assert T.conv1d_strided(Tensor(np.zeros((7, 2))), k, b).shape == (4, 2)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((1, 4)))
        assert abs(T.cross_entropy(logits, [0]).item() - math.log(4.0)) < 1e-12

    def test_large_margin(self):
        logits = np.zeros((1, 3))
        logits[0, 1] = 100.0
        assert T.cross_entropy(Tensor(logits), [1]).item() <= 1e-6

    def test_mean_invariance(self):
        row = np.array([0.3, -0.7, 1.1, 0.2])
        one = T.cross_entropy(Tensor(row[None, :]), [2]).item()
        two = T.cross_entropy(Tensor(np.stack([row, row])), [2, 2]).item()
        assert abs(one - two) < 1e-12

    def test_out_of_range_label(self):
        with pytest.raises(LabelError, match="index 1"):
            T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 7, 1])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self):
        gen = Xoshiro256StarStar(9)
        xv = rand(gen, 3, 3)
        x = Tensor(xv, requires_grad=True)
        backward(T.smul(T.sum_all(T.mul(x, x)), 0.5))
        np.testing.assert_allclose(x.grad, xv, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(T.relu(x))

    def test_unreachable_leaf_zero_filled(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        backward(T.sum_all(x), leaves=[x, y])
        np.testing.assert_array_equal(y.grad, np.zeros(3))

    def test_reused_tensor_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = T.add(T.mul(x, x), x)  # x^2 + x -> grad 2x + 1
        backward(T.sum_all(y))
        np.testing.assert_allclose(x.grad, [5.0], atol=1e-12)

    def test_bitwise_deterministic(self):
        def run():
            gen = Xoshiro256StarStar(10)
            x = Tensor(rand(gen, 4, 4), requires_grad=True)
            w = Tensor(rand(gen, 4, 4), requires_grad=True)
            loss = T.mean_all(T.swish(T.matmul(T.softmax(x), w)))
            backward(loss)
            return x.grad.copy(), w.grad.copy()

        gx1, gw1 = run()
        gx2, gw2 = run()
        assert (gx1 == gx2).all() and (gw1 == gw2).all()

    def test_tape_is_topological(self):
        gen = Xoshiro256StarStar(11)
        x = Tensor(rand(gen, 3, 3), requires_grad=True)
        h = T.relu(T.matmul(x, x))
        loss = T.mean_all(T.add(h, T.swish(h)))
        tape = Tape.trace(loss)
        seen = set()
        for node in tape.ops:
            for parent in node._parents:
                if parent._parents:  # recorded op nodes must come earlier
                    assert id(parent) in seen
            seen.add(id(node))


# --- finite-difference sweep over every differentiable op -------------------

def _away_from_kinks(arr, margin=0.05):
    return arr + np.sign(arr) * margin + (arr == 0) * margin


def op_cases(gen):
    """(name, f, x0) triples; f is a scalar-valued function of one tensor."""
    aux = Tensor(rand(gen, 4, 6))
    aux_t = Tensor(rand(gen, 6, 4))
    aux_flat = Tensor(rand(gen, 2, 12))
    bias = Tensor(rand(gen, 6))
    gamma = Tensor(rand(gen, 6) + 1.5)
    beta = Tensor(rand(gen, 6))
    w_right = Tensor(rand(gen, 6, 3))
    rb3 = rand(gen, 3)
    img = Tensor(rand(gen, 3, 4, 5))
    k2d = Tensor(rand(gen, 2, 3, 3, 3))
    b2d = Tensor(rand(gen, 2))
    seq = Tensor(rand(gen, 5, 6))
    seq7 = Tensor(rand(gen, 7, 6))
    kdw = Tensor(rand(gen, 6, 3))
    kst = Tensor(rand(gen, 6, 6, 3))
    labels = np.array([1, 0, 2, 1])
    idx = np.array([0, 2, 2, 3, 1])
    return [
        ("add", lambda x: T.mean_all(T.add(x, aux)), rand(gen, 4, 6)),
        ("add_bias", lambda x: T.mean_all(T.add(x, bias)), rand(gen, 4, 6)),
        ("add_n", lambda x: T.mean_all(T.add_n([x, aux, x])), rand(gen, 4, 6)),
        ("mul", lambda x: T.mean_all(T.mul(x, aux)), rand(gen, 4, 6)),
        ("smul", lambda x: T.mean_all(T.smul(x, -2.5)), rand(gen, 4, 6)),
        ("scale", lambda x: T.mean_all(T.scale(aux, T.mean_all(x))), rand(gen, 3)),
        ("index_scalar", lambda x: T.index_scalar(x, 2), rand(gen, 5)),
        ("matmul_lhs", lambda x: T.mean_all(T.matmul(x, w_right)), rand(gen, 4, 6)),
        ("matmul_rhs", lambda x: T.mean_all(T.matmul(aux, x)), rand(gen, 6, 3)),
        ("affine_x", lambda x: T.mean_all(T.affine(x, w_right, Tensor(rb3))), rand(gen, 4, 6)),
        ("affine_w", lambda x: T.mean_all(T.affine(aux, x, Tensor(rb3))), rand(gen, 6, 3)),
        ("affine_b", lambda x: T.mean_all(T.affine(aux, w_right, x)), rand(gen, 3)),
        ("transpose", lambda x: T.mean_all(T.mul(T.transpose(x), aux_t)), rand(gen, 4, 6)),
        ("reshape", lambda x: T.mean_all(T.mul(T.reshape(x, (2, 12)), aux_flat)),
         rand(gen, 4, 6)),
        ("col_slice", lambda x: T.mean_all(T.col_slice(x, 1, 4)), rand(gen, 4, 6)),
        ("concat_last", lambda x: T.mean_all(T.concat_last([x, aux])), rand(gen, 4, 6)),
        ("stack0", lambda x: T.mean_all(T.stack0([x, aux])), rand(gen, 4, 6)),
        ("take_rows", lambda x: T.mean_all(T.take_rows(x, idx)), rand(gen, 4, 6)),
        ("sum_all", T.sum_all, rand(gen, 4, 6)),
        ("mean_axis0", lambda x: T.mean_all(T.mean_axis0(x)), rand(gen, 4, 6)),
        ("segment_mean", lambda x: T.mean_all(T.segment_mean(x, 3)), rand(gen, 7, 6)),
        ("relu", lambda x: T.mean_all(T.relu(x)), _away_from_kinks(rand(gen, 4, 6))),
        ("sigmoid", lambda x: T.mean_all(T.sigmoid(x)), rand(gen, 4, 6)),
        ("swish", lambda x: T.mean_all(T.swish(x)), rand(gen, 4, 6)),
        ("glu", lambda x: T.mean_all(T.glu(x)), rand(gen, 4, 6)),
        ("softmax", lambda x: T.mean_all(T.mul(T.softmax(x), aux)), rand(gen, 4, 6)),
        ("layer_norm_x", lambda x: T.mean_all(T.layer_norm(x, gamma, beta)), rand(gen, 4, 6)),
        ("layer_norm_gamma", lambda x: T.mean_all(T.layer_norm(aux, x, beta)), rand(gen, 6)),
        ("layer_norm_beta", lambda x: T.mean_all(T.layer_norm(aux, gamma, x)), rand(gen, 6)),
        ("conv2d_x", lambda x: T.mean_all(T.conv2d(x, k2d, b2d)), rand(gen, 3, 4, 5)),
        ("conv2d_k", lambda x: T.mean_all(T.conv2d(img, x, b2d)), rand(gen, 2, 3, 3, 3)),
        ("conv2d_b", lambda x: T.mean_all(T.conv2d(img, k2d, x)), rand(gen, 2)),
        ("depthwise_x", lambda x: T.mean_all(T.depthwise_conv1d(x, kdw)), rand(gen, 5, 6)),
        ("depthwise_k", lambda x: T.mean_all(T.depthwise_conv1d(seq, x)), rand(gen, 6, 3)),
        ("conv_strided_x", lambda x: T.mean_all(T.conv1d_strided(x, kst, bias)), rand(gen, 7, 6)),
        ("conv_strided_k", lambda x: T.mean_all(T.conv1d_strided(seq7, x, bias)),
         rand(gen, 6, 6, 3)),
        ("cross_entropy", lambda x: T.cross_entropy(x, labels), rand(gen, 4, 3)),
    ]


@pytest.mark.parametrize("seed", [101, 202, 303])
def test_every_op_matches_finite_differences(seed):
    gen = Xoshiro256StarStar(seed)
    failures = []
    for name, f, x0 in op_cases(gen):
        report = finite_diff_check(f, Tensor(x0), tol=1e-4, rng=gen)
        if not report.passed:
            failures.append((name, report.max_rel_error))
    assert not failures, f"gradient mismatches: {failures}"


def test_finite_diff_exact_for_linear():
    report = finite_diff_check(T.sum_all, Tensor(np.zeros((3, 3))))
    assert report.max_rel_error == 0.0


def test_finite_diff_cross_entropy_tight():
    gen = Xoshiro256StarStar(12)
    x0 = Tensor(rand(gen, 2, 3))
    report = finite_diff_check(lambda x: T.cross_entropy(x, np.array([0, 2])), x0)
    assert report.max_rel_error <= 1e-6
