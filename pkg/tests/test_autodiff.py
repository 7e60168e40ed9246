import numpy as np
import pytest

from cilab import autodiff as ad
from cilab.autodiff import Tensor, grad_check
from cilab.errors import ContractError, DegenerateInputError, DimensionError


def weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    """Random projection to a scalar so no coordinate has a symmetric zero gradient."""
    return ad.reduce_sum(ad.mul(out, Tensor(w)))


class TestForwardValues:
    def test_matmul_identity(self):
        out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_matmul_hand(self):
        assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_conv_zero_kernels_give_bias(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 5)))
        out = ad.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), Tensor([0.5, -1.0, 2.0]))
        for c, b in enumerate([0.5, -1.0, 2.0]):
            np.testing.assert_array_equal(out.data[c], np.full((5, 5), b))

    def test_conv_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 6, 7))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x)

    def test_conv_matches_loop_reference(self):
        rng = np.random.default_rng(2)
        x, k, b = rng.normal(size=(2, 4, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros((3, 4, 5))
        for o in range(3):
            for i in range(4):
                for j in range(5):
                    ref[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * k[o]) + b[o]
        np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(k), Tensor(b)).data, ref, atol=1e-12)

    def test_conv_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))), Tensor([0.0]))

    def test_maxpool_hand(self):
        assert ad.maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.tolist() == [[[4.0]]]

    def test_maxpool_tie_routes_to_first(self):
        x = Tensor(np.ones((1, 4, 4)), requires_grad=True)
        out = ad.maxpool2d(x)
        np.testing.assert_array_equal(out.data, np.ones((1, 2, 2)))
        ad.backward(ad.reduce_sum(out))
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1.0
        np.testing.assert_array_equal(x.grad[0], expected)

    def test_elementwise(self):
        assert ad.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
        assert ad.dot(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).item() == 11.0
        with pytest.raises(DimensionError):
            ad.add(Tensor([1.0, 2.0]), Tensor([1.0]))

    def test_l2_normalize(self):
        np.testing.assert_allclose(ad.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])
        u = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(ad.l2_normalize(Tensor(u)).data, u)
        with pytest.raises(DegenerateInputError):
            ad.l2_normalize(Tensor([0.0, 1e-13]))

    def test_nonfinite_rejected(self):
        with pytest.raises(DegenerateInputError):
            Tensor([np.nan])
        with pytest.raises(DegenerateInputError):
            with np.errstate(over="ignore"):
                ad.mul_scalar(Tensor([1e308]), 1e10)


class TestBackward:
    def test_reduce_sum_grad_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        ad.backward(ad.dot(x, x))
        np.testing.assert_array_equal(x.grad, 2 * x.data)

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            ad.backward(Tensor([1.0, 2.0], requires_grad=True))

    def test_accumulation_over_two_uses(self):
        rng = np.random.default_rng(3)
        a_data, w = rng.normal(size=4), rng.normal(size=4)
        single = Tensor(a_data, requires_grad=True)
        ad.backward(weighted_sum(ad.relu(single), w))
        twice = Tensor(a_data, requires_grad=True)
        ad.backward(ad.add(weighted_sum(ad.relu(twice), w), weighted_sum(ad.relu(twice), w)))
        np.testing.assert_allclose(twice.grad, 2 * single.grad)

    def test_grads_accumulate_across_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.reduce_sum(x))
        ad.backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        x0, k0 = rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
        grads = []
        for _ in range(2):
            x, k = Tensor(x0, requires_grad=True), Tensor(k0, requires_grad=True)
            out = ad.maxpool2d(ad.relu(ad.conv2d(x, k, Tensor(np.zeros(3)))))
            ad.backward(ad.reduce_sum(ad.mul(out, out)))
            grads.append((x.grad.tobytes(), k.grad.tobytes()))
        assert grads[0] == grads[1]

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.mul_scalar(x, 2.0)
        assert not y.requires_grad


class TestGradCheck:
    def test_sum_of_squares(self):
        assert grad_check(lambda x: ad.dot(x, x), Tensor([1.0, 2.0])) < 1e-8

    def test_matmul_fd(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        w = rng.normal(size=(3, 2))
        assert grad_check(lambda t: weighted_sum(ad.matmul(t, Tensor(b)), w), Tensor(a)) < 1e-6
        assert grad_check(lambda t: weighted_sum(ad.matmul(Tensor(a), t), w), Tensor(b)) < 1e-6

    def test_conv_fd(self):
        rng = np.random.default_rng(6)
        x, k, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        w = rng.normal(size=(3, 5, 5))
        assert grad_check(lambda t: weighted_sum(ad.conv2d(t, Tensor(k), Tensor(b)), w), Tensor(x)) < 1e-6
        assert grad_check(lambda t: weighted_sum(ad.conv2d(Tensor(x), t, Tensor(b)), w), Tensor(k)) < 1e-6
        assert grad_check(lambda t: weighted_sum(ad.conv2d(Tensor(x), Tensor(k), t), w), Tensor(b)) < 1e-6

    def test_maxpool_fd(self):
        rng = np.random.default_rng(7)
        x = rng.permutation(36).reshape(1, 6, 6).astype(float)  # distinct values, no ties
        w = rng.normal(size=(1, 3, 3))
        assert grad_check(lambda t: weighted_sum(ad.maxpool2d(t), w), Tensor(x)) < 1e-6

    def test_l2_normalize_fd(self):
        rng = np.random.default_rng(8)
        x, w = rng.normal(size=32), rng.normal(size=32)
        assert grad_check(lambda t: weighted_sum(ad.l2_normalize(t), w), Tensor(x)) < 1e-6
