import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aegan import functional as F
from aegan.tensor import Tensor


def conv2d_loops(x, w, b, stride, padding):
    """Direct-summation oracle for cross-correlation."""
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def conv_transpose_scatter(x, w, b, stride, padding):
    """Scatter oracle: each input pixel stamps its weighted kernel into the output."""
    bsz, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    full = np.zeros((bsz, cout, (h - 1) * stride + k, (wd - 1) * stride + k))
    for n in range(bsz):
        for c in range(cin):
            for i in range(h):
                for j in range(wd):
                    full[n, :, i * stride : i * stride + k, j * stride : j * stride + k] += x[n, c, i, j] * w[c]
    ho, wo = full.shape[2] - 2 * padding, full.shape[3] - 2 * padding
    return full[:, :, padding : padding + ho, padding : padding + wo] + b[None, :, None, None]


class TestConv2d:
    def test_one_by_one_kernel_scales(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = F.conv2d(Tensor(x), Tensor(np.array([[[[2.0]]]])), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, [[[[2.0, 4.0], [6.0, 8.0]]]])

    def test_all_ones_sums_window(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0

    def test_strided_halving_shape(self):
        assert F.conv_output_size(512, 4, 2, 1) == 256
        out = F.conv2d(Tensor(np.zeros((2, 3, 32, 32), np.float32)), Tensor(np.zeros((64, 3, 4, 4), np.float32)), stride=2, padding=1)
        assert out.shape == (2, 64, 16, 16)

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 2), (3, 2, 5)])
    def test_matches_direct_summation(self, rng, stride, padding, k):
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
        np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, padding), rtol=1e-10, atol=1e-10)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(1, 3, 5, 5\).*\(2, 4, 3, 3\)"):
            F.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_kernel_larger_than_input_rejected(self):
        with pytest.raises(ValueError):
            F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestConvTranspose2d:
    def test_scatter_example(self):
        out = F.conv_transpose2d(Tensor(np.array([[[[5.0]]]])), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 5.0))

    def test_doubling_shape(self):
        out = F.conv_transpose2d(
            Tensor(np.zeros((2, 8, 32, 32), np.float32)), Tensor(np.zeros((8, 4, 4, 4), np.float32)), stride=2, padding=1
        )
        assert out.shape == (2, 4, 64, 64)

    def test_four_doublings_reach_512(self):
        size = 32
        for _ in range(4):
            size = F.conv_transpose_output_size(size, 4, 2, 1)
        assert size == 512

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 4), (2, 0, 2), (3, 1, 3)])
    def test_matches_scatter_oracle(self, rng, stride, padding, k):
        x = rng.standard_normal((2, 3, 4, 4))
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(2)
        out = F.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
        np.testing.assert_allclose(out.data, conv_transpose_scatter(x, w, b, stride, padding), rtol=1e-10, atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            F.conv_transpose2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 3, 4, 4))))


def adjoint_gap(rng, dtype=np.float32):
    """Relative gap in <conv2d(x; w), y> = <x, conv_transpose2d(y; w)>."""
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, k))
    size = int(rng.integers(k, 10))
    # exact adjointness needs the strided windows to tile the padded input
    size += (stride - (size + 2 * padding - k) % stride) % stride
    cin, cout, b = (int(v) for v in rng.integers(1, 5, size=3))
    x = rng.standard_normal((b, cin, size, size)).astype(dtype)
    w = rng.standard_normal((cout, cin, k, k)).astype(dtype)
    fwd = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    y = rng.standard_normal(fwd.shape).astype(dtype)
    back = F.conv_transpose2d(Tensor(y), Tensor(w), stride=stride, padding=padding).data
    assert back.shape == x.shape
    lhs = float((fwd.astype(np.float64) * y).sum())
    rhs = float((x.astype(np.float64) * back).sum())
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12)


def test_conv_transpose_is_adjoint_of_conv(rng):
    gaps = [adjoint_gap(np.random.default_rng([7, i])) for i in range(50)]
    assert max(gaps) < 1e-4


class TestBatchNorm:
    def test_constant_input_gives_zero(self):
        out = F.batch_norm(Tensor(np.full((4, 2, 3, 3), 7.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_values_standardize_to_unit(self):
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        out = F.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=1e-12)
        np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-9)

    def test_affine_law(self, rng):
        x = rng.standard_normal((8, 3, 4, 4))
        out = F.batch_norm(Tensor(x), Tensor(np.full(3, 2.0)), Tensor(np.full(3, 5.0)), eps=1e-12).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 5.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-6)

    def test_running_stats_ema_and_eval_mode(self, rng):
        x = rng.standard_normal((6, 2, 3, 3)) * 3 + 1
        rm, rv = np.zeros(2), np.ones(2)
        F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, momentum=0.1)
        n = 6 * 9
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
        out = F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False, eps=0.0)
        expected = (x - rm[None, :, None, None]) / np.sqrt(rv)[None, :, None, None]
        np.testing.assert_allclose(out.data, expected)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            F.batch_norm(Tensor(np.zeros((0, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


class TestActivations:
    def test_leaky_slope(self):
        assert F.leaky_relu(Tensor(np.array([-1.0])), 0.2).data[0] == pytest.approx(-0.2)

    @pytest.mark.parametrize("slope", [0.0, 0.2, 0.5])
    def test_positive_passthrough(self, slope):
        assert F.leaky_relu(Tensor(np.array([3.0])), slope).data[0] == 3.0

    def test_relu_case(self):
        assert F.leaky_relu(Tensor(np.array([-7.0])), 0.0).data[0] == 0.0
        assert F.relu(Tensor(np.array([-7.0]))).data[0] == 0.0

    def test_sigmoid_extremes_finite(self):
        out = F.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


class TestLosses:
    def test_l1_identity(self, rng):
        x = rng.standard_normal((3, 4))
        assert F.l1_loss(Tensor(x), Tensor(x)).item() == 0.0

    def test_l1_elementwise(self):
        assert F.l1_loss(Tensor(np.array([1.0, 2.0])), Tensor(np.array([4.0, 0.0]))).item() == 2.5

    def test_l1_gradient_is_sign_over_n(self, rng):
        x = Tensor(rng.standard_normal(6), requires_grad=True)
        c = rng.standard_normal(6)
        F.l1_loss(x, Tensor(c)).backward()
        np.testing.assert_allclose(x.grad, np.sign(x.data - c) / 6)

    def test_l1_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            F.l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_bce_at_zero_logit(self):
        assert F.bce_with_logits(Tensor(np.array([0.0])), 1.0).item() == pytest.approx(math.log(2), abs=1e-7)

    @pytest.mark.parametrize("logit", [-100.0, 100.0])
    @pytest.mark.parametrize("target", [0.0, 1.0])
    def test_bce_stable_for_large_logits(self, logit, target):
        value = F.bce_with_logits(Tensor(np.array([logit])), target).item()
        expected = 0.0 if (logit > 0) == (target == 1.0) else 100.0
        assert np.isfinite(value) and value == pytest.approx(expected, abs=1e-6)

    def test_cross_entropy_matches_formula(self, rng):
        z = rng.standard_normal((4, 3))
        labels = np.array([0, 2, 1, 1])
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        expected = -logp[np.arange(4), labels].mean()
        assert F.cross_entropy(Tensor(z), labels).item() == pytest.approx(expected)


@settings(max_examples=80, deadline=None)
@given(
    size=st.integers(1, 40),
    k=st.integers(1, 6),
    stride=st.integers(1, 3),
    padding=st.integers(0, 3),
)
def test_output_size_formula_matches_actual(size, k, stride, padding):
    if size + 2 * padding < k:
        return
    out = F.conv2d(Tensor(np.zeros((1, 1, size, size))), Tensor(np.zeros((1, 1, k, k))), stride=stride, padding=padding)
    assert out.shape[2] == F.conv_output_size(size, k, stride, padding)
    if padding < k and F.conv_transpose_output_size(size, k, stride, padding) > 0:
        t = F.conv_transpose2d(Tensor(np.zeros((1, 1, size, size))), Tensor(np.zeros((1, 1, k, k))), stride=stride, padding=padding)
        assert t.shape[2] == F.conv_transpose_output_size(size, k, stride, padding)
