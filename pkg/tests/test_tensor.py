import numpy as np
import pytest

import mixbit.tensor as T
from mixbit.tensor import (Tensor, bce_with_logits, cap, clamp01, concat0,
                           conv2d, diag, finite_diff_check, gap, gather_cells,
                           l2norm_spatial, matmul, sigmoid, slice_channels,
                           smooth_l1, softmax_cross_entropy, stack_scalars,
                           ste_binarize, ste_round_grid, tanh, tmean, tsum)


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


class TestConv2d:
    def test_all_ones_3x3(self):
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.ravel()[0] == pytest.approx(9.0)

    def test_zero_weight_gives_zeros(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 3, 5, 5)).astype(np.float32))
        w = Tensor(np.zeros((4, 3, 3, 3), dtype=np.float32))
        assert np.all(conv2d(x, w, pad=1).data == 0.0)

    def test_iota_hand_cross_correlation(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        w = Tensor(np.array([[[[1, 0], [0, 1]]]], dtype=np.float32))
        out = conv2d(x, w, stride=2)
        assert np.array_equal(out.data.reshape(2, 2), [[5, 9], [21, 25]])

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.ones((1, 3, 4, 4), dtype=np.float32))
        w = Tensor(np.ones((2, 4, 3, 3), dtype=np.float32))
        with pytest.raises(T.ShapeError, match="channel"):
            conv2d(x, w)

    def test_output_shape_formula(self):
        x = Tensor(np.zeros((1, 2, 9, 7), dtype=np.float32))
        w = Tensor(np.zeros((5, 2, 3, 3), dtype=np.float32))
        out = conv2d(x, w, stride=2, pad=1)
        assert out.shape == (1, 5, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


class TestPooling:
    def test_gap_constant(self):
        f = Tensor(np.full((2, 3, 4, 5), 3.5, dtype=np.float32))
        assert np.allclose(gap(f).data, 3.5)

    def test_gap_mean(self):
        f = Tensor(np.array([1, 2, 3, 4], dtype=np.float32).reshape(1, 1, 2, 2))
        assert gap(f).data.ravel()[0] == pytest.approx(2.5)

    def test_gap_zeros(self):
        f = Tensor(np.zeros((1, 4, 3, 3), dtype=np.float32))
        assert np.all(gap(f).data == 0.0)

    def test_gap_zero_mean_residual(self):
        rng = np.random.default_rng(3)
        f = rng.normal(size=(2, 4, 6, 6)).astype(np.float32)
        pooled = gap(Tensor(f)).data
        residual = f - pooled[:, :, None, None]
        assert np.abs(residual.mean(axis=(2, 3))).max() < 1e-6

    def test_cap_single_channel_identity(self):
        f = np.arange(8, dtype=np.float32).reshape(1, 1, 2, 4)
        assert np.array_equal(cap(Tensor(f)).data, f[:, 0])

    def test_cap_mean(self):
        f = Tensor(np.array([2.0, 4.0], dtype=np.float32).reshape(1, 2, 1, 1))
        assert cap(f).data.ravel()[0] == pytest.approx(3.0)

    def test_cap_constant_negative(self):
        f = Tensor(np.full((1, 3, 2, 2), -1.0, dtype=np.float32))
        assert np.allclose(cap(f).data, -1.0)


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        tsum(w).backward()
        assert np.array_equal(w.grad, np.ones_like(w.data))

    def test_square_gradient(self):
        w = t64([1.0, -2.0], requires_grad=True)
        tsum(w * w).backward()
        assert np.allclose(w.grad, [2.0, -4.0])

    def test_leaf_off_path_has_no_contribution(self):
        w = t64([1.0, 2.0], requires_grad=True)
        other = t64([5.0], requires_grad=True)
        tsum(w * w).backward()
        assert other.grad is None  # equivalently: contribution is all zeros

    def test_non_scalar_rejected(self):
        w = t64([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (w * w).backward()

    def test_accumulation_across_calls(self):
        w = t64([3.0], requires_grad=True)
        tsum(w).backward()
        tsum(w).backward()
        assert np.allclose(w.grad, [2.0])
        w.zero_grad()
        tsum(w).backward()
        assert np.allclose(w.grad, [1.0])

    def test_replay_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            x = Tensor(rng.normal(size=(2, 3, 6, 6)).astype(np.float32))
            w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
                       requires_grad=True)
            loss = tsum(tanh(conv2d(x, w, pad=1)))
            loss.backward()
            return loss.data.copy(), w.grad.copy()
        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(g1, g2)


class TestFiniteDiff:
    def test_linear_map(self):
        x = t64(np.random.default_rng(0).normal(size=(3, 3)))
        assert finite_diff_check(lambda v: tsum(v), x) <= 1e-6

    def test_quadratic(self):
        x = t64(np.random.default_rng(1).normal(size=7))
        assert finite_diff_check(lambda v: tsum(v * v), x, eps=1e-4) <= 1e-4

    def test_hard_round_without_ste_reports_large_error(self):
        # A raw round has zero analytic gradient but the secant crosses the
        # step, so the mismatch must surface rather than be masked.
        x = t64([0.49996])
        def f(v):
            return tsum(Tensor(np.round(v.data)) + (v * 0.0))
        assert finite_diff_check(f, x, eps=1e-4) > 100.0

    def test_eps_range_enforced(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda v: tsum(v), t64([1.0]), eps=1.0)


def _mix(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


PRIMITIVE_CASES = [
    ("conv2d_w", lambda: (
        lambda w: tsum(conv2d(t64(_mix((2, 3, 6, 6), 0)), w, stride=2, pad=1)
                       * Tensor(_mix((2, 4, 3, 3), 1))),
        t64(_mix((4, 3, 3, 3), 2)))),
    ("conv2d_x", lambda: (
        lambda x: tsum(conv2d(x, t64(_mix((4, 3, 3, 3), 2)), stride=2, pad=1)
                       * Tensor(_mix((2, 4, 3, 3), 1))),
        t64(_mix((2, 3, 6, 6), 0)))),
    ("gap", lambda: (
        lambda x: tsum(gap(x) * Tensor(_mix((2, 3), 1))),
        t64(_mix((2, 3, 4, 4), 0)))),
    ("cap", lambda: (
        lambda x: tsum(cap(x) * Tensor(_mix((2, 4, 4), 1))),
        t64(_mix((2, 3, 4, 4), 0)))),
    ("linear", lambda: (
        lambda w: tsum(matmul(t64(_mix((5, 3), 0)), w) * Tensor(_mix((5, 4), 1))),
        t64(_mix((3, 4), 2)))),
    ("clamp01", lambda: (
        # inputs kept away from the clip kinks at 0 and 1
        lambda x: tsum(clamp01(x) * Tensor(_mix(10, 1))),
        t64(np.linspace(-0.9, 1.9, 10) + 0.013))),
    ("tanh", lambda: (
        lambda x: tsum(tanh(x) * Tensor(_mix(8, 1))),
        t64(_mix(8, 0)))),
    ("sigmoid", lambda: (
        lambda x: tsum(sigmoid(x) * Tensor(_mix(8, 1))),
        t64(_mix(8, 0)))),
    ("bce", lambda: (
        lambda x: tsum(bce_with_logits(x, (_mix(6, 3) > 0).astype(float))),
        t64(_mix(6, 0)))),
    ("smooth_l1", lambda: (
        # offsets chosen so |error| stays away from the (C1) transition at 1
        lambda x: tsum(smooth_l1(x, np.zeros(6))),
        t64(np.array([-2.3, -0.7, -0.2, 0.3, 0.6, 1.8])))),
    ("softmax_ce", lambda: (
        lambda x: tsum(softmax_cross_entropy(x, np.array([0, 2, 1]))),
        t64(_mix((3, 3), 0)))),
    ("l2norm_spatial", lambda: (
        lambda x: tsum(l2norm_spatial(x)),
        t64(_mix((2, 3, 3), 0) + 0.1))),
    ("mean", lambda: (
        lambda x: tmean(x * x),
        t64(_mix((3, 4), 0)))),
]


@pytest.mark.parametrize("name,case", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients(name, case):
    f, x = case()
    assert finite_diff_check(f, x, eps=1e-4) <= 1e-3


class TestStructuralOps:
    def test_slice_channels_roundtrip(self):
        x = t64(_mix((2, 6, 3, 3), 0), requires_grad=True)
        tsum(slice_channels(x, 1, 4)).backward()
        expected = np.zeros_like(x.data)
        expected[:, 1:4] = 1.0
        assert np.array_equal(x.grad, expected)

    def test_gather_cells_scatter(self):
        x = t64(_mix((2, 3, 4, 4), 0), requires_grad=True)
        cells = [(0, 1, 2), (1, 3, 0), (0, 1, 2)]
        out = gather_cells(x, cells)
        assert out.shape == (3, 3)
        tsum(out).backward()
        assert np.allclose(x.grad[0, :, 1, 2], 2.0)  # duplicated cell accumulates
        assert np.allclose(x.grad[1, :, 3, 0], 1.0)

    def test_concat0_and_stack_scalars(self):
        a = t64(_mix((1, 3), 0), requires_grad=True)
        b = t64(_mix((2, 3), 1), requires_grad=True)
        tsum(concat0([a, b]) * Tensor(np.ones((3, 3)))).backward()
        assert np.allclose(a.grad, 1.0) and np.allclose(b.grad, 1.0)
        s1, s2 = tsum(a), tsum(b * 2.0)
        v = stack_scalars([s1, s2])
        assert v.shape == (2,)

    def test_diag(self):
        x = t64(_mix((3, 3), 0), requires_grad=True)
        tsum(diag(x) * Tensor(np.array([1.0, 2.0, 3.0]))).backward()
        assert np.allclose(np.diagonal(x.grad), [1, 2, 3])
        assert x.grad[0, 1] == 0.0

    def test_ste_round_grid_identity_gradient(self):
        x = t64(np.linspace(0.05, 0.95, 7), requires_grad=True)
        tsum(ste_round_grid(x, 2)).backward()
        assert np.allclose(x.grad, 1.0)

    def test_ste_binarize_forward_and_gradient(self):
        x = t64([0.2, 0.7, 0.5], requires_grad=True)
        out = ste_binarize(x)
        assert np.array_equal(out.data, [0.0, 1.0, 0.0])
        tsum(out * Tensor(np.array([2.0, 3.0, 4.0]))).backward()
        assert np.allclose(x.grad, [2.0, 3.0, 4.0])

    def test_l2norm_zero_map_gradient_is_zero(self):
        x = t64(np.zeros((1, 2, 2)), requires_grad=True)
        tsum(l2norm_spatial(x)).backward()
        assert np.all(x.grad == 0.0)


class TestDebugChecks:
    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_check_finite_flag(self):
        T.CHECK_FINITE = True
        try:
            with pytest.raises(FloatingPointError):
                y = Tensor(np.array([np.inf], dtype=np.float32))
                _ = y + Tensor(np.array([-np.inf], dtype=np.float32))
        finally:
            T.CHECK_FINITE = False
        # off by default: the same op goes through
        y = Tensor(np.array([np.inf], dtype=np.float32))
        assert np.isnan((y + Tensor(np.array([-np.inf], dtype=np.float32))).data[0])

    def test_float32_default(self):
        assert Tensor([1.0, 2.0]).data.dtype == np.float32
        assert Tensor(np.array([1.0], dtype=np.float64)).data.dtype == np.float64
