import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate2d

from pistress.nn import ops


def fd_grad(f, x, idx, eps=1e-6):
    xp = x.copy(); xp[idx] += eps
    xm = x.copy(); xm[idx] -= eps
    return (f(xp) - f(xm)) / (2 * eps)


class TestConv2d:
    def test_matches_scipy(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 9, 11))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        y, _ = ops.conv2d_forward(x, w, b)
        for n in range(2):
            for o in range(4):
                ref = b[o] + sum(
                    correlate2d(x[n, c], w[o, c], mode="same") for c in range(3)
                )
                assert np.allclose(y[n, o], ref, atol=1e-10)

    def test_k5_matches_scipy(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 10, 10))
        w = rng.standard_normal((3, 2, 5, 5))
        b = np.zeros(3)
        y, _ = ops.conv2d_forward(x, w, b)
        ref = sum(correlate2d(x[0, c], w[1, c], mode="same") for c in range(2))
        assert np.allclose(y[0, 1], ref, atol=1e-10)

    def test_1x1_is_channel_mix(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 4, 5))
        w = rng.standard_normal((2, 3, 1, 1))
        b = rng.standard_normal(2)
        y, _ = ops.conv2d_forward(x, w, b)
        ref = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x) + b[None, :, None, None]
        assert np.allclose(y, ref, atol=1e-10)

    @pytest.mark.parametrize("k", [1, 3])
    def test_gradients_match_fd(self, k):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 6, 7))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        dy = rng.standard_normal((2, 4, 6, 7))
        y, cache = ops.conv2d_forward(x, w, b)
        dx, dw, db = ops.conv2d_backward(dy, cache)

        def loss_x(xx):
            yy, _ = ops.conv2d_forward(xx, w, b)
            return float((yy * dy).sum())

        def loss_w(ww):
            yy, _ = ops.conv2d_forward(x, ww, b)
            return float((yy * dy).sum())

        def loss_b(bb):
            yy, _ = ops.conv2d_forward(x, w, bb)
            return float((yy * dy).sum())

        rs = np.random.default_rng(7)
        for _ in range(5):
            idx = tuple(rs.integers(0, s) for s in x.shape)
            assert fd_grad(loss_x, x, idx) == pytest.approx(dx[idx], rel=1e-5, abs=1e-7)
            widx = tuple(rs.integers(0, s) for s in w.shape)
            assert fd_grad(loss_w, w, widx) == pytest.approx(dw[widx], rel=1e-5, abs=1e-7)
        assert fd_grad(loss_b, b, (1,)) == pytest.approx(db[1], rel=1e-5, abs=1e-7)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ops.conv2d_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)),
                               np.zeros(1))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ops.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)),
                               np.zeros(1))

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 4, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        dy = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        y1, c1 = ops.conv2d_forward(x, w, b)
        g1 = ops.conv2d_backward(dy, c1)
        y2, c2 = ops.conv2d_forward(x, w, b)
        g2 = ops.conv2d_backward(dy, c2)
        assert np.array_equal(y1, y2)
        for a, bb in zip(g1, g2):
            assert np.array_equal(a, bb)


class TestMaxPool:
    def test_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        y, _ = ops.maxpool2x2_forward(x)
        assert np.array_equal(y[0, 0], [[5, 7], [13, 15]])

    def test_tie_break_first_row_major(self):
        x = np.zeros((1, 1, 2, 2))
        y, cache = ops.maxpool2x2_forward(x)
        dy = np.ones((1, 1, 1, 1))
        dx = ops.maxpool2x2_backward(dy, cache)
        # all four tie at 0; gradient goes to the first window entry
        assert dx[0, 0, 0, 0] == 1.0
        assert dx.sum() == 1.0

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError):
            ops.maxpool2x2_forward(np.zeros((1, 1, 5, 4)))

    def test_gradient_fd_no_ties(self):
        rng = np.random.default_rng(5)
        x = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8)
        dy = rng.standard_normal((1, 1, 4, 4))
        y, cache = ops.maxpool2x2_forward(x)
        dx = ops.maxpool2x2_backward(dy, cache)

        def loss(xx):
            yy, _ = ops.maxpool2x2_forward(xx)
            return float((yy * dy).sum())

        for idx in [(0, 0, 0, 0), (0, 0, 3, 5), (0, 0, 7, 7)]:
            assert fd_grad(loss, x, idx, eps=1e-3) == pytest.approx(dx[idx], abs=1e-9)


class TestUpsample:
    def test_values(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        y = ops.upsample2x_forward(x)
        assert np.array_equal(
            y[0, 0],
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]],
        )

    def test_adjoint_identity(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 3, 4, 5))
        dy = rng.standard_normal((2, 3, 8, 10))
        y = ops.upsample2x_forward(x)
        dx = ops.upsample2x_backward(dy)
        assert (y * dy).sum() == pytest.approx((x * dx).sum(), rel=1e-12)


class TestConcat:
    def test_round_trip(self):
        rng = np.random.default_rng(7)
        parts = [rng.standard_normal((2, c, 3, 4)) for c in (1, 3, 2)]
        y = ops.concat_forward(parts)
        assert y.shape == (2, 6, 3, 4)
        back = ops.concat_backward(y, [1, 3, 2])
        for p, b in zip(parts, back):
            assert np.array_equal(p, b)


class TestActivations:
    def test_relu(self):
        x = np.array([[-1.0, 0.0, 2.0]])
        y, cache = ops.relu_forward(x)
        assert np.array_equal(y, [[0, 0, 2]])
        dy = np.ones_like(x)
        assert np.array_equal(ops.relu_backward(dy, cache), [[0, 0, 1]])

    def test_sigmoid_stable_extremes(self):
        x = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
        y, _ = ops.sigmoid_forward(x)
        assert np.all(np.isfinite(y))
        assert y[0] == pytest.approx(0.0, abs=1e-12)
        assert y[2] == pytest.approx(0.5)
        assert y[4] == pytest.approx(1.0, abs=1e-12)

    def test_sigmoid_gradient_fd(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(10)
        dy = rng.standard_normal(10)
        y, cache = ops.sigmoid_forward(x)
        dx = ops.sigmoid_backward(dy, cache)

        def loss(xx):
            yy, _ = ops.sigmoid_forward(xx)
            return float((yy * dy).sum())

        for idx in [(0,), (4,), (9,)]:
            assert fd_grad(loss, x, idx) == pytest.approx(dx[idx], rel=1e-6)


@settings(max_examples=15, deadline=None)
@given(
    n=st.integers(1, 3), c=st.integers(1, 4), o=st.integers(1, 4),
    h=st.integers(3, 8), w=st.integers(3, 8), seed=st.integers(0, 2**31),
)
def test_conv_adjoint_property(n, c, o, h, w, seed):
    # <dy, conv(x)> == <conv_backward_dx(dy), x> for the linear (bias-free) part
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w))
    wk = rng.standard_normal((o, c, 3, 3))
    dy = rng.standard_normal((n, o, h, w))
    y, cache = ops.conv2d_forward(x, wk, np.zeros(o))
    dx, _, _ = ops.conv2d_backward(dy, cache)
    assert (y * dy).sum() == pytest.approx((x * dx).sum(), rel=1e-9)
