import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pistress.physloss import (
    LossReport,
    divergence,
    loss_table,
    mse_loss,
    physical_loss,
    physical_loss_grad,
)


def oracle_physical(y, mask):
    """Scalar-loop reference: masked sum of squared central-difference
    equilibrium residuals, mean-normalized over masked pixels."""
    y1, y2, y3 = y[0], y[1], y[2]
    h, w = y1.shape
    total = 0.0
    count = 0
    for r in range(1, h - 1):
        for c in range(1, w - 1):
            if not mask[r, c]:
                continue
            rx = (y1[r, c + 1] - y1[r, c - 1]) + (y3[r - 1, c] - y3[r + 1, c])
            ry = (y2[r - 1, c] - y2[r + 1, c]) + (y3[r, c + 1] - y3[r, c - 1])
            total += rx * rx + ry * ry
            count += 1
    return (total / count if count else 0.0), total, count


class TestPhysicalLoss:
    def test_matches_oracle_on_random_rasters(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            h = rng.integers(3, 12)
            w = rng.integers(3, 12)
            y = rng.random((3, h, w))
            mask = np.zeros((h, w), dtype=bool)
            mask[1:-1, 1:-1] = rng.random((h - 2, w - 2)) < 0.7
            res = physical_loss(y, mask)
            ref_norm, ref_total, ref_count = oracle_physical(y, mask)
            assert res.masked_count == ref_count
            if ref_count:
                assert abs(res.normalized - ref_norm) <= 1e-12 * max(1.0, abs(ref_norm))
                assert abs(res.total_sum - ref_total) <= 1e-12 * max(1.0, abs(ref_total))
            else:
                assert res.normalized == 0.0

    def test_constant_field_exactly_zero(self):
        y = np.full((3, 10, 14), 0.37)
        mask = np.ones((10, 14), dtype=bool)
        res = physical_loss(y, mask)
        assert res.normalized == 0.0
        assert res.total_sum == 0.0

    def test_empty_mask(self):
        y = np.random.default_rng(1).random((3, 6, 6))
        res = physical_loss(y, np.zeros((6, 6), dtype=bool))
        assert res.normalized == 0.0
        assert res.empty_mask

    def test_too_small_raster_rejected(self):
        with pytest.raises(ValueError):
            physical_loss(np.zeros((3, 2, 5)), np.zeros((2, 5), dtype=bool))


class TestDivergence:
    def test_borders_zero(self):
        y = np.random.default_rng(2).random((3, 7, 9))
        d = divergence(y)
        assert d.shape == (2, 7, 9)
        assert np.all(d[:, 0, :] == 0) and np.all(d[:, -1, :] == 0)
        assert np.all(d[:, :, 0] == 0) and np.all(d[:, :, -1] == 0)

    def test_linear_in_x_sigma_x(self):
        # y1 = col index -> rx = 2 everywhere in the interior
        y = np.zeros((3, 5, 6))
        y[0] = np.arange(6)[None, :]
        d = divergence(y)
        assert np.allclose(d[0, 1:-1, 1:-1], 2.0)
        assert np.allclose(d[1], 0.0)


class TestGradient:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(3)
        y = rng.random((3, 6, 8))
        mask = np.zeros((6, 8), dtype=bool)
        mask[1:-1, 1:-1] = rng.random((4, 6)) < 0.6
        g = physical_loss_grad(y, mask)
        delta = 1e-4
        for idx in [(0, 2, 3), (1, 1, 1), (2, 4, 6), (0, 0, 0), (2, 5, 7)]:
            yp = y.copy(); yp[idx] += delta
            ym = y.copy(); ym[idx] -= delta
            fd = (physical_loss(yp, mask).normalized
                  - physical_loss(ym, mask).normalized) / (2 * delta)
            assert abs(fd - g[idx]) <= 1e-5 * max(1.0, abs(fd), abs(g[idx]))

    def test_zero_on_empty_mask(self):
        y = np.random.default_rng(4).random((3, 5, 5))
        g = physical_loss_grad(y, np.zeros((5, 5), dtype=bool))
        assert np.all(g == 0)


class TestMSE:
    def test_value_and_gradient(self):
        rng = np.random.default_rng(5)
        o = rng.random((3, 4, 5))
        t = rng.random((3, 4, 5))
        val, grad = mse_loss(o, t)
        assert val == pytest.approx(np.mean((o - t) ** 2))
        assert np.allclose(grad, 2.0 * (o - t) / o.size)

    def test_identical_is_zero(self):
        o = np.random.default_rng(6).random((3, 4, 5))
        val, grad = mse_loss(o, o)
        assert val == 0.0
        assert np.all(grad == 0)


class TestLossReport:
    def test_json_round_trip(self):
        rep = LossReport(total=1.5, mse=1.0, physical=0.5, pixel_count=100,
                         masked_count=42, physical_sum=21.0)
        back = LossReport.from_json(rep.to_json())
        assert back == rep

    def test_validate_rejects_negative(self):
        rep = LossReport(total=-1.0, mse=1.0, physical=0.5, pixel_count=10,
                         masked_count=5, physical_sum=2.5)
        with pytest.raises(ValueError):
            rep.validate()

    def test_table_formatting(self):
        rows = {
            "PI-UNet": LossReport(2e-4, 1e-4, 1e-4, 10, 5, 5e-4),
            "Coarse": LossReport(3e-3, 2.9e-3, 1e-4, 10, 5, 5e-4),
        }
        text = loss_table(rows)
        assert "PI-UNet" in text and "Coarse" in text
        assert "Total" in text and "MSE" in text and "physical" in text


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.1, 10.0))
def test_loss_scales_quadratically(seed, scale):
    rng = np.random.default_rng(seed)
    y = rng.random((3, 6, 7))
    mask = np.ones((6, 7), dtype=bool)
    base = physical_loss(y, mask).normalized
    scaled = physical_loss(y * scale, mask).normalized
    assert scaled == pytest.approx(base * scale * scale, rel=1e-9)
