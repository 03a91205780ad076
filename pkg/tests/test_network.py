import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from carfit3d.refine_net.network import (
    NetConfig,
    ParamsFormatError,
    RefineNet,
    ShapeMismatch,
    cross_entropy,
    smooth_l1_with_grad,
    softmax,
)

from .gradcheck import REDUCED, check

SMALL = NetConfig(stage=1, widths=(4, 8), fc_hidden=8)


def test_zero_heads_give_zero_regression_and_uniform_probs():
    net = RefineNet(SMALL, zero_heads=True)
    reg, prob = net.predict(np.zeros((2, 54, 32, 24), np.float32))
    np.testing.assert_array_equal(reg, 0.0)
    np.testing.assert_array_equal(prob, 0.5)


@pytest.mark.parametrize("stage", [1, 2])
def test_output_shapes(stage, rng):
    net = RefineNet(NetConfig(stage, (4, 8), 8), seed=3)
    x = (rng.random((3, 54, 32, 24)) < 0.05).astype(np.float32)
    reg, logits = net.forward(x)
    assert logits.shape == (3, 2)
    assert (reg is None) if stage == 2 else reg.shape == (3, 7)


def test_single_sample_promoted():
    net = RefineNet(SMALL)
    assert net.forward(np.zeros((54, 32, 24)))[1].shape == (1, 2)


def test_full_size_default_shapes():
    net = RefineNet(NetConfig(), seed=0)
    assert net.params["conv0.W"].shape == (3, 3, 24, 32)
    assert net.params["fc.W"].shape == (3 * 2 * 128, 256)
    assert net.forward(np.zeros((1, 54, 32, 24)))[0].shape == (1, 7)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        RefineNet(SMALL).forward(np.zeros((1, 24, 54, 32)))


def test_too_small_input():
    with pytest.raises(ShapeMismatch):
        RefineNet(NetConfig(1, (4, 4, 4), 8, (4, 4, 3)))


def test_deterministic_forward(rng):
    x = (rng.random((2, 54, 32, 24)) < 0.05).astype(np.float32)
    a = RefineNet(SMALL, seed=5).forward(x)[1]
    b = RefineNet(SMALL, seed=5).forward(x)[1]
    assert a.tobytes() == b.tobytes()


class TestLosses:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros((4, 2)), np.array([0, 1, 1, 0]))
        assert loss == pytest.approx(math.log(2), abs=1e-15)
        assert loss == pytest.approx(0.6931, abs=5e-5)

    def test_confident_logits(self):
        loss, grad = cross_entropy(np.array([[-500.0, 500.0], [800.0, -800.0]]), np.array([1, 0]))
        assert loss == pytest.approx(0.0, abs=1e-300)
        assert np.all(np.isfinite(grad))

    @given(st.lists(st.tuples(st.floats(-30, 30), st.floats(-30, 30)), min_size=1, max_size=8))
    def test_softmax_rows_sum_to_one(self, rows):
        p = softmax(np.array(rows))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_ce_gradient(self, rng):
        z = rng.normal(size=(5, 2))
        y = np.array([0, 1, 1, 0, 1])
        _, g = cross_entropy(z, y)
        num = np.zeros_like(z)
        for i in np.ndindex(z.shape):
            d = np.zeros_like(z)
            d[i] = 1e-6
            num[i] = (cross_entropy(z + d, y)[0] - cross_entropy(z - d, y)[0]) / 2e-6
        np.testing.assert_allclose(g, num, atol=1e-8)

    def test_smooth_l1_values(self):
        loss, grad = smooth_l1_with_grad(np.array([0.5, -2.0, 0.0]))
        np.testing.assert_allclose(loss, [0.125, 1.5, 0.0])
        np.testing.assert_allclose(grad, [0.5, -1.0, 0.0])


def test_gradient_check_reduced_net():
    errors = check(REDUCED)
    assert max(errors.values()) < 1e-4, errors


def test_loss_ignores_negative_targets(rng):
    net = RefineNet(SMALL, seed=0, dtype=np.float64)
    x = (rng.random((2, 54, 32, 24)) < 0.05).astype(float)
    a = net.loss_and_grads(x, np.array([0, 0]), np.zeros((2, 7)))
    b = net.loss_and_grads(x, np.array([0, 0]), np.full((2, 7), 5.0))
    assert a[0] == b[0] and a[1]["reg"] == 0.0


class TestSerialization:
    def test_round_trip(self, tmp_path, rng):
        net = RefineNet(SMALL, seed=2, target_std=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7))
        p = tmp_path / "net.bin"
        net.save(p)
        back = RefineNet.load(p)
        assert back.cfg == net.cfg
        np.testing.assert_array_equal(back.target_std, net.target_std)
        for k in net.params:
            np.testing.assert_array_equal(back.params[k], net.params[k])
        x = (rng.random((2, 54, 32, 24)) < 0.05).astype(np.float32)
        assert back.forward(x)[1].tobytes() == net.forward(x)[1].tobytes()
        assert back.to_bytes() == net.to_bytes()

    def test_stage2_round_trip(self):
        net = RefineNet(NetConfig(2, (4, 8), 8))
        back = RefineNet.from_bytes(net.to_bytes())
        assert back.cfg.stage == 2 and "reg.W" not in back.params

    def test_bad_magic(self):
        with pytest.raises(ParamsFormatError):
            RefineNet.from_bytes(b"NOPE" + bytes(100))

    def test_truncated(self):
        data = RefineNet(SMALL).to_bytes()
        with pytest.raises(ParamsFormatError):
            RefineNet.from_bytes(data[:-7])
        with pytest.raises(ParamsFormatError):
            RefineNet.from_bytes(data[:30])
