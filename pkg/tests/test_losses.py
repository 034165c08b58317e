import numpy as np
import pytest

from advsearch import tensor as T
from advsearch.errors import ArgumentError, ConfigError
from advsearch.gradcheck import finite_diff_check, finite_diff_gradient, grad_input, loss_value
from advsearch.losses import LOSS_IDS, attack_loss, cross_entropy_mean, cw_margin_loss


class LinearModel:
    """Logits = x W^T for flat inputs, the closed-form oracle model."""

    def __init__(self, w):
        # stored already transposed so forward is a single matmul
        self.w = T.Tensor(np.asarray(w, dtype=np.float64).T.copy(), requires_grad=True)

    def apply(self, x, train=False):
        return T.matmul(x, self.w)


def test_hinge_logit_hand_value():
    # top-clamped margin min(max_other - z_y, kappa): active while the
    # example is still classified correctly, saturating once fooled
    z = T.Tensor([[2.0, 5.0, 1.0]])
    out = attack_loss("Hinge_L", z, [1], kappa=0.0)
    assert np.allclose(out.data, [-3.0])
    fooled = T.Tensor([[6.0, 5.0, 1.0]])
    assert np.allclose(attack_loss("Hinge_L", fooled, [1], kappa=0.0).data, [0.0])
    assert np.allclose(attack_loss("Hinge_L", fooled, [1], kappa=0.5).data, [0.5])


def test_dlr_logit_hand_value():
    z = T.Tensor([[3.0, 1.0, 0.0]])
    out = attack_loss("DLR_L", z, [0])
    assert np.allclose(out.data, [-2.0 / 3.0], atol=1e-9)


def test_ce_uniform_logits():
    z = T.Tensor([[0.0, 0.0, 0.0]])
    out = attack_loss("CE_P", z, [0])
    assert np.allclose(out.data, [np.log(3.0)], atol=1e-12)


def test_ce_softmax_gradient_identity():
    # cross-entropy after softmax at uniform logits: softmax - onehot
    z = np.zeros((1, 3))
    zt = T.Tensor(z, requires_grad=True)
    with T.Tape() as tape:
        out = T.reduce_sum(attack_loss("CE_P", zt, [0]))
    tape.backward(out)
    assert np.allclose(zt.grad, [[-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]], atol=1e-12)


def test_ce_logit_mode_rejected():
    with pytest.raises(ConfigError):
        attack_loss("CE_L", T.Tensor(np.zeros((1, 3))), [0])


def test_unknown_loss_rejected():
    with pytest.raises(ConfigError):
        attack_loss("Smooth_L", T.Tensor(np.zeros((1, 3))), [0])


def test_dlr_needs_three_classes():
    with pytest.raises(ArgumentError):
        attack_loss("DLR_L", T.Tensor(np.zeros((1, 2))), [0])


def test_cw_margin_equals_hinge_on_logits():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, size=5)
    a = cw_margin_loss(T.Tensor(z), y).data
    b = attack_loss("Hinge_L", T.Tensor(z), y).data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("loss_id", LOSS_IDS)
def test_all_losses_match_finite_differences_through_model(loss_id):
    rng = np.random.default_rng(42)
    model = LinearModel(rng.normal(size=(5, 6)))
    x = rng.normal(size=(3, 6))
    y = rng.integers(0, 5, size=3)
    assert finite_diff_check(model, x, y, loss_id, h=1e-5) <= 1e-4


@pytest.mark.parametrize("loss_id", LOSS_IDS)
def test_all_losses_match_finite_differences_in_logit_space(loss_id):
    rng = np.random.default_rng(42)
    z = rng.normal(size=(4, 5)) * 2.0
    y = rng.integers(0, 5, size=4)
    zt = T.Tensor(z, requires_grad=True)
    with T.Tape() as tape:
        out = T.reduce_sum(attack_loss(loss_id, zt, y))
    tape.backward(out)
    num = finite_diff_gradient(
        lambda zv: float(attack_loss(loss_id, T.Tensor(zv), y).data.sum()), z, h=1e-6
    )
    live = np.abs(zt.grad) > 1e-9
    assert np.all(np.abs(zt.grad - num)[live] / np.abs(zt.grad)[live] <= 1e-4)
    # exact-zero coordinates may only show central-difference rounding noise
    assert np.all(np.abs(num)[~live] <= 1e-9)


class TestGradInput:
    def test_linear_model_closed_form(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(3, 4))  # K x d
        model = LinearModel(w)
        x = rng.normal(size=(2, 4))
        y = np.array([0, 2])
        g = grad_input(model, x, y, "CE_P")
        logits = x @ w.T
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        onehot = np.eye(3)[y]
        expected = (p - onehot) @ w
        assert np.allclose(g, expected, atol=1e-10)

    def test_constant_model_zero_gradient(self):
        model = LinearModel(np.zeros((3, 4)))
        g = grad_input(model, np.random.default_rng(2).normal(size=(2, 4)), [0, 1])
        assert np.array_equal(g, np.zeros((2, 4)))

    def test_params_untouched(self):
        model = LinearModel(np.random.default_rng(3).normal(size=(3, 4)))
        grad_input(model, np.zeros((1, 4)), [0])
        assert model.w.grad is None


class TestFiniteDiffCheck:
    def test_quadratic_is_exact(self):
        class Quadratic:
            def apply(self, x, train=False):
                return x  # treated as logits

        # L1_L loss of identity model: loss = -x_y, gradient exact
        err = finite_diff_check(Quadratic(), np.random.default_rng(4).normal(size=(1, 3)), [1], "L1_L")
        assert err <= 1e-8

    def test_h_zero_rejected(self):
        with pytest.raises(ArgumentError):
            finite_diff_check(LinearModel(np.eye(3)), np.zeros((1, 3)), [0], h=0.0)

    def test_h_too_large_rejected(self):
        with pytest.raises(ArgumentError):
            finite_diff_check(LinearModel(np.eye(3)), np.zeros((1, 3)), [0], h=0.5)

    def test_loss_value_matches_sum(self):
        rng = np.random.default_rng(5)
        model = LinearModel(rng.normal(size=(3, 4)))
        x = rng.normal(size=(3, 4))
        y = [0, 1, 2]
        v = loss_value(model, x, y, "Hinge_P")
        direct = attack_loss("Hinge_P", model.apply(T.Tensor(x)), y).data.sum()
        assert np.isclose(v, direct)


def test_cross_entropy_mean_scalar():
    z = T.Tensor(np.zeros((4, 3)))
    out = cross_entropy_mean(z, [0, 1, 2, 0])
    assert out.data.shape == ()
    assert np.allclose(out.data, np.log(3.0))
