import pytest
import torch

import checks
from ogan.losses import (
    LossError,
    classification_loss,
    critic_loss,
    discriminator_loss,
    gradient_penalty,
    regression_loss,
)


def test_gp_linear_critic():
    ok, detail = checks.check_gp_linear()
    assert ok, detail


def test_gp_constant_critic_is_one():
    real, fake = torch.randn(4, 3, 2, 2), torch.randn(4, 3, 2, 2)
    gp = gradient_penalty(lambda x: x.sum(dim=(1, 2, 3)) * 0.0 + 1.0, real, fake)
    assert float(gp) == 1.0


def test_gp_unit_norm_critic_is_zero():
    w = torch.zeros(3, 2, 2)
    w[0, 0, 0] = 1.0
    gp = gradient_penalty(lambda x: (x * w).sum(dim=(1, 2, 3)), torch.randn(5, 3, 2, 2), torch.randn(5, 3, 2, 2))
    assert float(gp) == pytest.approx(0.0, abs=1e-12)


def test_gp_is_twice_differentiable():
    w = torch.randn(3, 2, 2, requires_grad=True)
    gp = gradient_penalty(lambda x: (x * w).sum(dim=(1, 2, 3)), torch.randn(5, 3, 2, 2), torch.randn(5, 3, 2, 2))
    gp.backward()
    expect = 2 * (w.norm() - 1) * w / w.norm()
    torch.testing.assert_close(w.grad, expect.detach())


def test_critic_loss_composition():
    w = torch.full((1, 2, 2), 0.5)
    critic = lambda x: (x * w).sum(dim=(1, 2, 3))  # noqa: E731
    real, fake = torch.ones(3, 1, 2, 2), torch.zeros(3, 1, 2, 2)
    out = critic_loss(critic, real, fake, gp_lambda=10.0)
    assert float(out.adv) == pytest.approx(-2.0)
    assert float(out.gp) == pytest.approx(0.0, abs=1e-12)  # ||w|| = 1
    assert float(out.total) == pytest.approx(-2.0)


def test_shape_mismatch():
    with pytest.raises(LossError):
        critic_loss(lambda x: x.sum((1, 2, 3)), torch.zeros(2, 3, 4, 4), torch.zeros(3, 3, 4, 4))
    with pytest.raises(LossError):
        regression_loss(torch.zeros(2, 3), torch.zeros(2, 4))


def test_label_out_of_range():
    with pytest.raises(LossError, match="out of range"):
        classification_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


def test_head_analytic_values():
    ok, detail = checks.check_head_analytic()
    assert ok, detail


@pytest.mark.parametrize("seed", [0, 1])
def test_all_gradients_match_finite_differences(seed):
    errs = checks.loss_gradient_errors(seed)
    assert max(errs.values()) <= 1e-4, errs


def test_discriminator_loss_terms_add_up():
    gan = checks.tiny_gan(3)
    real, y, e, cond = checks._tiny_batch(gan, 3)
    st = checks.StageState(0, 1.0)
    fake = gan.G(cond, st).detach()
    out = discriminator_loss(lambda x: gan.D(x, st), real, fake, y, e, gp_lambda=5.0,
                             head_weights=(1.0, 2.0, 0.5), drift=0.1,
                             generator=torch.Generator().manual_seed(0))
    expect = out.adv + 5.0 * out.gp + 2.0 * out.cls + 0.5 * out.reg + 0.1 * out.drift
    assert float(out.total.detach()) == pytest.approx(float(expect.detach()), rel=1e-12)
    assert set(out.as_floats()) == {"adv", "gp", "cls", "reg", "total", "drift"}
