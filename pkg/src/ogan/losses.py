"""Training objectives: Wasserstein critic with gradient penalty plus the
label (cross-entropy) and embedding (squared L2) heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .models import DiscriminatorOutputs

__all__ = [
    "LossBreakdown",
    "LossError",
    "gradient_penalty",
    "critic_loss",
    "classification_loss",
    "regression_loss",
    "generator_loss",
    "discriminator_loss",
]


class LossError(ValueError):
    pass


@dataclass
class LossBreakdown:
    adv: torch.Tensor
    gp: torch.Tensor
    cls: torch.Tensor
    reg: torch.Tensor
    total: torch.Tensor
    drift: torch.Tensor | None = None

    def as_floats(self) -> dict:
        out = {k: float(v.detach()) for k, v in vars(self).items() if v is not None}
        return out


def _zero(ref: torch.Tensor) -> torch.Tensor:
    return ref.new_zeros(())


def gradient_penalty(critic: Callable, real: torch.Tensor, fake: torch.Tensor,
                     eps: torch.Tensor | None = None,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean of (||grad critic(x_hat)||_2 - 1)^2 with x_hat = eps*real + (1-eps)*fake.

    ``eps`` is drawn per sample from U[0, 1) unless given. The penalty is
    built with ``create_graph=True`` so it can be differentiated again.
    """
    if real.shape != fake.shape:
        raise LossError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} batches differ")
    b = real.shape[0]
    if eps is None:
        eps = torch.rand(b, generator=generator, dtype=real.dtype)
    eps = eps.reshape(b, *([1] * (real.dim() - 1)))
    x_hat = (eps * real.detach() + (1.0 - eps) * fake.detach()).requires_grad_(True)
    scores = critic(x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    # vector_norm has a zero subgradient at the origin, so constant critics give gp = 1 exactly
    norms = torch.linalg.vector_norm(grad.reshape(b, -1), dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(critic: Callable, real: torch.Tensor, fake: torch.Tensor,
                gp_lambda: float = 10.0, eps: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> LossBreakdown:
    """Wasserstein critic objective: mean(c(fake)) - mean(c(real)) + lambda * gp.

    ``critic`` maps an image batch to a vector of scores; wrap a
    discriminator as ``lambda x: D(x, stage).critic``.
    """
    if real.shape != fake.shape:
        raise LossError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} batches differ")
    adv = critic(fake).mean() - critic(real).mean()
    gp = gradient_penalty(critic, real, fake, eps=eps, generator=generator)
    z = _zero(adv)
    return LossBreakdown(adv, gp, z, z, adv + gp_lambda * gp)


def classification_loss(label_logits: torch.Tensor, y_true: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy of integer labels under softmax(logits)."""
    y_true = torch.as_tensor(y_true, dtype=torch.long)
    k = label_logits.shape[-1]
    if y_true.shape != label_logits.shape[:-1]:
        raise LossError(f"labels {tuple(y_true.shape)} do not match logits {tuple(label_logits.shape)}")
    if y_true.numel() and (int(y_true.min()) < 0 or int(y_true.max()) >= k):
        raise LossError(f"label out of range [0, {k})")
    return F.cross_entropy(label_logits, y_true)


def regression_loss(regressed_e: torch.Tensor, e_true: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the squared Euclidean distance."""
    if regressed_e.shape != e_true.shape:
        raise LossError(f"regression {tuple(regressed_e.shape)} vs target {tuple(e_true.shape)}")
    return (regressed_e - e_true).pow(2).sum(dim=-1).mean()


def generator_loss(D: Callable[[torch.Tensor], DiscriminatorOutputs], fake: torch.Tensor,
                   y_cond: torch.Tensor, e_cond: torch.Tensor,
                   head_weights=(1.0, 1.0, 1.0)) -> LossBreakdown:
    """-w_adv*mean(critic) + w_cls*CE(L(fake), y) + w_reg*L2(R(fake), e).

    ``D`` maps images to :class:`DiscriminatorOutputs` at a fixed stage.
    """
    w_adv, w_cls, w_reg = head_weights
    out = D(fake)
    adv = -out.critic.mean()
    cls = classification_loss(out.label_logits, y_cond)
    reg = regression_loss(out.regressed_e, e_cond)
    total = w_adv * adv + w_cls * cls + w_reg * reg
    return LossBreakdown(adv, _zero(adv), cls, reg, total)


def discriminator_loss(D: Callable[[torch.Tensor], DiscriminatorOutputs], real: torch.Tensor,
                       fake: torch.Tensor, y_real: torch.Tensor, e_real: torch.Tensor,
                       gp_lambda: float = 10.0, head_weights=(1.0, 1.0, 1.0),
                       drift: float = 0.0, generator: torch.Generator | None = None) -> LossBreakdown:
    """Full trunk update: critic objective plus label/regression heads on real images.

    The heads see only real images with their ground truth; the optional
    drift term is ``drift * mean(critic(real)^2)``.
    """
    w_adv, w_cls, w_reg = head_weights
    out_real = D(real)
    out_fake = D(fake.detach())
    adv = out_fake.critic.mean() - out_real.critic.mean()
    gp = gradient_penalty(lambda x: D(x).critic, real, fake, generator=generator)
    cls = classification_loss(out_real.label_logits, y_real)
    reg = regression_loss(out_real.regressed_e, e_real)
    drift_term = out_real.critic.pow(2).mean()
    total = w_adv * adv + gp_lambda * gp + w_cls * cls + w_reg * reg + drift * drift_term
    return LossBreakdown(adv, gp, cls, reg, total, drift_term)
