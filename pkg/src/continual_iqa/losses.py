"""Training objectives for the single-head, generator/discriminator and multi-head stages.

Every distance term is a mean squared error over batch and elements.  Frozen
operands (previous-task snapshots, pseudo labels, ground truth) are detached
so gradients only reach the network being trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

LOG_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_FD: float = 0.001
    lambda_PR: float = 10.0
    lambda_MSE: float = 1.0
    lambda_qua: float = 1.0
    lambda_align: float = 3.0

    def __post_init__(self) -> None:
        # zero is allowed so ablations can switch a term off
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return F.mse_loss(a, b)


def feature_distillation_loss(feats_now: torch.Tensor, feats_prev: torch.Tensor) -> torch.Tensor:
    return _mse(feats_now, feats_prev.detach())


def pseudo_replay_loss(single_head_preds: torch.Tensor, multihead_preds: torch.Tensor) -> torch.Tensor:
    """Distill frozen per-distortion pseudo labels into the single head."""
    return _mse(single_head_preds, multihead_preds.detach())


def mse_current_loss(preds: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    return _mse(preds, torch.as_tensor(scores, dtype=preds.dtype).detach())


def single_head_total(fd, pr, mse, weights: LossWeights, is_base_task: bool):
    if is_base_task:
        return mse
    return weights.lambda_FD * fd + weights.lambda_PR * pr + weights.lambda_MSE * mse


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(LOG_EPS, 1.0 - LOG_EPS))


def adversarial_value(v_real: torch.Tensor, v_fake: torch.Tensor) -> torch.Tensor:
    """mean log D(real) + mean log(1 - D(fake)); the discriminator ascends it."""
    return _log(v_real).mean() + _log(1.0 - v_fake).mean()


def generator_adversarial_loss(v_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss, -mean log D(fake)."""
    return -_log(v_fake).mean()


def real_gradient_penalty(v_real: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """Half the mean squared input-gradient norm of the real/fake logit on real inputs.

    ``real`` must require grad and ``v_real`` must be computed from it.
    """
    p = v_real.clamp(LOG_EPS, 1.0 - LOG_EPS)
    logit = torch.log(p) - torch.log1p(-p)
    (grad,) = torch.autograd.grad(logit.sum(), real, create_graph=True)
    return 0.5 * grad.pow(2).sum(dim=1).mean()


def quality_real_loss(d_quality_real: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    return mse_current_loss(d_quality_real, scores)


def quality_fake_loss(d_quality_fake: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    return mse_current_loss(d_quality_fake, scores)


def generator_alignment_loss(g_now_out: torch.Tensor, g_prev_out: torch.Tensor) -> torch.Tensor:
    return _mse(g_now_out, g_prev_out.detach())


def discriminator_alignment_loss(now: tuple[torch.Tensor, torch.Tensor],
                                 prev: tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
    """Quality-output MSE plus real/fake-output MSE against the frozen discriminator.

    ``now`` and ``prev`` are ``(quality, realfake)`` pairs evaluated on the
    same previous-task pseudo features.
    """
    return _mse(now[0], prev[0].detach()) + _mse(now[1], prev[1].detach())


def generator_objective(adv: torch.Tensor | float, quality: torch.Tensor | float, alignment: torch.Tensor | float,
                        weights: LossWeights, is_base_task: bool):
    total = adv + weights.lambda_qua * quality
    if not is_base_task:
        total = total + weights.lambda_align * alignment
    return total


def discriminator_objective(adv: torch.Tensor | float, quality: torch.Tensor | float, alignment: torch.Tensor | float,
                            weights: LossWeights, is_base_task: bool):
    total = adv + weights.lambda_qua * quality
    if not is_base_task:
        total = total + weights.lambda_align * alignment
    return total


def multihead_mse(multihead_preds: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    return mse_current_loss(multihead_preds, scores)
