"""Training objectives for both stages.

Conventions: depth/mask tensors are (B, H, W) or (B, 1, H, W) and reduce by a
per-image pixel mean followed by a batch mean. Critic outputs are (B, K)
vectors reduced by the mean over components and batch.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, ValidationError

BCE_EPS = 1e-7


@dataclass(frozen=True)
class Stage1LossWeights:
    alpha: float  # depth weight
    beta: float  # mask weight

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ConfigError(f"stage-one weights must be nonnegative and not both zero: {self}")


@dataclass(frozen=True)
class Stage2LossWeights:
    gamma: float = 0.8
    lambda_gp: float = 10.0
    alpha_bce: float = 1.0

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.lambda_gp < 0:
            raise ConfigError("lambda_gp must be nonnegative")
        if not self.alpha_bce > 0:
            raise ConfigError("alpha_bce must be positive")


def _same_shape(*tensors):
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"loss inputs disagree in shape: {sorted(shapes)}")


def _image_mean(x):
    return x.flatten(1).mean(1).mean()


def depth_loss(pred_depth, pred_mask, gt_depth, gt_mask):
    """Squared depth error on the intersection of predicted and true foreground."""
    _same_shape(pred_depth, pred_mask, gt_depth, gt_mask)
    return _image_mean(pred_mask * gt_mask * (pred_depth - gt_depth) ** 2)


def mask_loss(pred_mask, gt_mask):
    _same_shape(pred_mask, gt_mask)
    return _image_mean((pred_mask - gt_mask) ** 2)


def stage1_loss(pred, gt, weights):
    """Weighted stage-one objective on (B, 2, H, W) depth/mask stacks.

    Returns ``(total, l_depth, l_mask)``.
    """
    _same_shape(pred, gt)
    l_depth = depth_loss(pred[:, 0], pred[:, 1], gt[:, 0], gt[:, 1])
    l_mask = mask_loss(pred[:, 1], gt[:, 1])
    return weights.alpha * l_depth + weights.beta * l_mask, l_depth, l_mask


def weighted_bce(pred, gt, alpha_bce):
    """Class-weighted binary cross-entropy; ``alpha_bce`` scales the empty-voxel term."""
    _same_shape(pred, gt)
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValidationError("ground-truth voxels must be binary")
    p = pred.clamp(BCE_EPS, 1 - BCE_EPS)
    per_voxel = -(gt * torch.log(p) + alpha_bce * (1 - gt) * torch.log(1 - p))
    return per_voxel.flatten(1).mean(1).mean()


def weighted_bce_with_logits(logits, gt, alpha_bce):
    """``weighted_bce(sigmoid(logits), gt, alpha_bce)`` without the clamp, computed stably.

    The gradient with respect to the logits does not vanish when the sigmoid
    saturates, so a generator pushed to all-empty output can still recover.
    """
    _same_shape(logits, gt)
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValidationError("ground-truth voxels must be binary")
    per_voxel = -(gt * F.logsigmoid(logits) + alpha_bce * (1 - gt) * F.logsigmoid(-logits))
    return per_voxel.flatten(1).mean(1).mean()


def critic_mean(critic_out):
    if not torch.all(torch.isfinite(critic_out)):
        raise ValidationError("non-finite critic output")
    return critic_out.mean()


def gen_loss(critic_fake):
    return -critic_mean(critic_fake)


def disc_loss(critic_fake, critic_real, gp, lambda_gp):
    return critic_mean(critic_fake) - critic_mean(critic_real) + lambda_gp * gp


def gradient_penalty(critic, y_fake, y_real, x, generator=None):
    """Mean of (||grad_y D(y_hat | x)||_2 - 1)^2 at random real/fake interpolates.

    One interpolation weight is drawn per batch element. ``critic(y, x)``
    returns (B, K); its component mean is differentiated. The graph is kept so
    the penalty can itself be backpropagated into the critic.
    """
    _same_shape(y_fake, y_real)
    b = y_real.shape[0]
    # drawn in float32 so a seed gives the same weights at any precision
    u = torch.rand(b, *([1] * (y_real.dim() - 1)), generator=generator, device=y_real.device).to(y_real.dtype)
    y_hat = (u * y_real + (1 - u) * y_fake).detach().requires_grad_(True)
    score = critic(y_hat, x).mean(1)
    grad = None
    if score.requires_grad:
        (grad,) = torch.autograd.grad(score.sum(), y_hat, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(y_hat)
    return ((grad.flatten(1).norm(2, dim=1) - 1) ** 2).mean()


def stage2_gen_objective(l_bce, l_g, gamma):
    if not 0 <= gamma <= 1:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    return gamma * l_bce + (1 - gamma) * l_g
