"""Pixel, perceptual and WGAN-GP losses for the dual-head critic.

Critic outputs are either a score tensor of shape (B,) or a
``(d_enc, d_dec)`` pair; :func:`critic_score` folds the pair into one score
per item as ``d_enc + mean(d_dec)``.
"""

from __future__ import annotations

import math

import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lambda_mse: float = Field(1.0, ge=0)
    lambda_per: float = Field(0.1, ge=0)
    lambda_d: float = Field(0.2, ge=0)
    lambda_gp: float = Field(10.0, ge=0)

    @field_validator("*")
    @classmethod
    def _finite(cls, v):
        if not math.isfinite(v):
            raise ValueError("loss weights must be finite")
        return v


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(generated: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    _check_shapes(generated, clean)
    return ((generated - clean) ** 2).mean()


class FeatureExtractor(nn.Module):
    """Frozen 2D feature map applied to 3-channel slices.

    The default stack is a small VGG-style block with fixed random weights;
    :meth:`vgg19` swaps in torchvision's VGG-19 trunk up to its 16th
    convolution when pre-trained weights are available locally.
    """

    in_channels = 3

    def __init__(self, body: nn.Module):
        super().__init__()
        self.body = body
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # never leaves eval mode
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    @classmethod
    def random(cls, channels=(16, 16), seed: int = 0) -> FeatureExtractor:
        gen = torch.Generator().manual_seed(seed)
        layers, c_in = [], cls.in_channels
        for c in channels:
            conv = nn.Conv2d(c_in, c, 3, padding=1)
            fan_in = c_in * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            c_in = c
        return cls(nn.Sequential(*layers))

    @classmethod
    def identity(cls) -> FeatureExtractor:
        return cls(nn.Identity())

    @classmethod
    def vgg19(cls, weights_path=None) -> FeatureExtractor:
        from torchvision.models import vgg19

        net = vgg19(weights=None)
        if weights_path is not None:
            net.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
        # features[34] is the 16th convolution
        return cls(net.features[:35])


def slices_as_images(volume: torch.Tensor, channels: int = 3) -> torch.Tensor:
    """(B, 1, X, Y, Z) -> (B*Z, channels, X, Y), slicing along the third patch axis."""
    if volume.dim() != 5 or volume.shape[1] != 1:
        raise ValueError(f"expected (B, 1, X, Y, Z), got {tuple(volume.shape)}")
    b, _, x, y, z = volume.shape
    flat = volume[:, 0].permute(0, 3, 1, 2).reshape(b * z, 1, x, y)
    return flat.expand(-1, channels, -1, -1)


def perceptual_loss(extractor: nn.Module, generated: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    """Mean squared feature distance over all slices (per feature element)."""
    _check_shapes(generated, clean)
    arity = getattr(extractor, "in_channels", 3)
    try:
        fg = extractor(slices_as_images(generated, arity))
        fc = extractor(slices_as_images(clean, arity))
    except RuntimeError as exc:
        raise ValueError(f"feature extractor rejected slices of shape {tuple(generated.shape[2:4])}: {exc}") from exc
    return ((fg - fc) ** 2).mean()


def critic_score(outputs) -> torch.Tensor:
    if isinstance(outputs, tuple):
        enc, dec = outputs
        score = enc.reshape(-1)
        if dec is not None:
            score = score + dec.flatten(1).mean(dim=1)
        return score
    return outputs.reshape(-1)


def critic_gradient_norms(critic, real: torch.Tensor, fake: torch.Tensor, epsilon: torch.Tensor) -> torch.Tensor:
    """Per-item ||grad_x score(x)||_2 at x = eps*real + (1-eps)*fake, kept differentiable."""
    _check_shapes(real, fake)
    b = real.shape[0]
    eps = epsilon.reshape(b, *([1] * (real.dim() - 1))).to(real.dtype)
    mixed = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    score = critic_score(critic(mixed))
    (grad,) = torch.autograd.grad(score.sum(), mixed, create_graph=True)
    return grad.flatten(1).norm(2, dim=1)


def gradient_penalty(critic, real: torch.Tensor, fake: torch.Tensor, generator: torch.Generator | None = None,
                     epsilon: torch.Tensor | None = None) -> torch.Tensor:
    """E[(||grad_x score(x)||_2 - 1)^2] at x = eps*real + (1-eps)*fake, eps ~ U(0,1) per item.

    Pass ``epsilon`` (shape (B,)) to fix the interpolation weights.
    """
    _check_shapes(real, fake)
    if epsilon is None:
        epsilon = torch.rand(real.shape[0], generator=generator, dtype=real.dtype, device=real.device)
    norms = critic_gradient_norms(critic, real, fake, epsilon)
    if not torch.isfinite(norms).all():
        raise FloatingPointError("non-finite critic gradient in gradient penalty")
    return ((norms - 1) ** 2).mean()


def wasserstein_estimate(real_out, fake_out) -> torch.Tensor:
    return critic_score(real_out).mean() - critic_score(fake_out).mean()


def discriminator_loss(real_out, fake_out, gp, weights: LossWeights) -> torch.Tensor:
    """-E[score(real)] + E[score(fake)] + lambda_gp * gp."""
    return -critic_score(real_out).mean() + critic_score(fake_out).mean() + weights.lambda_gp * gp


def adversarial_loss(fake_out) -> torch.Tensor:
    """Generator side of the critic game: -E[score(fake)]."""
    return -critic_score(fake_out).mean()


def generator_loss(fake_out, mse, per, weights: LossWeights):
    """lambda_mse*mse + lambda_per*per + lambda_d*adv; ``fake_out=None`` means no adversarial term."""
    total = weights.lambda_mse * mse + weights.lambda_per * per
    if fake_out is not None:
        total = total + weights.lambda_d * adversarial_loss(fake_out)
    return total
