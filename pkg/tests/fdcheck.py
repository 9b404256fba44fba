"""Central finite-difference checks of autodiff gradients on sampled parameters.

Two numerical hazards are handled explicitly.

Kinks: piecewise-linear activations make a loss non-smooth on a measure-zero
set. A sample whose +/-eps perturbation flips any activation's sign pattern
straddles a kink, where a central difference is meaningless, so it is skipped
and replaced by another draw.

Cancellation: a randomly initialised critic has gradients spanning many
decades, and L(theta+eps) - L(theta-eps) on a loss of order 10 cannot resolve
a 1e-10 gradient in float64. Each objective therefore supplies the difference
in an algebraically identical form that subtracts small quantities first, e.g.
(a+)^2 - (a-)^2 = (a+ - a-)(a+ + a-). The result is still a central difference
of the same loss.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

KINKED = (nn.LeakyReLU, nn.ReLU)


@dataclass
class Objective:
    loss: Callable[[], torch.Tensor]  # differentiable scalar
    parts: Callable[[], tuple]  # intermediate tensors the difference is built from
    delta: Callable[[object, object], float]  # loss(plus) - loss(minus) from parts


@dataclass
class FdResult:
    checked: int = 0
    skipped: int = 0
    worst: float = 0.0
    errors: list = field(default_factory=list)


class _SignRecorder:
    def __init__(self, modules):
        self.patterns = []
        self.handles = [m.register_forward_hook(self._hook) for mod in modules for m in mod.modules() if isinstance(m, KINKED)]

    def _hook(self, module, inputs, output):
        self.patterns.append(inputs[0].detach() > 0)

    def take(self):
        out, self.patterns = self.patterns, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def _same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(objective: Objective, params, watch, n=100, eps=1e-7, seed=0, max_draws=3000) -> FdResult:
    """Compare autodiff d loss / d p with central differences on ``n`` sampled scalars.

    ``params`` are float64 leaf tensors; ``watch`` lists the modules whose
    activation sign patterns must stay fixed under perturbation. Sampling
    cycles over the tensors so that every one (biases, norm affines) is hit.
    """
    params = list(params)
    grads = torch.autograd.grad(objective.loss(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    # biases feeding a batch norm have a structurally zero gradient; compare those
    # against a floor scaled to the overall gradient size instead of against zero
    flat_all = torch.cat([g.reshape(-1) for g in grads])
    floor = 1e-6 * float(flat_all.pow(2).mean().sqrt()) or 1e-300

    rng = np.random.default_rng(seed)
    rec = _SignRecorder(watch)
    result = FdResult()
    try:
        objective.parts()
        base = rec.take()
        draws = 0
        while result.checked < n and draws < max_draws:
            k = draws % len(params)
            draws += 1
            p, g = params[k], grads[k]
            idx = int(rng.integers(p.numel()))
            flat = p.data.view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + eps
            plus = objective.parts()
            pat_plus = rec.take()
            flat[idx] = orig - eps
            minus = objective.parts()
            pat_minus = rec.take()
            flat[idx] = orig
            if not (_same(base, pat_plus) and _same(base, pat_minus)):
                result.skipped += 1
                continue
            numeric = objective.delta(plus, minus) / (2 * eps)
            err = relative_error(g.reshape(-1)[idx].item(), numeric, floor)
            result.errors.append(err)
            result.worst = max(result.worst, err)
            result.checked += 1
    finally:
        rec.close()
    return result


TINY_G = (2, 4, 8, 16, 8, 4, 2, 1)
TINY_D = (2, 4, 8, 16, 32)


def _mean_sq_delta(plus, minus, target):
    # mean((p - t)^2) - mean((m - t)^2) without subtracting the two means
    return float(((plus - minus) * (plus + minus - 2 * target)).mean())


@dataclass
class TinyProblem:
    """Float64 tiny networks; generator losses on small patches, critic losses on 32^3."""

    generator: nn.Module
    discriminator: nn.Module
    extractor: nn.Module
    noisy: torch.Tensor
    clean: torch.Tensor
    real: torch.Tensor
    fake: torch.Tensor
    epsilon: torch.Tensor

    def watched(self):
        return [self.generator, self.discriminator, self.extractor]

    def objectives(self, weights) -> dict[str, Objective]:
        from uwgan.losses import (
            critic_gradient_norms,
            critic_score,
            discriminator_loss,
            gradient_penalty,
            mse_loss,
            perceptual_loss,
            slices_as_images,
        )

        g, d, ext = self.generator, self.discriminator, self.extractor
        with torch.no_grad():
            clean_feats = ext(slices_as_images(self.clean))

        def gp():
            return gradient_penalty(d, self.real, self.fake, epsilon=self.epsilon)

        def norms():
            return critic_gradient_norms(d, self.real, self.fake, self.epsilon).detach()

        def gp_delta(p, m):
            return _mean_sq_delta(p, m, 1.0)

        def critic_parts():
            return critic_score(d(self.real)).detach(), critic_score(d(self.fake)).detach(), norms()

        def critic_delta(p, m):
            wasserstein = -(p[0] - m[0]).mean() + (p[1] - m[1]).mean()
            return float(wasserstein) + weights.lambda_gp * gp_delta(p[2], m[2])

        @torch.no_grad()
        def generated():
            return g(self.noisy)

        @torch.no_grad()
        def generated_features():
            return ext(slices_as_images(g(self.noisy)))

        return {
            "L_MSE": Objective(
                lambda: mse_loss(g(self.noisy), self.clean),
                generated,
                lambda p, m: _mean_sq_delta(p, m, self.clean),
            ),
            "L_Per": Objective(
                lambda: perceptual_loss(ext, g(self.noisy), self.clean),
                generated_features,
                lambda p, m: _mean_sq_delta(p, m, clean_feats),
            ),
            "L_D": Objective(
                lambda: discriminator_loss(d(self.real), d(self.fake), gp(), weights),
                critic_parts,
                critic_delta,
            ),
            "GP": Objective(gp, norms, gp_delta),
        }


def tiny_problem(seed=0, batch=1, g_size=12) -> TinyProblem:
    from uwgan.losses import FeatureExtractor
    from uwgan.models import Discriminator, DiscriminatorSpec, Generator, GeneratorSpec

    torch.manual_seed(seed)
    g = Generator(GeneratorSpec(layer_filters=TINY_G)).double()
    d = Discriminator(DiscriminatorSpec(encoder_filters=TINY_D, patch_size=32)).double()
    # frozen power-iteration vectors make the normalised weights a fixed smooth function
    d.eval()
    ext = FeatureExtractor.random(channels=(4, 4), seed=seed).double()
    gen = torch.Generator().manual_seed(seed)

    def pair(size, b):
        clean = torch.rand(b, 1, size, size, size, generator=gen, dtype=torch.float64)
        return clean + 0.1 * torch.randn(clean.shape, generator=gen, dtype=torch.float64), clean

    # batch statistics need at least two items
    noisy, clean = pair(g_size, max(batch, 2))
    fake, real = pair(32, batch)
    eps = torch.rand(batch, generator=gen, dtype=torch.float64)
    return TinyProblem(g, d, ext, noisy, clean, real, fake, eps)


def params_for(problem: TinyProblem, loss_name: str):
    net = problem.generator if loss_name in ("L_MSE", "L_Per") else problem.discriminator
    return list(net.parameters())
