"""Conditional patch discriminator and least-squares adversarial objectives."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError

LAMBDA_PIX = 100.0


class PatchDiscriminator(nn.Module):
    """Five 4x4 convolutions over ``concat(x, x_s)``; returns raw patch scores."""

    def __init__(self, in_channels=1, widths=(16, 32, 64, 128), strides=(2, 2, 2, 1, 1)):
        super().__init__()
        chans = [2 * in_channels, *widths, 1]
        self.layers = nn.ModuleList(
            nn.Conv2d(a, b, 4, s, padding=1) for a, b, s in zip(chans[:-1], chans[1:], strides)
        )

    def forward(self, x, x_s):
        if x.shape != x_s.shape:
            raise ShapeError(f"image {tuple(x.shape)} and source {tuple(x_s.shape)} differ")
        if x.dim() == 3:
            x, x_s = x[None], x_s[None]
        h = torch.cat([x, x_s], dim=1)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = F.leaky_relu(h, 0.2)
        return h

    def score_shape(self, size: int) -> tuple[int, int]:
        for layer in self.layers:
            size = (size + 2 * layer.padding[0] - layer.kernel_size[0]) // layer.stride[0] + 1
        return size, size


@dataclass(frozen=True)
class LossReport:
    adv_g: float
    adv_d: float
    pix: float
    total_g: float


def d_loss_from_scores(real_scores, fake_scores):
    return ((real_scores - 1) ** 2).mean() + (fake_scores**2).mean()


def g_terms_from_scores(fake_scores, fake, target):
    return ((fake_scores - 1) ** 2).mean(), (target - fake).abs().mean()


def discriminator_loss(D, x_t, fake, x_s):
    """``mean (D(x_t, x_s) - 1)^2 + mean D(fake, x_s)^2``; ``fake`` is detached here."""
    return d_loss_from_scores(D(x_t, x_s), D(fake.detach(), x_s))


def generator_objective(D, fake, x_t, x_s, lambda_pix=LAMBDA_PIX):
    """Differentiable ``(total, adv, pix)`` for the generator update."""
    if fake.shape != x_t.shape:
        raise ShapeError(f"synthetic {tuple(fake.shape)} and target {tuple(x_t.shape)} differ")
    adv, pix = g_terms_from_scores(D(fake, x_s), fake, x_t)
    return adv + lambda_pix * pix, adv, pix


def generator_loss(D, fake, x_t, x_s, lambda_pix=LAMBDA_PIX) -> LossReport:
    with torch.no_grad():
        total, adv, pix = generator_objective(D, fake, x_t, x_s, lambda_pix)
        adv_d = discriminator_loss(D, x_t, fake, x_s)
    return LossReport(float(adv), float(adv_d), float(pix), float(total))


class DiscriminatorRegistry(nn.Module):
    """Site-owned discriminators, one per source-target configuration index."""

    def __init__(self, n_configs, in_channels=1, seed=None, **kwargs):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            self.nets = nn.ModuleList(PatchDiscriminator(in_channels, **kwargs) for _ in range(n_configs))

    def __getitem__(self, config_index: int) -> PatchDiscriminator:
        return self.nets[config_index]

    def __len__(self) -> int:
        return len(self.nets)

    def add(self, in_channels=1, **kwargs) -> int:
        self.nets.append(PatchDiscriminator(in_channels, **kwargs))
        return len(self.nets) - 1
