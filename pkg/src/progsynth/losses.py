"""Least-squares adversarial losses and pixel-wise terms."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from progsynth.engine import Model, ShapeError, forward


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def generator_loss(d_fake, fake, target, lambda_pix: float = 100.0):
    """0.5 * mean((D(fake) - 1)^2) + lambda_pix * mean|fake - target|."""
    _check_same(fake, target, "generator_loss")
    adv = 0.5 * torch.mean((d_fake - 1.0) ** 2)
    return adv + lambda_pix * torch.mean(torch.abs(fake - target))


def discriminator_loss(d_real, d_fake):
    """0.5 * mean((D(real) - 1)^2) + 0.5 * mean(D(fake)^2)."""
    _check_same(d_real, d_fake, "discriminator_loss")
    return 0.5 * torch.mean((d_real - 1.0) ** 2) + 0.5 * torch.mean(d_fake**2)


@dataclass(frozen=True)
class LossSpec:
    """Weighted sum of pixel losses and the generator-side adversarial term.

    The adversarial term needs a conditional ``discriminator`` that scores
    ``cat(condition, output)``; it is evaluated with the discriminator held
    fixed.
    """

    l1: float = 0.0
    l2: float = 0.0
    adversarial: float = 0.0
    discriminator: Model | None = None

    def __post_init__(self):
        for w in (self.l1, self.l2, self.adversarial):
            if not (w >= 0 and w < float("inf")):
                raise ValueError("loss weights must be finite and non-negative")
        if self.adversarial and self.discriminator is None:
            raise ValueError("adversarial term requires a discriminator")

    @classmethod
    def composite(cls, discriminator: Model, lambda_pix: float = 100.0) -> "LossSpec":
        return cls(l1=lambda_pix, adversarial=1.0, discriminator=discriminator)

    def evaluate(self, output, target, condition):
        _check_same(output, target, "loss")
        total = output.new_zeros(())
        if self.l1:
            total = total + self.l1 * torch.mean(torch.abs(output - target))
        if self.l2:
            total = total + self.l2 * torch.mean((output - target) ** 2)
        if self.adversarial:
            d = self.discriminator
            params = {k: v.to(output.dtype) for k, v in d.params.items()}
            d_fake = forward(d, torch.cat([condition, output], dim=-d.spatial_dims - 1), params=params)
            total = total + self.adversarial * 0.5 * torch.mean((d_fake - 1.0) ** 2)
        return total
