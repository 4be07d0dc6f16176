"""Generators, discriminators and the conditional GAN training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from progsynth.engine import (
    AdamState,
    LayerKind,
    Model,
    NonFiniteError,
    ShapeError,
    act,
    adam_step,
    conv,
    forward,
    skip,
    upconv,
)
from progsynth.losses import discriminator_loss, generator_loss

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def derive_seed(seed: int, stream: int) -> int:
    """Independent 32-bit seed for a named sub-stream of ``seed``."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 2
    out_channels: int = 1
    base_channels: int = 16
    depth: int = 3
    residual_mode: bool = False
    spatial_dims: int = 2

    def validate(self):
        if self.in_channels < 1 or self.out_channels != 1:
            raise ConfigError("generator needs >= 1 input channel and exactly 1 output channel")
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.spatial_dims not in (2, 3):
            raise ConfigError("spatial_dims must be 2 or 3")


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 3
    layers: int = 3
    base_channels: int = 16
    spatial_dims: int = 2

    def validate(self):
        if self.in_channels < 2:
            raise ConfigError("conditional discriminator needs condition + candidate channels")
        if self.layers < 1 or self.base_channels < 1:
            raise ConfigError("layers and base_channels must be >= 1")
        if self.spatial_dims not in (2, 3):
            raise ConfigError("spatial_dims must be 2 or 3")


@dataclass(frozen=True)
class StageTrainConfig:
    epochs: int = 8
    batch_size: int = 1
    lambda_pix: float = 100.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    rng_seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.lambda_pix >= 0:
            raise ConfigError("lambda_pix must be >= 0")


def build_generator(cfg: GeneratorConfig, seed: int) -> Model:
    """U-Net generator.

    Sigmoid output for direct synthesis; for ``residual_mode`` a tanh head
    whose convolution starts at zero, so the untrained model is the identity
    on ``[0, 1]`` inputs.
    """
    cfg.validate()
    nd = cfg.spatial_dims
    b = cfg.base_channels
    layers = [conv(cfg.in_channels, b, dims=nd), act(LayerKind.LEAKY_RELU)]
    skips = [len(layers) - 1]
    ch = b
    for level in range(1, cfg.depth + 1):
        out = b * 2**level
        layers += [
            conv(ch, out, stride=2, bias=False, dims=nd),
            act(LayerKind.INSTANCE_NORM),
            act(LayerKind.LEAKY_RELU),
        ]
        skips.append(len(layers) - 1)
        ch = out
    for level in range(cfg.depth, 0, -1):
        out = b * 2 ** (level - 1)
        layers += [
            upconv(ch, out, bias=False, dims=nd),
            act(LayerKind.INSTANCE_NORM),
            act(LayerKind.RELU),
            skip(skips[level - 1]),
            conv(2 * out, out, bias=False, dims=nd),
            act(LayerKind.INSTANCE_NORM),
            act(LayerKind.RELU),
        ]
        ch = out
    layers.append(conv(ch, cfg.out_channels, kernel=1, dims=nd))
    layers.append(act(LayerKind.TANH if cfg.residual_mode else LayerKind.SIGMOID))
    model = Model(
        layers,
        in_channels=cfg.in_channels,
        spatial_dims=nd,
        residual=cfg.residual_mode,
        seed=seed,
        config={"kind": "generator", **asdict(cfg)},
    )
    if cfg.residual_mode:
        model.zero_head()
    return model


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> Model:
    """Conditional patch discriminator: ``layers`` stride-2 convolutions, then a 1-channel score map."""
    cfg.validate()
    nd = cfg.spatial_dims
    b = cfg.base_channels
    layers = [conv(cfg.in_channels, b, stride=2, dims=nd), act(LayerKind.LEAKY_RELU)]
    ch = b
    for level in range(1, cfg.layers):
        out = b * 2**level
        layers += [
            conv(ch, out, stride=2, bias=False, dims=nd),
            act(LayerKind.INSTANCE_NORM),
            act(LayerKind.LEAKY_RELU),
        ]
        ch = out
    layers.append(conv(ch, 1, dims=nd))
    return Model(
        layers,
        in_channels=cfg.in_channels,
        spatial_dims=nd,
        seed=seed,
        config={"kind": "discriminator", **asdict(cfg)},
    )


@dataclass(frozen=True)
class Pairs:
    """Training examples: ``condition`` is ``(N, C, *spatial)``, ``target`` is ``(N, 1, *spatial)``."""

    condition: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.condition, dtype=np.float32)
        t = np.ascontiguousarray(self.target, dtype=np.float32)
        if len(c) == 0:
            raise ConfigError("empty training dataset")
        if len(c) != len(t) or c.shape[2:] != t.shape[2:] or t.shape[1] != 1:
            raise ShapeError(f"inconsistent pairs: condition {c.shape}, target {t.shape}")
        object.__setattr__(self, "condition", c)
        object.__setattr__(self, "target", t)

    def __len__(self):
        return len(self.condition)


@dataclass
class StageHistory:
    epochs: list[dict] = field(default_factory=list)
    init_score: float | None = None
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _leaves(params):
    return {k: v.detach().requires_grad_(True) for k, v in params.items()}


def _diagnose(model: Model, x: torch.Tensor, what: str):
    with torch.no_grad():
        forward(model, x, check_finite=True)
    raise NonFiniteError(f"non-finite {what} loss", layer="loss")


def train_gan(
    pairs: Pairs,
    cfg: StageTrainConfig,
    g: Model,
    d: Model,
    score_fn: Callable[[Model], float] | None = None,
) -> tuple[Model, Model, StageHistory]:
    """Alternating LSGAN training, discriminator step first in every batch.

    With ``score_fn`` (higher is better) the generator is scored before
    training and after each epoch, and the best-scoring parameters are
    returned; ties keep the earlier parameters.
    """
    cfg.validate()
    history = StageHistory()
    shuffle = np.random.Generator(np.random.PCG64(derive_seed(cfg.rng_seed, 2)))
    g_state = AdamState(cfg.lr, cfg.beta1, cfg.beta2)
    d_state = AdamState(cfg.lr, cfg.beta1, cfg.beta2)
    g_params, d_params = dict(g.params), dict(d.params)
    best_params, best_score = dict(g_params), None
    if score_fn is not None:
        best_score = float(score_fn(g))
        history.init_score = best_score
    n = len(pairs)
    cond_all = torch.from_numpy(np.require(pairs.condition, requirements="W"))
    tgt_all = torch.from_numpy(np.require(pairs.target, requirements="W"))
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n)
        sums = {"l1": 0.0, "adv": 0.0, "d_loss": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            cond, tgt = cond_all[idx], tgt_all[idx]

            with torch.no_grad():
                fake = forward(g, cond, params=g_params)
            dl = _leaves(d_params)
            d_real = forward(d, torch.cat([cond, tgt], 1), params=dl)
            d_fake = forward(d, torch.cat([cond, fake], 1), params=dl)
            loss_d = discriminator_loss(d_real, d_fake)
            if not torch.isfinite(loss_d):
                _diagnose(d.copy(params=d_params), torch.cat([cond, tgt], 1), "discriminator")
            grads = torch.autograd.grad(loss_d, list(dl.values()))
            d_params, d_state = adam_step(d_params, dict(zip(dl, grads)), d_state)

            gl = _leaves(g_params)
            fake = forward(g, cond, params=gl)
            d_fake = forward(d, torch.cat([cond, fake], 1), params=d_params)
            loss_g = generator_loss(d_fake, fake, tgt, cfg.lambda_pix)
            if not torch.isfinite(loss_g):
                _diagnose(g.copy(params=g_params), cond, "generator")
            grads = torch.autograd.grad(loss_g, list(gl.values()))
            g_params, g_state = adam_step(g_params, dict(zip(gl, grads)), g_state)

            with torch.no_grad():
                sums["l1"] += float(torch.mean(torch.abs(fake - tgt)))
                sums["adv"] += float(0.5 * torch.mean((d_fake - 1.0) ** 2))
                sums["d_loss"] += float(loss_d)
            batches += 1
        record = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        if score_fn is not None:
            score = float(score_fn(g.copy(params=g_params)))
            record["val_score"] = score
            if score > best_score:
                best_score, best_params = score, dict(g_params)
                history.best_epoch = epoch
        history.epochs.append(record)
        log.info("epoch %d: %s", epoch, record)
    if score_fn is None:
        best_params = g_params
        history.best_epoch = cfg.epochs
    return g.copy(params=best_params), d.copy(params=d_params), history


def train_stage(
    pairs: Pairs,
    cfg: StageTrainConfig,
    gcfg: GeneratorConfig,
    dcfg: DiscriminatorConfig,
    score_fn: Callable[[Model], float] | None = None,
) -> tuple[Model, Model, StageHistory]:
    """Build a fresh generator/discriminator pair from ``cfg.rng_seed`` and train it."""
    if pairs.condition.shape[1] != gcfg.in_channels:
        raise ShapeError(f"pairs have {pairs.condition.shape[1]} condition channels, "
                         f"generator expects {gcfg.in_channels}")
    if dcfg.in_channels != gcfg.in_channels + 1:
        raise ConfigError("discriminator must see condition channels + 1 candidate channel")
    g = build_generator(gcfg, derive_seed(cfg.rng_seed, 0))
    d = build_discriminator(dcfg, derive_seed(cfg.rng_seed, 1))
    return train_gan(pairs, cfg, g, d, score_fn)
