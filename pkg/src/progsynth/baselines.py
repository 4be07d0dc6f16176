"""Comparison methods: a cross-sectional 2-D GAN and a volumetric 3-D GAN."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from progsynth.engine import Model, ShapeError, forward
from progsynth.gan import (
    ConfigError,
    DiscriminatorConfig,
    GeneratorConfig,
    Pairs,
    StageHistory,
    StageTrainConfig,
    derive_seed,
    build_discriminator,
    build_generator,
    train_gan,
)
from progsynth.metrics import psnr
from progsynth.pipeline import PipelineConfig, SubjectVolumes, train_axial_stage
from progsynth.volume import Volume

MAX_VOLUME_EXTENT = 64


def train_2dgan(train, val, cfg: PipelineConfig = PipelineConfig()):
    """Axial slice-wise GAN; the same code path and seed as pipeline stage A."""
    g, record = train_axial_stage(train, val, cfg)
    return g, record


@dataclass(frozen=True)
class Baseline3DConfig:
    base_channels: int = 8
    depth: int = 2
    disc_layers: int = 3
    disc_base_channels: int = 8
    epochs: int = 8
    batch_size: int = 1
    lambda_pix: float = 100.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    rng_seed: int = 7
    select_on_val: bool = True

    def validate(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_extent(subjects):
    for s in subjects:
        if max(s.dims) > MAX_VOLUME_EXTENT:
            raise ConfigError(f"subject {s.id}: volume {s.dims} exceeds the {MAX_VOLUME_EXTENT}^3 bound")


def volume_pairs(subjects) -> Pairs:
    cond = np.stack([s.source_array() for s in subjects])
    target = np.stack([s.target.data[None] for s in subjects])
    return Pairs(cond, target)


def synthesize_3dgan(m: Model, s: SubjectVolumes) -> Volume:
    src = s.source_array()
    if m.spatial_dims != 3 or m.in_channels != src.shape[0]:
        raise ShapeError(f"volumetric generator expects {m.in_channels} channels in 3-D, "
                         f"subject has {src.shape[0]}")
    with torch.no_grad():
        out = forward(m, torch.from_numpy(src[None]))
    return Volume(out.numpy()[0, 0])


def train_3dgan(train, val, cfg: Baseline3DConfig = Baseline3DConfig()) -> tuple[Model, StageHistory]:
    """One-shot conditional volumetric GAN: (PD, T2) volume -> T1 volume."""
    cfg.validate()
    if not train:
        raise ConfigError("train split is empty")
    _check_extent(train)
    _check_extent(val)
    n_sources = len(train[0].sources)
    gcfg = GeneratorConfig(n_sources, 1, cfg.base_channels, cfg.depth, False, spatial_dims=3)
    dcfg = DiscriminatorConfig(n_sources + 1, cfg.disc_layers, cfg.disc_base_channels, spatial_dims=3)
    tcfg = StageTrainConfig(cfg.epochs, cfg.batch_size, cfg.lambda_pix, cfg.lr, cfg.beta1, cfg.beta2, cfg.rng_seed)
    g = build_generator(gcfg, derive_seed(cfg.rng_seed, 0))
    d = build_discriminator(dcfg, derive_seed(cfg.rng_seed, 1))

    def score(model):
        return float(np.mean([psnr(s.target, synthesize_3dgan(model, s)) for s in val]))

    g, _, hist = train_gan(volume_pairs(train), tcfg, g, d, score if cfg.select_on_val and val else None)
    g.config["train"] = cfg.to_dict()
    return g, hist
