"""Sequential axial -> coronal -> sagittal synthesis.

Stage A maps the (PD, T2) axial slice pair to a T1 slice and stacks the
results into a volume. Each later stage re-slices the current estimate along
its own orientation and refines every slice with a residual generator. Stages
are trained one after another with earlier generators frozen.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

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
    train_stage,
)
from progsynth.metrics import psnr
from progsynth.volume import Orientation, SliceStack, Volume, VolumeError, extract_slices, stack_slices

log = logging.getLogger(__name__)

INFERENCE_CHUNK = 64


class Contrast(str, Enum):
    T1 = "T1"
    T2 = "T2"
    PD = "PD"


SOURCE_ORDER = (Contrast.PD, Contrast.T2)


@dataclass(frozen=True)
class SubjectVolumes:
    id: str
    sources: dict  # Contrast -> Volume
    target: Volume | None = None

    def __post_init__(self):
        if not self.sources:
            raise VolumeError(f"subject {self.id}: no source volumes")
        dims = {v.dims for v in self.sources.values()}
        if self.target is not None:
            dims.add(self.target.dims)
        if len(dims) != 1:
            raise VolumeError(f"subject {self.id}: volumes differ in dims {sorted(dims)}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return next(iter(self.sources.values())).dims

    def source_array(self) -> np.ndarray:
        """Sources stacked as ``(C, nz, ny, nx)`` in PD, T2 order."""
        order = [c for c in SOURCE_ORDER if c in self.sources]
        order += [c for c in self.sources if c not in order]
        return np.stack([self.sources[c].data for c in order])


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 7
    epochs: int = 8
    batch_size: int = 1
    lambda_pix: float = 100.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    base_channels: int = 16
    depth: int = 3
    disc_layers: int = 3
    disc_base_channels: int = 16
    refinements: tuple[Orientation, ...] = (Orientation.CORONAL, Orientation.SAGITTAL)
    refine_with_sources: bool = False
    select_on_val: bool = True

    def stage_train_config(self, index: int) -> StageTrainConfig:
        return StageTrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lambda_pix=self.lambda_pix,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            rng_seed=self.seed + index,
        )

    def generator_config(self, stage: int, n_sources: int) -> GeneratorConfig:
        if stage == 0:
            return GeneratorConfig(n_sources, 1, self.base_channels, self.depth, False)
        cin = 1 + (n_sources if self.refine_with_sources else 0)
        return GeneratorConfig(cin, 1, self.base_channels, self.depth, True)

    def discriminator_config(self, gcfg: GeneratorConfig) -> DiscriminatorConfig:
        return DiscriminatorConfig(gcfg.in_channels + 1, self.disc_layers, self.disc_base_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["refinements"] = [o.value for o in self.refinements]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d["refinements"] = tuple(Orientation(o) for o in d.get("refinements", ()))
        return cls(**d)


@dataclass
class PipelineModels:
    g_axial: Model
    g_coronal: Model | None = None
    g_sagittal: Model | None = None
    config: PipelineConfig = field(default_factory=PipelineConfig)

    def refiners(self) -> list[tuple[Orientation, Model]]:
        by_orientation = {Orientation.CORONAL: self.g_coronal, Orientation.SAGITTAL: self.g_sagittal}
        return [(o, by_orientation[o]) for o in self.config.refinements if by_orientation.get(o) is not None]

    def set_refiner(self, o: Orientation, g: Model):
        if o is Orientation.CORONAL:
            self.g_coronal = g
        elif o is Orientation.SAGITTAL:
            self.g_sagittal = g
        else:
            raise ConfigError("refinement stages run along coronal or sagittal slices")


@dataclass
class StageRecord:
    orientation: str
    seed: int
    best_val_psnr: float | None
    history: StageHistory

    def to_dict(self) -> dict:
        return {
            "orientation": self.orientation,
            "seed": self.seed,
            "best_val_psnr": self.best_val_psnr,
            "history": self.history.to_dict(),
        }


@dataclass
class PipelineHistory:
    stages: list[StageRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"stages": [s.to_dict() for s in self.stages]}


def _run_slices(g: Model, cond: np.ndarray) -> np.ndarray:
    """Apply ``g`` to ``(n, C, rows, cols)`` slices in fixed-size chunks."""
    out = []
    with torch.no_grad():
        for start in range(0, len(cond), INFERENCE_CHUNK):
            out.append(forward(g, torch.from_numpy(cond[start : start + INFERENCE_CHUNK])))
    return torch.cat(out).numpy()[:, 0].astype(np.float32)


def synthesize_stage1(g_axial: Model, s: SubjectVolumes) -> Volume:
    src = s.source_array()
    if g_axial.in_channels != src.shape[0]:
        raise ShapeError(f"axial generator expects {g_axial.in_channels} channels, subject has {src.shape[0]}")
    cond = np.ascontiguousarray(src.transpose(1, 0, 2, 3))
    slices = _run_slices(g_axial, cond)
    return stack_slices(SliceStack(Orientation.AXIAL, tuple(slices)), Orientation.AXIAL)


def _refine_condition(v: Volume, o: Orientation, sources: np.ndarray | None) -> np.ndarray:
    planes = extract_slices(v, o).as_array()[:, None]
    if sources is None:
        return planes
    src = np.stack([np.moveaxis(c, o.axis, 0) for c in sources], axis=1)
    return np.ascontiguousarray(np.concatenate([planes, src], axis=1))


def refine_stage(g: Model, v: Volume, o: Orientation, sources: np.ndarray | None = None) -> Volume:
    """Re-slice ``v`` along ``o``, refine each slice with ``g`` and restack."""
    if not g.residual:
        raise ConfigError("refinement generators must be residual")
    cond = _refine_condition(v, o, sources)
    if cond.shape[1] != g.in_channels:
        raise ShapeError(f"refiner expects {g.in_channels} channels, got {cond.shape[1]}")
    slices = _run_slices(g, cond)
    return stack_slices(SliceStack(o, tuple(slices)), o)


def run_pipeline(m: PipelineModels, s: SubjectVolumes, upto: int | None = None):
    """Run all stages (or the first ``upto``). Returns ``(final, intermediates)``."""
    current = synthesize_stage1(m.g_axial, s)
    intermediates = [current]
    sources = s.source_array() if m.config.refine_with_sources else None
    for o, g in m.refiners()[: None if upto is None else max(upto - 1, 0)]:
        current = refine_stage(g, current, o, sources)
        intermediates.append(current)
    return current, intermediates


def _require_targets(subjects, split: str):
    if not subjects:
        raise ConfigError(f"{split} split is empty")
    for s in subjects:
        if s.target is None:
            raise ConfigError(f"{split} subject {s.id} has no target volume")


def axial_pairs(subjects) -> Pairs:
    cond = np.concatenate([s.source_array().transpose(1, 0, 2, 3) for s in subjects])
    target = np.concatenate([s.target.data[:, None] for s in subjects])
    return Pairs(cond, target)


def refinement_pairs(inputs, subjects, o: Orientation, with_sources: bool) -> Pairs:
    cond = np.concatenate([
        _refine_condition(v, o, s.source_array() if with_sources else None) for v, s in zip(inputs, subjects)
    ])
    target = np.concatenate([extract_slices(s.target, o).as_array()[:, None] for s in subjects])
    return Pairs(cond, target)


def _mean_psnr(syns, subjects) -> float:
    return float(np.mean([psnr(s.target, v) for v, s in zip(syns, subjects)]))


def train_axial_stage(train, val, cfg: PipelineConfig):
    """Stage A alone: the cross-sectional conditional GAN."""
    _require_targets(train, "train")
    if cfg.select_on_val:
        _require_targets(val, "validation")
    n_sources = len(train[0].sources)
    gcfg = cfg.generator_config(0, n_sources)
    tcfg = cfg.stage_train_config(0)

    def score(g):
        return _mean_psnr([synthesize_stage1(g, s) for s in val], val)

    g, _, hist = train_stage(axial_pairs(train), tcfg, gcfg, cfg.discriminator_config(gcfg),
                             score if cfg.select_on_val else None)
    best = _best_score(hist)
    return g, StageRecord(Orientation.AXIAL.value, tcfg.rng_seed, best, hist)


def _best_score(hist: StageHistory) -> float | None:
    if hist.init_score is None:
        return None
    if hist.best_epoch == 0:
        return hist.init_score
    return hist.epochs[hist.best_epoch - 1]["val_score"]


def train_pipeline(train, val, cfg: PipelineConfig = PipelineConfig(), stages: int | None = None):
    """Train stage A, then each refinement stage on the frozen output of the stages before it.

    ``stages`` limits training to the first N stages (A counts as one).
    """
    _require_targets(train, "train")
    _require_targets(val, "validation")
    if len(set(cfg.refinements)) != len(cfg.refinements) or Orientation.AXIAL in cfg.refinements:
        raise ConfigError("refinement orientations must be distinct and non-axial")
    history = PipelineHistory()
    g_axial, record = train_axial_stage(train, val, cfg)
    history.stages.append(record)
    models = PipelineModels(g_axial, config=replace(cfg, refinements=()))
    log.info("stage axial: best val PSNR %s", record.best_val_psnr)

    cur_train = [synthesize_stage1(g_axial, s) for s in train]
    cur_val = [synthesize_stage1(g_axial, s) for s in val]
    n_sources = len(train[0].sources)
    refinements = cfg.refinements if stages is None else cfg.refinements[: max(stages - 1, 0)]
    for index, o in enumerate(refinements, start=1):
        gcfg = cfg.generator_config(index, n_sources)
        tcfg = cfg.stage_train_config(index)
        with_src = cfg.refine_with_sources

        def score(g, o=o, inputs=cur_val):
            syn = [refine_stage(g, v, o, s.source_array() if with_src else None) for v, s in zip(inputs, val)]
            return _mean_psnr(syn, val)

        pairs = refinement_pairs(cur_train, train, o, with_src)
        g, _, hist = train_stage(pairs, tcfg, gcfg, cfg.discriminator_config(gcfg),
                                 score if cfg.select_on_val else None)
        record = StageRecord(o.value, tcfg.rng_seed, _best_score(hist), hist)
        history.stages.append(record)
        log.info("stage %s: best val PSNR %s", o.value, record.best_val_psnr)
        models.set_refiner(o, g)
        models.config = replace(models.config, refinements=models.config.refinements + (o,))
        cur_train = [refine_stage(g, v, o, s.source_array() if with_src else None) for v, s in zip(cur_train, train)]
        cur_val = [refine_stage(g, v, o, s.source_array() if with_src else None) for v, s in zip(cur_val, val)]
    return models, history
