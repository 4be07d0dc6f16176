"""PSNR, Frechet distance over fixed random-conv features, and the discontinuity index."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from progsynth.engine import LayerKind, Model, act, conv, forward
from progsynth.volume import Orientation, SliceStack, Volume, extract_slices

PSNR_CAP_DB = 99.0
COV_REGULARIZER = 1e-6
FEATURE_SEED = 0xF1D
FEATURE_DIM = 64


class MetricError(ValueError):
    pass


def _check_dims(a: Volume, b: Volume):
    if a.dims != b.dims:
        raise MetricError(f"dim mismatch: {a.dims} vs {b.dims}")


def psnr(ref: Volume, syn: Volume, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB over all voxels, capped at 99 dB."""
    _check_dims(ref, syn)
    if max_val <= 0:
        raise MetricError("max_val must be positive")
    mse = float(np.mean((ref.data.astype(np.float64) - syn.data.astype(np.float64)) ** 2))
    if mse < max_val**2 * 10 ** (-PSNR_CAP_DB / 10):
        return PSNR_CAP_DB
    return 10.0 * math.log10(max_val**2 / mse)


@dataclass(frozen=True)
class FeatureExtractor:
    model: Model

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            fmap = forward(self.model, torch.from_numpy(np.asarray(batch, dtype=np.float64)))
            return fmap.mean(dim=(2, 3)).numpy()


@lru_cache(maxsize=1)
def feature_extractor() -> FeatureExtractor:
    """The fixed seeded extractor: three stride-2 conv+ReLU blocks and a 1x1 projection to 64-d."""
    layers = [
        conv(1, 8, stride=2), act(LayerKind.RELU),
        conv(8, 16, stride=2), act(LayerKind.RELU),
        conv(16, 32, stride=2), act(LayerKind.RELU),
        conv(32, FEATURE_DIM, kernel=1),
    ]
    model = Model(layers, in_channels=1, seed=FEATURE_SEED, dtype=torch.float64)
    return FeatureExtractor(model)


def extract_features(slices: SliceStack, fe: FeatureExtractor | None = None) -> np.ndarray:
    fe = fe or feature_extractor()
    arr = slices.as_array().astype(np.float64)
    if arr.shape[1] < 8 or arr.shape[2] < 8:
        raise MetricError(f"slices must be at least 8x8, got {arr.shape[1:]}")
    return fe(arr[:, None])


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 2:
        raise MetricError("need at least 2 samples for covariance")
    mu = features.mean(axis=0)
    centred = features - mu
    cov = centred.T @ centred / (n - 1)
    cov = 0.5 * (cov + cov.T) + COV_REGULARIZER * np.eye(features.shape[1])
    return GaussianStats(mu, cov, n)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance between two Gaussians, via symmetric eigendecompositions only."""
    root_a = _sqrt_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    inner = 0.5 * (inner + inner.T)
    w = np.linalg.eigvalsh(inner)
    if w.min() < -1e-6:
        raise MetricError(f"inner covariance product not PSD (min eigenvalue {w.min():.3g})")
    trace_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = a.mean - b.mean
    d = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * trace_sqrt
    return max(d, 0.0)


def discontinuity_index(v: Volume, o: Orientation) -> float:
    """Mean absolute difference between adjacent slices along ``o``."""
    if v.dims[o.axis] < 2:
        raise MetricError(f"{o.value} axis has a single slice")
    return float(np.mean(np.abs(np.diff(v.data.astype(np.float64), axis=o.axis))))


@dataclass
class MetricReport:
    psnr_mean: float
    psnr_std: float
    psnr_per_subject: list[float]
    fid: float
    di_delta: dict[str, float]
    method: str = "unknown"
    dataset_id: str = "unknown"
    seed: int | None = None
    subjects: list[str] = field(default_factory=list)
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dataset_id": self.dataset_id,
            "seed": self.seed,
            "subjects": list(self.subjects),
            "psnr_mean": self.psnr_mean,
            "psnr_std": self.psnr_std,
            "psnr_per_subject": list(self.psnr_per_subject),
            "fid": self.fid,
            "di_delta": dict(self.di_delta),
            "wall_seconds": self.wall_seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        keys = ("psnr_mean", "psnr_std", "psnr_per_subject", "fid", "di_delta", "method",
                "dataset_id", "seed", "subjects", "wall_seconds")
        return cls(**{k: d[k] for k in keys if k in d})


def _pooled_axial_features(volumes, fe) -> np.ndarray:
    return np.concatenate([extract_features(extract_slices(v, Orientation.AXIAL), fe) for v in volumes])


def evaluate_volumes(refs, syns, fe: FeatureExtractor | None = None, **provenance) -> MetricReport:
    """PSNR per subject, FID over pooled axial slices, and per-orientation DI deltas."""
    refs, syns = list(refs), list(syns)
    if len(refs) != len(syns):
        raise MetricError(f"count mismatch: {len(refs)} references, {len(syns)} syntheses")
    if not refs:
        raise MetricError("no volumes to evaluate")
    for r, s in zip(refs, syns):
        _check_dims(r, s)
    fe = fe or feature_extractor()
    scores = [psnr(r, s) for r, s in zip(refs, syns)]
    fid = frechet_distance(
        gaussian_stats(_pooled_axial_features(refs, fe)),
        gaussian_stats(_pooled_axial_features(syns, fe)),
    )
    di_delta = {
        o.value: float(np.mean([abs(discontinuity_index(s, o) - discontinuity_index(r, o))
                                for r, s in zip(refs, syns)]))
        for o in Orientation
    }
    return MetricReport(
        psnr_mean=float(np.mean(scores)),
        psnr_std=float(np.std(scores)),
        psnr_per_subject=[float(x) for x in scores],
        fid=fid,
        di_delta=di_delta,
        **provenance,
    )


def compare_reports(a: MetricReport, b: MetricReport) -> str:
    """Describe ``a`` relative to ``b`` as 'X dB higher PSNR and Y% lower FID'."""
    dpsnr = a.psnr_mean - b.psnr_mean
    psnr_part = f"{abs(dpsnr):.2f} dB {'higher' if dpsnr >= 0 else 'lower'} PSNR"
    if b.fid > 0:
        rel = (b.fid - a.fid) / b.fid * 100.0
        fid_part = f"{abs(rel):.2f}% {'lower' if rel >= 0 else 'higher'} FID"
    else:
        fid_part = "undefined relative FID (reference FID is 0)"
    return f"{a.method} achieves {psnr_part} and {fid_part} compared to {b.method}"

